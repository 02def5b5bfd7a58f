#include "crowdctx/tokenizer.hpp"

#include "crowdctx/core/errors.hpp"

namespace crowdctx {

void SplitSpec::validate() const {
    if (k < 1 || s < 1) throw ContractError("split spec needs k >= 1 and s >= 1");
    if (s >= k) {
        throw ContractError("split spec must overlap (s < k), got k=" + std::to_string(k) +
                            " s=" + std::to_string(s));
    }
}

Tensor TokenGrid::to_map() const {
    return ops::reshape(ops::transpose(tokens), {dim(), grid_h, grid_w});
}

TokenGrid TokenGrid::from_map(const Tensor& map) {
    if (map.rank() != 3) throw DimensionError("token map must be [dim, h, w], got " + shape_string(map.shape()));
    const std::size_t d = map.dim(0), h = map.dim(1), w = map.dim(2);
    return {ops::transpose(ops::reshape(map, {d, h * w})), h, w};
}

TokenGrid overlapping_split(const Tensor& x, const SplitSpec& spec) {
    spec.validate();
    if (x.rank() != 3) throw DimensionError("overlapping_split expects [c, h, w], got " + shape_string(x.shape()));
    const auto g = spec.grid(x.dim(1), x.dim(2));
    return {ops::unfold(x, spec.k, spec.s, spec.p), g.out_h, g.out_w};
}

void TokenizerConfig::validate() const {
    for (const auto& s : stages) s.validate();
    if (reduction_dim == 0 || final_dim == 0) throw ContractError("token widths must be positive");
}

std::array<GridSize, 3> stage_grids(std::size_t h, std::size_t w, const TokenizerConfig& cfg) {
    std::array<GridSize, 3> out;
    GridSize cur{h, w};
    for (std::size_t i = 0; i < 3; ++i) {
        const auto& s = cfg.stages[i];
        if (cur.h + 2 * s.p < s.k || cur.w + 2 * s.p < s.k) {
            throw DimensionError("tokenizer stage " + std::to_string(i) + ": window " +
                                 std::to_string(s.k) + " does not fit a " + std::to_string(cur.h) +
                                 "x" + std::to_string(cur.w) + " grid");
        }
        cur = {(cur.h + 2 * s.p - s.k) / s.s + 1, (cur.w + 2 * s.p - s.k) / s.s + 1};
        out[i] = cur;
    }
    return out;
}

ReductionLayer::ReductionLayer(ParameterStore& store, const std::string& prefix, std::size_t in_dim,
                               std::size_t out_dim, Initializer& init)
    : in_dim_(in_dim),
      out_dim_(out_dim),
      norm1_(store, prefix + ".norm1", in_dim),
      wq_(store, prefix + ".wq", in_dim, out_dim, init, false),
      wk_(store, prefix + ".wk", in_dim, out_dim, init, false),
      wv_(store, prefix + ".wv", in_dim, out_dim, init, false),
      proj_(store, prefix + ".proj", out_dim, out_dim, init),
      norm2_(store, prefix + ".norm2", out_dim),
      fc1_(store, prefix + ".fc1", out_dim, out_dim, init),
      fc2_(store, prefix + ".fc2", out_dim, out_dim, init) {}

TokenGrid ReductionLayer::forward(const TokenGrid& z, Tensor* attention) const {
    if (z.dim() != in_dim_) {
        throw DimensionError("reduction layer expects width " + std::to_string(in_dim_) + ", got " +
                             std::to_string(z.dim()));
    }
    Tensor x = norm1_(z.tokens);
    Tensor v = wv_(x);
    std::vector<Tensor> weights;
    Tensor attended = multi_head_attention(wq_(x), wk_(x), v, 1, attention ? &weights : nullptr);
    if (attention) *attention = weights.front();
    Tensor y = ops::add(v, proj_(attended));
    y = ops::add(y, fc2_(ops::gelu(fc1_(norm2_(y)))));
    return {y, z.grid_h, z.grid_w};
}

Tokenizer::Tokenizer(ParameterStore& store, const std::string& prefix, const TokenizerConfig& cfg,
                     std::size_t in_channels, Initializer& init)
    : cfg_(cfg), in_channels_(in_channels) {
    cfg_.validate();
    const auto& st = cfg_.stages;
    reductions_.emplace_back(store, prefix + ".reduce0", in_channels * st[0].k * st[0].k,
                             cfg_.reduction_dim, init);
    reductions_.emplace_back(store, prefix + ".reduce1", cfg_.reduction_dim * st[1].k * st[1].k,
                             cfg_.reduction_dim, init);
    project_ = Linear(store, prefix + ".project", cfg_.reduction_dim * st[2].k * st[2].k,
                      cfg_.final_dim, init);
}

TokenGrid Tokenizer::forward(const Tensor& image) const {
    if (image.rank() != 3 || image.dim(0) != in_channels_) {
        throw DimensionError("tokenizer expects [" + std::to_string(in_channels_) + ", h, w], got " +
                             shape_string(image.shape()));
    }
    stage_grids(image.dim(1), image.dim(2), cfg_);  // stage-indexed size errors
    TokenGrid z = overlapping_split(image, cfg_.stages[0]);
    z = reductions_[0].forward(z);
    z = overlapping_split(z.to_map(), cfg_.stages[1]);
    z = reductions_[1].forward(z);
    z = overlapping_split(z.to_map(), cfg_.stages[2]);
    return {project_(z.tokens), z.grid_h, z.grid_w};
}

std::size_t Tokenizer::total_stride() const {
    std::size_t s = 1;
    for (const auto& st : cfg_.stages) s *= st.s;
    return s;
}

}  // namespace crowdctx
