#include "crowdctx/model.hpp"

#include "crowdctx/core/errors.hpp"

namespace crowdctx {

namespace {

// Each module draws from its own stream, so switching TAM or RTM on or off
// leaves every shared module's initial weights unchanged.
Initializer module_init(std::uint64_t seed, const std::string& name) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : name) h = (h ^ c) * 0x100000001b3ULL;
    std::uint64_t x = seed ^ h;
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return Initializer(x ^ (x >> 31));
}

}  // namespace

void ModelConfig::validate() const {
    tokenizer.validate();
    backbone.validate();
    if (tokenizer.final_dim != backbone.d) {
        throw ConfigError("tokenizer final_dim " + std::to_string(tokenizer.final_dim) +
                          " must equal backbone d " + std::to_string(backbone.d));
    }
    if (in_channels == 0) throw ConfigError("in_channels must be positive");
    if (output_stride == 0 || token_stride() % output_stride != 0) {
        throw ConfigError("output_stride " + std::to_string(output_stride) + " must divide the token stride " +
                          std::to_string(token_stride()));
    }
    const std::size_t up = upsample();
    if (up != 1 && up != 2 && up != 4) {
        throw ConfigError("token stride / output stride must be 1, 2 or 4, got " + std::to_string(up));
    }
    if (tam && tam_reduction == 0) throw ConfigError("tam_reduction must be positive");
    stage_grids(input_h, input_w, tokenizer);
}

std::size_t ModelConfig::token_stride() const {
    std::size_t s = 1;
    for (const auto& st : tokenizer.stages) s *= st.s;
    return s;
}

std::size_t ModelConfig::upsample() const { return token_stride() / output_stride; }

CrowdModel::CrowdModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t d = cfg_.backbone.d;
    Initializer ti = module_init(seed, "tokenizer");
    tokenizer_ = std::make_unique<Tokenizer>(store_, "tokenizer", cfg_.tokenizer, cfg_.in_channels, ti);
    const auto grids = stage_grids(cfg_.input_h, cfg_.input_w, cfg_.tokenizer);
    Initializer bi = module_init(seed, "backbone");
    backbone_ = std::make_unique<Backbone>(store_, "backbone", cfg_.backbone, grids[2].h, grids[2].w, bi);
    if (cfg_.tam) {
        Initializer init = module_init(seed, "tam");
        tam_ = std::make_unique<TokenAttention>(store_, "tam", d, cfg_.tam_reduction, init);
    }
    if (cfg_.rtm) {
        Initializer init = module_init(seed, "rtm");
        rtm_ = std::make_unique<CountRegressor>(store_, "rtm", d, cfg_.rtm_hidden ? cfg_.rtm_hidden : d, init);
    }
    Initializer di = module_init(seed, "decoder");
    decoder_ = std::make_unique<DensityDecoder>(store_, "decoder", d, cfg_.upsample(), di);
    for (auto layer : cfg_.backbone.taps) {
        const std::string name = "aux" + std::to_string(layer);
        Initializer init = module_init(seed, name);
        aux_.emplace(layer, DensityDecoder(store_, name, d, cfg_.upsample(), init));
    }
}

ModelOutput CrowdModel::forward(const Tensor& image, const ForwardOptions& options) const {
    if (image.rank() != 3 || image.dim(0) != cfg_.in_channels) {
        throw DimensionError("model expects a [" + std::to_string(cfg_.in_channels) + ", h, w] image, got " +
                             shape_string(image.shape()));
    }
    ModelOutput out;
    out.encoded = backbone_->encode(tokenizer_->forward(image));
    out.patch_map = out.encoded.patch_map();
    out.fused_map = out.patch_map;
    if (tam_ && !options.bypass_tam) {
        Tensor gate = options.gate_override ? *options.gate_override : tam_->gate(out.encoded.context_feature);
        out.fused_map = tam_->recalibrate(out.patch_map, gate);
        out.gate = gate;
    }
    out.density = decoder_->decode(out.fused_map);
    if (rtm_) out.count_estimate = rtm_->predict(out.encoded.context_feature);
    if (options.auxiliary) {
        for (const auto& [layer, dec] : aux_) out.aux_density.push_back(dec.decode(out.encoded.tap_map(layer)));
    }
    return out;
}

double CrowdModel::count(const Tensor& image) const {
    NoGradGuard guard;
    ForwardOptions opts;
    opts.auxiliary = false;
    const Tensor density = forward(image, opts).density;
    double s = 0.0;
    for (double v : density.data()) s += v;
    return s;
}

}  // namespace crowdctx
