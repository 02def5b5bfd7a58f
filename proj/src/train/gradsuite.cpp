#include "crowdctx/gradsuite.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <random>

#include "crowdctx/core/gradcheck.hpp"
#include "crowdctx/core/ops.hpp"
#include "crowdctx/data.hpp"
#include "crowdctx/losses.hpp"
#include "crowdctx/model.hpp"

namespace crowdctx {

namespace {

using Inputs = std::vector<Tensor>;
using Fn = std::function<Tensor(const Inputs&)>;

struct Case {
    std::string name;
    Inputs inputs;
    Fn f;
    double threshold = 1e-4;
};

class Sampler {
public:
    explicit Sampler(std::uint64_t seed) : rng_(seed) {}

    Tensor normal(Shape s, bool grad = true) {
        std::normal_distribution<double> d(0.0, 1.0);
        std::vector<double> v(shape_numel(s));
        for (auto& x : v) x = d(rng_);
        return Tensor::from(std::move(s), std::move(v), grad);
    }
    Tensor uniform(Shape s, double lo, double hi, bool grad = true) {
        std::uniform_real_distribution<double> d(lo, hi);
        std::vector<double> v(shape_numel(s));
        for (auto& x : v) x = d(rng_);
        return Tensor::from(std::move(s), std::move(v), grad);
    }
    // |x| in [0.1, 1], random sign: keeps kinks out of the difference stencil.
    Tensor away_from_zero(Shape s) {
        std::uniform_real_distribution<double> d(0.1, 1.0);
        std::bernoulli_distribution sign(0.5);
        std::vector<double> v(shape_numel(s));
        for (auto& x : v) x = sign(rng_) ? d(rng_) : -d(rng_);
        return Tensor::from(std::move(s), std::move(v), true);
    }
    std::mt19937_64& rng() { return rng_; }

private:
    std::mt19937_64 rng_;
};

SinkhornConfig fixed_iterations(int iters) {
    SinkhornConfig cfg;
    cfg.tol = 0.0;
    cfg.max_iters = iters;
    return cfg;
}

std::vector<Case> primitive_cases(Sampler& s) {
    std::vector<Case> c;
    auto add = [&](std::string name, Inputs in, Fn f, double thr = 1e-4) {
        c.push_back({std::move(name), std::move(in), std::move(f), thr});
    };
    add("add", {s.normal({3, 4}), s.normal({3, 4})}, [](const Inputs& x) { return ops::add(x[0], x[1]); });
    add("sub", {s.normal({3, 4}), s.normal({3, 4})}, [](const Inputs& x) { return ops::sub(x[0], x[1]); });
    add("mul", {s.normal({3, 4}), s.normal({3, 4})}, [](const Inputs& x) { return ops::mul(x[0], x[1]); });
    add("scale", {s.normal({3, 4})}, [](const Inputs& x) { return ops::scale(x[0], 1.7); });
    add("add_scalar", {s.normal({3, 4})}, [](const Inputs& x) { return ops::add_scalar(x[0], -0.3); });
    add("mul_scalar", {s.normal({3, 4}), s.normal({})},
        [](const Inputs& x) { return ops::mul_scalar(x[0], x[1]); });
    add("div_scalar", {s.normal({3, 4}), s.uniform({}, 0.5, 1.5)},
        [](const Inputs& x) { return ops::div_scalar(x[0], x[1]); });
    add("add_row", {s.normal({3, 4}), s.normal({4})}, [](const Inputs& x) { return ops::add_row(x[0], x[1]); });
    add("mul_channels", {s.normal({3, 2, 2}), s.normal({3})},
        [](const Inputs& x) { return ops::mul_channels(x[0], x[1]); });
    add("relu", {s.away_from_zero({3, 4})}, [](const Inputs& x) { return ops::relu(x[0]); });
    add("gelu", {s.normal({3, 4})}, [](const Inputs& x) { return ops::gelu(x[0]); });
    add("sigmoid", {s.normal({3, 4})}, [](const Inputs& x) { return ops::sigmoid(x[0]); });
    add("abs", {s.away_from_zero({3, 4})}, [](const Inputs& x) { return ops::abs(x[0]); });
    add("sum", {s.normal({3, 4})}, [](const Inputs& x) { return ops::sum(x[0]); });
    add("mean", {s.normal({3, 4})}, [](const Inputs& x) { return ops::mean(x[0]); });
    add("matmul", {s.normal({3, 4}), s.normal({4, 5})}, [](const Inputs& x) { return ops::matmul(x[0], x[1]); });
    add("linear", {s.normal({3, 4}), s.normal({4, 5}), s.normal({5})},
        [](const Inputs& x) { return ops::linear(x[0], x[1], x[2]); });
    add("transpose", {s.normal({3, 4})}, [](const Inputs& x) { return ops::transpose(x[0]); });
    add("reshape", {s.normal({3, 4})}, [](const Inputs& x) { return ops::reshape(x[0], {2, 6}); });
    add("concat_rows", {s.normal({2, 3}), s.normal({1, 3})},
        [](const Inputs& x) { return ops::concat_rows({x[0], x[1]}); });
    add("concat_cols", {s.normal({2, 3}), s.normal({2, 2})},
        [](const Inputs& x) { return ops::concat_cols({x[0], x[1]}); });
    add("slice_rows", {s.normal({5, 3})}, [](const Inputs& x) { return ops::slice_rows(x[0], 1, 3); });
    add("slice_cols", {s.normal({3, 5})}, [](const Inputs& x) { return ops::slice_cols(x[0], 2, 2); });
    add("softmax_rows", {s.normal({3, 5})}, [](const Inputs& x) { return ops::softmax_rows(x[0]); });
    add("layer_norm", {s.normal({3, 6}), s.normal({6}), s.normal({6})},
        [](const Inputs& x) { return ops::layer_norm(x[0], x[1], x[2]); });
    add("unfold", {s.normal({2, 5, 5})}, [](const Inputs& x) { return ops::unfold(x[0], 3, 2, 1); });
    add("conv2d", {s.normal({2, 5, 5}), s.normal({3, 2, 3, 3}), s.normal({3})},
        [](const Inputs& x) { return ops::conv2d(x[0], x[1], x[2], 2, 1); });
    add("conv_transpose2d", {s.normal({2, 3, 3}), s.normal({2, 3, 4, 4}), s.normal({3})},
        [](const Inputs& x) { return ops::conv_transpose2d(x[0], x[1], x[2], 2, 1); });
    add("avg_pool2d", {s.normal({2, 4, 4})}, [](const Inputs& x) { return ops::avg_pool2d(x[0], 2, 2); });
    add("resize_bilinear", {s.normal({2, 3, 3})},
        [](const Inputs& x) { return ops::resize_bilinear(x[0], 5, 4); });
    add("attention", {s.normal({4, 6}), s.normal({4, 6}), s.normal({4, 6})},
        [](const Inputs& x) { return multi_head_attention(x[0], x[1], x[2], 2); });

    const Tensor gt = Tensor::from({4, 4}, {0, 1, 0, 2, 1, 0, 0, 0, 0, 3, 1, 0, 0, 0, 1, 1});
    add("count_loss", {s.uniform({4, 4}, 0.1, 1.0)}, [gt](const Inputs& x) { return count_loss(x[0], gt); });
    add("tv_loss", {s.uniform({4, 4}, 0.1, 1.0)}, [gt](const Inputs& x) { return tv_loss(x[0], gt); });
    add("rtm_loss", {s.normal({})}, [](const Inputs& x) { return rtm_loss(x[0], 7.0); });
    const SinkhornConfig sk = fixed_iterations(100);
    add("ot_loss", {s.uniform({4, 4}, 0.1, 1.0)}, [gt, sk](const Inputs& x) { return ot_loss(x[0], gt, sk); },
        1e-3);
    auto grid = std::make_shared<TransportGrid>(3, 3);
    add("transport_cost", {s.uniform({9}, 0.1, 1.0), s.uniform({9}, 0.1, 1.0)},
        [grid, sk](const Inputs& x) {
            return entropic_transport_cost(ops::div_scalar(x[0], ops::sum(x[0])),
                                           ops::div_scalar(x[1], ops::sum(x[1])), *grid, sk);
        },
        1e-3);
    return c;
}

double run_case(const Case& c, Sampler& s, std::size_t coords) {
    Tensor probe;
    {
        NoGradGuard guard;
        probe = c.f(c.inputs);
    }
    const Tensor weights = s.normal(probe.shape(), false);
    auto loss_fn = [&] { return ops::sum(ops::mul(c.f(c.inputs), weights)); };
    double worst = 0.0;
    for (const auto& in : c.inputs) {
        GradCheckOptions opts;
        opts.max_coords = coords;
        opts.seed = s.rng()();
        worst = std::max(worst, check_gradient(loss_fn, in, opts).relative_error);
    }
    return worst;
}

ModelConfig small_model(bool tam, bool rtm) {
    ModelConfig mc;
    mc.input_h = mc.input_w = 32;
    mc.tokenizer.reduction_dim = 8;
    mc.tokenizer.final_dim = 16;
    mc.backbone.d = 16;
    mc.backbone.heads = 2;
    mc.backbone.layers = 2;
    mc.backbone.taps = {1};
    mc.tam = tam;
    mc.rtm = rtm;
    return mc;
}

struct Problem {
    CrowdSample sample;
    TransportGrid grid{8, 8};
};

Problem make_problem(std::uint64_t seed) {
    SceneConfig sc;
    sc.image_h = sc.image_w = 32;
    sc.count_min = 3;
    sc.count_max = 12;
    sc.base_size = 4.0;
    const Scene scene = generate_scene(seed, sc);
    return {make_sample("probe", render(scene), scene.dots(), 4)};
}

Tensor objective(const CrowdModel& m, const Problem& p, const LossWeights& w, const SinkhornConfig& sk,
                 const ForwardOptions& fo = {}) {
    const ModelOutput out = m.forward(p.sample.image, fo);
    return total_loss(out.density, out.aux_density, p.sample.gt, out.count_estimate, w, sk, &p.grid).value;
}

void end_to_end(std::uint64_t seed, const GradSuiteOptions& o, std::vector<GradRow>& rows) {
    CrowdModel model(small_model(true, true), seed);
    const Problem problem = make_problem(seed ^ 0x5eedULL);
    const SinkhornConfig sk = fixed_iterations(60);
    std::mt19937_64 rng(seed * 31 + 7);

    // Zero biases behind a dead relu sit exactly on the kink for every input.
    std::normal_distribution<double> jitter(0.0, 0.1);
    for (const auto& p : model.parameters().items()) {
        if (!p.name.ends_with(".bias")) continue;
        Tensor t = p.tensor;
        for (double& b : t.mutable_data()) b += jitter(rng);
    }

    std::vector<std::string> names = {"backbone.context_token", "backbone.position"};
    std::vector<std::string> pool;
    for (const auto& p : model.parameters().items()) {
        if (p.name != names[0] && p.name != names[1]) pool.push_back(p.name);
    }
    std::shuffle(pool.begin(), pool.end(), rng);
    for (std::size_t i = 0; i < std::min(o.weight_tensors, pool.size()); ++i) names.push_back(pool[i]);

    LossWeights no_ot;
    no_ot.ot = 0.0;
    const LossWeights full;
    struct Variant {
        const char* row;
        LossWeights w;
        double threshold;
    };
    for (const Variant& v : {Variant{"objective_no_ot", no_ot, 1e-4}, Variant{"objective_full", full, 1e-3}}) {
        GradRow row{v.row, 0.0, v.threshold};
        auto loss_fn = [&] { return objective(model, problem, v.w, sk); };
        for (const auto& name : names) {
            GradCheckOptions opts;
            opts.max_coords = o.coords;
            opts.seed = rng();
            opts.skip_kinks = true;
            const auto r = check_gradient(loss_fn, model.parameters().get(name), opts);
            row.worst = std::max(row.worst, r.relative_error);
            row.checks += r.coords;
            row.skipped += r.skipped;
        }
        rows.push_back(row);
    }
}

double max_abs_grad(const CrowdModel& m, const std::string& prefix) {
    double worst = 0.0;
    for (const auto& p : m.parameters().items()) {
        if (p.name.rfind(prefix, 0) != 0) continue;
        for (double g : p.tensor.grad()) worst = std::max(worst, std::fabs(g));
    }
    return worst;
}

void structural(std::uint64_t seed, std::vector<GradRow>& rows) {
    const Problem problem = make_problem(seed ^ 0xabcdULL);
    const SinkhornConfig sk = fixed_iterations(60);
    {
        CrowdModel model(small_model(true, true), seed);
        LossWeights w;
        w.rtm = 0.0;
        model.parameters().zero_grad();
        backward(objective(model, problem, w, sk));
        rows.push_back({"rtm_grad_zero_at_lambda0", max_abs_grad(model, "rtm."), 0.0, true, 1});
    }
    {
        CrowdModel model(small_model(true, true), seed);
        ForwardOptions fo;
        fo.bypass_tam = true;
        model.parameters().zero_grad();
        backward(objective(model, problem, LossWeights{}, sk, fo));
        rows.push_back({"gate_grad_zero_tam_off", max_abs_grad(model, "tam.gate_"), 0.0, true, 1});
    }
}

}  // namespace

std::vector<GradRow> run_gradient_suite(std::uint64_t seed, const GradSuiteOptions& options) {
    std::vector<GradRow> rows;
    Sampler sampler(seed);
    if (options.primitives) {
        for (const auto& c : primitive_cases(sampler)) {
            rows.push_back({c.name, run_case(c, sampler, 0), c.threshold, false, c.inputs.size()});
        }
    }
    if (options.end_to_end) end_to_end(seed, options, rows);
    if (options.structural) structural(seed, rows);
    return rows;
}

std::vector<GradRow> merge_rows(const std::vector<std::vector<GradRow>>& runs) {
    std::vector<GradRow> out;
    std::map<std::string, std::size_t> index;
    for (const auto& run : runs) {
        for (const auto& r : run) {
            auto it = index.find(r.name);
            if (it == index.end()) {
                index[r.name] = out.size();
                out.push_back(r);
            } else {
                auto& m = out[it->second];
                m.worst = std::max(m.worst, r.worst);
                m.checks += r.checks;
                m.skipped += r.skipped;
            }
        }
    }
    return out;
}

}  // namespace crowdctx
