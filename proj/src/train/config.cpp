#include "crowdctx/config.hpp"

#include <charconv>
#include <functional>
#include <map>
#include <sstream>

#include "crowdctx/core/errors.hpp"
#include "crowdctx/data.hpp"

namespace crowdctx {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(trim(cur));
    return out;
}

std::string fmt(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

double parse_double(const std::string& key, const std::string& v) {
    double out = 0.0;
    auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
    return out;
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || res.ec != std::errc() || res.ptr != v.data() + v.size()) {
        throw ConfigError(key + ": expected a nonnegative integer, got '" + v + "'");
    }
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "on" || v == "true" || v == "1") return true;
    if (v == "off" || v == "false" || v == "0") return false;
    throw ConfigError(key + ": expected on/off, got '" + v + "'");
}

std::string fmt_bool(bool b) { return b ? "on" : "off"; }

std::string fmt_stages(const TokenizerConfig& t) {
    std::string out;
    for (std::size_t i = 0; i < t.stages.size(); ++i) {
        if (i) out += ";";
        out += std::to_string(t.stages[i].k) + "," + std::to_string(t.stages[i].s) + "," +
               std::to_string(t.stages[i].p);
    }
    return out;
}

std::string fmt_taps(const std::vector<std::size_t>& taps) {
    if (taps.empty()) return "none";
    std::string out;
    for (std::size_t i = 0; i < taps.size(); ++i) out += (i ? "," : "") + std::to_string(taps[i]);
    return out;
}

struct Field {
    std::function<void(RunConfig&, const std::string&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Field size_field(T RunConfig::*outer, std::size_t T::*member) {
    return {[=](RunConfig& c, const std::string& k, const std::string& v) {
                (c.*outer).*member = static_cast<std::size_t>(parse_uint(k, v));
            },
            [=](const RunConfig& c) { return std::to_string((c.*outer).*member); }};
}

template <typename T>
Field real_field(T RunConfig::*outer, double T::*member) {
    return {[=](RunConfig& c, const std::string& k, const std::string& v) { (c.*outer).*member = parse_double(k, v); },
            [=](const RunConfig& c) { return fmt((c.*outer).*member); }};
}

template <typename T>
Field bool_field(T RunConfig::*outer, bool T::*member) {
    return {[=](RunConfig& c, const std::string& k, const std::string& v) { (c.*outer).*member = parse_bool(k, v); },
            [=](const RunConfig& c) { return fmt_bool((c.*outer).*member); }};
}

// Ordered so that to_text() is stable.
const std::vector<std::pair<std::string, Field>>& fields() {
    static const std::vector<std::pair<std::string, Field>> table = [] {
        std::vector<std::pair<std::string, Field>> t;
        using R = RunConfig;
        t.push_back({"model.stages",
                     {[](R& c, const std::string& k, const std::string& v) {
                          const auto parts = split(v, ';');
                          if (parts.size() != 3) throw ConfigError(k + ": need three k,s,p triples");
                          for (std::size_t i = 0; i < 3; ++i) {
                              const auto nums = split(parts[i], ',');
                              if (nums.size() != 3) throw ConfigError(k + ": malformed triple '" + parts[i] + "'");
                              c.model.tokenizer.stages[i] = {parse_uint(k, nums[0]), parse_uint(k, nums[1]),
                                                             parse_uint(k, nums[2])};
                          }
                      },
                      [](const R& c) { return fmt_stages(c.model.tokenizer); }}});
        t.push_back({"model.reduction_dim",
                     {[](R& c, const std::string& k, const std::string& v) {
                          c.model.tokenizer.reduction_dim = parse_uint(k, v);
                      },
                      [](const R& c) { return std::to_string(c.model.tokenizer.reduction_dim); }}});
        t.push_back({"model.d",
                     {[](R& c, const std::string& k, const std::string& v) {
                          c.model.backbone.d = parse_uint(k, v);
                          c.model.tokenizer.final_dim = c.model.backbone.d;
                      },
                      [](const R& c) { return std::to_string(c.model.backbone.d); }}});
        t.push_back({"model.layers",
                     {[](R& c, const std::string& k, const std::string& v) {
                          c.model.backbone.layers = parse_uint(k, v);
                      },
                      [](const R& c) { return std::to_string(c.model.backbone.layers); }}});
        t.push_back({"model.heads",
                     {[](R& c, const std::string& k, const std::string& v) { c.model.backbone.heads = parse_uint(k, v); },
                      [](const R& c) { return std::to_string(c.model.backbone.heads); }}});
        t.push_back({"model.mlp_ratio",
                     {[](R& c, const std::string& k, const std::string& v) {
                          c.model.backbone.mlp_ratio = parse_double(k, v);
                      },
                      [](const R& c) { return fmt(c.model.backbone.mlp_ratio); }}});
        t.push_back({"model.taps", {nullptr, [](const R& c) { return fmt_taps(c.model.backbone.taps); }}});
        t.push_back({"model.input_h", size_field(&R::model, &ModelConfig::input_h)});
        t.push_back({"model.input_w", size_field(&R::model, &ModelConfig::input_w)});
        t.push_back({"model.tam", bool_field(&R::model, &ModelConfig::tam)});
        t.push_back({"model.rtm", bool_field(&R::model, &ModelConfig::rtm)});
        t.push_back({"model.tam_reduction", size_field(&R::model, &ModelConfig::tam_reduction)});
        t.push_back({"model.rtm_hidden", size_field(&R::model, &ModelConfig::rtm_hidden)});
        t.push_back({"model.output_stride", size_field(&R::model, &ModelConfig::output_stride)});
        t.push_back({"loss.lambda", real_field(&R::loss, &LossWeights::rtm)});
        t.push_back({"loss.lambda_ot", real_field(&R::loss, &LossWeights::ot)});
        t.push_back({"loss.lambda_tv", real_field(&R::loss, &LossWeights::tv)});
        t.push_back({"loss.aux_weight", real_field(&R::loss, &LossWeights::aux)});
        t.push_back({"loss.tv_scale_by_count", bool_field(&R::loss, &LossWeights::tv_scale_by_count)});
        t.push_back({"sinkhorn.epsilon", real_field(&R::sinkhorn, &SinkhornConfig::epsilon)});
        t.push_back({"sinkhorn.max_iters",
                     {[](R& c, const std::string& k, const std::string& v) {
                          c.sinkhorn.max_iters = static_cast<int>(parse_uint(k, v));
                      },
                      [](const R& c) { return std::to_string(c.sinkhorn.max_iters); }}});
        t.push_back({"sinkhorn.tol", real_field(&R::sinkhorn, &SinkhornConfig::tol)});
        t.push_back({"augment.crop_h", size_field(&R::augment, &AugmentConfig::crop_h)});
        t.push_back({"augment.crop_w", size_field(&R::augment, &AugmentConfig::crop_w)});
        t.push_back({"augment.hflip_prob", real_field(&R::augment, &AugmentConfig::hflip_prob)});
        t.push_back({"optim.lr", real_field(&R::adam, &AdamConfig::lr)});
        t.push_back({"optim.weight_decay", real_field(&R::adam, &AdamConfig::weight_decay)});
        t.push_back({"optim.beta1", real_field(&R::adam, &AdamConfig::beta1)});
        t.push_back({"optim.beta2", real_field(&R::adam, &AdamConfig::beta2)});
        t.push_back({"optim.eps", real_field(&R::adam, &AdamConfig::eps)});
        t.push_back({"data.image_h", size_field(&R::scene, &SceneConfig::image_h)});
        t.push_back({"data.image_w", size_field(&R::scene, &SceneConfig::image_w)});
        t.push_back({"data.count_min", size_field(&R::scene, &SceneConfig::count_min)});
        t.push_back({"data.count_max", size_field(&R::scene, &SceneConfig::count_max)});
        t.push_back({"data.base_size", real_field(&R::scene, &SceneConfig::base_size)});
        t.push_back({"data.size_gradient", real_field(&R::scene, &SceneConfig::size_gradient)});
        t.push_back({"data.min_size", real_field(&R::scene, &SceneConfig::min_size)});
        t.push_back({"data.stride",
                     {[](R& c, const std::string& k, const std::string& v) { c.gt_stride = parse_uint(k, v); },
                      [](const R& c) { return std::to_string(c.gt_stride); }}});
        t.push_back({"train.epochs", size_field(&R::train, &TrainSettings::epochs)});
        t.push_back({"train.batch_size", size_field(&R::train, &TrainSettings::batch_size)});
        t.push_back({"train.max_steps", size_field(&R::train, &TrainSettings::max_steps)});
        t.push_back({"train.checkpoint_every", size_field(&R::train, &TrainSettings::checkpoint_every)});
        t.push_back({"train.eval_train", bool_field(&R::train, &TrainSettings::eval_train)});
        t.push_back({"train.seed",
                     {[](R& c, const std::string& k, const std::string& v) { c.train.seed = parse_uint(k, v); },
                      [](const R& c) { return std::to_string(c.train.seed); }}});
        return t;
    }();
    return table;
}

}  // namespace

RunConfig::RunConfig() = default;

void RunConfig::set(const std::string& key_in, const std::string& value_in) {
    const std::string key = trim(key_in), value = trim(value_in);
    if (key == "model.taps") {
        std::vector<std::size_t> taps;
        if (value != "none") {
            for (const auto& part : split(value, ',')) taps.push_back(parse_uint(key, part));
        }
        model.backbone.taps = taps;
        taps_explicit_ = true;
        return;
    }
    for (const auto& [name, field] : fields()) {
        if (name == key) {
            field.set(*this, key, value);
            if (key == "model.layers" && !taps_explicit_) {
                model.backbone.taps = BackboneConfig::default_taps(model.backbone.layers);
            }
            return;
        }
    }
    throw ConfigError("unknown config key '" + key + "'");
}

void RunConfig::apply_text(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        if (trim(line).empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
        }
        set(line.substr(0, eq), line.substr(eq + 1));
    }
}

std::string RunConfig::to_text() const {
    std::string out;
    for (const auto& [name, field] : fields()) out += name + " = " + field.get(*this) + "\n";
    return out;
}

void RunConfig::validate() const {
    try {
        model.validate();
        loss.validate();
        sinkhorn.validate();
        augment.validate();
        scene.validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    if (train.batch_size == 0) throw ConfigError("train.batch_size must be positive");
    if (adam.lr <= 0.0) throw ConfigError("optim.lr must be positive");
    if (gt_stride == 0) throw ConfigError("data.stride must be positive");
    if (augment.crop_h != model.input_h || augment.crop_w != model.input_w) {
        throw ConfigError("augment crop must equal the model input size");
    }
}

RunConfig RunConfig::from_text(const std::string& text) {
    RunConfig cfg;
    cfg.apply_text(text);
    return cfg;
}

RunConfig RunConfig::load(const std::string& path) { return from_text(read_file(path)); }

}  // namespace crowdctx
