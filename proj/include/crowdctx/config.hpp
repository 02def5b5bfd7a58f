#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "crowdctx/core/adam.hpp"
#include "crowdctx/data.hpp"
#include "crowdctx/losses.hpp"
#include "crowdctx/model.hpp"

namespace crowdctx {

struct TrainSettings {
    std::size_t epochs = 100;
    std::size_t batch_size = 8;
    // Stop after this many optimizer steps (0: run all epochs).
    std::size_t max_steps = 0;
    std::size_t checkpoint_every = 10;  // epochs
    bool eval_train = true;             // per-epoch MAE over the unaugmented training set
    std::uint64_t seed = 0;
};

// Everything a run depends on. Serialized as "key = value" lines; the text
// form is embedded in every checkpoint.
struct RunConfig {
    ModelConfig model;
    LossWeights loss;
    SinkhornConfig sinkhorn;
    AugmentConfig augment;
    AdamConfig adam;
    SceneConfig scene;
    std::size_t gt_stride = 4;  // dataset binning stride for gen-data
    TrainSettings train;

    RunConfig();

    // Throws ConfigError on unknown keys or malformed values.
    void set(const std::string& key, const std::string& value);
    // Parses "key = value" lines; '#' starts a comment.
    void apply_text(const std::string& text);
    std::string to_text() const;
    void validate() const;

    static RunConfig from_text(const std::string& text);
    static RunConfig load(const std::string& path);

private:
    bool taps_explicit_ = false;
};

}  // namespace crowdctx
