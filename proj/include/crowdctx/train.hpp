#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "crowdctx/config.hpp"
#include "crowdctx/core/checkpoint.hpp"
#include "crowdctx/data.hpp"
#include "crowdctx/model.hpp"

namespace crowdctx {

// Model seed is the run seed; the data stream (shuffle, crops, flips) uses a
// separate generator derived from it.
std::uint64_t data_stream_seed(std::uint64_t run_seed);

struct TrainOptions {
    std::string out_dir;         // checkpoints; empty disables them
    std::string loss_log;        // per-step JSON lines; empty disables
    std::string epoch_log;       // per-epoch JSON lines; empty disables
    std::ostream* summary = nullptr;
};

struct StepRecord {
    std::size_t step = 0;
    LossBreakdown loss;  // batch means
};

struct EpochRecord {
    std::size_t epoch = 0;
    std::size_t step = 0;
    std::optional<double> train_mae;
    std::optional<Metrics> val;
};

struct TrainResult {
    std::size_t steps = 0;
    std::size_t epochs = 0;
    std::vector<StepRecord> history;
    std::vector<EpochRecord> epoch_history;
    std::optional<double> final_train_mae;
    std::optional<double> best_val_mae;
    std::size_t best_epoch = 0;
};

std::string step_record_json(const StepRecord& r);
std::string epoch_record_json(const EpochRecord& r);

// Adam on the total objective. A non-finite forward value aborts with
// NumericError; checkpoints already on disk are left as they were.
TrainResult train(const RunConfig& cfg, const Dataset& train_set, const Dataset* val_set,
                  const TrainOptions& options, std::unique_ptr<CrowdModel>* model_out = nullptr);

struct EvalRow {
    std::string id;
    double predicted = 0.0;
    double ground_truth = 0.0;
};

struct EvalReport {
    std::vector<EvalRow> rows;
    Metrics metrics;
    bool resampled_positions = false;
};

// Count = sum of the main density map over the full, unaugmented image.
EvalReport evaluate(const CrowdModel& model, const Dataset& data);
std::string eval_report_json(const EvalReport& report);

// Rebuilds the model from the configuration embedded in the checkpoint.
std::unique_ptr<CrowdModel> load_model(const Checkpoint& ckpt, RunConfig* cfg_out = nullptr);
std::unique_ptr<CrowdModel> load_model(const std::string& path, RunConfig* cfg_out = nullptr);
Checkpoint snapshot(const CrowdModel& model, const RunConfig& cfg, const AdamState* adam);

struct InferResult {
    double count = 0.0;
    std::size_t h = 0;
    std::size_t w = 0;
    double scale = 1.0;               // exported pixel = round(density * scale)
    std::vector<double> density;
};

InferResult infer(const CrowdModel& model, const Tensor& image);
// Writes `path` (16-bit PGM) and `path`.txt with count, h_d, w_d and scale.
void export_density(const InferResult& result, const std::string& path);

struct SidecarInfo {
    double count = 0.0;
    std::size_t h = 0;
    std::size_t w = 0;
    double scale = 1.0;
};
SidecarInfo read_sidecar(const std::string& path);

}  // namespace crowdctx
