#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>

#include <json.hpp>

#include "crowdctx/core/adam.hpp"
#include "crowdctx/core/errors.hpp"
#include "crowdctx/losses.hpp"
#include "crowdctx/train.hpp"

namespace crowdctx {

namespace fs = std::filesystem;
using nlohmann::json;

std::uint64_t data_stream_seed(std::uint64_t run_seed) {
    std::uint64_t x = run_seed + 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::string step_record_json(const StepRecord& r) {
    json j;
    j["step"] = r.step;
    j["count"] = r.loss.count;
    j["ot"] = r.loss.ot;
    j["tv"] = r.loss.tv;
    j["rtm"] = r.loss.rtm;
    j["aux"] = r.loss.aux;
    j["total"] = r.loss.total;
    return j.dump();
}

std::string epoch_record_json(const EpochRecord& r) {
    json j;
    j["epoch"] = r.epoch;
    j["step"] = r.step;
    if (r.train_mae) j["train_mae"] = *r.train_mae;
    if (r.val) {
        j["val_mae"] = r.val->mae;
        j["val_mse"] = r.val->mse;
        j["val_nae"] = r.val->nae;
    }
    return j.dump();
}

Checkpoint snapshot(const CrowdModel& model, const RunConfig& cfg, const AdamState* adam) {
    return make_checkpoint(model.parameters(), adam, cfg.to_text());
}

std::unique_ptr<CrowdModel> load_model(const Checkpoint& ckpt, RunConfig* cfg_out) {
    RunConfig cfg = RunConfig::from_text(ckpt.config_text);
    auto model = std::make_unique<CrowdModel>(cfg.model, cfg.train.seed);
    restore_parameters(ckpt, model->parameters());
    if (cfg_out) *cfg_out = cfg;
    return model;
}

std::unique_ptr<CrowdModel> load_model(const std::string& path, RunConfig* cfg_out) {
    return load_model(load_checkpoint(path), cfg_out);
}

EvalReport evaluate(const CrowdModel& model, const Dataset& data) {
    if (data.samples.empty()) throw ContractError("cannot evaluate an empty dataset");
    NoGradGuard guard;
    EvalReport report;
    std::vector<double> pred, gt;
    ForwardOptions opts;
    opts.auxiliary = false;
    for (const auto& s : data.samples) {
        const ModelOutput out = model.forward(s.image, opts);
        report.resampled_positions |= out.encoded.resampled_positions;
        const auto d = out.density.data();
        const double count = std::accumulate(d.begin(), d.end(), 0.0);
        report.rows.push_back({s.id, count, s.count()});
        pred.push_back(count);
        gt.push_back(s.count());
    }
    report.metrics = compute_metrics(pred, gt);
    return report;
}

std::string eval_report_json(const EvalReport& report) {
    json j;
    j["images"] = report.rows.size();
    j["mae"] = report.metrics.mae;
    j["mse"] = report.metrics.mse;
    j["nae"] = report.metrics.nae;
    j["nae_excluded"] = report.metrics.nae_excluded;
    j["resampled_positions"] = report.resampled_positions;
    json rows = json::array();
    for (const auto& r : report.rows) rows.push_back({{"id", r.id}, {"predicted", r.predicted}, {"gt", r.ground_truth}});
    j["rows"] = rows;
    return j.dump(2);
}

namespace {

double mean_abs_error(const CrowdModel& model, const Dataset& data) {
    return evaluate(model, data).metrics.mae;
}

std::ofstream open_log(const std::string& path) {
    std::ofstream out;
    if (path.empty()) return out;
    const fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    out.open(path, std::ios::trunc);
    if (!out) throw IoError("cannot open log " + path);
    return out;
}

void check_dataset(const RunConfig& cfg, const Dataset& data, const char* which) {
    if (data.stride != cfg.model.output_stride) {
        throw ConfigError(std::string(which) + " set is binned at stride " + std::to_string(data.stride) +
                          " but the model predicts at stride " + std::to_string(cfg.model.output_stride));
    }
    for (const auto& s : data.samples) {
        if (s.image.dim(0) != cfg.model.in_channels) {
            throw ConfigError(std::string(which) + " image " + s.id + " has the wrong channel count");
        }
    }
}

}  // namespace

TrainResult train(const RunConfig& cfg, const Dataset& train_set, const Dataset* val_set,
                  const TrainOptions& options, std::unique_ptr<CrowdModel>* model_out) {
    cfg.validate();
    if (train_set.samples.empty()) throw ConfigError("training set is empty");
    check_dataset(cfg, train_set, "training");
    if (val_set) check_dataset(cfg, *val_set, "validation");
    for (const auto& s : train_set.samples) {
        if (s.height() < cfg.augment.crop_h || s.width() < cfg.augment.crop_w) {
            throw ConfigError("training image " + s.id + " is smaller than the crop");
        }
    }

    auto model = std::make_unique<CrowdModel>(cfg.model, cfg.train.seed);
    AdamState adam(cfg.adam);
    std::mt19937_64 rng(data_stream_seed(cfg.train.seed));

    const auto grids = stage_grids(cfg.augment.crop_h, cfg.augment.crop_w, cfg.model.tokenizer);
    const std::size_t dh = grids[2].h * cfg.model.upsample(), dw = grids[2].w * cfg.model.upsample();
    const std::size_t stride = cfg.model.output_stride;
    if ((cfg.augment.crop_h + stride - 1) / stride != dh || (cfg.augment.crop_w + stride - 1) / stride != dw) {
        throw ConfigError("crop " + std::to_string(cfg.augment.crop_w) + "x" + std::to_string(cfg.augment.crop_h) +
                          " gives a " + std::to_string(dw) + "x" + std::to_string(dh) +
                          " density map that does not match its ground-truth grid");
    }
    const TransportGrid grid(dh, dw);

    std::ofstream loss_log = open_log(options.loss_log);
    std::ofstream epoch_log = open_log(options.epoch_log);
    if (!options.out_dir.empty()) fs::create_directories(options.out_dir);
    auto save = [&](const std::string& name) {
        if (options.out_dir.empty()) return;
        save_checkpoint((fs::path(options.out_dir) / name).string(), snapshot(*model, cfg, &adam));
    };

    TrainResult result;
    const std::size_t n = train_set.samples.size();
    // Incomplete trailing batches are dropped; a set smaller than one batch
    // is used whole.
    const std::size_t batch = std::min(cfg.train.batch_size, n);
    const std::size_t batches = n / batch;
    std::vector<std::size_t> order(n);
    std::optional<double> best;
    bool stop = false;

    for (std::size_t epoch = 1; epoch <= cfg.train.epochs && !stop; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t bi = 0; bi < batches; ++bi) {
            const std::size_t start = bi * batch, end = start + batch;
            const double inv = 1.0 / static_cast<double>(end - start);
            model->parameters().zero_grad();
            StepRecord rec;
            rec.step = result.steps + 1;
            for (std::size_t b = start; b < end; ++b) {
                const CrowdSample sample = augment(train_set.samples[order[b]], cfg.augment, rng);
                const ModelOutput out = model->forward(sample.image);
                const TotalLoss loss = total_loss(out.density, out.aux_density, sample.gt, out.count_estimate,
                                                  cfg.loss, cfg.sinkhorn, &grid);
                backward(ops::scale(loss.value, inv));
                const auto& br = loss.breakdown;
                rec.loss.count += br.count * inv;
                rec.loss.ot += br.ot * inv;
                rec.loss.tv += br.tv * inv;
                rec.loss.rtm += br.rtm * inv;
                rec.loss.total += br.total * inv;
                rec.loss.aux.resize(br.aux.size(), 0.0);
                for (std::size_t k = 0; k < br.aux.size(); ++k) rec.loss.aux[k] += br.aux[k] * inv;
            }
            if (!std::isfinite(rec.loss.total)) throw NumericError("non-finite loss at step " + std::to_string(rec.step));
            adam_step(model->parameters(), adam);
            ++result.steps;
            if (loss_log.is_open()) loss_log << step_record_json(rec) << "\n" << std::flush;
            result.history.push_back(std::move(rec));
            if (cfg.train.max_steps && result.steps >= cfg.train.max_steps) {
                stop = true;
                break;
            }
        }
        result.epochs = epoch;

        EpochRecord er;
        er.epoch = epoch;
        er.step = result.steps;
        if (cfg.train.eval_train || stop || epoch == cfg.train.epochs) er.train_mae = mean_abs_error(*model, train_set);
        if (val_set && !val_set->samples.empty()) er.val = evaluate(*model, *val_set).metrics;
        if (epoch_log.is_open()) epoch_log << epoch_record_json(er) << "\n" << std::flush;
        if (options.summary) {
            auto& os = *options.summary;
            os << "epoch " << epoch << " step " << result.steps << " loss "
               << std::setprecision(6) << result.history.back().loss.total;
            if (er.train_mae) os << " train_mae " << *er.train_mae;
            if (er.val) os << " val_mae " << er.val->mae << " val_mse " << er.val->mse;
            os << "\n";
        }

        const std::optional<double> score = er.val ? std::optional<double>(er.val->mae) : er.train_mae;
        if (score && (!best || *score < *best)) {
            best = score;
            result.best_epoch = epoch;
            save("best.ckpt");
        }
        if (cfg.train.checkpoint_every && epoch % cfg.train.checkpoint_every == 0) {
            char name[32];
            std::snprintf(name, sizeof name, "epoch_%04zu.ckpt", epoch);
            save(name);
        }
        result.epoch_history.push_back(er);
    }
    if (!result.epoch_history.empty()) result.final_train_mae = result.epoch_history.back().train_mae;
    if (val_set && best) result.best_val_mae = best;
    save("last.ckpt");
    if (model_out) *model_out = std::move(model);
    return result;
}

InferResult infer(const CrowdModel& model, const Tensor& image) {
    NoGradGuard guard;
    ForwardOptions opts;
    opts.auxiliary = false;
    const Tensor density = model.forward(image, opts).density;
    InferResult r;
    r.h = density.dim(0);
    r.w = density.dim(1);
    r.density = density.to_vector();
    r.count = std::accumulate(r.density.begin(), r.density.end(), 0.0);
    const double peak = *std::max_element(r.density.begin(), r.density.end());
    r.scale = peak > 0.0 ? 65535.0 / peak : 1.0;
    return r;
}

void export_density(const InferResult& result, const std::string& path) {
    std::vector<std::uint16_t> px(result.density.size());
    for (std::size_t i = 0; i < px.size(); ++i) {
        px[i] = static_cast<std::uint16_t>(std::clamp(std::round(result.density[i] * result.scale), 0.0, 65535.0));
    }
    write_pgm16(path, px, result.h, result.w);
    std::ostringstream side;
    side << std::setprecision(17) << "count " << result.count << "\nh_d " << result.h << "\nw_d " << result.w
         << "\nscale " << result.scale << "\n";
    write_file(path + ".txt", side.str());
}

SidecarInfo read_sidecar(const std::string& path) {
    std::istringstream in(read_file(path));
    SidecarInfo info;
    std::string key;
    int seen = 0;
    while (in >> key) {
        if (key == "count") in >> info.count;
        else if (key == "h_d") in >> info.h;
        else if (key == "w_d") in >> info.w;
        else if (key == "scale") in >> info.scale;
        else throw ParseError(path + ": unknown sidecar key '" + key + "'", static_cast<std::size_t>(in.tellg()));
        if (!in) throw ParseError(path + ": bad value for '" + key + "'", 0);
        ++seen;
    }
    if (seen != 4) throw ParseError(path + ": incomplete sidecar", 0);
    return info;
}

}  // namespace crowdctx
