#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <iostream>

#include <CLI11.hpp>

#include "crowdctx/config.hpp"
#include "crowdctx/core/errors.hpp"
#include "crowdctx/data.hpp"
#include "crowdctx/gradsuite.hpp"
#include "crowdctx/train.hpp"

using namespace crowdctx;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kConfig = 2, kNumeric = 3, kIo = 4, kFailed = 1 };

RunConfig build_config(const std::string& file, const std::vector<std::string>& sets) {
    RunConfig cfg;
    if (!file.empty()) cfg.apply_text(read_file(file));
    for (const auto& kv : sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    return cfg;
}

int run(int argc, char** argv) {
    CLI::App app{"Transformer crowd counting on synthetic scenes"};
    app.require_subcommand(1);

    std::string config_file;
    std::vector<std::string> sets;
    auto add_config = [&](CLI::App* sub) {
        sub->add_option("--config", config_file, "key = value config file");
        sub->add_option("--set", sets, "override one key (key=value), repeatable");
    };

    std::uint64_t seed = 0;
    std::string out, data_dir, val_dir, ckpt, image, loss_log, epoch_log, json_out;
    std::size_t count = 0;
    std::size_t seeds = 1;

    auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset");
    add_config(gen);
    gen->add_option("--out", out, "dataset directory")->required();
    gen->add_option("--n", count, "number of scenes")->required();
    gen->add_option("--seed", seed, "generator seed")->required();

    auto* tr = app.add_subcommand("train", "train a model");
    add_config(tr);
    tr->add_option("--data", data_dir, "training dataset")->required();
    tr->add_option("--val", val_dir, "validation dataset");
    tr->add_option("--out", out, "checkpoint directory")->required();
    tr->add_option("--seed", seed, "run seed")->required();
    tr->add_option("--loss-log", loss_log, "per-step JSON lines (default <out>/loss.jsonl)");
    tr->add_option("--epoch-log", epoch_log, "per-epoch JSON lines (default <out>/epochs.jsonl)");

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    ev->add_option("--checkpoint", ckpt, "checkpoint file")->required();
    ev->add_option("--data", data_dir, "dataset directory")->required();
    ev->add_option("--json", json_out, "write the per-image report here");

    auto* inf = app.add_subcommand("infer", "predict a density map for one image");
    inf->add_option("--checkpoint", ckpt, "checkpoint file")->required();
    inf->add_option("--image", image, "binary PPM image")->required();
    inf->add_option("--out", out, "16-bit PGM output; sidecar goes to <out>.txt")->required();

    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    gc->add_option("--seed", seed, "first seed");
    gc->add_option("--seeds", seeds, "number of consecutive seeds")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }

    if (gen->parsed()) {
        RunConfig cfg = build_config(config_file, sets);
        cfg.validate();
        const Dataset data = generate_dataset(seed, count, cfg.scene, cfg.gt_stride);
        write_dataset(out, data);
        std::size_t dots = 0;
        for (const auto& s : data.samples) dots += s.dots.size();
        std::cout << "wrote " << data.samples.size() << " scenes (" << dots << " people) to " << out << "\n";
        return kOk;
    }
    if (tr->parsed()) {
        RunConfig cfg = build_config(config_file, sets);
        cfg.train.seed = seed;
        cfg.validate();
        const Dataset train_set = read_dataset(data_dir);
        std::optional<Dataset> val_set;
        if (!val_dir.empty()) val_set = read_dataset(val_dir);
        TrainOptions opts;
        opts.out_dir = out;
        opts.loss_log = loss_log.empty() ? (fs::path(out) / "loss.jsonl").string() : loss_log;
        opts.epoch_log = epoch_log.empty() ? (fs::path(out) / "epochs.jsonl").string() : epoch_log;
        opts.summary = &std::cout;
        const TrainResult r = train(cfg, train_set, val_set ? &*val_set : nullptr, opts);
        std::cout << "done: " << r.steps << " steps, " << r.epochs << " epochs";
        if (r.final_train_mae) std::cout << ", train MAE " << *r.final_train_mae;
        if (r.best_val_mae) std::cout << ", best val MAE " << *r.best_val_mae << " (epoch " << r.best_epoch << ")";
        std::cout << "\n";
        return kOk;
    }
    if (ev->parsed()) {
        const auto model = load_model(ckpt);
        const EvalReport report = evaluate(*model, read_dataset(data_dir));
        if (report.resampled_positions) std::cerr << "note: position embedding resampled to the image grid\n";
        std::cout << std::setprecision(6) << "images " << report.rows.size() << "  MAE " << report.metrics.mae
                  << "  MSE " << report.metrics.mse << "  NAE " << report.metrics.nae;
        if (report.metrics.nae_excluded) std::cout << " (" << report.metrics.nae_excluded << " empty excluded)";
        std::cout << "\n";
        if (!json_out.empty()) write_file(json_out, eval_report_json(report) + "\n");
        return kOk;
    }
    if (inf->parsed()) {
        const auto model = load_model(ckpt);
        const InferResult r = infer(*model, read_ppm(image));
        export_density(r, out);
        std::cout << std::setprecision(6) << "count " << r.count << "  map " << r.w << "x" << r.h << "\n";
        return kOk;
    }
    if (gc->parsed()) {
        std::vector<std::vector<GradRow>> runs;
        for (std::size_t i = 0; i < seeds; ++i) runs.push_back(run_gradient_suite(seed + i));
        bool ok = true;
        std::cout << std::left << std::setw(28) << "check" << std::setw(14) << "worst" << std::setw(12)
                  << "threshold" << std::setw(8) << "result" << "checks (kink-skipped)\n";
        for (const auto& row : merge_rows(runs)) {
            ok &= row.pass();
            std::cout << std::left << std::setw(28) << row.name << std::setw(14) << std::setprecision(3)
                      << row.worst << std::setw(12) << (row.exact_zero ? std::string("== 0") : std::to_string(row.threshold).substr(0, 6))
                      << std::setw(8) << (row.pass() ? "pass" : "FAIL") << row.checks;
            if (row.skipped) std::cout << " (" << row.skipped << ")";
            std::cout << "\n";
        }
        return ok ? kOk : kFailed;
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const ContractError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kConfig;
    } catch (const DimensionError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kConfig;
    } catch (const NumericError& e) {
        std::cerr << "numeric abort: " << e.what() << "\n";
        return kNumeric;
    } catch (const IoError& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return kIo;
    } catch (const ParseError& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return kIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kFailed;
    }
}
