#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "crowdctx/config.hpp"
#include "crowdctx/core/errors.hpp"
#include "crowdctx/gradsuite.hpp"
#include "crowdctx/train.hpp"

using namespace crowdctx;
namespace fs = std::filesystem;

namespace {

RunConfig small_config() {
    RunConfig c;
    c.apply_text(
        "model.d = 16\n"
        "model.reduction_dim = 8\n"
        "model.layers = 2\n"
        "model.heads = 2\n"
        "train.epochs = 2\n"
        "train.batch_size = 2\n"
        "train.checkpoint_every = 1\n");
    return c;
}

fs::path scratch(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("crowdctx_train_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) { return read_file(p.string()); }

}  // namespace

TEST_CASE("config text") {
    RunConfig c = small_config();
    c.set("loss.lambda", "0.25");
    c.set("model.tam", "off");
    c.set("optim.lr", "3e-5");
    const std::string text = c.to_text();
    RunConfig back = RunConfig::from_text(text);
    CHECK(back.to_text() == text);
    CHECK(back.loss.rtm == 0.25);
    CHECK_FALSE(back.model.tam);
    CHECK(back.adam.lr == 3e-5);
    CHECK(back.model.backbone.taps == std::vector<std::size_t>{1});

    CHECK(RunConfig{}.adam.lr == 1e-5);
    CHECK(RunConfig{}.loss.rtm == 0.1);
    CHECK_THROWS_AS(c.set("model.nope", "1"), ConfigError);
    CHECK_THROWS_AS(c.set("train.epochs", "many"), ConfigError);
    CHECK_THROWS_AS(c.apply_text("just words\n"), ConfigError);
    RunConfig bad = small_config();
    bad.set("augment.crop_h", "32");
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    RunConfig neg = small_config();
    neg.set("loss.lambda_tv", "-1");
    CHECK_THROWS_AS(neg.validate(), ConfigError);

    RunConfig t = small_config();
    t.set("model.taps", "none");
    t.set("model.layers", "6");
    CHECK(t.model.backbone.taps.empty());
}

TEST_CASE("one step with the extra terms switched off logs only the count term") {
    RunConfig c = small_config();
    c.set("loss.lambda", "0");
    c.set("loss.lambda_ot", "0");
    c.set("loss.lambda_tv", "0");
    c.set("model.taps", "none");
    c.set("train.max_steps", "1");
    const Dataset d = generate_dataset(1, 2, c.scene, 4);
    const TrainResult r = train(c, d, nullptr, TrainOptions{});
    REQUIRE(r.history.size() == 1);
    const auto& l = r.history[0].loss;
    CHECK(l.total == l.count);
    CHECK(l.ot == 0.0);
    CHECK(l.tv == 0.0);
    CHECK(l.aux.empty());
}

TEST_CASE("training is deterministic and writes its artifacts") {
    RunConfig c = small_config();
    const Dataset d = generate_dataset(2, 5, c.scene, 4);
    const Dataset v = generate_dataset(3, 2, c.scene, 4);
    auto run = [&](const std::string& tag) {
        const fs::path dir = scratch(tag);
        TrainOptions o;
        o.out_dir = dir.string();
        o.loss_log = (dir / "loss.jsonl").string();
        o.epoch_log = (dir / "epochs.jsonl").string();
        std::unique_ptr<CrowdModel> model;
        const TrainResult r = train(c, d, &v, o, &model);
        CHECK(r.steps == 4);  // 5 samples, batch 2: trailing sample dropped
        CHECK(r.epochs == 2);
        CHECK(r.best_val_mae);
        CHECK(fs::exists(dir / "best.ckpt"));
        CHECK(fs::exists(dir / "last.ckpt"));
        CHECK(fs::exists(dir / "epoch_0002.ckpt"));
        return std::make_pair(dir, std::move(model));
    };
    auto [a, ma] = run("det_a");
    auto [b, mb] = run("det_b");
    CHECK(slurp(a / "loss.jsonl") == slurp(b / "loss.jsonl"));
    CHECK(slurp(a / "epochs.jsonl") == slurp(b / "epochs.jsonl"));
    CHECK(slurp(a / "last.ckpt") == slurp(b / "last.ckpt"));

    SUBCASE("checkpoint preserves evaluation exactly") {
        CHECK(std::fabs(evaluate(*ma, d).metrics.mae - *train(c, d, &v, TrainOptions{}).final_train_mae) < 1e-6);
        const EvalReport direct = evaluate(*ma, v);
        RunConfig loaded_cfg;
        const auto loaded = load_model((a / "last.ckpt").string(), &loaded_cfg);
        const EvalReport again = evaluate(*loaded, v);
        CHECK(eval_report_json(direct) == eval_report_json(again));
        CHECK(loaded_cfg.to_text() == c.to_text());
        const Checkpoint ck = load_checkpoint((a / "last.ckpt").string());
        AdamState st;
        CHECK(restore_optimizer(ck, loaded->parameters(), st));
        CHECK(st.step == 4);
    }
    SUBCASE("mismatched checkpoint names the tensor") {
        RunConfig other = small_config();
        other.set("model.d", "32");
        CrowdModel m(other.model, 0);
        try {
            restore_parameters(load_checkpoint((a / "last.ckpt").string()), m.parameters());
            FAIL("expected ContractError");
        } catch (const ContractError& e) {
            CHECK(std::string(e.what()).find("tokenizer.") != std::string::npos);
        }
    }
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("single image metrics") {
    RunConfig c = small_config();
    CrowdModel m(c.model, 4);
    const Dataset d = generate_dataset(5, 1, c.scene, 4);
    const EvalReport r = evaluate(m, d);
    CHECK(r.metrics.mae == r.metrics.mse);
    CHECK(r.rows[0].ground_truth == static_cast<double>(d.samples[0].dots.size()));
    CHECK_THROWS_AS(evaluate(m, Dataset{}), ContractError);
}

TEST_CASE("inference export") {
    RunConfig c = small_config();
    CrowdModel m(c.model, 6);
    const Dataset d = generate_dataset(7, 1, c.scene, 4);
    const InferResult r = infer(m, d.samples[0].image);
    CHECK(r.h == 16);
    CHECK(r.w == 16);
    CHECK(r.count == doctest::Approx(m.count(d.samples[0].image)).epsilon(1e-12));

    const fs::path dir = scratch("infer");
    fs::create_directories(dir);
    const std::string path = (dir / "d.pgm").string();
    export_density(r, path);
    const SidecarInfo side = read_sidecar(path + ".txt");
    std::size_t h = 0, w = 0;
    const auto px = read_pgm16(path, &h, &w);
    CHECK(h == side.h);
    CHECK(w == side.w);
    const double recon = std::accumulate(px.begin(), px.end(), 0.0) / side.scale;
    CHECK(std::fabs(recon - side.count) <= 0.005 * std::fabs(side.count));
    CHECK(side.count == r.count);

    SUBCASE("zero image through a zero-bias model") {
        RunConfig z = small_config();
        CrowdModel zm(z.model, 8);
        // Every additive term: linear and conv biases, the context token and E.
        for (const auto& prm : zm.parameters().items()) {
            const auto& n = prm.name;
            if (n.ends_with(".bias") || n.ends_with(".beta") || n.ends_with("context_token") || n.ends_with("position")) {
                Tensor t = prm.tensor;
                std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0);
            }
        }
        const InferResult zr = infer(zm, Tensor::zeros({3, 64, 64}));
        CHECK(zr.count == 0.0);
        CHECK(zr.scale == 1.0);
    }
    SUBCASE("other sizes resample positions") {
        const InferResult big = infer(m, render(generate_scene(1, SceneConfig{96, 128})));
        CHECK(big.h == 24);
        CHECK(big.w == 32);
    }
    fs::remove_all(dir);
}

TEST_CASE("gradient suite on one seed") {
    const auto rows = run_gradient_suite(3);
    CHECK(rows.size() > 30);
    for (const auto& r : rows) {
        INFO(r.name << " worst " << r.worst);
        CHECK(r.pass());
    }
}
