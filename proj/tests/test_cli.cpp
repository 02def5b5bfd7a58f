#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <sys/wait.h>

#include "crowdctx/data.hpp"
#include "crowdctx/train.hpp"

using namespace crowdctx;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "crowdctx_cli";

int cli(const std::string& args) {
    const std::string cmd = std::string(CROWDCTX_CLI) + " " + args + " > " + (kRoot / "out.txt").string() + " 2>&1";
    const int st = std::system(cmd.c_str());
    return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

std::string p(const std::string& rel) { return (kRoot / rel).string(); }

const char* kSmall =
    " --set model.d=16 --set model.reduction_dim=8 --set model.layers=2 --set model.heads=2"
    " --set train.epochs=1 --set train.batch_size=2";

}  // namespace

TEST_CASE("command line") {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);

    CHECK(cli("gen-data --out " + p("train") + " --n 4 --seed 1") == 0);
    CHECK(read_dataset(p("train")).samples.size() == 4);
    CHECK(cli("gen-data --out " + p("val") + " --n 2 --seed 2") == 0);

    CHECK(cli("train --data " + p("train") + " --val " + p("val") + " --out " + p("run") + " --seed 3" + kSmall) == 0);
    CHECK(fs::exists(p("run/last.ckpt")));
    CHECK(fs::exists(p("run/loss.jsonl")));
    CHECK(fs::exists(p("run/epochs.jsonl")));

    CHECK(cli("eval --checkpoint " + p("run/last.ckpt") + " --data " + p("val") + " --json " + p("eval.json")) == 0);
    CHECK(read_file(p("eval.json")).find("\"mae\"") != std::string::npos);

    CHECK(cli("infer --checkpoint " + p("run/last.ckpt") + " --image " + p("val/images/0000.ppm") + " --out " +
              p("d.pgm")) == 0);
    const SidecarInfo side = read_sidecar(p("d.pgm.txt"));
    CHECK(side.h == 16);
    const std::string first = read_file(p("d.pgm"));
    CHECK(cli("infer --checkpoint " + p("run/last.ckpt") + " --image " + p("val/images/0000.ppm") + " --out " +
              p("d.pgm")) == 0);
    CHECK(read_file(p("d.pgm")) == first);

    SUBCASE("exit codes") {
        CHECK(cli("") == 2);
        CHECK(cli("train --data " + p("train") + " --out " + p("x")) == 2);  // --seed is required
        CHECK(cli("gen-data --out " + p("g") + " --n 1 --seed 1 --set model.bogus=1") == 2);
        CHECK(cli("train --data " + p("train") + " --out " + p("x") + " --seed 1 --set augment.crop_h=32") == 2);
        CHECK(cli("eval --checkpoint " + p("missing.ckpt") + " --data " + p("val")) == 4);
        CHECK(cli("infer --checkpoint " + p("run/last.ckpt") + " --image " + p("nope.ppm") + " --out " + p("e.pgm")) ==
              4);
        write_file(p("bad.ckpt"), "CFCK garbage");
        CHECK(cli("eval --checkpoint " + p("bad.ckpt") + " --data " + p("val")) == 4);
    }
    SUBCASE("gradcheck table") {
        CHECK(cli("gradcheck --seed 5") == 0);
        const std::string out = read_file(p("out.txt"));
        CHECK(out.find("objective_full") != std::string::npos);
        CHECK(out.find("FAIL") == std::string::npos);
    }
}
