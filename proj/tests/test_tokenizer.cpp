#include <doctest.h>

#include <random>

#include "crowdctx/core/errors.hpp"
#include "crowdctx/tokenizer.hpp"

using namespace crowdctx;

namespace {

// Number of top-left corners (in padded coordinates) at which a k-window fits.
std::size_t placements(std::size_t n, std::size_t k, std::size_t s, std::size_t p) {
    std::size_t c = 0;
    for (std::size_t start = 0; start + k <= n + 2 * p; start += s) ++c;
    return c;
}

void set_all(ParameterStore& store, double v) {
    for (const auto& p : store.items()) {
        Tensor t = p.tensor;
        std::fill(t.mutable_data().begin(), t.mutable_data().end(), v);
    }
}

Tensor random_image(std::size_t c, std::size_t h, std::size_t w, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> v(c * h * w);
    for (auto& x : v) x = u(rng);
    return Tensor::from({c, h, w}, std::move(v));
}

}  // namespace

TEST_CASE("grid formula against window enumeration") {
    std::mt19937_64 rng(2024);
    int checked = 0;
    while (checked < 300) {
        const std::size_t h = 1 + rng() % 64, w = 1 + rng() % 64;
        const std::size_t k = 2 + rng() % 8, s = 1 + rng() % (k - 1), p = rng() % 4;
        SplitSpec spec{k, s, p};
        if (h + 2 * p < k || w + 2 * p < k) {
            CHECK_THROWS_AS(spec.grid(h, w), DimensionError);
            continue;
        }
        const auto g = spec.grid(h, w);
        CHECK(g.out_h == placements(h, k, s, p));
        CHECK(g.out_w == placements(w, k, s, p));
        ++checked;
    }
}

TEST_CASE("split examples") {
    Tensor img = random_image(3, 64, 64, 1);
    TokenGrid g = overlapping_split(img, SplitSpec{7, 4, 3});
    CHECK(g.grid_h == 16);
    CHECK(g.grid_w == 16);
    CHECK(g.length() == 256);
    CHECK(g.dim() == 147);

    CHECK(SplitSpec{3, 2, 1}.grid(16, 16).out_h == 8);
    CHECK_THROWS_AS((SplitSpec{2, 2, 0}).validate(), ContractError);
    CHECK_THROWS_AS(overlapping_split(random_image(1, 8, 8, 2), SplitSpec{2, 2, 0}), ContractError);
    CHECK_THROWS_AS((SplitSpec{3, 0, 1}).validate(), ContractError);
}

TEST_CASE("to_map and from_map are inverse") {
    Tensor img = random_image(5, 4, 6, 3);
    TokenGrid g = TokenGrid::from_map(img);
    CHECK(g.grid_h == 4);
    CHECK(g.grid_w == 6);
    CHECK(g.to_map().to_vector() == img.to_vector());
}

TEST_CASE("stage grids") {
    TokenizerConfig cfg;
    auto g = stage_grids(64, 64, cfg);
    CHECK(g[0] == GridSize{16, 16});
    CHECK(g[1] == GridSize{8, 8});
    CHECK(g[2] == GridSize{4, 4});
    auto big = stage_grids(128, 128, cfg);
    CHECK(big[2].h * big[2].w == 64);

    cfg.stages[1] = SplitSpec{20, 2, 0};
    try {
        stage_grids(64, 64, cfg);
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        CHECK(std::string(e.what()).find("stage 1") != std::string::npos);
    }
}

TEST_CASE("tokens reduction output") {
    TokenizerConfig cfg;
    cfg.reduction_dim = 8;
    cfg.final_dim = 12;
    ParameterStore store;
    Initializer init(7);
    Tokenizer tok(store, "tokenizer", cfg, 3, init);
    CHECK(tok.total_stride() == 16);

    TokenGrid a = tok.forward(random_image(3, 64, 64, 10));
    CHECK(a.grid_h == 4);
    CHECK(a.grid_w == 4);
    CHECK(a.dim() == 12);
    // Token count depends on the size only.
    TokenGrid b = tok.forward(Tensor::full({3, 64, 64}, 0.25));
    CHECK(b.length() == a.length());
    CHECK(tok.forward(random_image(3, 128, 128, 11)).length() == 64);
    CHECK_THROWS_AS(tok.forward(random_image(1, 64, 64, 1)), DimensionError);
}

TEST_CASE("zero image gives the projection bias on every token") {
    TokenizerConfig cfg;
    cfg.reduction_dim = 8;
    cfg.final_dim = 6;
    ParameterStore store;
    Initializer init(3);
    Tokenizer tok(store, "tokenizer", cfg, 3, init);
    Tensor bias = store.get("tokenizer.project.bias");
    std::mt19937_64 rng(4);
    std::normal_distribution<double> n(0.0, 1.0);
    for (auto& v : bias.mutable_data()) v = n(rng);

    TokenGrid t = tok.forward(Tensor::zeros({3, 64, 64}));
    for (std::size_t i = 0; i < t.length(); ++i) {
        for (std::size_t j = 0; j < 6; ++j) CHECK(t.tokens.data()[i * 6 + j] == bias.data()[j]);
    }
}

TEST_CASE("reduction layer") {
    ParameterStore store;
    Initializer init(5);
    ReductionLayer layer(store, "r", 6, 4, init);

    SUBCASE("identical tokens stay identical") {
        std::vector<double> v;
        const std::vector<double> row = {0.3, -1.0, 2.0, 0.5, 0.1, -0.7};
        for (int i = 0; i < 4; ++i) v.insert(v.end(), row.begin(), row.end());
        TokenGrid out = layer.forward({Tensor::from({4, 6}, v), 2, 2});
        REQUIRE(out.tokens.shape() == Shape{4, 4});
        for (std::size_t i = 1; i < 4; ++i) {
            for (std::size_t j = 0; j < 4; ++j) CHECK(out.tokens.data()[i * 4 + j] == out.tokens.data()[j]);
        }
    }
    SUBCASE("single token attends to itself") {
        Tensor attn;
        layer.forward({Tensor::from({1, 6}, {1, 2, 3, 4, 5, 6}), 1, 1}, &attn);
        CHECK(attn.shape() == Shape{1, 1});
        CHECK(attn.item() == 1.0);
    }
    SUBCASE("shape contract") {
        TokenGrid out = layer.forward({Tensor::from({5, 6}, random_image(1, 5, 6, 9).to_vector()), 5, 1});
        CHECK(out.tokens.shape() == Shape{5, 4});
        CHECK(out.grid_h == 5);
        CHECK_THROWS_AS(layer.forward({Tensor::zeros({5, 5}), 5, 1}), DimensionError);
    }
}

TEST_CASE("channel permutation permutes stage-0 token blocks") {
    Tensor img = random_image(3, 16, 16, 12);
    const std::size_t perm[3] = {2, 0, 1};
    std::vector<double> pv(img.numel());
    const std::size_t plane = 16 * 16;
    for (std::size_t c = 0; c < 3; ++c) {
        std::copy_n(img.data().begin() + perm[c] * plane, plane, pv.begin() + c * plane);
    }
    const SplitSpec spec{7, 4, 3};
    TokenGrid a = overlapping_split(img, spec);
    TokenGrid b = overlapping_split(Tensor::from({3, 16, 16}, pv), spec);
    const std::size_t block = 49, dim = 147;
    for (std::size_t t = 0; t < a.length(); ++t) {
        for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t j = 0; j < block; ++j) {
                CHECK(b.tokens.data()[t * dim + c * block + j] == a.tokens.data()[t * dim + perm[c] * block + j]);
            }
        }
    }
}

TEST_CASE("zero weights everywhere give zero tokens") {
    TokenizerConfig cfg;
    cfg.reduction_dim = 4;
    cfg.final_dim = 4;
    ParameterStore store;
    Initializer init(1);
    Tokenizer tok(store, "tokenizer", cfg, 3, init);
    set_all(store, 0.0);
    for (double v : tok.forward(random_image(3, 64, 64, 2)).tokens.to_vector()) CHECK(v == 0.0);
}
