#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "crowdctx/core/adam.hpp"
#include "crowdctx/core/checkpoint.hpp"
#include "crowdctx/core/errors.hpp"
#include "crowdctx/core/gradcheck.hpp"
#include "crowdctx/core/ops.hpp"
#include "crowdctx/core/parameters.hpp"

using namespace crowdctx;

namespace {

Tensor random_tensor(Shape s, std::uint64_t seed, bool grad = false) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d(0.0, 1.0);
    std::vector<double> v(shape_numel(s));
    for (auto& x : v) x = d(rng);
    return Tensor::from(std::move(s), std::move(v), grad);
}

// Brute-force unfold: one nested loop per index, reading padded pixels directly.
std::vector<double> unfold_oracle(const Tensor& x, std::size_t k, std::size_t s, std::size_t p,
                                  std::size_t* rows) {
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    std::vector<double> out;
    std::size_t n = 0;
    for (long y0 = -static_cast<long>(p); y0 + static_cast<long>(k) <= static_cast<long>(h + p); y0 += s) {
        for (long x0 = -static_cast<long>(p); x0 + static_cast<long>(k) <= static_cast<long>(w + p); x0 += s) {
            ++n;
            for (std::size_t ch = 0; ch < c; ++ch) {
                for (std::size_t ky = 0; ky < k; ++ky) {
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        const long yy = y0 + static_cast<long>(ky), xx = x0 + static_cast<long>(kx);
                        double v = 0.0;
                        if (yy >= 0 && xx >= 0 && yy < static_cast<long>(h) && xx < static_cast<long>(w)) {
                            v = x.data()[(ch * h + static_cast<std::size_t>(yy)) * w + static_cast<std::size_t>(xx)];
                        }
                        out.push_back(v);
                    }
                }
            }
        }
    }
    *rows = n;
    return out;
}

}  // namespace

TEST_CASE("tensor construction and shape checks") {
    Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.numel() == 6);
    CHECK(t.dim(1) == 3);
    CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), DimensionError);
    CHECK_THROWS_AS(ops::add(t, Tensor::zeros({3, 2})), DimensionError);
    CHECK(Tensor::scalar(4.0).item() == 4.0);
}

TEST_CASE("non-finite forward values are rejected") {
    Tensor x = Tensor::from({2}, {1.0, 0.0});
    CHECK_THROWS_AS(ops::div_scalar(x, Tensor::scalar(0.0)), NumericError);
}

TEST_CASE("unfold examples") {
    SUBCASE("non-overlapping tiling") {
        Tensor x = random_tensor({1, 8, 8}, 1);
        Tensor u = ops::unfold(x, 2, 2, 0);
        CHECK(u.shape() == Shape{16, 4});
        // block (1, 2): rows 2..3, cols 4..5
        const auto d = u.data();
        CHECK(d[6 * 4 + 0] == x.data()[2 * 8 + 4]);
        CHECK(d[6 * 4 + 3] == x.data()[3 * 8 + 5]);
    }
    SUBCASE("7/4/3 on 64x64 gives a 16x16 grid") {
        Tensor x = Tensor::zeros({3, 64, 64});
        std::size_t n = 0;
        unfold_oracle(x, 7, 4, 3, &n);
        CHECK(n == 256);
        CHECK(ops::unfold(x, 7, 4, 3).shape() == Shape{256, 147});
    }
    SUBCASE("zeros stay zeros") {
        Tensor u = ops::unfold(Tensor::zeros({2, 9, 7}), 3, 2, 1);
        for (double v : u.data()) CHECK(v == 0.0);
    }
    SUBCASE("window too large") {
        CHECK_THROWS_AS(ops::unfold(Tensor::zeros({1, 3, 3}), 7, 1, 1), DimensionError);
    }
}

TEST_CASE("unfold matches brute-force enumeration") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 60; ++trial) {
        const std::size_t h = 1 + rng() % 12, w = 1 + rng() % 12, k = 1 + rng() % 5, s = 1 + rng() % 4,
                          p = rng() % 3;
        if (h + 2 * p < k || w + 2 * p < k) continue;
        Tensor x = random_tensor({2, h, w}, rng());
        std::size_t rows = 0;
        const auto oracle = unfold_oracle(x, k, s, p, &rows);
        Tensor u = ops::unfold(x, k, s, p);
        REQUIRE(u.dim(0) == rows);
        CHECK(std::equal(oracle.begin(), oracle.end(), u.data().begin()));
    }
}

TEST_CASE("unfold with k == s and p == 0 conserves mass") {
    Tensor x = random_tensor({3, 12, 8}, 9);
    Tensor u = ops::unfold(x, 4, 4, 0);
    double a = 0, b = 0;
    for (double v : x.data()) a += v;
    for (double v : u.data()) b += v;
    CHECK(a == doctest::Approx(b).epsilon(1e-12));
}

TEST_CASE("softmax_rows") {
    Tensor s = ops::softmax_rows(Tensor::from({3, 3}, {0, 0, 0, 1000, 0, -1000, std::log(1.0), std::log(2.0),
                                                       std::log(3.0)}));
    const auto d = s.data();
    for (int j = 0; j < 3; ++j) CHECK(d[j] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(d[3] == doctest::Approx(1.0));
    CHECK(d[4] < 1e-300);
    CHECK(d[6] == doctest::Approx(1.0 / 6.0).epsilon(1e-14));
    CHECK(d[7] == doctest::Approx(2.0 / 6.0).epsilon(1e-14));
    CHECK(d[8] == doctest::Approx(3.0 / 6.0).epsilon(1e-14));

    Tensor x = random_tensor({4, 7}, 3);
    Tensor y = ops::softmax_rows(x);
    Tensor shifted = ops::softmax_rows(ops::add_scalar(x, 12.5));
    for (std::size_t i = 0; i < 4; ++i) {
        double sum = 0;
        for (std::size_t j = 0; j < 7; ++j) {
            sum += y.data()[i * 7 + j];
            CHECK(shifted.data()[i * 7 + j] == doctest::Approx(y.data()[i * 7 + j]).epsilon(1e-12));
        }
        CHECK(std::fabs(sum - 1.0) < 1e-12);
    }
}

TEST_CASE("backward examples") {
    SUBCASE("sum(W x) gives grad(W) = broadcast x") {
        Tensor w = random_tensor({3, 2}, 4, true);
        Tensor x = Tensor::from({2, 1}, {0.5, -2.0});
        backward(ops::sum(ops::matmul(w, x)));
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(w.grad()[i * 2 + 0] == 0.5);
            CHECK(w.grad()[i * 2 + 1] == -2.0);
        }
    }
    SUBCASE("sigmoid at 0") {
        Tensor w = Tensor::scalar(0.0, true);
        backward(ops::sigmoid(w));
        CHECK(w.grad()[0] == 0.25);
    }
    SUBCASE("repeated calls accumulate") {
        Tensor w = Tensor::scalar(3.0, true);
        Tensor loss = ops::mul(w, w);
        backward(loss);
        backward(loss);
        CHECK(w.grad()[0] == 12.0);
    }
    SUBCASE("non-scalar loss is a contract error") {
        Tensor w = random_tensor({2}, 1, true);
        CHECK_THROWS_AS(backward(ops::scale(w, 2.0)), ContractError);
    }
}

TEST_CASE("composite graph agrees with finite differences") {
    Tensor x = random_tensor({4, 6}, 11, true);
    Tensor w = random_tensor({6, 5}, 12, true);
    Tensor g = random_tensor({5}, 13, true);
    Tensor b = random_tensor({5}, 14, true);
    auto loss = [&] {
        Tensor h = ops::layer_norm(ops::gelu(ops::matmul(x, w)), g, b);
        return ops::mean(ops::mul(ops::softmax_rows(h), ops::sigmoid(h)));
    };
    for (Tensor* t : {&x, &w, &g, &b}) CHECK(check_gradient(loss, *t).relative_error < 1e-4);
}

TEST_CASE("kink-crossing stencils are skipped") {
    // second entry sits 1e-6 from the relu kink
    Tensor x = Tensor::from({3}, {0.5, -1e-6, -0.7}, true);
    auto loss = [&] { return ops::sum(ops::relu(ops::scale(x, 3.0))); };
    {
        ops::KinkRecorder rec;
        loss();
        CHECK(rec.pattern() == std::vector<signed char>{1, -1, -1});
    }
    CHECK(check_gradient(loss, x).relative_error > 0.1);
    GradCheckOptions o;
    o.skip_kinks = true;
    const auto r = check_gradient(loss, x, o);
    CHECK(r.skipped == 1);
    CHECK(r.coords == 2);
    CHECK(r.relative_error < 1e-9);
}

TEST_CASE("forward and backward are bit-deterministic") {
    auto run = [] {
        Tensor x = random_tensor({2, 6, 6}, 21, true);
        Tensor w = random_tensor({3, 2, 3, 3}, 22, true);
        Tensor y = ops::conv_transpose2d(ops::relu(ops::conv2d(x, w, Tensor(), 1, 1)),
                                         random_tensor({3, 2, 4, 4}, 23), Tensor(), 2, 1);
        Tensor loss = ops::sum(ops::mul(y, y));
        backward(loss);
        std::vector<double> out = {loss.item()};
        out.insert(out.end(), x.grad().begin(), x.grad().end());
        out.insert(out.end(), w.grad().begin(), w.grad().end());
        return out;
    };
    CHECK(run() == run());
}

TEST_CASE("adam examples") {
    SUBCASE("zero grad and no decay leaves the parameter alone") {
        ParameterStore store;
        Tensor p = store.add("p", Tensor::from({2}, {0.5, -1.25}));
        AdamConfig cfg;
        cfg.weight_decay = 0.0;
        AdamState st(cfg);
        store.zero_grad();
        adam_step(store, st);
        CHECK(p.data()[0] == 0.5);
        CHECK(p.data()[1] == -1.25);
        CHECK(st.step == 1);
    }
    SUBCASE("beta1 = beta2 = 0 single step") {
        ParameterStore store;
        Tensor p = store.add("p", Tensor::scalar(1.0));
        AdamConfig cfg;
        cfg.beta1 = cfg.beta2 = 0.0;
        cfg.weight_decay = 0.0;
        cfg.lr = 0.01;
        cfg.float_state = false;
        AdamState st(cfg);
        store.zero_grad();
        const double g = 0.3;
        p.mutable_grad()[0] = g;
        adam_step(store, st);
        CHECK(p.data()[0] == doctest::Approx(1.0 - cfg.lr * g / (std::fabs(g) + cfg.eps)).epsilon(1e-15));
    }
    SUBCASE("two steps on w^2 descend") {
        ParameterStore store;
        Tensor w = store.add("w", Tensor::scalar(1.0));
        AdamConfig cfg;
        cfg.lr = 0.1;
        AdamState st(cfg);
        double prev = 1.0;
        for (int i = 0; i < 2; ++i) {
            store.zero_grad();
            backward(ops::mul(w, w));
            adam_step(store, st);
            const double f = w.item() * w.item();
            CHECK(f < prev);
            prev = f;
        }
    }
    SUBCASE("missing gradient") {
        ParameterStore store;
        store.add("w", Tensor::scalar(1.0));
        AdamState st;
        CHECK_THROWS_AS(adam_step(store, st), ContractError);
    }
    SUBCASE("step increments and grads are cleared") {
        ParameterStore store;
        Tensor w = store.add("w", Tensor::scalar(2.0));
        AdamState st;
        store.zero_grad();
        backward(ops::mul(w, w));
        adam_step(store, st);
        CHECK(st.step == 1);
        CHECK(w.grad()[0] == 0.0);
    }
}

TEST_CASE("parameter store") {
    ParameterStore store;
    store.add("a.weight", Tensor::zeros({2, 2}));
    CHECK_THROWS_AS(store.add("a.weight", Tensor::zeros({1})), ContractError);
    CHECK(store.get("a.weight").requires_grad());
    CHECK(store.scalar_count() == 4);
}

TEST_CASE("checkpoint round trip") {
    ParameterStore store;
    Initializer init(3);
    store.add("x.weight", init.lecun({3, 4}, 3));
    store.add("x.bias", init.normal({4}, 0.1));
    AdamState st;
    store.zero_grad();
    backward(ops::sum(ops::mul(store.get("x.weight"), store.get("x.weight"))));
    adam_step(store, st);

    const Checkpoint ck = make_checkpoint(store, &st, "a = 1\n");
    const auto bytes = encode_checkpoint(ck);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "CFCK");
    const Checkpoint back = decode_checkpoint(bytes);
    CHECK(back.config_text == "a = 1\n");
    CHECK(back.find("opt.step") != nullptr);
    CHECK(back.find("opt.m.x.weight") != nullptr);

    ParameterStore other;
    Initializer init2(99);
    other.add("x.weight", init2.lecun({3, 4}, 3));
    other.add("x.bias", init2.normal({4}, 0.1));
    restore_parameters(back, other);
    for (std::size_t i = 0; i < store.size(); ++i) {
        CHECK(store.items()[i].tensor.to_vector() == other.items()[i].tensor.to_vector());
    }
    AdamState st2;
    CHECK(restore_optimizer(back, other, st2));
    CHECK(st2.step == 1);
    CHECK(st2.m == st.m);
    CHECK(st2.v == st.v);

    SUBCASE("truncated bytes report an offset") {
        auto cut = bytes;
        cut.resize(bytes.size() - 7);
        CHECK_THROWS_AS(decode_checkpoint(cut), ParseError);
    }
    SUBCASE("bad magic") {
        auto bad = bytes;
        bad[0] = 'X';
        try {
            decode_checkpoint(bad);
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(e.offset() == 0);
        }
    }
    SUBCASE("shape mismatch names the tensor") {
        ParameterStore wrong;
        wrong.add("x.weight", Tensor::zeros({4, 3}));
        try {
            restore_parameters(back, wrong);
            FAIL("expected ContractError");
        } catch (const ContractError& e) {
            CHECK(std::string(e.what()).find("x.weight") != std::string::npos);
        }
    }
    SUBCASE("file round trip") {
        const auto path = (std::filesystem::temp_directory_path() / "crowdctx_core_test.ckpt").string();
        save_checkpoint(path, ck);
        const Checkpoint f = load_checkpoint(path);
        CHECK(encode_checkpoint(f) == bytes);
        std::filesystem::remove(path);
        CHECK_THROWS_AS(load_checkpoint(path), IoError);
    }
}
