#include <doctest.h>

#include <cmath>
#include <random>

#include "crowdctx/core/adam.hpp"
#include "crowdctx/core/errors.hpp"
#include "crowdctx/core/gradcheck.hpp"
#include "crowdctx/data.hpp"
#include "crowdctx/losses.hpp"
#include "crowdctx/model.hpp"
#include "oracles.hpp"

using namespace crowdctx;

namespace {

Tensor rand_map(std::size_t h, std::size_t w, std::uint64_t seed, bool grad = false) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.05, 1.0);
    std::vector<double> v(h * w);
    for (auto& x : v) x = u(rng);
    return Tensor::from({h, w}, std::move(v), grad);
}

std::vector<double> normalized(const Tensor& t) {
    std::vector<double> v = t.to_vector();
    double s = 0;
    for (double x : v) s += x;
    for (double& x : v) x /= s;
    return v;
}

Tensor indicator(const std::vector<std::size_t>& cells, std::size_t h, std::size_t w) {
    std::vector<double> v(h * w, 0.0);
    for (auto c : cells) v[c] = 1.0;
    return Tensor::from({h, w}, v);
}

}  // namespace

TEST_CASE("count loss") {
    CHECK(count_loss(Tensor::from({1, 2}, {6, 4}), Tensor::from({1, 2}, {3, 4})).item() == 3.0);
    Tensor d = rand_map(3, 3, 1);
    CHECK(count_loss(d, d).item() == 0.0);
    CHECK_THROWS_AS(count_loss(d, rand_map(3, 2, 1)), DimensionError);

    Tensor p = rand_map(2, 3, 2, true);
    backward(count_loss(p, Tensor::zeros({2, 3})));
    for (double g : p.grad()) CHECK(g == 1.0);
    Tensor q = rand_map(2, 3, 3, true);
    backward(count_loss(q, Tensor::full({2, 3}, 5.0)));
    for (double g : q.grad()) CHECK(g == -1.0);
    CHECK(check_gradient([&] { return count_loss(q, Tensor::full({2, 3}, 5.0)); }, q).relative_error < 1e-4);
}

TEST_CASE("rtm loss") {
    CHECK(rtm_loss(Tensor::scalar(10.0), 7.0).item() == 3.0);
    CHECK(rtm_loss(Tensor::scalar(7.0), 7.0).item() == 0.0);
    Tensor e = Tensor::scalar(7.0, true);
    backward(rtm_loss(e, 7.0));
    CHECK(e.grad()[0] == 0.0);
    CHECK_THROWS_AS(rtm_loss(Tensor::zeros({2}), 1.0), DimensionError);
}

TEST_CASE("tv loss") {
    Tensor d = rand_map(4, 4, 4);
    for (double c : {0.5, 1.0, 3.0}) {
        CHECK(std::fabs(tv_loss(ops::scale(d, c), d).item()) < 1e-12);
    }
    CHECK(tv_loss(Tensor::from({1, 2}, {0, 2}), Tensor::from({1, 2}, {1, 0})).item() == 1.0);
    Tensor gt = Tensor::from({2, 2}, {3, 0, 0, 1});
    for (int s = 0; s < 10; ++s) CHECK(tv_loss(rand_map(2, 2, 40 + s), gt).item() <= 4.0 + 1e-12);
    CHECK(tv_loss(Tensor::zeros({2, 2}), gt).item() == 0.0);
    CHECK(tv_loss(rand_map(2, 2, 1), Tensor::zeros({2, 2})).item() == 0.0);
    CHECK(tv_loss(Tensor::from({1, 2}, {0, 2}), Tensor::from({1, 2}, {3, 0}), false).item() == 1.0);
    CHECK(tv_loss(Tensor::from({1, 2}, {0, 2}), Tensor::from({1, 2}, {3, 0}), true).item() == 3.0);
}

TEST_CASE("cost matrix") {
    Tensor c = cost_matrix(1, 2);
    CHECK(c.to_vector() == std::vector<double>{0, 1, 1, 0});
    CHECK(cost_matrix(1, 1).to_vector() == std::vector<double>{0});
    Tensor g = cost_matrix(3, 4);
    const std::size_t n = 12;
    double mx = 0;
    for (std::size_t i = 0; i < n; ++i) {
        CHECK(g.data()[i * n + i] == 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            CHECK(g.data()[i * n + j] == g.data()[j * n + i]);
            mx = std::max(mx, g.data()[i * n + j]);
        }
    }
    CHECK(mx == 1.0);
}

TEST_CASE("sinkhorn plan") {
    SUBCASE("point mass") {
        std::vector<double> a(9, 0.0);
        a[4] = 1.0;
        auto r = sinkhorn_plan(a, a, cost_matrix(3, 3), SinkhornConfig{});
        CHECK(r.plan[4 * 9 + 4] == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(std::fabs(r.transport_cost) < 1e-12);
    }
    SUBCASE("marginals on random 8x8 instances") {
        SinkhornConfig cfg;
        cfg.epsilon = 0.01;
        cfg.max_iters = 5000;
        cfg.tol = 1e-9;
        const Tensor c = cost_matrix(8, 8);
        for (int s = 0; s < 3; ++s) {
            const auto a = normalized(rand_map(8, 8, 100 + s)), b = normalized(rand_map(8, 8, 200 + s));
            auto r = sinkhorn_plan(a, b, c, cfg);
            double row = 0, col = 0;
            for (std::size_t i = 0; i < 64; ++i) {
                double rs = 0, cs = 0;
                for (std::size_t j = 0; j < 64; ++j) {
                    CHECK(r.plan[i * 64 + j] >= 0.0);
                    rs += r.plan[i * 64 + j];
                    cs += r.plan[j * 64 + i];
                }
                row += std::fabs(rs - a[i]);
                col += std::fabs(cs - b[i]);
            }
            CHECK(row < 1e-6);
            CHECK(col < 1e-6);
            CHECK(r.marginal_error < 1e-6);
            for (std::size_t k = 1; k < r.marginal_history.size(); ++k) {
                CHECK(r.marginal_history[k] <= r.marginal_history[k - 1] * (1.0 + 1e-9) + 1e-15);
            }
        }
    }
    SUBCASE("contract errors") {
        std::vector<double> a = {0.5, 0.5}, z = {0.0, 0.0}, neg = {1.5, -0.5};
        CHECK_THROWS_AS(sinkhorn_plan(a, z, cost_matrix(1, 2), SinkhornConfig{}), ContractError);
        CHECK_THROWS_AS(sinkhorn_plan(neg, a, cost_matrix(1, 2), SinkhornConfig{}), ContractError);
        CHECK_THROWS_AS(sinkhorn_plan(a, a, cost_matrix(2, 2), SinkhornConfig{}), DimensionError);
    }
}

TEST_CASE("ot loss against the permutation oracle") {
    SinkhornConfig cfg;
    cfg.epsilon = 1e-3;
    cfg.max_iters = 20000;
    cfg.tol = 1e-10;
    const std::size_t h = 2, w = 3;
    int instances = 0;
    double worst = 0;
    for (std::size_t n = 1; n <= 4; ++n) {
        const auto sets = oracle::subsets(h * w, n);
        for (std::size_t i = 0; i < sets.size(); i += 3) {
            for (std::size_t j = 0; j < sets.size(); j += 5) {
                const double exact = oracle::uniform_ot(sets[i], sets[j], h, w);
                const double got = ot_loss(indicator(sets[i], h, w), indicator(sets[j], h, w), cfg).item();
                const double err = std::fabs(got - exact) / std::max(exact, 1e-12);
                if (exact > 0) worst = std::max(worst, err);
                else CHECK(got < 1e-9);
                ++instances;
            }
        }
    }
    CHECK(instances > 50);
    CHECK(worst < 0.02);
}

TEST_CASE("ot loss properties") {
    SUBCASE("self transport shrinks with epsilon") {
        const Tensor d = rand_map(4, 4, 7);
        double prev = 1e9;
        for (double eps : {0.1, 0.03, 0.01}) {
            SinkhornConfig cfg;
            cfg.epsilon = eps;
            cfg.max_iters = 2000;
            const double v = ot_loss(d, d, cfg).item();
            CHECK(v < prev);
            prev = v;
        }
        CHECK(prev < 0.02);
    }
    SUBCASE("1x2 shift costs the full unit") {
        SinkhornConfig cfg;
        cfg.epsilon = 1e-3;
        CHECK(ot_loss(Tensor::from({1, 2}, {0, 1}), Tensor::from({1, 2}, {1, 0}), cfg).item() ==
              doctest::Approx(1.0).epsilon(1e-9));
    }
    SUBCASE("scale invariance") {
        const Tensor p = rand_map(3, 3, 8), g = rand_map(3, 3, 9);
        SinkhornConfig cfg;
        CHECK(ot_loss(ops::scale(p, 4.0), g, cfg).item() == doctest::Approx(ot_loss(p, g, cfg).item()).epsilon(1e-9));
    }
    SUBCASE("empty maps") {
        CHECK(ot_loss(Tensor::zeros({2, 2}), rand_map(2, 2, 1), SinkhornConfig{}).item() == 0.0);
        CHECK(ot_loss(rand_map(2, 2, 1), Tensor::zeros({2, 2}), SinkhornConfig{}).item() == 0.0);
    }
    SUBCASE("gradient through unrolled iterations") {
        SinkhornConfig cfg;
        cfg.tol = 0.0;
        cfg.max_iters = 80;
        cfg.epsilon = 0.05;
        Tensor p = rand_map(3, 3, 10, true);
        const Tensor g = rand_map(3, 3, 11);
        CHECK(check_gradient([&] { return ot_loss(p, g, cfg); }, p).relative_error < 1e-3);
    }
}

TEST_CASE("total loss") {
    const Tensor gt = Tensor::from({2, 2}, {2, 0, 1, 1});
    const Tensor pred = rand_map(2, 2, 12);
    const std::vector<Tensor> aux = {rand_map(2, 2, 13), rand_map(2, 2, 14)};
    SinkhornConfig sk;

    SUBCASE("all weights zero and no taps is the count loss") {
        LossWeights w{0.0, 0.0, 0.0, 1.0, true};
        auto t = total_loss(pred, {}, gt, Tensor::scalar(3.0), w, sk);
        CHECK(t.value.item() == count_loss(pred, gt).item());
        CHECK(t.breakdown.total == t.value.item());
    }
    SUBCASE("perfect prediction is zero") {
        LossWeights w;
        auto t = total_loss(gt, {gt}, gt, Tensor::scalar(4.0), w, sk);
        CHECK(std::fabs(t.value.item()) < 1e-9);
        CHECK(t.breakdown.count == 0.0);
        CHECK(t.breakdown.tv == 0.0);
        CHECK(t.breakdown.rtm == 0.0);
    }
    SUBCASE("term by term") {
        LossWeights w;
        const Tensor est = Tensor::scalar(2.5);
        auto t = total_loss(pred, aux, gt, est, w, sk);
        auto ld = [&](const Tensor& d) {
            return count_loss(d, gt).item() + w.ot * ot_loss(d, gt, sk).item() + w.tv * tv_loss(d, gt).item();
        };
        const double expect = ld(pred) + w.rtm * rtm_loss(est, 4.0).item() + w.aux * (ld(aux[0]) + ld(aux[1]));
        CHECK(t.value.item() == doctest::Approx(expect).epsilon(1e-12));
        REQUIRE(t.breakdown.aux.size() == 2);
        CHECK(t.breakdown.aux[1] == doctest::Approx(ld(aux[1])).epsilon(1e-12));
        CHECK(t.breakdown.rtm == doctest::Approx(1.5));
    }
    SUBCASE("negative weight") {
        LossWeights w;
        w.tv = -1;
        CHECK_THROWS_AS(w.validate(), ConfigError);
    }
}

TEST_CASE("metrics") {
    const std::vector<double> p = {5, 10}, g = {4, 12};
    Metrics m = compute_metrics(p, g);
    CHECK(std::fabs(m.mae - 1.5) < 1e-10);
    CHECK(std::fabs(m.mse - std::sqrt(2.5)) < 1e-10);
    CHECK(std::fabs(m.nae - (0.25 + 2.0 / 12.0) / 2.0) < 1e-10);

    Metrics z = compute_metrics(g, g);
    CHECK(z.mae == 0.0);
    CHECK(z.mse == 0.0);
    CHECK(z.nae == 0.0);

    const std::vector<double> one_p = {3.5}, one_g = {7};
    Metrics s = compute_metrics(one_p, one_g);
    CHECK(s.mae == 3.5);
    CHECK(s.mse == 3.5);

    const std::vector<double> zp = {1, 2}, zg = {0, 4};
    Metrics e = compute_metrics(zp, zg);
    CHECK(e.nae_excluded == 1);
    CHECK(e.nae == 0.5);

    std::mt19937_64 rng(3);
    std::normal_distribution<double> n(0.0, 5.0);
    for (int t = 0; t < 20; ++t) {
        std::vector<double> a(7), b(7);
        for (int i = 0; i < 7; ++i) {
            a[i] = 20 + n(rng);
            b[i] = 20 + n(rng);
        }
        Metrics r = compute_metrics(a, b);
        CHECK(r.mse >= r.mae - 1e-12);
    }
    const std::vector<double> empty;
    CHECK_THROWS_AS(compute_metrics(empty, empty), ContractError);
    CHECK_THROWS_AS(compute_metrics(p, one_g), ContractError);
}

TEST_CASE("overfitting one fixed sample does not increase the loss for 50 steps") {
    ModelConfig mc;
    CrowdModel model(mc, 1);
    SceneConfig sc;
    const Scene scene = generate_scene(42, sc);
    const CrowdSample s = make_sample("x", render(scene), scene.dots(), 4);
    AdamState adam{AdamConfig{}};
    LossWeights w;
    SinkhornConfig sk;
    const TransportGrid grid(16, 16);
    double prev = 1e300;
    for (int step = 0; step < 50; ++step) {
        model.parameters().zero_grad();
        const ModelOutput out = model.forward(s.image);
        TotalLoss l = total_loss(out.density, out.aux_density, s.gt, out.count_estimate, w, sk, &grid);
        CHECK(l.value.item() <= prev);
        prev = l.value.item();
        backward(l.value);
        adam_step(model.parameters(), adam);
    }
}
