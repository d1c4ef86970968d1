#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstddef>
#include <vector>

#include "pcdde/dynamics.hpp"
#include "pcdde/solver.hpp"

using namespace pcdde;

// ===========================================================================
// Exact population flow
// ===========================================================================

TEST_CASE("population flow pinned values") {
    CHECK(population_exact(2.0, 1.0, 0.0) == 1.0);
    CHECK(population_exact(0.7, 1.0, 5.3) == 1.0);  // 1 is a fixed point of flow and map
    CHECK(population_exact(2.0, 0.5, 0.5) == Catch::Approx(0.5 * std::exp(0.5)).epsilon(1e-12));
    CHECK(population_exact(2.0, 0.5, 0.5) == Catch::Approx(0.824361).margin(5e-7));
    CHECK(population_exact(2.0, 0.5, 1.0) == Catch::Approx(0.5 * std::exp(1.0)).epsilon(1e-12));
    CHECK(population_exact(2.0, 0.5, 1.0) == Catch::Approx(1.359141).margin(5e-7));
}

TEST_CASE("population flow argument and overflow errors") {
    CHECK_THROWS_AS(population_exact(0.0, 0.5, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(population_exact(2.0, -0.1, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(population_exact(2.0, 0.5, -1.0), std::invalid_argument);
    CHECK_THROWS_AS(population_exact(1500.0, 0.5, 1.0), std::overflow_error);
}

TEST_CASE("integer-time samples equal the map iterates") {
    Rng rng(11);
    for (int c = 0; c < 1000; ++c) {
        double a = rng.uniform(0.3, 3.3);
        double x0 = rng.uniform(0.1, 2.0);
        std::size_t k = 1 + rng.index(10);
        std::vector<double> it = map_iterate(a, x0, k);
        double flow = population_exact(a, x0, static_cast<double>(k));
        REQUIRE(std::abs(flow - it[k]) <= 1e-12);
    }
}

// ===========================================================================
// Induced map
// ===========================================================================

TEST_CASE("map fixed point and maximum") {
    CHECK(map_fa(0.7, 1.0) == 1.0);
    CHECK(map_fa(3.2, 1.0) == 1.0);
    double a = 2.3;
    CHECK(map_fa(a, 1.0 / a) == Catch::Approx((1.0 / a) * std::exp(a - 1.0)).epsilon(1e-14));
}

TEST_CASE("map is unimodal: increasing below 1/a, decreasing above") {
    for (double a : {0.8, 2.0, 3.2}) {
        double xstar = 1.0 / a;
        double prev = map_fa(a, 0.0);
        for (double x = 0.01; x <= xstar + 1e-9; x += 0.01) {
            double cur = map_fa(a, x);
            REQUIRE(cur > prev);
            prev = cur;
        }
        prev = map_fa(a, xstar);
        for (double x = xstar + 0.01; x <= 4.0; x += 0.01) {
            double cur = map_fa(a, x);
            REQUIRE(cur < prev);
            prev = cur;
        }
    }
}

TEST_CASE("critical point returns to itself in three steps at the period-3 parameter") {
    const double a_star = 3.11670;
    double x0 = 1.0 / a_star;
    std::vector<double> it = map_iterate(a_star, x0, 3);
    CHECK(std::abs(it[3] - x0) < 1e-3);
}

TEST_CASE("period detection across regimes") {
    CHECK(detect_period(0.5, 0.5, 8, 500, 1e-3) == 1);
    CHECK(detect_period(3.11670, 1.0 / 3.11670, 8, 500, 1e-3) == 3);
    // At a = 3.2 the attractor is a stable period-36 orbit (the sum of
    // log-derivatives around the cycle is -2.99). Short recurrences stay
    // far above 1e-6, while the long scan finds the converged cycle.
    CHECK_FALSE(detect_period(3.2, 0.3, 8, 500, 1e-6).has_value());
    CHECK(detect_period(3.2, 0.3, 64, 500, 1e-6) == 36);
    CHECK_THROWS_AS(detect_period(2.0, 0.5, 8, 0, 0.0), std::invalid_argument);
}

// ===========================================================================
// Solver versus the closed form
// ===========================================================================

TEST_CASE("generic model with the true logistic field tracks the exact flow") {
    const double a = 2.0;
    ModelSpec spec;
    spec.kind = ModelKind::NpcddeGeneric;
    spec.tau = 1.0;
    spec.n_intervals = 3;
    spec.substeps = 20;
    spec.integrator = Integrator::Rk4;
    spec.state_dim = 1;
    spec.delay_args = 1;
    spec.use_current = true;

    auto field = [a](std::size_t, std::span<const Tensor> args) {
        return Tensor::vector({a * args[0][0] * (1.0 - args[1][0])});
    };

    for (double x0 : {0.4, 0.9, 1.3, 1.6}) {
        ForwardRecord rec = forward_custom(spec, Tensor::vector({x0}), field);
        for (std::size_t i = 0; i < rec.grid.node_count(); ++i) {
            double t = rec.time_of(i);
            REQUIRE(std::abs(rec.state(i)[0] - population_exact(a, x0, t)) < 1e-6);
        }
    }
}

// ===========================================================================
// Population dataset
// ===========================================================================

TEST_CASE("population dataset shapes, continuity, and boundedness") {
    PopulationDataset ds = gen_population_dataset(2.0, 100, 4242);
    REQUIRE(ds.train.size() == 100);
    REQUIRE(ds.test.size() == 100);
    double sup = 0.0;
    for (std::size_t i = 0; i < 100; ++i) {
        REQUIRE(ds.train[i].t.size() == 31);
        REQUIRE(ds.train[i].x.size() == 31);
        REQUIRE(ds.test[i].t.size() == 100);
        REQUIRE(ds.test[i].x.size() == 100);
        CHECK(ds.train[i].t.front() == 0.0);
        CHECK(ds.train[i].t.back() == Catch::Approx(3.0).margin(1e-12));
        CHECK(ds.test[i].t.front() == Catch::Approx(3.1).margin(1e-12));
        CHECK(ds.test[i].t.back() == Catch::Approx(13.0).margin(1e-12));

        // One exact interval step from the last train state gives the first
        // test sample: the trajectory continues, nothing restarts.
        double x3 = ds.train[i].x.back();
        double expect = x3 * std::exp(2.0 * (1.0 - x3) * 0.1);
        CHECK(ds.test[i].x.front() == Catch::Approx(expect).epsilon(1e-12));

        for (double v : ds.train[i].x) sup = std::max(sup, v);
        for (double v : ds.test[i].x) sup = std::max(sup, v);
        CHECK(ds.train[i].x.front() >= 0.1);
        CHECK(ds.train[i].x.front() <= 2.0);
    }
    CHECK(sup < 5.0);

    PopulationDataset again = gen_population_dataset(2.0, 100, 4242);
    CHECK(again.train[57].x[13] == ds.train[57].x[13]);
}

// ===========================================================================
// Annuli dataset
// ===========================================================================

TEST_CASE("annuli dataset respects the class geometry") {
    AnnuliSpec spec;  // r1=1 < r2=2 < r3=3, 512 per class
    spec.seed = 7;
    AnnuliDataset ds = gen_annuli(spec);
    REQUIRE(ds.points.shape() == std::vector<std::size_t>{2, 1024});
    REQUIRE(ds.labels.size() == 1024);

    std::size_t neg = 0, pos = 0;
    double min_outer = 1e300, max_outer = 0.0, max_inner = 0.0;
    for (std::size_t i = 0; i < 1024; ++i) {
        double r = std::hypot(ds.points.at(0, i), ds.points.at(1, i));
        REQUIRE((ds.labels[i] == 1.0 || ds.labels[i] == -1.0));
        if (ds.labels[i] < 0) {
            ++neg;
            max_inner = std::max(max_inner, r);
        } else {
            ++pos;
            min_outer = std::min(min_outer, r);
            max_outer = std::max(max_outer, r);
        }
        REQUIRE(!(r > spec.r1 + 1e-12 && r < spec.r2 - 1e-12));  // the gap stays empty
    }
    CHECK(neg == 512);
    CHECK(pos == 512);
    CHECK(max_inner <= spec.r1 + 1e-12);
    CHECK(min_outer >= spec.r2 - 1e-12);
    CHECK(max_outer <= spec.r3 + 1e-12);

    // Uniform by area: half the annulus points lie inside the equal-area
    // radius sqrt((r2^2+r3^2)/2), up to sampling noise.
    double r_half = std::sqrt((spec.r2 * spec.r2 + spec.r3 * spec.r3) / 2.0);
    std::size_t inside = 0;
    for (std::size_t i = 512; i < 1024; ++i)
        if (std::hypot(ds.points.at(0, i), ds.points.at(1, i)) <= r_half) ++inside;
    CHECK(inside > 205);
    CHECK(inside < 307);

    AnnuliDataset again = gen_annuli(spec);
    CHECK(max_abs_diff(again.points, ds.points) == 0.0);

    AnnuliSpec bad = spec;
    bad.r2 = 0.5;
    CHECK_THROWS_AS(gen_annuli(bad), std::invalid_argument);
    bad = spec;
    bad.per_class = 0;
    CHECK_THROWS_AS(gen_annuli(bad), std::invalid_argument);
}

// ===========================================================================
// Linear pairs
// ===========================================================================

TEST_CASE("linear dataset pins the 16x pairs") {
    auto [xs, ys] = gen_linear_dataset(16.0, {1.0, 0.0, -0.5});
    REQUIRE(xs.shape() == std::vector<std::size_t>{1, 3});
    CHECK(ys.at(0, 0) == 16.0);
    CHECK(ys.at(0, 1) == 0.0);
    CHECK(ys.at(0, 2) == -8.0);
}
