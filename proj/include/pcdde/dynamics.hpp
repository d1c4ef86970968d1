#pragma once

// Ground truth for the experiments: the scalar population model with a
// piecewise-frozen logistic field, its induced integer-time map, periodic
// orbit detection, and the synthetic dataset generators.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pcdde/tensor.hpp"

namespace pcdde {

// ---------------------------------------------------------------------------
// Population model: dx/dt = a x(t) (1 - x(floor(t)))
// ---------------------------------------------------------------------------

// On [k, k+1) the field is linear in x with frozen coefficient (1 - x_k), so
// the flow is exact: x(t) = x_k exp(a (1 - x_k)(t - k)).
inline double population_exact(double a, double x0, double t) {
    if (a <= 0.0) throw std::invalid_argument("population_exact: a must be positive");
    if (x0 < 0.0) throw std::invalid_argument("population_exact: x0 must be nonnegative");
    if (t < 0.0) throw std::invalid_argument("population_exact: t must be nonnegative");
    double xk = x0;
    double k = 0.0;
    while (k + 1.0 <= t) {
        xk = xk * std::exp(a * (1.0 - xk));
        k += 1.0;
        if (!std::isfinite(xk))
            throw std::overflow_error("population_exact: state overflow at t=" + std::to_string(k));
    }
    double x = xk * std::exp(a * (1.0 - xk) * (t - k));
    if (!std::isfinite(x))
        throw std::overflow_error("population_exact: state overflow at t=" + std::to_string(t));
    return x;
}

// The integer-time samples of the flow: f_a(x) = x e^{a(1-x)}.
inline double map_fa(double a, double x) {
    if (x < 0.0) throw std::invalid_argument("map_fa: x must be nonnegative");
    return x * std::exp(a * (1.0 - x));
}

// n iterates including the starting point: [x0, f(x0), ..., f^n(x0)].
inline std::vector<double> map_iterate(double a, double x0, std::size_t n) {
    std::vector<double> out;
    out.reserve(n + 1);
    out.push_back(x0);
    for (std::size_t i = 0; i < n; ++i) out.push_back(map_fa(a, out.back()));
    return out;
}

// Smallest p <= max_period with |f^p(y) - y| < tol, where y is the orbit
// point after burn_in iterations; nullopt when no period that small fits.
inline std::optional<std::size_t> detect_period(double a, double x0, std::size_t max_period,
                                                std::size_t burn_in, double tol) {
    if (tol <= 0.0) throw std::invalid_argument("detect_period: tol must be positive");
    double y = x0;
    for (std::size_t i = 0; i < burn_in; ++i) y = map_fa(a, y);
    double z = y;
    for (std::size_t p = 1; p <= max_period; ++p) {
        z = map_fa(a, z);
        if (std::abs(z - y) < tol) return p;
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

struct PopulationSeries {
    std::size_t id = 0;
    std::vector<double> t;
    std::vector<double> x;
};

struct PopulationDataset {
    double a = 0.0;
    std::uint64_t seed = 0;
    std::vector<PopulationSeries> train;  // t = 0.0, 0.1, ..., 3.0
    std::vector<PopulationSeries> test;   // t = 3.1, ..., 13.0, same trajectories
};

// n_traj trajectories from x0 ~ U(0.1, 2.0): the training window [0,3]
// sampled every 0.1 (31 points) and the continuation (3,13] (100 points).
inline PopulationDataset gen_population_dataset(double a, std::size_t n_traj, std::uint64_t seed) {
    PopulationDataset ds;
    ds.a = a;
    ds.seed = seed;
    Rng rng(seed);
    for (std::size_t i = 0; i < n_traj; ++i) {
        double x0 = rng.uniform(0.1, 2.0);
        PopulationSeries tr, te;
        tr.id = te.id = i;
        for (std::size_t s = 0; s <= 30; ++s) {
            double t = static_cast<double>(s) * 0.1;
            tr.t.push_back(t);
            tr.x.push_back(population_exact(a, x0, t));
        }
        for (std::size_t s = 31; s <= 130; ++s) {
            double t = static_cast<double>(s) * 0.1;
            te.t.push_back(t);
            te.x.push_back(population_exact(a, x0, t));
        }
        ds.train.push_back(std::move(tr));
        ds.test.push_back(std::move(te));
    }
    return ds;
}

struct AnnuliSpec {
    double r1 = 1.0, r2 = 2.0, r3 = 3.0;
    std::size_t per_class = 512;
    std::uint64_t seed = 0;
};

struct AnnuliDataset {
    Tensor points;               // [2 x N], inner-disk points first
    std::vector<double> labels;  // -1 inside r1, +1 between r2 and r3
};

// Uniform by area on each region: radius via the inverse-cdf transform,
// angle uniform. Inner disk labeled -1, outer annulus +1.
inline AnnuliDataset gen_annuli(const AnnuliSpec& spec) {
    if (!(0.0 < spec.r1 && spec.r1 < spec.r2 && spec.r2 < spec.r3))
        throw std::invalid_argument("gen_annuli: need 0 < r1 < r2 < r3");
    if (spec.per_class == 0) throw std::invalid_argument("gen_annuli: per_class must be positive");
    Rng rng(spec.seed);
    const std::size_t n = 2 * spec.per_class;
    Tensor pts = Tensor::zeros({2, n});
    std::vector<double> labels(n);
    const double two_pi = 6.283185307179586476925286766559;
    for (std::size_t i = 0; i < n; ++i) {
        bool inner = i < spec.per_class;
        double u = rng.uniform();
        double r = inner ? spec.r1 * std::sqrt(u)
                         : std::sqrt(spec.r2 * spec.r2 +
                                     u * (spec.r3 * spec.r3 - spec.r2 * spec.r2));
        double phi = two_pi * rng.uniform();
        pts.at(0, i) = r * std::cos(phi);
        pts.at(1, i) = r * std::sin(phi);
        labels[i] = inner ? -1.0 : 1.0;
    }
    return AnnuliDataset{std::move(pts), std::move(labels)};
}

// Pairs (x, c x) as row tensors, for the linear fitting task.
inline std::pair<Tensor, Tensor> gen_linear_dataset(double c, const std::vector<double>& xs) {
    std::vector<double> ys(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = c * xs[i];
    std::size_t n = xs.size();
    return {Tensor::matrix(1, n, xs), Tensor::matrix(1, n, std::move(ys))};
}

}  // namespace pcdde
