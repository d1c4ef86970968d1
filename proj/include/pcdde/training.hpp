#pragma once

// Losses, optimizers, and the training loop. Models whose gradients the
// interval-wise adjoint covers are trained through it; dense-delay and
// augmented models go through the whole-solve tape. Everything is
// deterministic given the config seed, including minibatch draws and the
// divergence-restart path.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pcdde/adjoint.hpp"
#include "pcdde/field.hpp"
#include "pcdde/solver.hpp"
#include "pcdde/tensor.hpp"

namespace pcdde {

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

struct MseResult {
    double value = 0.0;
    Tensor grad;
};

inline MseResult mse_loss(const Tensor& pred, const Tensor& target) {
    check_same_shape("mse_loss", pred, target);
    if (pred.size() == 0) throw std::invalid_argument("mse_loss: empty operands");
    const double n = static_cast<double>(pred.size());
    MseResult out;
    out.grad = Tensor::zeros(pred.shape());
    for (std::size_t i = 0; i < pred.size(); ++i) {
        double d = pred[i] - target[i];
        out.value += d * d / n;
        out.grad.values()[i] = 2.0 * d / n;
    }
    return out;
}

// MSE pooled over several observation tensors: one mean over every element,
// so each time contributes in proportion to its element count.
struct PooledMse {
    double value = 0.0;
    std::vector<Tensor> grads;
};

inline PooledMse mse_loss_pooled(std::span<const Tensor> preds, std::span<const Tensor> targets) {
    if (preds.size() != targets.size() || preds.empty())
        throw std::invalid_argument("mse_loss_pooled: need matching, nonempty prediction/target lists");
    std::size_t total = 0;
    for (std::size_t t = 0; t < preds.size(); ++t) {
        check_same_shape("mse_loss_pooled", preds[t], targets[t]);
        total += preds[t].size();
    }
    const double n = static_cast<double>(total);
    PooledMse out;
    for (std::size_t t = 0; t < preds.size(); ++t) {
        Tensor g = Tensor::zeros(preds[t].shape());
        for (std::size_t i = 0; i < preds[t].size(); ++i) {
            double d = preds[t][i] - targets[t][i];
            out.value += d * d / n;
            g.values()[i] = 2.0 * d / n;
        }
        out.grads.push_back(std::move(g));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Optimizers over flat tensor lists
// ---------------------------------------------------------------------------

struct AdamState {
    std::vector<Tensor> m, v;
    std::size_t step = 0;
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

inline void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
                      AdamState& state, double lr) {
    if (params.size() != grads.size())
        throw std::invalid_argument("adam_step: param/grad count mismatch");
    if (state.m.empty()) {
        for (const Tensor& p : params) {
            state.m.push_back(Tensor::zeros(p.shape()));
            state.v.push_back(Tensor::zeros(p.shape()));
        }
    }
    if (state.m.size() != params.size())
        throw std::invalid_argument("adam_step: state size mismatch");
    state.step += 1;
    const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        check_same_shape("adam_step", params[i], grads[i]);
        double* p = params[i].values().data();
        double* m = state.m[i].values().data();
        double* v = state.v[i].values().data();
        const double* g = grads[i].data();
        for (std::size_t j = 0; j < params[i].size(); ++j) {
            m[j] = kAdamBeta1 * m[j] + (1.0 - kAdamBeta1) * g[j];
            v[j] = kAdamBeta2 * v[j] + (1.0 - kAdamBeta2) * g[j] * g[j];
            double mhat = m[j] / c1;
            double vhat = v[j] / c2;
            p[j] -= lr * mhat / (std::sqrt(vhat) + kAdamEps);
        }
    }
}

inline void sgd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, double lr) {
    if (params.size() != grads.size())
        throw std::invalid_argument("sgd_step: param/grad count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        check_same_shape("sgd_step", params[i], grads[i]);
        axpy_in_place(params[i], -lr, grads[i]);
    }
}

// ---------------------------------------------------------------------------
// Datasets and the optional affine readout head
// ---------------------------------------------------------------------------

// Targets live at grid-aligned observation times; targets[t] pairs with
// times[t]. Batched datasets put examples in columns.
struct Dataset {
    Tensor inputs;
    std::vector<double> times;
    std::vector<Tensor> targets;
};

// y = w z + c applied to the projected final-state block. Used by the
// classification task; regression tasks read the state directly.
struct AffineReadout {
    Tensor w;  // [out x data_dim]
    Tensor c;  // [out]
};

inline Tensor apply_readout(const AffineReadout& r, const Tensor& z) {
    Tensor y = matmul(r.w, z);
    if (y.rank() == 2) {
        add_bias_columns(y, r.c);
    } else {
        y = add(y, r.c);
    }
    return y;
}

enum class OptimizerKind { Adam, Sgd };
enum class GradMethod { Auto, Adjoint, Bptt };

struct TrainConfig {
    OptimizerKind optimizer = OptimizerKind::Adam;
    double learning_rate = 0.01;
    std::size_t iterations = 3000;
    std::size_t batch_size = 0;  // 0 = full batch
    std::uint64_t seed = 0;
    GradMethod method = GradMethod::Auto;
    std::size_t log_every = 1;   // history row cadence; the final step is always logged
    std::size_t max_retries = 2; // divergence restarts before aborting
};

struct TrainHistory {
    std::vector<std::size_t> steps;
    std::vector<double> train_loss;
    std::vector<std::string> test_names;           // empty when no test evaluation
    std::vector<std::vector<double>> test_loss;    // aligned with steps when present
};

struct TrainResult {
    ModelSpec spec;
    std::optional<AffineReadout> readout;
    TrainHistory history;
    std::size_t retries = 0;
    double final_loss = 0.0;
};

// Evaluated at every logged history row; returns one value per name.
struct TestEval {
    std::vector<std::string> names;
    std::function<std::vector<double>(const ModelSpec&, const std::optional<AffineReadout>&)> fn;
};

struct TrainingDivergence : std::runtime_error {
    explicit TrainingDivergence(std::size_t at_step)
        : std::runtime_error("training diverged at step " + std::to_string(at_step) +
                             "; retries exhausted"),
          step(at_step) {}
    std::size_t step;
};

// ---------------------------------------------------------------------------
// Forward evaluation and loss gradients
// ---------------------------------------------------------------------------

inline std::vector<Tensor> predict(const ModelSpec& spec, const std::optional<AffineReadout>& readout,
                                   const Tensor& inputs, std::span<const double> times) {
    ForwardRecord rec = forward(spec, inputs, times);
    std::vector<Tensor> preds;
    preds.reserve(times.size());
    for (std::size_t oi : rec.observation_indices) {
        Tensor z = project_state(spec, rec.state(oi));
        preds.push_back(readout ? apply_readout(*readout, z) : std::move(z));
    }
    return preds;
}

inline double evaluate_loss(const ModelSpec& spec, const std::optional<AffineReadout>& readout,
                            const Dataset& data) {
    std::vector<Tensor> preds = predict(spec, readout, data.inputs, data.times);
    return mse_loss_pooled(preds, data.targets).value;
}

namespace detail {

inline GradMethod resolve_method(GradMethod m, ModelKind kind) {
    if (m != GradMethod::Auto) return m;
    return (kind == ModelKind::Ndde || kind == ModelKind::Anode) ? GradMethod::Bptt
                                                                 : GradMethod::Adjoint;
}

// Lifts a loss gradient on the projected data block to a cotangent on the
// full integration state.
inline Tensor lift_to_state(const ModelSpec& spec, const Tensor& g_data, const Tensor& state) {
    if (spec.augment_dim == 0) return g_data;
    Tensor zeros = state.rank() == 2 ? Tensor::zeros({spec.augment_dim, state.cols()})
                                     : Tensor::zeros({spec.augment_dim});
    return concat({g_data, zeros});
}

struct LossGrads {
    double value = 0.0;
    std::vector<std::pair<double, Tensor>> state_cots;  // per observation time
    std::optional<AffineReadout> readout_grads;
};

inline LossGrads loss_grads_at(const ModelSpec& spec, const std::optional<AffineReadout>& readout,
                               const ForwardRecord& rec, std::span<const double> times,
                               std::span<const Tensor> targets) {
    std::vector<Tensor> zs, preds;
    for (std::size_t oi : rec.observation_indices) {
        zs.push_back(project_state(spec, rec.state(oi)));
        preds.push_back(readout ? apply_readout(*readout, zs.back()) : zs.back());
    }
    PooledMse mse = mse_loss_pooled(preds, targets);

    LossGrads out;
    out.value = mse.value;
    if (readout) {
        out.readout_grads = AffineReadout{Tensor::zeros(readout->w.shape()),
                                          Tensor::zeros(readout->c.shape())};
    }
    for (std::size_t t = 0; t < times.size(); ++t) {
        Tensor g_data;
        if (readout) {
            const Tensor& gy = mse.grads[t];
            add_in_place(out.readout_grads->w,
                         outer_grad(gy, zs[t], readout->w.rows(), readout->w.cols()));
            add_in_place(out.readout_grads->c, gy.rank() == 2 ? row_sums(gy) : gy);
            g_data = matmul_transposed_left(readout->w, gy);
        } else {
            g_data = mse.grads[t];
        }
        out.state_cots.emplace_back(times[t],
                                    lift_to_state(spec, g_data, rec.state(rec.observation_indices[t])));
    }
    return out;
}

}  // namespace detail

// One full gradient evaluation on the given batch: loss value, parameter
// gradients per set, and readout gradients when a readout is attached.
struct BatchGrads {
    double loss = 0.0;
    std::vector<MlpGrads> param_grads;
    std::optional<AffineReadout> readout_grads;
};

inline BatchGrads loss_and_grads(const ModelSpec& spec, const std::optional<AffineReadout>& readout,
                                 const Tensor& inputs, std::span<const double> times,
                                 std::span<const Tensor> targets, GradMethod method) {
    GradMethod m = detail::resolve_method(method, spec.kind);
    ForwardRecord rec = forward(spec, inputs, times);
    detail::LossGrads lg = detail::loss_grads_at(spec, readout, rec, times, targets);

    BackwardResult back = m == GradMethod::Adjoint
                              ? backward(spec, rec, lg.state_cots)
                              : grads_via_bptt(spec, inputs, lg.state_cots);

    BatchGrads out;
    out.loss = lg.value;
    out.param_grads = std::move(back.param_grads);
    out.readout_grads = std::move(lg.readout_grads);
    return out;
}

// ---------------------------------------------------------------------------
// Flat parameter packing: every model tensor, then readout w and c
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<Tensor> pack_params(const ModelSpec& spec,
                                       const std::optional<AffineReadout>& readout) {
    std::vector<Tensor> flat;
    for (const MlpParams& p : spec.params) {
        std::vector<Tensor> ts = param_tensors(p);
        flat.insert(flat.end(), ts.begin(), ts.end());
    }
    if (readout) {
        flat.push_back(readout->w);
        flat.push_back(readout->c);
    }
    return flat;
}

inline void unpack_params(ModelSpec& spec, std::optional<AffineReadout>& readout,
                          const std::vector<Tensor>& flat) {
    std::size_t i = 0;
    for (MlpParams& p : spec.params) {
        std::size_t count = param_tensors(p).size();
        std::vector<Tensor> ts(flat.begin() + static_cast<std::ptrdiff_t>(i),
                               flat.begin() + static_cast<std::ptrdiff_t>(i + count));
        set_param_tensors(p, ts);
        i += count;
    }
    if (readout) {
        readout->w = flat[i++];
        readout->c = flat[i++];
    }
    if (i != flat.size()) throw std::invalid_argument("unpack_params: tensor count mismatch");
}

inline std::vector<Tensor> pack_grads(const ModelSpec& spec, const BatchGrads& bg) {
    std::vector<Tensor> flat;
    for (std::size_t s = 0; s < spec.params.size(); ++s)
        for (std::size_t l = 0; l < bg.param_grads[s].layers.size(); ++l) {
            flat.push_back(bg.param_grads[s].layers[l].weight);
            if (bg.param_grads[s].layers[l].bias) flat.push_back(*bg.param_grads[s].layers[l].bias);
        }
    if (bg.readout_grads) {
        flat.push_back(bg.readout_grads->w);
        flat.push_back(bg.readout_grads->c);
    }
    return flat;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

// Runs `iterations` optimizer steps. On a non-finite loss (or a non-finite
// state during the solve) the loop restores the most recent state whose loss
// was finite, halves the learning rate, and resumes; after max_retries such
// restarts it aborts with the diverging step index.
inline TrainResult train(const ModelSpec& init, const TrainConfig& cfg, const Dataset& data,
                         std::optional<AffineReadout> readout = std::nullopt,
                         const TestEval* test_eval = nullptr,
                         const std::function<void(std::size_t, double, const ModelSpec&,
                                                  const std::optional<AffineReadout>&)>& on_step = {}) {
    validate(init);
    if (data.times.size() != data.targets.size() || data.times.empty())
        throw std::invalid_argument("train: dataset needs matching times and targets");
    if (cfg.batch_size > 0 && data.inputs.rank() != 2)
        throw std::invalid_argument("train: minibatch training needs batched (matrix) inputs");

    TrainResult res;
    res.spec = init;
    res.readout = std::move(readout);
    if (test_eval) res.history.test_names = test_eval->names;

    Rng rng(cfg.seed);
    AdamState opt_state;
    double lr = cfg.learning_rate;

    struct Checkpoint {
        std::vector<Tensor> params;
        AdamState opt;
        Rng rng;
        std::size_t next_step;
        std::size_t history_rows;
    };
    Checkpoint ckpt{detail::pack_params(res.spec, res.readout), opt_state, rng, 1,
                    res.history.steps.size()};
    std::size_t retries = 0;

    std::size_t step = 1;
    while (step <= cfg.iterations) {
        Tensor batch_inputs = data.inputs;
        std::vector<Tensor> batch_targets = data.targets;
        if (cfg.batch_size > 0 && cfg.batch_size < data.inputs.cols()) {
            std::vector<std::size_t> idx(cfg.batch_size);
            for (std::size_t& v : idx) v = rng.index(data.inputs.cols());
            batch_inputs = gather_columns(data.inputs, idx);
            for (Tensor& t : batch_targets) t = gather_columns(t, idx);
        }

        double loss = 0.0;
        bool finite = true;
        BatchGrads bg;
        try {
            bg = loss_and_grads(res.spec, res.readout, batch_inputs, data.times, batch_targets,
                                cfg.method);
            loss = bg.loss;
            finite = std::isfinite(loss);
        } catch (const NonFiniteError&) {
            finite = false;
        }

        if (!finite) {
            if (retries >= cfg.max_retries) throw TrainingDivergence(step);
            ++retries;
            lr /= 2.0;
            detail::unpack_params(res.spec, res.readout, ckpt.params);
            opt_state = ckpt.opt;
            rng = ckpt.rng;
            step = ckpt.next_step;
            res.history.steps.resize(ckpt.history_rows);
            res.history.train_loss.resize(ckpt.history_rows);
            if (test_eval) res.history.test_loss.resize(ckpt.history_rows);
            continue;
        }

        // This state produced a finite loss: it becomes the restart point.
        ckpt = Checkpoint{detail::pack_params(res.spec, res.readout), opt_state, rng, step,
                          res.history.steps.size()};

        std::vector<Tensor> flat = detail::pack_params(res.spec, res.readout);
        std::vector<Tensor> grads = detail::pack_grads(res.spec, bg);
        if (cfg.optimizer == OptimizerKind::Adam) {
            adam_step(flat, grads, opt_state, lr);
        } else {
            sgd_step(flat, grads, lr);
        }
        detail::unpack_params(res.spec, res.readout, flat);

        res.final_loss = loss;
        if (cfg.log_every > 0 && (step % cfg.log_every == 0 || step == cfg.iterations)) {
            res.history.steps.push_back(step);
            res.history.train_loss.push_back(loss);
            if (test_eval) res.history.test_loss.push_back(test_eval->fn(res.spec, res.readout));
        }
        if (on_step) on_step(step, loss, res.spec, res.readout);
        ++step;
    }

    res.retries = retries;
    return res;
}

}  // namespace pcdde
