#pragma once

// Interval-wise adjoint gradients. The backward pass walks the stored substep
// nodes from T to 0, replaying each step's stages from the checkpointed start
// state and transposing them. Because the replay executes the exact stage
// arithmetic of the forward solve, the result is the gradient of the
// discretized computation itself, not a separately discretized continuous
// adjoint; agreement with backpropagation through the recorded tape is then a
// matter of floating-point summation order only.
//
// Frozen delayed arguments give rise to the characteristic jump structure:
// while processing interval k, the gradient flowing to a frozen grid state
// z(l*tau) is parked in pending_grid[l] and only folded into the running
// adjoint when the walk reaches l*tau. The constant history makes every
// pre-initial index alias grid index 0, so those contributions reach the
// input gradient automatically.
//
// Dense delays (NDDE) are outside this scheme; train those models through
// grads_via_bptt, which differentiates the recorded solve directly and serves
// as the oracle for everything here.

#include <cstddef>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pcdde/autodiff.hpp"
#include "pcdde/field.hpp"
#include "pcdde/solver.hpp"
#include "pcdde/tensor.hpp"

namespace pcdde {

struct BackwardResult {
    std::vector<MlpGrads> param_grads;      // one per parameter set
    Tensor input_grad;                      // w.r.t. the raw (pre-augment) input
    std::vector<Tensor> grid_contributions; // pending_grid[l] at consumption time
};

class AdjointAccumulator {
public:
    AdjointAccumulator(const ModelSpec& spec, const ForwardRecord& rec)
        : spec_(&spec), rec_(&rec), args_(arg_specs(spec)) {
        if (spec.kind == ModelKind::Ndde)
            throw std::invalid_argument(
                "adjoint backward does not cover dense delayed arguments; use grads_via_bptt");
        validate(spec);
        grid_ = rec.grid;
        if (rec.nodes.size() != grid_.node_count())
            throw std::invalid_argument("forward record has " + std::to_string(rec.nodes.size()) +
                                        " nodes, grid expects " +
                                        std::to_string(grid_.node_count()));
        cursor_ = grid_.n * grid_.m;
        a_ = Tensor::zeros(rec.final_state().shape());
        pending_.reserve(grid_.n + 1);
        consumed_.resize(grid_.n + 1);
        for (std::size_t k = 0; k <= grid_.n; ++k)
            pending_.push_back(Tensor::zeros(rec.grid_state(k).shape()));
        for (const MlpParams& p : spec.params) param_grads_.push_back(zero_grads(p));
        for (std::size_t ai = 0; ai < args_.size(); ++ai)
            if (args_[ai].role == ArgSpec::Role::Current) current_slot_ = static_cast<std::ptrdiff_t>(ai);
        consume_boundary();
    }

    std::size_t cursor() const { return cursor_; }
    double cursor_time() const { return grid_.node_time(cursor_); }
    const Tensor& a_current() const { return a_; }
    const Tensor& pending_grid(std::size_t k) const { return pending_.at(k); }

    // Adds a loss cotangent for the state at time t. The backward cursor must
    // currently sit on that node.
    void accumulate_observation(double t, const Tensor& g) {
        std::size_t idx = substep_index(grid_, t);
        if (idx != cursor_)
            throw std::invalid_argument("observation at t=" + std::to_string(t) +
                                        " is out of order; backward cursor is at t=" +
                                        std::to_string(cursor_time()));
        check_same_shape("accumulate_observation", a_, g);
        add_in_place(a_, g);
    }

    // Transposes one substep, moving the cursor one node toward t=0 and
    // folding in any delay-grid contribution waiting at the new position.
    void step_back() {
        if (cursor_ == 0) throw std::logic_error("step_back: cursor already at t=0");
        std::size_t k = (cursor_ - 1) / grid_.m;
        std::size_t s = (cursor_ - 1) % grid_.m;
        backward_step(k, s);
        --cursor_;
        consume_boundary();
    }

    BackwardResult finish() {
        if (cursor_ != 0) throw std::logic_error("finish: backward cursor has not reached t=0");
        BackwardResult out;
        out.param_grads = std::move(param_grads_);
        out.input_grad = spec_->augment_dim > 0 ? slice(a_, 0, spec_->data_dim()) : a_;
        out.grid_contributions = std::move(consumed_);
        return out;
    }

private:
    void consume_boundary() {
        if (cursor_ % grid_.m != 0) return;
        std::size_t k = cursor_ / grid_.m;
        consumed_[k] = pending_[k];
        add_in_place(a_, pending_[k]);
    }

    // Accumulates one stage's field gradients: parameters into the interval's
    // set, frozen delayed arguments into pending_grid.
    void route(const FieldGrads& fg, std::size_t k) {
        std::size_t set = spec_->kind == ModelKind::Unpcdde ? k : 0;
        accumulate_grads(param_grads_[set], fg.params);
        for (std::size_t ai = 0; ai < args_.size(); ++ai)
            if (args_[ai].role == ArgSpec::Role::Delayed) {
                std::size_t j = args_[ai].delay;
                add_in_place(pending_[k >= j ? k - j : 0], fg.args[ai]);
            }
    }

    void backward_step(std::size_t k, std::size_t s) {
        const double h = grid_.h;
        const Tensor& z = rec_->nodes[k * grid_.m + s];
        const MlpParams& p = param_set(*spec_, k);

        std::vector<Tensor> stage_args(args_.size());
        for (std::size_t ai = 0; ai < args_.size(); ++ai)
            if (args_[ai].role == ArgSpec::Role::Delayed) {
                std::size_t j = args_[ai].delay;
                stage_args[ai] = rec_->nodes[(k >= j ? k - j : 0) * grid_.m];
            }

        std::vector<MlpTrace> traces;
        traces.reserve(4);
        auto ff = [&](const Tensor& u) {
            if (current_slot_ >= 0) stage_args[static_cast<std::size_t>(current_slot_)] = u;
            traces.push_back(mlp_forward(p, stage_args));
            return traces.back().output();
        };

        const Tensor& g = a_;
        Tensor gz = g;

        if (spec_->integrator == Integrator::Rk4) {
            TensorAlgebra alg;
            rk4_stages(alg, z, h, ff);  // repopulates the forward stages and traces

            Tensor gbase = scale(g, h / 6.0);
            Tensor gk1 = gbase;
            Tensor gk2 = scale(gbase, 2.0);
            Tensor gk3 = scale(gbase, 2.0);
            Tensor gk4 = gbase;

            FieldGrads f4 = mlp_vjp(p, traces[3], gk4);
            route(f4, k);
            if (current_slot_ >= 0) {
                const Tensor& gu4 = f4.args[static_cast<std::size_t>(current_slot_)];
                add_in_place(gz, gu4);
                add_in_place(gk3, scale(gu4, h));
            }
            FieldGrads f3 = mlp_vjp(p, traces[2], gk3);
            route(f3, k);
            if (current_slot_ >= 0) {
                const Tensor& gu3 = f3.args[static_cast<std::size_t>(current_slot_)];
                add_in_place(gz, gu3);
                add_in_place(gk2, scale(gu3, h / 2.0));
            }
            FieldGrads f2 = mlp_vjp(p, traces[1], gk2);
            route(f2, k);
            if (current_slot_ >= 0) {
                const Tensor& gu2 = f2.args[static_cast<std::size_t>(current_slot_)];
                add_in_place(gz, gu2);
                add_in_place(gk1, scale(gu2, h / 2.0));
            }
            FieldGrads f1 = mlp_vjp(p, traces[0], gk1);
            route(f1, k);
            if (current_slot_ >= 0) add_in_place(gz, f1.args[static_cast<std::size_t>(current_slot_)]);
        } else {
            ff(z);
            Tensor gk1 = scale(g, h);
            FieldGrads f1 = mlp_vjp(p, traces[0], gk1);
            route(f1, k);
            if (current_slot_ >= 0) add_in_place(gz, f1.args[static_cast<std::size_t>(current_slot_)]);
        }

        a_ = std::move(gz);
    }

    const ModelSpec* spec_;
    const ForwardRecord* rec_;
    std::vector<ArgSpec> args_;
    SolveGrid grid_;
    std::size_t cursor_ = 0;
    std::ptrdiff_t current_slot_ = -1;
    Tensor a_;
    std::vector<Tensor> pending_;
    std::vector<Tensor> consumed_;
    std::vector<MlpGrads> param_grads_;
};

// Loss cotangents are given per observation time and apply to the full
// integration state at that node. Duplicate times are summed.
inline BackwardResult backward(const ModelSpec& spec, const ForwardRecord& rec,
                               std::span<const std::pair<double, Tensor>> loss_grads) {
    AdjointAccumulator acc(spec, rec);
    std::map<std::size_t, Tensor> by_node;
    for (const auto& [t, g] : loss_grads) {
        std::size_t idx = substep_index(rec.grid, t);
        check_same_shape("backward loss gradient", rec.state(idx), g);
        auto [it, fresh] = by_node.try_emplace(idx, g);
        if (!fresh) add_in_place(it->second, g);
    }
    for (std::size_t i = rec.grid.n * rec.grid.m;; --i) {
        auto it = by_node.find(i);
        if (it != by_node.end()) acc.accumulate_observation(rec.time_of(i), it->second);
        if (i == 0) break;
        acc.step_back();
    }
    return acc.finish();
}

inline BackwardResult backward(const ModelSpec& spec, const ForwardRecord& rec,
                               std::initializer_list<std::pair<double, Tensor>> loss_grads) {
    std::vector<std::pair<double, Tensor>> v(loss_grads);
    return backward(spec, rec, std::span<const std::pair<double, Tensor>>(v));
}

// ---------------------------------------------------------------------------
// Discretize-then-optimize oracle: one tape over the entire solve
// ---------------------------------------------------------------------------

inline BackwardResult grads_via_bptt(const ModelSpec& spec, const Tensor& x,
                                     std::span<const std::pair<double, Tensor>> loss_grads) {
    TapeForward tf = forward_tape(spec, x);
    std::vector<std::pair<ValueId, Tensor>> seeds;
    seeds.reserve(loss_grads.size());
    for (const auto& [t, g] : loss_grads) {
        std::size_t idx = substep_index(tf.grid, t);
        check_same_shape("bptt loss gradient", tf.tape.value(tf.node_ids[idx]), g);
        seeds.emplace_back(tf.node_ids[idx], g);
    }
    std::vector<Tensor> grads = vjp_all(tf.tape, seeds);

    BackwardResult out;
    out.param_grads.reserve(spec.params.size());
    for (std::size_t set = 0; set < spec.params.size(); ++set) {
        MlpGrads mg;
        std::size_t pi = 0;
        for (const MlpLayer& l : spec.params[set].layers) {
            MlpLayer gl;
            gl.weight = grads[tf.param_ids[set][pi++]];
            if (l.bias) gl.bias = grads[tf.param_ids[set][pi++]];
            mg.layers.push_back(std::move(gl));
        }
        out.param_grads.push_back(std::move(mg));
    }
    out.input_grad = grads[tf.input_id];
    return out;
}

inline BackwardResult grads_via_bptt(const ModelSpec& spec, const Tensor& x,
                                     std::initializer_list<std::pair<double, Tensor>> loss_grads) {
    std::vector<std::pair<double, Tensor>> v(loss_grads);
    return grads_via_bptt(spec, x, std::span<const std::pair<double, Tensor>>(v));
}

// ---------------------------------------------------------------------------
// Comparison helpers shared by the test suite and the gradient-check command
// ---------------------------------------------------------------------------

// L = sum_i <g_i, z(t_i)> for fixed cotangents; the scalar whose exact
// gradient backward/grads_via_bptt compute. Finite differences of this value
// provide the third, independent oracle.
inline double cotangent_loss(const ModelSpec& spec, const Tensor& x,
                             std::span<const std::pair<double, Tensor>> loss_grads) {
    ForwardRecord rec = forward(spec, x);
    double loss = 0.0;
    for (const auto& [t, g] : loss_grads) loss += dot(g, rec.state(substep_index(rec.grid, t)));
    return loss;
}

// Worst relative disagreement over every parameter tensor and the input
// gradient.
inline double backward_rel_error(const BackwardResult& a, const BackwardResult& b) {
    if (a.param_grads.size() != b.param_grads.size())
        throw std::invalid_argument("backward_rel_error: parameter set count mismatch");
    double worst = gradient_rel_error(a.input_grad, b.input_grad);
    for (std::size_t s = 0; s < a.param_grads.size(); ++s) {
        const auto& la = a.param_grads[s].layers;
        const auto& lb = b.param_grads[s].layers;
        if (la.size() != lb.size())
            throw std::invalid_argument("backward_rel_error: layer count mismatch");
        for (std::size_t l = 0; l < la.size(); ++l) {
            worst = std::max(worst, gradient_rel_error(la[l].weight, lb[l].weight));
            if (la[l].bias) worst = std::max(worst, gradient_rel_error(*la[l].bias, *lb[l].bias));
        }
    }
    return worst;
}

}  // namespace pcdde
