#pragma once

// Forward integration for every model variant. The interval structure does
// the heavy lifting: on [k*tau, k*tau+tau] all piecewise-constant delayed
// arguments are frozen at stored grid states, so each interval is an ordinary
// ODE in the current state. When the field has no current-state argument at
// all it is constant on the interval and one exact affine step suffices.
//
// The stepping core is shared, via an Ops parameter, between plain tensor
// integration and recording the whole solve onto an autodiff tape. Both paths
// therefore execute structurally identical arithmetic, which is what lets the
// interval adjoint match backpropagation-through-the-solver to machine
// precision.

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pcdde/autodiff.hpp"
#include "pcdde/field.hpp"
#include "pcdde/tensor.hpp"

namespace pcdde {

enum class ModelKind : std::uint8_t {
    Node,
    Ndde,
    Anode,
    NpcddeSimple,
    NpcddeSkip,
    NpcddeGeneric,
    Unpcdde,
};

enum class Integrator : std::uint8_t { Euler, Rk4, ExactConstantField };

inline std::string kind_name(ModelKind k) {
    switch (k) {
        case ModelKind::Node: return "NODE";
        case ModelKind::Ndde: return "NDDE";
        case ModelKind::Anode: return "ANODE";
        case ModelKind::NpcddeSimple: return "NPCDDE_simple";
        case ModelKind::NpcddeSkip: return "NPCDDE_skip";
        case ModelKind::NpcddeGeneric: return "NPCDDE_generic";
        case ModelKind::Unpcdde: return "UNPCDDE";
    }
    return "?";
}

inline ModelKind kind_from_name(const std::string& s) {
    if (s == "NODE") return ModelKind::Node;
    if (s == "NDDE") return ModelKind::Ndde;
    if (s == "ANODE") return ModelKind::Anode;
    if (s == "NPCDDE_simple") return ModelKind::NpcddeSimple;
    if (s == "NPCDDE_skip") return ModelKind::NpcddeSkip;
    if (s == "NPCDDE_generic") return ModelKind::NpcddeGeneric;
    if (s == "UNPCDDE") return ModelKind::Unpcdde;
    throw std::invalid_argument("unknown model kind \"" + s + "\"");
}

inline std::string integrator_name(Integrator i) {
    switch (i) {
        case Integrator::Euler: return "euler";
        case Integrator::Rk4: return "rk4";
        case Integrator::ExactConstantField: return "exact_constant_field";
    }
    return "?";
}

inline Integrator integrator_from_name(const std::string& s) {
    if (s == "euler") return Integrator::Euler;
    if (s == "rk4") return Integrator::Rk4;
    if (s == "exact_constant_field") return Integrator::ExactConstantField;
    throw std::invalid_argument("unknown integrator \"" + s + "\"");
}

// One field argument. Delayed j means the grid state z((k-j)*tau) on interval
// k, with negative indices resolving to the input (constant history).
// DenseDelay is the NDDE argument z(t-tau), looked up at the substep node and
// held for the step's stages.
struct ArgSpec {
    enum class Role : std::uint8_t { Current, Delayed, DenseDelay };
    Role role = Role::Current;
    std::size_t delay = 0;
};

struct ModelSpec {
    ModelKind kind = ModelKind::Node;
    double tau = 1.0;
    std::size_t n_intervals = 1;  // T = n_intervals * tau
    std::size_t substeps = 20;    // per interval; ignored by exact_constant_field
    Integrator integrator = Integrator::Rk4;
    std::size_t state_dim = 1;    // full integration dimension (data + augment)
    std::size_t augment_dim = 0;  // ANODE only
    std::size_t delay_args = 1;   // NPCDDE_generic / UNPCDDE: frozen grid arguments
    bool use_current = true;      // UNPCDDE only: include z(t) as an argument
    std::vector<MlpParams> params;  // one shared set, or n_intervals sets for UNPCDDE

    std::size_t data_dim() const { return state_dim - augment_dim; }
    double horizon() const { return tau * static_cast<double>(n_intervals); }
};

inline std::vector<ArgSpec> arg_specs(const ModelSpec& spec) {
    using Role = ArgSpec::Role;
    std::vector<ArgSpec> out;
    switch (spec.kind) {
        case ModelKind::Node:
        case ModelKind::Anode: out.push_back({Role::Current, 0}); break;
        case ModelKind::Ndde:
            out.push_back({Role::Current, 0});
            out.push_back({Role::DenseDelay, 0});
            break;
        case ModelKind::NpcddeSimple: out.push_back({Role::Delayed, 0}); break;
        case ModelKind::NpcddeSkip:
            out.push_back({Role::Delayed, 0});
            out.push_back({Role::Delayed, 1});
            break;
        case ModelKind::NpcddeGeneric:
            out.push_back({Role::Current, 0});
            for (std::size_t j = 0; j < spec.delay_args; ++j) out.push_back({Role::Delayed, j});
            break;
        case ModelKind::Unpcdde:
            if (spec.use_current) out.push_back({Role::Current, 0});
            for (std::size_t j = 0; j < spec.delay_args; ++j) out.push_back({Role::Delayed, j});
            break;
    }
    return out;
}

inline bool has_current_arg(const ModelSpec& spec) {
    for (const ArgSpec& a : arg_specs(spec))
        if (a.role != ArgSpec::Role::Delayed) return true;
    return false;
}

inline const MlpParams& param_set(const ModelSpec& spec, std::size_t interval) {
    return spec.params[spec.kind == ModelKind::Unpcdde ? interval : 0];
}

// Grid/field consistency checks shared by forward, the tape recorder and the
// adjoint. Throws std::invalid_argument on the first violation.
inline void validate(const ModelSpec& spec, bool check_params = true) {
    if (!(spec.tau > 0.0)) throw std::invalid_argument("ModelSpec: tau must be positive");
    if (spec.n_intervals == 0) throw std::invalid_argument("ModelSpec: n_intervals must be positive");
    if (spec.substeps == 0) throw std::invalid_argument("ModelSpec: substeps must be positive");
    if (spec.state_dim == 0) throw std::invalid_argument("ModelSpec: state_dim must be positive");
    if (spec.kind == ModelKind::Anode) {
        if (spec.augment_dim == 0)
            throw std::invalid_argument("ModelSpec: ANODE needs augment_dim >= 1");
        if (spec.augment_dim >= spec.state_dim)
            throw std::invalid_argument("ModelSpec: augment_dim must leave at least one data dimension");
    } else if (spec.augment_dim != 0) {
        throw std::invalid_argument("ModelSpec: augment_dim is only valid for ANODE");
    }
    if (spec.integrator == Integrator::ExactConstantField && has_current_arg(spec))
        throw std::invalid_argument(
            "ModelSpec: exact_constant_field requires a field with frozen arguments only");
    if (check_params) {
        std::size_t want = spec.kind == ModelKind::Unpcdde ? spec.n_intervals : 1;
        if (spec.params.size() != want)
            throw std::invalid_argument("ModelSpec: expected " + std::to_string(want) +
                                        " parameter sets, got " + std::to_string(spec.params.size()));
        std::size_t in_dim = spec.state_dim * arg_specs(spec).size();
        for (const MlpParams& p : spec.params) {
            if (p.in_dim() != in_dim)
                throw std::invalid_argument("ModelSpec: field expects input dim " +
                                            std::to_string(p.in_dim()) + ", arguments provide " +
                                            std::to_string(in_dim));
            if (p.out_dim() != spec.state_dim)
                throw std::invalid_argument("ModelSpec: field output dim " +
                                            std::to_string(p.out_dim()) + " != state dim " +
                                            std::to_string(spec.state_dim));
        }
    }
}

// ---------------------------------------------------------------------------
// Solve grid
// ---------------------------------------------------------------------------

struct SolveGrid {
    double tau = 1.0;
    std::size_t n = 1;  // intervals
    std::size_t m = 1;  // substeps per interval
    double h = 1.0;     // tau / m

    std::size_t node_count() const { return n * m + 1; }
    double node_time(std::size_t i) const { return static_cast<double>(i) * h; }
};

inline SolveGrid grid_for(const ModelSpec& spec) {
    SolveGrid g;
    g.tau = spec.tau;
    g.n = spec.n_intervals;
    g.m = spec.integrator == Integrator::ExactConstantField ? 1 : spec.substeps;
    g.h = spec.tau / static_cast<double>(g.m);
    return g;
}

// Snaps a time to its substep node index; rejects times off the grid.
inline std::size_t substep_index(const SolveGrid& grid, double t) {
    double ratio = t / grid.h;
    auto i = static_cast<long long>(std::llround(ratio));
    if (i < 0 || static_cast<std::size_t>(i) >= grid.node_count() ||
        std::abs(static_cast<double>(i) * grid.h - t) > 1e-9)
        throw std::invalid_argument("time " + std::to_string(t) +
                                    " is not on the solver grid (h = " + std::to_string(grid.h) + ")");
    return static_cast<std::size_t>(i);
}

struct NonFiniteError : std::runtime_error {
    std::size_t interval;
    std::size_t substep;
    NonFiniteError(std::size_t k, std::size_t s)
        : std::runtime_error("non-finite state at interval " + std::to_string(k) + ", substep " +
                             std::to_string(s)),
          interval(k),
          substep(s) {}
};

// ---------------------------------------------------------------------------
// Stepping core
// ---------------------------------------------------------------------------

template <typename V>
struct Rk4Stages {
    V u2, u3, u4;      // stage states (stage 1 uses the step's start state)
    V k1, k2, k3, k4;  // stage derivatives
    V z_next;
};

// ff(stage_state) evaluates the field with all frozen arguments already bound.
template <typename Ops, typename FF>
Rk4Stages<typename Ops::Value> rk4_stages(Ops& ops, const typename Ops::Value& z, double h, FF&& ff) {
    Rk4Stages<typename Ops::Value> st;
    st.k1 = ff(z);
    st.u2 = ops.add(z, ops.scale(st.k1, h / 2.0));
    st.k2 = ff(st.u2);
    st.u3 = ops.add(z, ops.scale(st.k2, h / 2.0));
    st.k3 = ff(st.u3);
    st.u4 = ops.add(z, ops.scale(st.k3, h));
    st.k4 = ff(st.u4);
    auto sum = ops.add(ops.add(ops.add(st.k1, ops.scale(st.k2, 2.0)), ops.scale(st.k3, 2.0)), st.k4);
    st.z_next = ops.add(z, ops.scale(sum, h / 6.0));
    return st;
}

// Integrates the full horizon, returning one state per substep node
// (n*m + 1 entries, nodes[0] == z0). Ops supplies the value algebra and the
// field; this is the single stepping implementation for tensors and tapes.
template <typename Ops>
std::vector<typename Ops::Value> solve_nodes(const ModelSpec& spec, const SolveGrid& grid,
                                             const typename Ops::Value& z0, Ops& ops) {
    using V = typename Ops::Value;
    const std::vector<ArgSpec> specs = arg_specs(spec);
    const bool euler_like = spec.integrator != Integrator::Rk4;

    std::vector<V> nodes;
    nodes.reserve(grid.node_count());
    nodes.push_back(z0);

    std::vector<V> args(specs.size());
    for (std::size_t k = 0; k < grid.n; ++k) {
        for (std::size_t ai = 0; ai < specs.size(); ++ai)
            if (specs[ai].role == ArgSpec::Role::Delayed) {
                std::size_t j = specs[ai].delay;
                args[ai] = nodes[k >= j ? (k - j) * grid.m : 0];
            }
        for (std::size_t s = 0; s < grid.m; ++s) {
            std::size_t i = k * grid.m + s;
            for (std::size_t ai = 0; ai < specs.size(); ++ai)
                if (specs[ai].role == ArgSpec::Role::DenseDelay)
                    args[ai] = nodes[i >= grid.m ? i - grid.m : 0];

            auto ff = [&](const V& u) {
                for (std::size_t ai = 0; ai < specs.size(); ++ai)
                    if (specs[ai].role == ArgSpec::Role::Current) args[ai] = u;
                return ops.field(k, std::span<const V>(args));
            };

            V next = euler_like ? ops.add(nodes[i], ops.scale(ff(nodes[i]), grid.h))
                                : rk4_stages(ops, nodes[i], grid.h, ff).z_next;
            ops.check(next, k, s);
            nodes.push_back(std::move(next));
        }
    }
    return nodes;
}

// ---------------------------------------------------------------------------
// Tensor path
// ---------------------------------------------------------------------------

struct TensorAlgebra {
    using Value = Tensor;
    static Tensor add(const Tensor& a, const Tensor& b) { return pcdde::add(a, b); }
    static Tensor scale(const Tensor& a, double c) { return pcdde::scale(a, c); }
    static void check(const Tensor& v, std::size_t k, std::size_t s) {
        if (!v.all_finite()) throw NonFiniteError(k, s);
    }
};

template <typename FieldFn>
struct FieldOps : TensorAlgebra {
    FieldFn field_fn;
    Tensor field(std::size_t interval, std::span<const Tensor> args) { return field_fn(interval, args); }
};

// One interval with every delayed argument already bound into field_frozen.
// Returns the substep states including both endpoints. exact_constant_field
// takes a single affine step z0 + (t1-t0)*c, valid when the field is constant
// over the interval.
template <typename F>
std::vector<Tensor> integrate_interval(F&& field_frozen, const Tensor& z0, double t0, double t1,
                                       std::size_t substeps, Integrator integ) {
    if (!(t1 > t0)) throw std::invalid_argument("integrate_interval: need t1 > t0");
    if (substeps == 0) throw std::invalid_argument("integrate_interval: substeps must be positive");
    std::size_t m = integ == Integrator::ExactConstantField ? 1 : substeps;
    double h = (t1 - t0) / static_cast<double>(m);

    TensorAlgebra ops;
    std::vector<Tensor> nodes;
    nodes.reserve(m + 1);
    nodes.push_back(z0);
    for (std::size_t s = 0; s < m; ++s) {
        const Tensor& z = nodes.back();
        Tensor next = integ == Integrator::Rk4
                          ? rk4_stages(ops, z, h, field_frozen).z_next
                          : add(z, scale(field_frozen(z), h));
        TensorAlgebra::check(next, 0, s);
        nodes.push_back(std::move(next));
    }
    return nodes;
}

struct ForwardRecord {
    SolveGrid grid;
    std::vector<Tensor> nodes;
    std::vector<std::size_t> observation_indices;

    const Tensor& state(std::size_t i) const { return nodes.at(i); }
    const Tensor& grid_state(std::size_t k) const { return nodes.at(k * grid.m); }
    const Tensor& final_state() const { return nodes.back(); }
    double time_of(std::size_t i) const { return grid.node_time(i); }
};

// Pads the raw input with zeros when the model integrates an augmented state.
// Accepts a vector or a column-batched matrix.
inline Tensor initial_state(const ModelSpec& spec, const Tensor& x) {
    if (x.rows() != spec.data_dim())
        throw std::invalid_argument("input has " + std::to_string(x.rows()) + " rows, model expects " +
                                    std::to_string(spec.data_dim()));
    if (spec.augment_dim == 0) return x;
    Tensor pad = x.rank() == 2 ? Tensor::zeros({spec.augment_dim, x.cols()})
                               : Tensor::zeros({spec.augment_dim});
    return concat({x, pad});
}

// Drops augmented components again.
inline Tensor project_state(const ModelSpec& spec, const Tensor& z) {
    if (spec.augment_dim == 0) return z;
    return slice(z, 0, spec.data_dim());
}

inline std::vector<std::size_t> snap_observation_times(const SolveGrid& grid,
                                                       std::span<const double> times) {
    std::vector<std::size_t> out;
    out.reserve(times.size());
    for (double t : times) out.push_back(substep_index(grid, t));
    return out;
}

// Integration with a caller-supplied field (interval index, bound arguments)
// -> derivative. Used by tests and by simulations with known dynamics.
template <typename FieldFn>
ForwardRecord forward_custom(const ModelSpec& spec, const Tensor& x, FieldFn&& field) {
    validate(spec, /*check_params=*/false);
    ForwardRecord rec;
    rec.grid = grid_for(spec);
    FieldOps<FieldFn&> ops{{}, field};
    rec.nodes = solve_nodes(spec, rec.grid, initial_state(spec, x), ops);
    return rec;
}

inline ForwardRecord forward(const ModelSpec& spec, const Tensor& x,
                             std::span<const double> observation_times = {}) {
    validate(spec);
    ForwardRecord rec;
    rec.grid = grid_for(spec);
    auto field = [&spec](std::size_t k, std::span<const Tensor> args) {
        return mlp_eval(param_set(spec, k), args);
    };
    FieldOps<decltype(field)&> ops{{}, field};
    rec.nodes = solve_nodes(spec, rec.grid, initial_state(spec, x), ops);
    rec.observation_indices = snap_observation_times(rec.grid, observation_times);
    return rec;
}

// ---------------------------------------------------------------------------
// Tape path: the identical solve recorded for end-to-end backpropagation
// ---------------------------------------------------------------------------

struct TapeForward {
    Tape tape;
    SolveGrid grid;
    ValueId input_id = 0;                          // the raw (pre-augment) input
    std::vector<std::vector<ValueId>> param_ids;   // per parameter set, param_tensors order
    std::vector<ValueId> node_ids;                 // one per substep node
};

namespace detail {

struct TapeOps {
    using Value = ValueId;
    Tape& tape;
    const ModelSpec& spec;
    const std::vector<std::vector<ValueId>>& param_ids;

    ValueId add(ValueId a, ValueId b) { return tape.add(a, b); }
    ValueId scale(ValueId a, double c) { return tape.scale(a, c); }
    ValueId field(std::size_t interval, std::span<const ValueId> args) {
        std::size_t set = spec.kind == ModelKind::Unpcdde ? interval : 0;
        return mlp_graph(tape, param_set(spec, interval), param_ids[set], args);
    }
    void check(ValueId v, std::size_t k, std::size_t s) const {
        if (!tape.value(v).all_finite()) throw NonFiniteError(k, s);
    }
};

}  // namespace detail

inline TapeForward forward_tape(const ModelSpec& spec, const Tensor& x) {
    validate(spec);
    TapeForward tf;
    tf.grid = grid_for(spec);
    tf.input_id = tf.tape.input(x);

    ValueId z0 = tf.input_id;
    if (spec.augment_dim > 0) {
        if (x.rows() != spec.data_dim())
            throw std::invalid_argument("input has " + std::to_string(x.rows()) +
                                        " rows, model expects " + std::to_string(spec.data_dim()));
        Tensor pad = x.rank() == 2 ? Tensor::zeros({spec.augment_dim, x.cols()})
                                   : Tensor::zeros({spec.augment_dim});
        z0 = tf.tape.concat({tf.input_id, tf.tape.constant(pad)});
    }

    tf.param_ids.reserve(spec.params.size());
    for (const MlpParams& p : spec.params) {
        std::vector<ValueId> ids;
        for (const Tensor& t : param_tensors(p)) ids.push_back(tf.tape.input(t));
        tf.param_ids.push_back(std::move(ids));
    }

    detail::TapeOps ops{tf.tape, spec, tf.param_ids};
    tf.node_ids = solve_nodes(spec, tf.grid, z0, ops);
    return tf;
}

}  // namespace pcdde
