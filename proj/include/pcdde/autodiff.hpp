#pragma once

// Reverse-mode automatic differentiation on an explicit tape. Ops are limited
// to {matmul, add, add_cols, scale, tanh, relu, concat, slice}, which spans
// every MLP vector field and every fixed-step solver update in this library.
// The tape is append-only and immutable once built; vjp never mutates it, so
// distinct tapes can be used from different threads.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pcdde/tensor.hpp"

namespace pcdde {

enum class OpKind : std::uint8_t { Input, Matmul, Add, AddCols, Scale, Tanh, Relu, Concat, Slice };

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::Input: return "input";
        case OpKind::Matmul: return "matmul";
        case OpKind::Add: return "add";
        case OpKind::AddCols: return "add_cols";
        case OpKind::Scale: return "scale";
        case OpKind::Tanh: return "tanh";
        case OpKind::Relu: return "relu";
        case OpKind::Concat: return "concat";
        case OpKind::Slice: return "slice";
    }
    return "?";
}

using ValueId = std::size_t;

struct TapeNode {
    OpKind kind;
    std::vector<ValueId> parents;  // always precede this node
    Tensor value;                  // forward result, saved for the local VJP
    double scalar = 0.0;           // scale factor / slice begin
    std::size_t aux = 0;           // slice end
};

class Tape {
public:
    // Leaf whose gradient vjp reports.
    ValueId input(Tensor value) { return push({OpKind::Input, {}, std::move(value)}); }

    // Leaf treated as a constant: participates in the forward values but
    // receives no gradient slot.
    ValueId constant(Tensor value) {
        ValueId id = push({OpKind::Input, {}, std::move(value)});
        constants_.push_back(id);
        return id;
    }

    ValueId matmul(ValueId a, ValueId b) {
        return push({OpKind::Matmul, {a, b}, pcdde::matmul(value(a), value(b))});
    }
    ValueId add(ValueId a, ValueId b) {
        return push({OpKind::Add, {a, b}, pcdde::add(value(a), value(b))});
    }
    // a is vector or column-batched matrix, b a vector broadcast over columns.
    ValueId add_cols(ValueId a, ValueId b) {
        Tensor v = value(a);
        add_bias_columns(v, value(b));
        return push({OpKind::AddCols, {a, b}, std::move(v)});
    }
    ValueId scale(ValueId a, double c) {
        return push({OpKind::Scale, {a}, pcdde::scale(value(a), c), c});
    }
    ValueId tanh(ValueId a) { return push({OpKind::Tanh, {a}, pcdde::tanh(value(a))}); }
    ValueId relu(ValueId a) { return push({OpKind::Relu, {a}, pcdde::relu(value(a))}); }
    ValueId concat(std::span<const ValueId> parts) {
        std::vector<Tensor> vals;
        vals.reserve(parts.size());
        for (ValueId p : parts) vals.push_back(value(p));
        TapeNode node{OpKind::Concat, {parts.begin(), parts.end()},
                      pcdde::concat(std::span<const Tensor>(vals))};
        return push(std::move(node));
    }
    ValueId concat(std::initializer_list<ValueId> parts) {
        std::vector<ValueId> v(parts);
        return concat(std::span<const ValueId>(v));
    }
    ValueId slice(ValueId a, std::size_t begin, std::size_t end) {
        return push({OpKind::Slice, {a}, pcdde::slice(value(a), begin, end),
                     static_cast<double>(begin), end});
    }

    const Tensor& value(ValueId id) const { return nodes_[id].value; }
    const TapeNode& node(ValueId id) const { return nodes_[id]; }
    std::size_t size() const { return nodes_.size(); }

    std::size_t op_count() const {
        std::size_t n = 0;
        for (const TapeNode& t : nodes_)
            if (t.kind != OpKind::Input) ++n;
        return n;
    }

    bool is_constant(ValueId id) const {
        for (ValueId c : constants_)
            if (c == id) return true;
        return false;
    }

    // Recomputes every non-input node from its parents. Returns the values;
    // used to check that the recorded tape reproduces the forward pass.
    std::vector<Tensor> replay() const {
        std::vector<Tensor> vals(nodes_.size());
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            const TapeNode& n = nodes_[i];
            switch (n.kind) {
                case OpKind::Input: vals[i] = n.value; break;
                case OpKind::Matmul: vals[i] = pcdde::matmul(vals[n.parents[0]], vals[n.parents[1]]); break;
                case OpKind::Add: vals[i] = pcdde::add(vals[n.parents[0]], vals[n.parents[1]]); break;
                case OpKind::AddCols:
                    vals[i] = vals[n.parents[0]];
                    add_bias_columns(vals[i], vals[n.parents[1]]);
                    break;
                case OpKind::Scale: vals[i] = pcdde::scale(vals[n.parents[0]], n.scalar); break;
                case OpKind::Tanh: vals[i] = pcdde::tanh(vals[n.parents[0]]); break;
                case OpKind::Relu: vals[i] = pcdde::relu(vals[n.parents[0]]); break;
                case OpKind::Concat: {
                    std::vector<Tensor> parts;
                    parts.reserve(n.parents.size());
                    for (ValueId p : n.parents) parts.push_back(vals[p]);
                    vals[i] = pcdde::concat(std::span<const Tensor>(parts));
                    break;
                }
                case OpKind::Slice:
                    vals[i] = pcdde::slice(vals[n.parents[0]], static_cast<std::size_t>(n.scalar), n.aux);
                    break;
            }
        }
        return vals;
    }

private:
    ValueId push(TapeNode node) {
        nodes_.push_back(std::move(node));
        return nodes_.size() - 1;
    }

    std::vector<TapeNode> nodes_;
    std::vector<ValueId> constants_;
};

// ---------------------------------------------------------------------------
// Vector-Jacobian products
// ---------------------------------------------------------------------------

// Pulls the given cotangents back through the tape. Seeds may target any
// nodes; the result holds one gradient per node (zero tensors where nothing
// flows). Entry i is d<seeds, outputs>/d node_i.
inline std::vector<Tensor> vjp_all(const Tape& tape,
                                   std::span<const std::pair<ValueId, Tensor>> seeds) {
    std::vector<Tensor> grads(tape.size());
    auto accumulate = [&](ValueId id, const Tensor& g) {
        if (grads[id].empty())
            grads[id] = g;
        else
            add_in_place(grads[id], g);
    };
    for (const auto& [id, cot] : seeds) {
        if (!cot.same_shape(tape.value(id)))
            throw std::invalid_argument("vjp: cotangent shape " + cot.shape_string() +
                                        " does not match value shape " + tape.value(id).shape_string());
        accumulate(id, cot);
    }

    for (std::size_t idx = tape.size(); idx-- > 0;) {
        if (grads[idx].empty()) continue;
        const TapeNode& n = tape.node(idx);
        const Tensor& g = grads[idx];
        switch (n.kind) {
            case OpKind::Input: break;
            case OpKind::Matmul: {
                const Tensor& a = tape.value(n.parents[0]);
                const Tensor& b = tape.value(n.parents[1]);
                accumulate(n.parents[0], outer_grad(g, b, a.shape()[0], a.shape()[1]));
                accumulate(n.parents[1], matmul_transposed_left(a, g));
                break;
            }
            case OpKind::Add:
                accumulate(n.parents[0], g);
                accumulate(n.parents[1], g);
                break;
            case OpKind::AddCols:
                accumulate(n.parents[0], g);
                accumulate(n.parents[1], row_sums(g));
                break;
            case OpKind::Scale: accumulate(n.parents[0], scale(g, n.scalar)); break;
            case OpKind::Tanh: {
                Tensor local = g;
                const Tensor& y = n.value;
                for (std::size_t i = 0; i < local.size(); ++i) local[i] *= 1.0 - y[i] * y[i];
                accumulate(n.parents[0], local);
                break;
            }
            case OpKind::Relu: {
                Tensor local = g;
                const Tensor& x = tape.value(n.parents[0]);
                for (std::size_t i = 0; i < local.size(); ++i)
                    if (x[i] <= 0.0) local[i] = 0.0;
                accumulate(n.parents[0], local);
                break;
            }
            case OpKind::Concat: {
                std::size_t offset = 0;
                for (ValueId p : n.parents) {
                    std::size_t r = tape.value(p).rows();
                    accumulate(p, slice(g, offset, offset + r));
                    offset += r;
                }
                break;
            }
            case OpKind::Slice: {
                const Tensor& parent = tape.value(n.parents[0]);
                Tensor scatter = Tensor::zeros(parent.shape());
                std::size_t begin = static_cast<std::size_t>(n.scalar);
                std::copy(g.values().begin(), g.values().end(),
                          scatter.data() + begin * parent.cols());
                accumulate(n.parents[0], scatter);
                break;
            }
        }
    }

    for (std::size_t i = 0; i < grads.size(); ++i)
        if (grads[i].empty()) grads[i] = Tensor::zeros(tape.value(i).shape());
    return grads;
}

// Recorded expression: a callable over tape value ids, plus the ids of the
// inputs it was built on and the id of its output.
struct Recording {
    Tape tape;
    std::vector<ValueId> input_ids;
    ValueId output_id = 0;
};

using GraphFn = std::function<ValueId(Tape&, std::span<const ValueId>)>;

// Evaluates the expression over the given inputs, recording every op.
inline Recording tape_forward(const GraphFn& graph, std::span<const Tensor> inputs) {
    Recording rec;
    rec.input_ids.reserve(inputs.size());
    for (const Tensor& t : inputs) rec.input_ids.push_back(rec.tape.input(t));
    rec.output_id = graph(rec.tape, rec.input_ids);
    return rec;
}

inline Recording tape_forward(const GraphFn& graph, std::initializer_list<Tensor> inputs) {
    std::vector<Tensor> v(inputs);
    return tape_forward(graph, std::span<const Tensor>(v));
}

// Gradient of <cotangent, output> with respect to each recorded input.
inline std::vector<Tensor> vjp(const Recording& rec, const Tensor& cotangent) {
    std::pair<ValueId, Tensor> seed{rec.output_id, cotangent};
    auto grads = vjp_all(rec.tape, std::span<const std::pair<ValueId, Tensor>>(&seed, 1));
    std::vector<Tensor> out;
    out.reserve(rec.input_ids.size());
    for (ValueId id : rec.input_ids) out.push_back(std::move(grads[id]));
    return out;
}

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

// Central differences, entry i = (f(x + h e_i) - f(x - h e_i)) / 2h.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& scalar_fn,
                               const Tensor& point, double step) {
    if (!(step > 0.0)) throw std::invalid_argument("finite_diff_grad: step must be positive");
    Tensor grad = Tensor::zeros(point.shape());
    Tensor probe = point;
    for (std::size_t i = 0; i < point.size(); ++i) {
        double saved = probe[i];
        probe[i] = saved + step;
        double up = scalar_fn(probe);
        probe[i] = saved - step;
        double down = scalar_fn(probe);
        probe[i] = saved;
        if (!std::isfinite(up) || !std::isfinite(down))
            throw std::runtime_error("finite_diff_grad: non-finite value perturbing coordinate " +
                                     std::to_string(i));
        grad[i] = (up - down) / (2.0 * step);
    }
    return grad;
}

// Relative disagreement between two gradient vectors, normalized by the
// larger magnitude present (with a small floor so all-zero pairs compare
// equal). Used by every gradient cross-check in the suite.
inline double gradient_rel_error(const Tensor& a, const Tensor& b) {
    double scale = std::max({max_abs(a), max_abs(b), 1e-8});
    return max_abs_diff(a, b) / scale;
}

}  // namespace pcdde
