#pragma once

// Vector fields as small dense MLPs. A field maps one or more state-sized
// arguments (current state, frozen grid states, a dense delayed state) to a
// state derivative. Arguments are concatenated along the leading axis, so a
// batch of states stored as columns flows through unchanged.
//
// Two differentiation paths exist and must stay consistent: the hand-written
// mlp_vjp here (used by the interval adjoint) and the tape subgraph built by
// mlp_graph (used when a model is trained by backpropagating through the
// whole unrolled solve). test_vector_field.cpp pins them against each other.

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pcdde/autodiff.hpp"
#include "pcdde/tensor.hpp"

namespace pcdde {

enum class Activation : std::uint8_t { Tanh, Identity, Relu };

inline std::string activation_name(Activation a) {
    switch (a) {
        case Activation::Tanh: return "tanh";
        case Activation::Identity: return "identity";
        case Activation::Relu: return "relu";
    }
    return "?";
}

inline Activation activation_from_name(const std::string& s) {
    if (s == "tanh") return Activation::Tanh;
    if (s == "identity") return Activation::Identity;
    if (s == "relu") return Activation::Relu;
    throw std::invalid_argument("unknown activation \"" + s + "\"");
}

struct MlpLayer {
    Tensor weight;               // [out x in]
    std::optional<Tensor> bias;  // [out]
};

// Hidden layers apply `activation` after their affine map; the last layer is
// always linear.
struct MlpParams {
    std::vector<MlpLayer> layers;
    Activation activation = Activation::Tanh;

    std::size_t in_dim() const { return layers.front().weight.shape()[1]; }
    std::size_t out_dim() const { return layers.back().weight.shape()[0]; }
};

inline std::size_t param_count(const MlpParams& p) {
    std::size_t n = 0;
    for (const MlpLayer& l : p.layers) {
        n += l.weight.size();
        if (l.bias) n += l.bias->size();
    }
    return n;
}

// Parameter tensors in a fixed order (weight, then bias if present, per
// layer). Optimizer state and tape inputs both rely on this order.
inline std::vector<Tensor> param_tensors(const MlpParams& p) {
    std::vector<Tensor> out;
    for (const MlpLayer& l : p.layers) {
        out.push_back(l.weight);
        if (l.bias) out.push_back(*l.bias);
    }
    return out;
}

inline void set_param_tensors(MlpParams& p, std::span<const Tensor> tensors) {
    std::size_t i = 0;
    for (MlpLayer& l : p.layers) {
        l.weight = tensors[i++];
        if (l.bias) l.bias = tensors[i++];
    }
    if (i != tensors.size())
        throw std::invalid_argument("set_param_tensors: expected " + std::to_string(i) +
                                    " tensors, got " + std::to_string(tensors.size()));
}

// Gradient holder mirroring MlpParams layer by layer.
struct MlpGrads {
    std::vector<MlpLayer> layers;
};

inline MlpGrads zero_grads(const MlpParams& p) {
    MlpGrads g;
    g.layers.reserve(p.layers.size());
    for (const MlpLayer& l : p.layers) {
        MlpLayer z;
        z.weight = Tensor::zeros(l.weight.shape());
        if (l.bias) z.bias = Tensor::zeros(l.bias->shape());
        g.layers.push_back(std::move(z));
    }
    return g;
}

inline void accumulate_grads(MlpGrads& into, const MlpGrads& from) {
    if (into.layers.size() != from.layers.size())
        throw std::invalid_argument("accumulate_grads: layer count mismatch");
    for (std::size_t i = 0; i < into.layers.size(); ++i) {
        add_in_place(into.layers[i].weight, from.layers[i].weight);
        if (into.layers[i].bias) add_in_place(*into.layers[i].bias, *from.layers[i].bias);
    }
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

enum class InitScheme : std::uint8_t { Zeros, XavierUniform };

// dims = {in, h1, ..., out}. Xavier draws U(-r, r), r = sqrt(6/(fan_in+fan_out)),
// row-major within a layer, layers front to back; biases start at zero.
inline MlpParams make_mlp(const std::vector<std::size_t>& dims, Activation act, bool with_bias,
                          InitScheme scheme, Rng& rng) {
    if (dims.size() < 2) throw std::invalid_argument("make_mlp: need at least one layer");
    MlpParams p;
    p.activation = act;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        std::size_t in = dims[l], out = dims[l + 1];
        Tensor w = Tensor::zeros({out, in});
        if (scheme == InitScheme::XavierUniform) {
            double r = std::sqrt(6.0 / static_cast<double>(in + out));
            for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-r, r);
        }
        MlpLayer layer;
        layer.weight = std::move(w);
        if (with_bias) layer.bias = Tensor::zeros({out});
        p.layers.push_back(std::move(layer));
    }
    return p;
}

inline MlpParams make_mlp(const std::vector<std::size_t>& dims, Activation act, bool with_bias,
                          InitScheme scheme, std::uint64_t seed) {
    Rng rng(seed);
    return make_mlp(dims, act, with_bias, scheme, rng);
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

// Activations recorded during a forward pass, enough to run mlp_vjp without
// recomputing. inputs[l] feeds layer l; outputs[l] is layer l's result after
// its activation.
struct MlpTrace {
    std::vector<Tensor> inputs;
    std::vector<Tensor> outputs;
    std::vector<std::size_t> arg_rows;
    const Tensor& output() const { return outputs.back(); }
};

inline Tensor apply_activation(Activation act, Tensor z) {
    switch (act) {
        case Activation::Tanh:
            for (std::size_t i = 0; i < z.size(); ++i) z[i] = std::tanh(z[i]);
            return z;
        case Activation::Relu:
            for (std::size_t i = 0; i < z.size(); ++i)
                if (z[i] < 0.0) z[i] = 0.0;
            return z;
        case Activation::Identity: return z;
    }
    return z;
}

inline MlpTrace mlp_forward(const MlpParams& p, std::span<const Tensor> args) {
    MlpTrace tr;
    tr.arg_rows.reserve(args.size());
    for (const Tensor& a : args) tr.arg_rows.push_back(a.rows());

    Tensor a = args.size() == 1 ? args[0] : concat(args);
    if (a.rows() != p.in_dim())
        throw std::invalid_argument("mlp_forward: packed input has " + std::to_string(a.rows()) +
                                    " rows, field expects " + std::to_string(p.in_dim()));
    std::size_t last = p.layers.size() - 1;
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        tr.inputs.push_back(a);
        Tensor z = matmul(p.layers[l].weight, a);
        if (p.layers[l].bias) add_bias_columns(z, *p.layers[l].bias);
        a = l == last ? std::move(z) : apply_activation(p.activation, std::move(z));
        tr.outputs.push_back(a);
    }
    return tr;
}

inline Tensor mlp_eval(const MlpParams& p, std::span<const Tensor> args) {
    return mlp_forward(p, args).output();
}

inline Tensor mlp_eval(const MlpParams& p, std::initializer_list<Tensor> args) {
    std::vector<Tensor> v(args);
    return mlp_eval(p, std::span<const Tensor>(v));
}

struct FieldGrads {
    MlpGrads params;
    std::vector<Tensor> args;
};

inline void activation_backward(Activation act, const Tensor& out, Tensor& g) {
    switch (act) {
        case Activation::Tanh:
            for (std::size_t i = 0; i < g.size(); ++i) g[i] *= 1.0 - out[i] * out[i];
            break;
        case Activation::Relu:
            for (std::size_t i = 0; i < g.size(); ++i)
                if (out[i] <= 0.0) g[i] = 0.0;
            break;
        case Activation::Identity: break;
    }
}

inline FieldGrads mlp_vjp(const MlpParams& p, const MlpTrace& tr, const Tensor& cot) {
    FieldGrads fg;
    fg.params.layers.resize(p.layers.size());
    Tensor g = cot;
    for (std::size_t l = p.layers.size(); l-- > 0;) {
        const MlpLayer& layer = p.layers[l];
        if (l + 1 < p.layers.size()) activation_backward(p.activation, tr.outputs[l], g);
        fg.params.layers[l].weight =
            outer_grad(g, tr.inputs[l], layer.weight.shape()[0], layer.weight.shape()[1]);
        if (layer.bias) fg.params.layers[l].bias = row_sums(g);
        g = matmul_transposed_left(layer.weight, g);
    }
    std::size_t offset = 0;
    fg.args.reserve(tr.arg_rows.size());
    for (std::size_t r : tr.arg_rows) {
        fg.args.push_back(tr.arg_rows.size() == 1 ? g : slice(g, offset, offset + r));
        offset += r;
    }
    return fg;
}

// ---------------------------------------------------------------------------
// Tape subgraph (used by whole-trajectory backpropagation)
// ---------------------------------------------------------------------------

// Emits the same computation onto a tape. param_ids must follow the
// param_tensors order. States may be vectors or column-batched matrices.
inline ValueId mlp_graph(Tape& tape, const MlpParams& p, std::span<const ValueId> param_ids,
                         std::span<const ValueId> args) {
    std::vector<ValueId> parts(args.begin(), args.end());
    ValueId a = parts.size() == 1 ? parts[0] : tape.concat(std::span<const ValueId>(parts));
    std::size_t pi = 0;
    std::size_t last = p.layers.size() - 1;
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        ValueId z = tape.matmul(param_ids[pi++], a);
        if (p.layers[l].bias) z = tape.add_cols(z, param_ids[pi++]);
        if (l != last) {
            switch (p.activation) {
                case Activation::Tanh: z = tape.tanh(z); break;
                case Activation::Relu: z = tape.relu(z); break;
                case Activation::Identity: break;
            }
        }
        a = z;
    }
    if (pi != param_ids.size())
        throw std::invalid_argument("mlp_graph: parameter id count mismatch");
    return a;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline nlohmann::json mlp_to_json(const MlpParams& p) {
    nlohmann::json j;
    j["activation"] = activation_name(p.activation);
    j["layers"] = nlohmann::json::array();
    for (const MlpLayer& l : p.layers) {
        nlohmann::json jl;
        auto rows = nlohmann::json::array();
        std::size_t m = l.weight.shape()[0], n = l.weight.shape()[1];
        for (std::size_t i = 0; i < m; ++i) {
            auto row = nlohmann::json::array();
            for (std::size_t k = 0; k < n; ++k) row.push_back(l.weight.at(i, k));
            rows.push_back(std::move(row));
        }
        jl["w"] = std::move(rows);
        if (l.bias) jl["b"] = l.bias->values();
        j["layers"].push_back(std::move(jl));
    }
    return j;
}

inline MlpParams mlp_from_json(const nlohmann::json& j) {
    MlpParams p;
    p.activation = activation_from_name(j.at("activation").get<std::string>());
    for (const auto& jl : j.at("layers")) {
        const auto& rows = jl.at("w");
        std::size_t m = rows.size();
        if (m == 0) throw std::invalid_argument("mlp_from_json: empty weight matrix");
        std::size_t n = rows[0].size();
        std::vector<double> data;
        data.reserve(m * n);
        for (const auto& row : rows) {
            if (row.size() != n) throw std::invalid_argument("mlp_from_json: ragged weight rows");
            for (const auto& v : row) data.push_back(v.get<double>());
        }
        MlpLayer layer;
        layer.weight = Tensor::matrix(m, n, std::move(data));
        if (jl.contains("b")) layer.bias = Tensor::vector(jl.at("b").get<std::vector<double>>());
        p.layers.push_back(std::move(layer));
    }
    if (p.layers.empty()) throw std::invalid_argument("mlp_from_json: no layers");
    return p;
}

}  // namespace pcdde
