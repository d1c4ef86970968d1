#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "pcdde/field.hpp"

using namespace pcdde;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double s = 0.8) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * s;
    return t;
}

MlpParams random_mlp(const std::vector<std::size_t>& dims, bool with_bias, Rng& rng) {
    MlpParams p = make_mlp(dims, Activation::Tanh, with_bias, InitScheme::XavierUniform, rng);
    if (with_bias)
        for (MlpLayer& l : p.layers)
            for (std::size_t i = 0; i < l.bias->size(); ++i) (*l.bias)[i] = rng.normal() * 0.3;
    return p;
}

}  // namespace

TEST_CASE("make_mlp shapes, zero init, xavier bounds") {
    Rng rng(3);
    MlpParams p = make_mlp({2, 10, 10, 1}, Activation::Tanh, false, InitScheme::XavierUniform, rng);
    REQUIRE(p.layers.size() == 3);
    REQUIRE(p.layers[0].weight.shape() == std::vector<std::size_t>{10, 2});
    REQUIRE(p.layers[1].weight.shape() == std::vector<std::size_t>{10, 10});
    REQUIRE(p.layers[2].weight.shape() == std::vector<std::size_t>{1, 10});
    REQUIRE_FALSE(p.layers[0].bias.has_value());
    REQUIRE(p.in_dim() == 2);
    REQUIRE(p.out_dim() == 1);
    REQUIRE(param_count(p) == 20 + 100 + 10);

    double bound = std::sqrt(6.0 / 20.0);
    for (std::size_t i = 0; i < p.layers[1].weight.size(); ++i) {
        REQUIRE(std::abs(p.layers[1].weight[i]) <= bound);
    }
    REQUIRE(max_abs(p.layers[1].weight) > 0.1 * bound);

    Rng rng2(3);
    MlpParams z = make_mlp({3, 4}, Activation::Identity, true, InitScheme::Zeros, rng2);
    REQUIRE(max_abs(z.layers[0].weight) == 0.0);
    REQUIRE(max_abs(*z.layers[0].bias) == 0.0);
    REQUIRE(param_count(z) == 16);
}

TEST_CASE("make_mlp is deterministic per seed") {
    MlpParams a = make_mlp({4, 8, 4}, Activation::Tanh, false, InitScheme::XavierUniform, 99);
    MlpParams b = make_mlp({4, 8, 4}, Activation::Tanh, false, InitScheme::XavierUniform, 99);
    MlpParams c = make_mlp({4, 8, 4}, Activation::Tanh, false, InitScheme::XavierUniform, 100);
    REQUIRE(max_abs_diff(a.layers[0].weight, b.layers[0].weight) == 0.0);
    REQUIRE(max_abs_diff(a.layers[1].weight, b.layers[1].weight) == 0.0);
    REQUIRE(max_abs_diff(a.layers[0].weight, c.layers[0].weight) > 0.0);
}

TEST_CASE("single affine layer evaluates w z + b") {
    MlpParams p;
    MlpLayer l;
    l.weight = Tensor::matrix(1, 1, {3.0});
    l.bias = Tensor::vector({15.0});
    p.layers.push_back(l);
    p.activation = Activation::Identity;

    Tensor out = mlp_eval(p, {Tensor::vector({2.0})});
    REQUIRE(out[0] == 21.0);
}

TEST_CASE("three layer tanh net matches hand composition") {
    Rng rng(17);
    MlpParams p = random_mlp({2, 10, 10, 2}, false, rng);
    Tensor x = Tensor::vector({0.4, -1.2});

    Tensor hand = matmul(p.layers[2].weight,
                         tanh(matmul(p.layers[1].weight, tanh(matmul(p.layers[0].weight, x)))));
    Tensor got = mlp_eval(p, {x});
    REQUIRE(max_abs_diff(hand, got) == 0.0);
}

TEST_CASE("column-batched evaluation matches per-column evaluation") {
    Rng rng(23);
    MlpParams p = random_mlp({3, 6, 3}, true, rng);

    std::vector<Tensor> cols;
    for (int j = 0; j < 5; ++j) cols.push_back(random_tensor({3}, rng));
    Tensor batch = Tensor::zeros({3, 5});
    for (std::size_t j = 0; j < 5; ++j)
        for (std::size_t i = 0; i < 3; ++i) batch.at(i, j) = cols[j][i];

    Tensor out = mlp_eval(p, {batch});
    REQUIRE(out.shape() == std::vector<std::size_t>{3, 5});
    for (std::size_t j = 0; j < 5; ++j) {
        Tensor single = mlp_eval(p, {cols[j]});
        for (std::size_t i = 0; i < 3; ++i) REQUIRE(out.at(i, j) == single[i]);
    }
}

TEST_CASE("multi-argument packing equals manual concatenation") {
    Rng rng(31);
    MlpParams p = random_mlp({4, 7, 2}, false, rng);
    Tensor z1 = random_tensor({2}, rng);
    Tensor z2 = random_tensor({2}, rng);

    Tensor via_args = mlp_eval(p, {z1, z2});
    Tensor via_concat = mlp_eval(p, {concat({z1, z2})});
    REQUIRE(max_abs_diff(via_args, via_concat) == 0.0);

    REQUIRE_THROWS_WITH(mlp_eval(p, {z1}), Catch::Matchers::ContainsSubstring("rows"));
}

TEST_CASE("vjp splits argument gradients exactly like slicing the packed gradient") {
    Rng rng(37);
    MlpParams p = random_mlp({5, 8, 3}, false, rng);
    Tensor z1 = random_tensor({3}, rng);
    Tensor z2 = random_tensor({2}, rng);
    Tensor cot = random_tensor({3}, rng);

    std::vector<Tensor> args{z1, z2};
    MlpTrace tr = mlp_forward(p, args);
    FieldGrads fg = mlp_vjp(p, tr, cot);
    REQUIRE(fg.args.size() == 2);

    std::vector<Tensor> packed{concat({z1, z2})};
    MlpTrace tr2 = mlp_forward(p, packed);
    FieldGrads fg2 = mlp_vjp(p, tr2, cot);
    Tensor g = fg2.args[0];

    REQUIRE(max_abs_diff(fg.args[0], slice(g, 0, 3)) == 0.0);
    REQUIRE(max_abs_diff(fg.args[1], slice(g, 3, 5)) == 0.0);
}

TEST_CASE("zero weight block makes an argument inert with exactly zero gradient") {
    // First argument wired through an all-zero block: output ignores it and
    // its gradient must vanish identically, not just approximately.
    Rng rng(41);
    MlpParams p = random_mlp({4, 6, 2}, false, rng);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t k = 0; k < 2; ++k) p.layers[0].weight.at(i, k) = 0.0;

    Tensor dummy = random_tensor({2}, rng);
    Tensor live = random_tensor({2}, rng);
    std::vector<Tensor> args{dummy, live};

    Tensor out1 = mlp_eval(p, args);
    std::vector<Tensor> args_moved{random_tensor({2}, rng), live};
    Tensor out2 = mlp_eval(p, args_moved);
    REQUIRE(max_abs_diff(out1, out2) == 0.0);

    MlpTrace tr = mlp_forward(p, args);
    FieldGrads fg = mlp_vjp(p, tr, Tensor::vector({1.0, -1.0}));
    REQUIRE(max_abs(fg.args[0]) == 0.0);
    REQUIRE(max_abs(fg.args[1]) > 0.0);
}

TEST_CASE("hand vjp agrees with the tape graph bitwise") {
    Rng rng(43);
    for (int with_bias = 0; with_bias < 2; ++with_bias) {
        MlpParams p = random_mlp({4, 5, 2}, with_bias != 0, rng);
        Tensor z1 = random_tensor({2}, rng);
        Tensor z2 = random_tensor({2}, rng);
        Tensor cot = random_tensor({2}, rng);

        std::vector<Tensor> args{z1, z2};
        MlpTrace tr = mlp_forward(p, args);
        FieldGrads fg = mlp_vjp(p, tr, cot);

        std::vector<Tensor> inputs = param_tensors(p);
        std::size_t n_params = inputs.size();
        inputs.push_back(z1);
        inputs.push_back(z2);
        auto rec = tape_forward(
            [&](Tape& t, std::span<const ValueId> in) {
                std::span<const ValueId> pids = in.subspan(0, n_params);
                std::span<const ValueId> aids = in.subspan(n_params);
                return mlp_graph(t, p, pids, aids);
            },
            std::span<const Tensor>(inputs));
        REQUIRE(max_abs_diff(rec.tape.value(rec.output_id), tr.output()) == 0.0);

        auto grads = vjp(rec, cot);
        std::size_t gi = 0;
        for (std::size_t l = 0; l < p.layers.size(); ++l) {
            REQUIRE(max_abs_diff(grads[gi++], fg.params.layers[l].weight) == 0.0);
            if (p.layers[l].bias) REQUIRE(max_abs_diff(grads[gi++], *fg.params.layers[l].bias) == 0.0);
        }
        REQUIRE(max_abs_diff(grads[n_params], fg.args[0]) == 0.0);
        REQUIRE(max_abs_diff(grads[n_params + 1], fg.args[1]) == 0.0);
    }
}

TEST_CASE("vjp agrees with finite differences across random fields") {
    Rng rng(47);
    double worst = 0.0;
    for (int trial = 0; trial < 30; ++trial) {
        std::size_t d = 1 + rng.index(3);
        std::size_t h = 2 + rng.index(6);
        bool with_bias = rng.index(2) == 1;
        MlpParams p = random_mlp({2 * d, h, d}, with_bias, rng);
        Tensor z1 = random_tensor({d}, rng);
        Tensor z2 = random_tensor({d}, rng);
        Tensor cot = random_tensor({d}, rng);

        std::vector<Tensor> args{z1, z2};
        FieldGrads fg = mlp_vjp(p, mlp_forward(p, args), cot);

        auto loss_with_params = [&](const MlpParams& q) {
            return dot(cot, mlp_eval(q, {z1, z2}));
        };
        for (std::size_t l = 0; l < p.layers.size(); ++l) {
            Tensor fd = finite_diff_grad(
                [&](const Tensor& w) {
                    MlpParams q = p;
                    q.layers[l].weight = w;
                    return loss_with_params(q);
                },
                p.layers[l].weight, 1e-6);
            worst = std::max(worst, gradient_rel_error(fd, fg.params.layers[l].weight));
            if (p.layers[l].bias) {
                Tensor fdb = finite_diff_grad(
                    [&](const Tensor& b) {
                        MlpParams q = p;
                        q.layers[l].bias = b;
                        return loss_with_params(q);
                    },
                    *p.layers[l].bias, 1e-6);
                worst = std::max(worst, gradient_rel_error(fdb, *fg.params.layers[l].bias));
            }
        }
        Tensor fdz = finite_diff_grad(
            [&](const Tensor& z) { return dot(cot, mlp_eval(p, {z, z2})); }, z1, 1e-6);
        worst = std::max(worst, gradient_rel_error(fdz, fg.args[0]));
    }
    INFO("worst relative disagreement " << worst);
    REQUIRE(worst < 1e-6);
}

TEST_CASE("relu activation gradients away from the kink") {
    MlpParams p;
    MlpLayer l1, l2;
    l1.weight = Tensor::matrix(2, 1, {2.0, -3.0});
    l2.weight = Tensor::matrix(1, 2, {1.0, 1.0});
    p.layers = {l1, l2};
    p.activation = Activation::Relu;

    // x = 1: hidden = relu(2, -3) = (2, 0), out = 2, d out/dx = 2.
    Tensor x = Tensor::vector({1.0});
    MlpTrace tr = mlp_forward(p, std::vector<Tensor>{x});
    REQUIRE(tr.output()[0] == 2.0);
    FieldGrads fg = mlp_vjp(p, tr, Tensor::vector({1.0}));
    REQUIRE(fg.args[0][0] == 2.0);

    Tensor fd = finite_diff_grad(
        [&](const Tensor& z) { return mlp_eval(p, {z})[0]; }, x, 1e-6);
    REQUIRE(gradient_rel_error(fd, fg.args[0]) < 1e-8);
}

TEST_CASE("batched parameter gradients reduce over columns") {
    Rng rng(53);
    MlpParams p = random_mlp({2, 5, 2}, true, rng);
    std::size_t batch = 4;
    Tensor zb = random_tensor({2, batch}, rng);
    Tensor cotb = random_tensor({2, batch}, rng);

    FieldGrads batched = mlp_vjp(p, mlp_forward(p, std::vector<Tensor>{zb}), cotb);

    MlpGrads summed = zero_grads(p);
    for (std::size_t j = 0; j < batch; ++j) {
        Tensor z = Tensor::zeros({2}), cot = Tensor::zeros({2});
        for (std::size_t i = 0; i < 2; ++i) {
            z[i] = zb.at(i, j);
            cot[i] = cotb.at(i, j);
        }
        FieldGrads one = mlp_vjp(p, mlp_forward(p, std::vector<Tensor>{z}), cot);
        accumulate_grads(summed, one.params);
    }
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        REQUIRE(gradient_rel_error(batched.params.layers[l].weight, summed.layers[l].weight) < 1e-12);
        REQUIRE(gradient_rel_error(*batched.params.layers[l].bias, *summed.layers[l].bias) < 1e-12);
    }
}

TEST_CASE("json round trip preserves parameters bitwise") {
    Rng rng(59);
    MlpParams p = random_mlp({3, 4, 2}, true, rng);
    p.activation = Activation::Tanh;

    nlohmann::json j = mlp_to_json(p);
    std::string text = j.dump();
    MlpParams q = mlp_from_json(nlohmann::json::parse(text));

    REQUIRE(q.activation == Activation::Tanh);
    REQUIRE(q.layers.size() == p.layers.size());
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        REQUIRE(q.layers[l].weight.shape() == p.layers[l].weight.shape());
        REQUIRE(max_abs_diff(q.layers[l].weight, p.layers[l].weight) == 0.0);
        REQUIRE(q.layers[l].bias.has_value());
        REQUIRE(max_abs_diff(*q.layers[l].bias, *p.layers[l].bias) == 0.0);
    }

    MlpParams nb = random_mlp({2, 3, 1}, false, rng);
    nb.activation = Activation::Identity;
    MlpParams nb2 = mlp_from_json(mlp_to_json(nb));
    REQUIRE(nb2.activation == Activation::Identity);
    REQUIRE_FALSE(nb2.layers[0].bias.has_value());
    REQUIRE(max_abs_diff(nb2.layers[1].weight, nb.layers[1].weight) == 0.0);

    REQUIRE_THROWS_AS(activation_from_name("softmax"), std::invalid_argument);
}

TEST_CASE("param tensor round trip follows a stable order") {
    Rng rng(61);
    MlpParams p = random_mlp({2, 4, 2}, true, rng);
    std::vector<Tensor> flat = param_tensors(p);
    REQUIRE(flat.size() == 4);  // w0 b0 w1 b1
    REQUIRE(flat[0].rank() == 2);
    REQUIRE(flat[1].rank() == 1);

    for (Tensor& t : flat)
        for (std::size_t i = 0; i < t.size(); ++i) t[i] += 1.0;
    set_param_tensors(p, flat);
    REQUIRE(p.layers[0].weight[0] == flat[0][0]);
    REQUIRE((*p.layers[1].bias)[1] == flat[3][1]);

    flat.pop_back();
    REQUIRE_THROWS_AS(set_param_tensors(p, flat), std::invalid_argument);
}

TEST_CASE("mlp_graph handles batched bias states and matches the direct pass") {
    Rng rng(67);
    MlpParams p = random_mlp({2, 3, 2}, true, rng);
    Tensor batch = random_tensor({2, 3}, rng);
    std::vector<Tensor> inputs = param_tensors(p);
    std::size_t n_params = inputs.size();
    inputs.push_back(batch);

    Recording rec = tape_forward(
        [&](Tape& t, std::span<const ValueId> in) {
            return mlp_graph(t, p, in.subspan(0, n_params), in.subspan(n_params));
        },
        std::span<const Tensor>(inputs));

    MlpTrace tr = mlp_forward(p, std::span<const Tensor>(&batch, 1));
    REQUIRE(max_abs_diff(rec.tape.value(rec.output_id), tr.output()) == 0.0);

    Tensor cot = random_tensor({2, 3}, rng);
    std::vector<Tensor> tape_grads = vjp(rec, cot);
    FieldGrads direct = mlp_vjp(p, tr, cot);

    std::size_t pi = 0;
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        REQUIRE(gradient_rel_error(tape_grads[pi++], direct.params.layers[l].weight) < 1e-14);
        REQUIRE(gradient_rel_error(tape_grads[pi++], *direct.params.layers[l].bias) < 1e-14);
    }
    REQUIRE(gradient_rel_error(tape_grads[n_params], direct.args[0]) < 1e-14);

    // Replay reproduces every recorded value, including the broadcast add.
    std::vector<Tensor> replayed = rec.tape.replay();
    for (std::size_t i = 0; i < rec.tape.size(); ++i)
        REQUIRE(max_abs_diff(replayed[i], rec.tape.value(i)) == 0.0);
}
