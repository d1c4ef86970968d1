#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "pcdde/autodiff.hpp"
#include "pcdde/tensor.hpp"

using namespace pcdde;

// ===========================================================================
// Tensor kernels
// ===========================================================================

TEST_CASE("tensor construction and shape checks") {
    Tensor m = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
    REQUIRE(m.rank() == 2);
    REQUIRE(m.rows() == 2);
    REQUIRE(m.cols() == 3);
    REQUIRE(m.at(1, 2) == 6.0);

    Tensor v = Tensor::vector({7, 8});
    REQUIRE(v.rank() == 1);
    REQUIRE(v.rows() == 2);
    REQUIRE(v.cols() == 1);

    REQUIRE_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), std::invalid_argument);
    REQUIRE_THROWS_AS(Tensor({2, 2, 2}, std::vector<double>(8, 0.0)), std::invalid_argument);
}

TEST_CASE("add and scale") {
    Tensor a = Tensor::vector({1, 2, 3});
    Tensor b = Tensor::vector({10, 20, 30});
    Tensor s = add(a, b);
    REQUIRE(s[0] == 11.0);
    REQUIRE(s[2] == 33.0);

    Tensor sc = scale(a, -2.0);
    REQUIRE(sc[1] == -4.0);

    axpy_in_place(a, 0.5, b);
    REQUIRE(a[0] == 6.0);

    REQUIRE_THROWS_WITH(add(Tensor::vector({1}), Tensor::vector({1, 2})),
                        Catch::Matchers::ContainsSubstring("add"));
}

TEST_CASE("matmul against hand values") {
    Tensor a = Tensor::matrix(2, 2, {1, 2, 3, 4});
    Tensor x = Tensor::vector({5, 6});
    Tensor y = matmul(a, x);
    REQUIRE(y[0] == 17.0);
    REQUIRE(y[1] == 39.0);

    Tensor b = Tensor::matrix(2, 3, {1, 0, 2, 0, 1, 3});
    Tensor ab = matmul(a, b);
    REQUIRE(ab.rows() == 2);
    REQUIRE(ab.cols() == 3);
    REQUIRE(ab.at(0, 0) == 1.0);
    REQUIRE(ab.at(0, 2) == 8.0);
    REQUIRE(ab.at(1, 1) == 4.0);
    REQUIRE(ab.at(1, 2) == 18.0);

    REQUIRE_THROWS_WITH(matmul(a, Tensor::vector({1, 2, 3})),
                        Catch::Matchers::ContainsSubstring("matmul"));
}

TEST_CASE("matmul_transposed_left equals explicit transpose product") {
    Tensor a = Tensor::matrix(3, 2, {1, 4, 2, 5, 3, 6});
    Tensor v = Tensor::vector({1, -1, 2});
    Tensor atv = matmul_transposed_left(a, v);
    // A^T = [[1,2,3],[4,5,6]]
    REQUIRE(atv[0] == 5.0);
    REQUIRE(atv[1] == 11.0);

    Tensor m = Tensor::matrix(3, 2, {1, 0, 0, 1, 1, 1});
    Tensor atm = matmul_transposed_left(a, m);
    REQUIRE(atm.rows() == 2);
    REQUIRE(atm.at(0, 0) == 4.0);
    REQUIRE(atm.at(1, 1) == 11.0);
}

TEST_CASE("outer_grad matches cot times b transpose") {
    Tensor cot = Tensor::vector({2, 3});
    Tensor b = Tensor::vector({1, -1, 4});
    Tensor g = outer_grad(cot, b, 2, 3);
    REQUIRE(g.at(0, 0) == 2.0);
    REQUIRE(g.at(0, 2) == 8.0);
    REQUIRE(g.at(1, 1) == -3.0);

    // Batched: cot [2x2], b [3x2]; entry (i,k) = sum_j cot(i,j) b(k,j).
    Tensor cotm = Tensor::matrix(2, 2, {1, 2, 3, 4});
    Tensor bm = Tensor::matrix(3, 2, {1, 0, 0, 1, 1, 1});
    Tensor gm = outer_grad(cotm, bm, 2, 3);
    REQUIRE(gm.at(0, 0) == 1.0);
    REQUIRE(gm.at(0, 1) == 2.0);
    REQUIRE(gm.at(0, 2) == 3.0);
    REQUIRE(gm.at(1, 2) == 7.0);
}

TEST_CASE("concat and slice round trip") {
    Tensor a = Tensor::vector({1, 2});
    Tensor b = Tensor::vector({3});
    Tensor c = concat({a, b});
    REQUIRE(c.size() == 3);
    REQUIRE(c[2] == 3.0);
    Tensor back = slice(c, 0, 2);
    REQUIRE(max_abs_diff(back, a) == 0.0);

    Tensor m1 = Tensor::matrix(1, 2, {1, 2});
    Tensor m2 = Tensor::matrix(2, 2, {3, 4, 5, 6});
    Tensor mc = concat({m1, m2});
    REQUIRE(mc.rows() == 3);
    REQUIRE(mc.at(2, 1) == 6.0);
    Tensor mid = slice(mc, 1, 3);
    REQUIRE(max_abs_diff(mid, m2) == 0.0);

    REQUIRE_THROWS_WITH(concat({m1, Tensor::matrix(1, 3, {0, 0, 0})}),
                        Catch::Matchers::ContainsSubstring("concat"));
    REQUIRE_THROWS_WITH(slice(c, 2, 5), Catch::Matchers::ContainsSubstring("slice"));
}

TEST_CASE("elementwise nonlinearities") {
    Tensor x = Tensor::vector({-1.0, 0.0, 0.5});
    Tensor t = tanh(x);
    REQUIRE(t[0] == Catch::Approx(std::tanh(-1.0)));
    REQUIRE(t[1] == 0.0);
    Tensor r = relu(x);
    REQUIRE(r[0] == 0.0);
    REQUIRE(r[1] == 0.0);
    REQUIRE(r[2] == 0.5);
}

TEST_CASE("rng determinism and ranges") {
    Rng r1(42), r2(42);
    for (int i = 0; i < 100; ++i) REQUIRE(r1.uniform() == r2.uniform());
    Rng r3(42);
    for (int i = 0; i < 1000; ++i) {
        double u = r3.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
    }
    Rng r4(7), r5(7);
    for (int i = 0; i < 100; ++i) {
        double n = r4.normal();
        REQUIRE(n == r5.normal());
        REQUIRE(std::isfinite(n));
    }
    Rng r6(1), r7(2);
    REQUIRE(r6.next_u64() != r7.next_u64());
}

// ===========================================================================
// Finite-difference oracle, validated against analytic derivatives before it
// is trusted to judge anything else.
// ===========================================================================

TEST_CASE("finite_diff_grad reproduces analytic gradients") {
    auto quadratic = [](const Tensor& p) { return p[0] * p[0] + 3.0 * p[1]; };
    Tensor g = finite_diff_grad(quadratic, Tensor::vector({2.0, 5.0}), 1e-5);
    REQUIRE(g[0] == Catch::Approx(4.0).margin(1e-8));
    REQUIRE(g[1] == Catch::Approx(3.0).margin(1e-8));

    auto smooth = [](const Tensor& p) { return std::tanh(2.0 * p[0]); };
    Tensor gs = finite_diff_grad(smooth, Tensor::vector({0.3}), 1e-6);
    double t = std::tanh(0.6);
    REQUIRE(gs[0] == Catch::Approx(2.0 * (1.0 - t * t)).margin(1e-8));

    REQUIRE_THROWS_AS(finite_diff_grad(quadratic, Tensor::vector({1.0}), 0.0),
                      std::invalid_argument);
}

TEST_CASE("gradient_rel_error basics") {
    Tensor z = Tensor::vector({0, 0});
    REQUIRE(gradient_rel_error(z, z) == 0.0);
    Tensor a = Tensor::vector({1.0, 2.0});
    Tensor b = Tensor::vector({1.0, 2.0 + 2e-7});
    REQUIRE(gradient_rel_error(a, b) == Catch::Approx(1e-7));
}

// ===========================================================================
// Tape: forward recording, replay, hand-checked VJPs
// ===========================================================================

TEST_CASE("tape records forward values identical to direct kernels") {
    Tensor w = Tensor::matrix(2, 3, {0.1, -0.2, 0.3, 0.4, 0.5, -0.6});
    Tensor x = Tensor::vector({1.0, 2.0, -1.0});

    Tape tape;
    ValueId wid = tape.input(w);
    ValueId xid = tape.input(x);
    ValueId y = tape.tanh(tape.matmul(wid, xid));

    Tensor direct = tanh(matmul(w, x));
    REQUIRE(max_abs_diff(tape.value(y), direct) == 0.0);
    REQUIRE(tape.op_count() == 2);
}

TEST_CASE("tape replay is bit-identical to the recorded pass") {
    Rng rng(11);
    Tensor w1 = Tensor::matrix(4, 3, [&] {
        std::vector<double> v(12);
        for (double& d : v) d = rng.normal();
        return v;
    }());
    Tensor w2 = Tensor::matrix(2, 4, [&] {
        std::vector<double> v(8);
        for (double& d : v) d = rng.normal();
        return v;
    }());
    Tensor x = Tensor::vector({0.3, -0.7, 1.1});

    Tape tape;
    ValueId xid = tape.input(x);
    ValueId h = tape.tanh(tape.matmul(tape.input(w1), xid));
    ValueId out = tape.matmul(tape.input(w2), tape.relu(h));
    (void)out;

    std::vector<Tensor> replayed = tape.replay();
    REQUIRE(replayed.size() == tape.size());
    for (std::size_t i = 0; i < tape.size(); ++i) {
        REQUIRE(replayed[i].same_shape(tape.value(i)));
        for (std::size_t j = 0; j < replayed[i].size(); ++j)
            REQUIRE(replayed[i][j] == tape.value(i)[j]);
    }
}

TEST_CASE("matmul vjp hand check") {
    // y = W x, L = <g, y>: dL/dW = g x^T, dL/dx = W^T g.
    Tensor w = Tensor::matrix(2, 2, {1, 2, 3, 4});
    Tensor x = Tensor::vector({5, 6});
    Tensor g = Tensor::vector({1, -1});

    auto rec = tape_forward(
        [](Tape& t, std::span<const ValueId> in) { return t.matmul(in[0], in[1]); }, {w, x});
    auto grads = vjp(rec, g);

    REQUIRE(grads[0].at(0, 0) == 5.0);
    REQUIRE(grads[0].at(0, 1) == 6.0);
    REQUIRE(grads[0].at(1, 0) == -5.0);
    REQUIRE(grads[0].at(1, 1) == -6.0);
    REQUIRE(grads[1][0] == 1.0 * 1 + 3.0 * -1);
    REQUIRE(grads[1][1] == 2.0 * 1 + 4.0 * -1);
}

TEST_CASE("tanh and relu vjp hand check") {
    Tensor x = Tensor::vector({0.5, -0.25, 0.0});
    Tensor g = Tensor::vector({1.0, 2.0, 3.0});

    auto rec_t = tape_forward(
        [](Tape& t, std::span<const ValueId> in) { return t.tanh(in[0]); }, {x});
    auto gt = vjp(rec_t, g);
    for (std::size_t i = 0; i < 3; ++i) {
        double y = std::tanh(x[i]);
        REQUIRE(gt[0][i] == Catch::Approx(g[i] * (1.0 - y * y)).margin(1e-15));
    }

    auto rec_r = tape_forward(
        [](Tape& t, std::span<const ValueId> in) { return t.relu(in[0]); }, {x});
    auto gr = vjp(rec_r, g);
    REQUIRE(gr[0][0] == 1.0);
    REQUIRE(gr[0][1] == 0.0);
    REQUIRE(gr[0][2] == 0.0);  // subgradient at 0 taken as 0
}

TEST_CASE("concat and slice vjp route cotangents to the right blocks") {
    Tensor a = Tensor::vector({1, 2});
    Tensor b = Tensor::vector({3, 4, 5});
    Tensor g = Tensor::vector({10, 20, 30, 40, 50});

    auto rec = tape_forward(
        [](Tape& t, std::span<const ValueId> in) { return t.concat({in[0], in[1]}); }, {a, b});
    auto grads = vjp(rec, g);
    REQUIRE(grads[0][0] == 10.0);
    REQUIRE(grads[0][1] == 20.0);
    REQUIRE(grads[1][0] == 30.0);
    REQUIRE(grads[1][2] == 50.0);
}

TEST_CASE("slice vjp scatters into the parent positions") {
    Tensor x = Tensor::vector({1, 2, 3, 4});
    auto rec = tape_forward(
        [](Tape& t, std::span<const ValueId> in) { return t.slice(in[0], 1, 3); }, {x});
    auto grads = vjp(rec, Tensor::vector({7, 9}));
    REQUIRE(grads[0][0] == 0.0);
    REQUIRE(grads[0][1] == 7.0);
    REQUIRE(grads[0][2] == 9.0);
    REQUIRE(grads[0][3] == 0.0);

    // Matrix rows too.
    Tensor m = Tensor::matrix(3, 2, {1, 2, 3, 4, 5, 6});
    auto rec_m = tape_forward(
        [](Tape& t, std::span<const ValueId> in) { return t.slice(in[0], 2, 3); }, {m});
    auto gm = vjp(rec_m, Tensor::matrix(1, 2, {1, -1}));
    REQUIRE(gm[0].at(0, 0) == 0.0);
    REQUIRE(gm[0].at(2, 0) == 1.0);
    REQUIRE(gm[0].at(2, 1) == -1.0);
}

TEST_CASE("vjp on a node feeding several consumers accumulates") {
    // y = x + x; dL/dx = 2 g.
    Tensor x = Tensor::vector({1.5});
    auto rec = tape_forward(
        [](Tape& t, std::span<const ValueId> in) { return t.add(in[0], in[0]); }, {x});
    auto grads = vjp(rec, Tensor::vector({3.0}));
    REQUIRE(grads[0][0] == 6.0);
}

TEST_CASE("vjp is linear in the cotangent") {
    Rng rng(5);
    Tensor w = Tensor::matrix(3, 3, [&] {
        std::vector<double> v(9);
        for (double& d : v) d = rng.normal();
        return v;
    }());
    Tensor x = Tensor::vector({0.2, -0.4, 0.9});

    auto graph = [](Tape& t, std::span<const ValueId> in) {
        return t.tanh(t.matmul(in[0], t.tanh(in[1])));
    };
    auto rec = tape_forward(graph, {w, x});

    Tensor g1 = Tensor::vector({1.0, 0.5, -2.0});
    Tensor g2 = Tensor::vector({-0.3, 1.1, 0.7});
    Tensor combo = add(scale(g1, 2.0), scale(g2, -0.5));

    auto ga = vjp(rec, g1);
    auto gb = vjp(rec, g2);
    auto gc = vjp(rec, combo);
    for (std::size_t i = 0; i < 2; ++i) {
        Tensor expect = add(scale(ga[i], 2.0), scale(gb[i], -0.5));
        REQUIRE(max_abs_diff(gc[i], expect) < 1e-12);
    }
}

TEST_CASE("multi-seed vjp equals the sum of single-seed pulls") {
    Tensor w = Tensor::matrix(2, 2, {0.3, -0.1, 0.2, 0.5});
    Tensor x = Tensor::vector({1.0, -1.0});

    Tape tape;
    ValueId wid = tape.input(w);
    ValueId xid = tape.input(x);
    ValueId h = tape.tanh(tape.matmul(wid, xid));
    ValueId y = tape.matmul(wid, h);

    Tensor gh = Tensor::vector({0.4, -0.6});
    Tensor gy = Tensor::vector({1.0, 2.0});

    std::vector<std::pair<ValueId, Tensor>> seeds{{h, gh}, {y, gy}};
    auto both = vjp_all(tape, seeds);

    std::vector<std::pair<ValueId, Tensor>> s1{{h, gh}};
    std::vector<std::pair<ValueId, Tensor>> s2{{y, gy}};
    auto a = vjp_all(tape, s1);
    auto b = vjp_all(tape, s2);

    REQUIRE(max_abs_diff(both[wid], add(a[wid], b[wid])) < 1e-15);
    REQUIRE(max_abs_diff(both[xid], add(a[xid], b[xid])) < 1e-15);
}

TEST_CASE("vjp rejects mismatched cotangent shapes") {
    Tensor x = Tensor::vector({1, 2});
    auto rec = tape_forward(
        [](Tape& t, std::span<const ValueId> in) { return t.tanh(in[0]); }, {x});
    REQUIRE_THROWS_AS(vjp(rec, Tensor::vector({1, 2, 3})), std::invalid_argument);
}

// ===========================================================================
// Randomized cross-check: tape gradients vs central differences over many
// small tanh networks (tanh only; relu kinks would poison the differences).
// ===========================================================================

namespace {

struct RandomNet {
    Tensor w1, w2, x;
    std::size_t extra;  // columns of a constant block concatenated onto x
};

RandomNet make_net(Rng& rng) {
    auto fill = [&](std::size_t n) {
        std::vector<double> v(n);
        for (double& d : v) d = rng.normal() * 0.7;
        return v;
    };
    std::size_t din = 1 + rng.index(5);
    std::size_t hidden = 1 + rng.index(6);
    std::size_t extra = rng.index(3);
    RandomNet net;
    net.extra = extra;
    net.w1 = Tensor::matrix(hidden, din + extra, fill(hidden * (din + extra)));
    net.w2 = Tensor::matrix(1, hidden, fill(hidden));
    net.x = Tensor::vector(fill(din));
    return net;
}

// Scalar output: w2 tanh(w1 concat(x, pad)) summed. The pad block exercises
// concat/slice adjoints inside a differentiable scalar.
double net_value(const RandomNet& net, const Tensor& w1, const Tensor& w2, const Tensor& x) {
    Tensor in = net.extra ? concat({x, Tensor::zeros({net.extra})}) : x;
    Tensor out = matmul(w2, tanh(matmul(w1, in)));
    return out[0];
}

Recording net_record(const RandomNet& net) {
    auto graph = [extra = net.extra](Tape& t, std::span<const ValueId> in) {
        ValueId x = in[2];
        if (extra) x = t.concat({x, t.constant(Tensor::zeros({extra}))});
        return t.matmul(in[1], t.tanh(t.matmul(in[0], x)));
    };
    return tape_forward(graph, {net.w1, net.w2, net.x});
}

}  // namespace

TEST_CASE("tape gradients agree with finite differences on 100 random nets") {
    Rng rng(2024);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        RandomNet net = make_net(rng);
        auto rec = net_record(net);
        auto grads = vjp(rec, Tensor::vector({1.0}));

        Tensor fd_w1 = finite_diff_grad(
            [&](const Tensor& p) { return net_value(net, p, net.w2, net.x); }, net.w1, 1e-5);
        Tensor fd_w2 = finite_diff_grad(
            [&](const Tensor& p) { return net_value(net, net.w1, p, net.x); }, net.w2, 1e-5);
        Tensor fd_x = finite_diff_grad(
            [&](const Tensor& p) { return net_value(net, net.w1, net.w2, p); }, net.x, 1e-5);

        worst = std::max({worst, gradient_rel_error(grads[0], fd_w1),
                          gradient_rel_error(grads[1], fd_w2),
                          gradient_rel_error(grads[2], fd_x)});
    }
    INFO("worst relative disagreement " << worst);
    REQUIRE(worst < 1e-4);
}

TEST_CASE("gradient through a sliced output ignores the discarded block") {
    // out = first two rows of tanh(W x); W rows 2..3 must get zero gradient.
    Tensor w = Tensor::matrix(4, 2, {0.1, 0.2, -0.3, 0.4, 0.5, 0.6, -0.7, 0.8});
    Tensor x = Tensor::vector({1.0, -2.0});
    auto rec = tape_forward(
        [](Tape& t, std::span<const ValueId> in) {
            return t.slice(t.tanh(t.matmul(in[0], in[1])), 0, 2);
        },
        {w, x});
    auto grads = vjp(rec, Tensor::vector({1.0, 1.0}));
    REQUIRE(grads[0].at(2, 0) == 0.0);
    REQUIRE(grads[0].at(2, 1) == 0.0);
    REQUIRE(grads[0].at(3, 0) == 0.0);
    REQUIRE(grads[0].at(3, 1) == 0.0);
    REQUIRE(grads[0].at(0, 0) != 0.0);
}
