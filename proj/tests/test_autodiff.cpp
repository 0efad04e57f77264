#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "petrec/autodiff.hpp"
#include "petrec/projector.hpp"

using namespace petrec;

namespace {

// FD check of a scalar-valued taped expression with respect to one leaf.
double graph_fd_error(const std::function<ad::Var(ad::Tape&, ad::Var)>& build,
                      const Tensor& x0, double h = 1e-6, double floor = 1.0) {
    ad::Tape tape;
    ad::Var x = tape.leaf(x0);
    ad::Var loss = build(tape, x);
    tape.backward(loss);
    const Tensor g = x.grad();

    auto f = [&](const std::vector<double>& xv) {
        ad::Tape t2;
        Tensor xt = x0;
        xt.data = xv;
        ad::Var xx = t2.constant(xt);
        return build(t2, xx).value()[0];
    };
    const auto fd = oracles::fd_gradient(f, x0.data, h);
    return oracles::max_rel_err(g.data, fd, floor);
}

}  // namespace

TEST_CASE("backward of a composite elementwise graph matches finite differences") {
    std::mt19937_64 gen(21);
    Tensor x0 = oracles::random_tensor(gen, {3, 4}, 0.3, 2.0);
    auto build = [](ad::Tape& tape, ad::Var x) {
        ad::Var y = ad::mul(x, x);
        ad::Var z = ad::add(ad::vexp(ad::scale(x, -0.7)), y);
        ad::Var w = ad::div(z, ad::add(x, x));
        return ad::vsum(ad::sub(w, x));
    };
    REQUIRE(graph_fd_error(build, x0) < 1e-7);
}

TEST_CASE("vdot gradient flows to both arguments") {
    Tensor a0({3}), b0({3});
    a0.data = {1.0, -2.0, 0.5};
    b0.data = {2.0, 3.0, -1.0};
    ad::Tape tape;
    ad::Var a = tape.leaf(a0);
    ad::Var b = tape.leaf(b0);
    ad::Var l = ad::vdot(a, b);
    REQUIRE(l.value()[0] == Catch::Approx(-4.5));
    tape.backward(l);
    REQUIRE(a.grad().data == b0.data);
    REQUIRE(b.grad().data == a0.data);
}

TEST_CASE("gradients accumulate when a variable feeds several consumers") {
    Tensor x0({2});
    x0.data = {1.5, -0.5};
    ad::Tape tape;
    ad::Var x = tape.leaf(x0);
    ad::Var l = ad::add(ad::vsum(ad::mul(x, x)), ad::vsum(ad::scale(x, 3.0)));
    tape.backward(l);
    REQUIRE(x.grad()[0] == Catch::Approx(2 * 1.5 + 3.0));
    REQUIRE(x.grad()[1] == Catch::Approx(2 * -0.5 + 3.0));
}

TEST_CASE("constants do not request gradients and detach blocks flow") {
    Tensor x0({2}, 2.0);
    ad::Tape tape;
    ad::Var x = tape.leaf(x0);
    ad::Var c = tape.constant(x0);
    REQUIRE(x.requires_grad());
    REQUIRE_FALSE(c.requires_grad());
    REQUIRE_FALSE(ad::mul(c, c).requires_grad());

    ad::Var blocked = ad::detach(ad::mul(x, x));
    REQUIRE_FALSE(blocked.requires_grad());
    ad::Var l = ad::vsum(ad::mul(blocked, x));  // d/dx = blocked value only
    tape.backward(l);
    REQUIRE(x.grad()[0] == Catch::Approx(4.0));
}

TEST_CASE("div rejects zero denominators in differentiable graphs") {
    Tensor a0({2}, 1.0), b0({2});
    b0.data = {1.0, 0.0};
    ad::Tape tape;
    ad::Var a = tape.leaf(a0);
    ad::Var b = tape.leaf(b0);
    REQUIRE_THROWS(ad::div(a, b));
}

TEST_CASE("scalar broadcast in mul and backward reduction") {
    Tensor x0({2, 2});
    x0.data = {1, 2, 3, 4};
    Tensor s0({1}, 0.5);
    ad::Tape tape;
    ad::Var x = tape.leaf(x0);
    ad::Var s = tape.leaf(s0);
    ad::Var l = ad::vsum(ad::mul(x, s));
    REQUIRE(l.value()[0] == Catch::Approx(5.0));
    tape.backward(l);
    REQUIRE(s.grad()[0] == Catch::Approx(10.0));  // sum of x
    REQUIRE(x.grad()[0] == Catch::Approx(0.5));
}

TEST_CASE("matvec forward/backward against the sparse adjoint") {
    GridSpec grid{8, 1.0};
    SinogramSpec sino{6, 12, 1.0};
    SystemModel model = build_system_model(grid, sino);
    std::mt19937_64 gen(22);
    Tensor x0 = oracles::random_tensor(gen, {8, 8}, 0.0, 1.0);
    Tensor w = oracles::random_tensor(gen, {6, 12}, -1.0, 1.0);

    ad::Tape tape;
    ad::Var x = tape.leaf(x0);
    ad::Var y = ad::matvec(x, model.matrix, false, {6, 12});
    ad::Var l = ad::vdot(y, tape.constant(w));
    tape.backward(l);

    Tensor want({8, 8});
    model.matrix.apply_transpose(w.data.data(), want.data.data());
    REQUIRE(oracles::max_rel_err(x.grad().data, want.data) < 1e-12);
}

TEST_CASE("conv2d and its input adjoint differentiate correctly") {
    std::mt19937_64 gen(23);
    Tensor x0 = oracles::random_tensor(gen, {1, 5, 5}, -1.0, 1.0);
    Tensor k0 = oracles::random_tensor(gen, {2, 1, 3, 3}, -0.6, 0.6);
    Tensor w = oracles::random_tensor(gen, {2, 5, 5}, -1.0, 1.0);

    // with respect to the input
    auto build_x = [&](ad::Tape& tape, ad::Var x) {
        ad::Var k = tape.constant(k0);
        return ad::vdot(ad::conv2d(x, k), tape.constant(w));
    };
    REQUIRE(graph_fd_error(build_x, x0) < 1e-7);

    // with respect to the kernel
    ad::Tape tape;
    ad::Var k = tape.leaf(k0);
    ad::Var l = ad::vdot(ad::conv2d(tape.constant(x0), k), tape.constant(w));
    tape.backward(l);
    auto f = [&](const std::vector<double>& kv) {
        Tensor kk = k0;
        kk.data = kv;
        return dot(kernels::conv2d(x0, kk), w);
    };
    const auto fd = oracles::fd_gradient(f, k0.data, 1e-6);
    REQUIRE(oracles::max_rel_err(k.grad().data, fd) < 1e-7);

    // adjoint-of-input op: gradient w.r.t. both arguments
    Tensor g0 = oracles::random_tensor(gen, {2, 5, 5}, -1.0, 1.0);
    ad::Tape t3;
    ad::Var g = t3.leaf(g0);
    ad::Var k3 = t3.leaf(k0);
    ad::Var back = ad::conv2d_adj_input(g, k3);
    Tensor w2 = oracles::random_tensor(gen, {1, 5, 5}, -1.0, 1.0);
    ad::Var l3 = ad::vdot(back, t3.constant(w2));
    t3.backward(l3);
    auto fg = [&](const std::vector<double>& gv) {
        Tensor gg = g0;
        gg.data = gv;
        return dot(kernels::conv2d_adj_input(gg, k0), w2);
    };
    REQUIRE(oracles::max_rel_err(g.grad().data, oracles::fd_gradient(fg, g0.data, 1e-6)) < 1e-7);
    auto fk = [&](const std::vector<double>& kv) {
        Tensor kk = k0;
        kk.data = kv;
        return dot(kernels::conv2d_adj_input(g0, kk), w2);
    };
    REQUIRE(oracles::max_rel_err(k3.grad().data, oracles::fd_gradient(fk, k0.data, 1e-6)) <
            1e-7);
}

TEST_CASE("smoothed relu ops and their chained second derivative") {
    const double delta = 0.02;
    std::mt19937_64 gen(24);
    Tensor x0 = oracles::random_tensor(gen, {12}, -0.05, 0.05);
    Tensor w = oracles::random_tensor(gen, {12}, -1.0, 1.0);

    auto build = [&](ad::Tape& tape, ad::Var x) {
        return ad::vdot(ad::srelu(x, delta), tape.constant(w));
    };
    REQUIRE(graph_fd_error(build, x0) < 1e-6);

    // differentiation THROUGH the first derivative exercises srelu''
    auto build2 = [&](ad::Tape& tape, ad::Var x) {
        return ad::vdot(ad::srelu_deriv(x, delta), tape.constant(w));
    };
    REQUIRE(graph_fd_error(build2, x0) < 1e-6);
}

TEST_CASE("huber, clip_min and channel ops differentiate") {
    std::mt19937_64 gen(25);
    Tensor x0 = oracles::random_tensor(gen, {2, 3, 3}, 0.2, 1.0);
    Tensor w = oracles::random_tensor(gen, {3, 3}, -1.0, 1.0);
    auto build = [&](ad::Tape& tape, ad::Var x) {
        ad::Var n = ad::channel_l2norm(x);
        return ad::vdot(ad::huber(n, 0.4), tape.constant(w));
    };
    REQUIRE(graph_fd_error(build, x0) < 1e-6);

    Tensor w2 = oracles::random_tensor(gen, {2, 3, 3}, -1.0, 1.0);
    auto build_b = [&](ad::Tape& tape, ad::Var x) {
        ad::Var b = ad::channel_broadcast(ad::channel_l2norm(x), 2);
        return ad::vdot(ad::mul(x, b), tape.constant(w2));
    };
    REQUIRE(graph_fd_error(build_b, x0) < 1e-6);

    // clip_min passes gradient only above the threshold; probe away from it
    Tensor x1({4});
    x1.data = {-0.8, -0.2, 0.3, 0.9};
    auto build_c = [&](ad::Tape& tape, ad::Var x) {
        return ad::vsum(ad::mul(ad::clip_min(x, 0.0), tape.constant(Tensor({4}, 2.0))));
    };
    ad::Tape tape;
    ad::Var x = tape.leaf(x1);
    tape.backward(build_c(tape, x));
    REQUIRE(x.grad().data == std::vector<double>{0.0, 0.0, 2.0, 2.0});
}

TEST_CASE("rotation ops differentiate via their adjoints") {
    std::mt19937_64 gen(26);
    Tensor x0 = oracles::random_tensor(gen, {5, 5}, -1.0, 1.0);
    Tensor w = oracles::random_tensor(gen, {5, 5}, -1.0, 1.0);
    auto build_q = [&](ad::Tape& tape, ad::Var x) {
        return ad::vdot(ad::rot90(x, 3), tape.constant(w));
    };
    REQUIRE(graph_fd_error(build_q, x0) < 1e-8);
    auto build_b = [&](ad::Tape& tape, ad::Var x) {
        return ad::vdot(ad::rot_bilinear(x, 0.41), tape.constant(w));
    };
    REQUIRE(graph_fd_error(build_b, x0) < 1e-7);
}

TEST_CASE("reshape preserves data and routes gradients") {
    Tensor x0({2, 3});
    x0.data = {1, 2, 3, 4, 5, 6};
    ad::Tape tape;
    ad::Var x = tape.leaf(x0);
    ad::Var r = ad::reshape(x, {3, 2});
    REQUIRE(r.value().shape == std::vector<int>{3, 2});
    REQUIRE(r.value().data == x0.data);
    tape.backward(ad::vsum(ad::mul(r, r)));
    for (std::size_t i = 0; i < 6; ++i) REQUIRE(x.grad()[i] == Catch::Approx(2 * x0[i]));
    REQUIRE_THROWS(ad::reshape(x, {4, 2}));
}

TEST_CASE("backward requires a scalar and a second backward needs a fresh tape") {
    Tensor x0({3}, 1.0);
    ad::Tape tape;
    ad::Var x = tape.leaf(x0);
    ad::Var v = ad::mul(x, x);
    REQUIRE_THROWS(tape.backward(v));  // non-scalar loss
}

TEST_CASE("values referenced from the tape stay valid while the graph grows") {
    // regression guard: node storage must not invalidate earlier references
    ad::Tape tape;
    ad::Var x = tape.leaf(Tensor({4}, 2.0));
    const Tensor& held = x.value();
    ad::Var acc = x;
    for (int i = 0; i < 2000; ++i) acc = ad::add(acc, x);
    REQUIRE(held.data[0] == 2.0);
    REQUIRE(acc.value()[0] == Catch::Approx(2.0 * 2001));
}
