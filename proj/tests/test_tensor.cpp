#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "fogda/errors.hpp"
#include "fogda/tensor.hpp"
#include "grad_suite.hpp"

using namespace fogda;
using fogda::testing::check_gradients;
using fogda::testing::LossBuilder;
using fogda::testing::random_tensor;
using fogda::testing::weighted_sum;

TEST_CASE("conv2d with a 1x1 unit kernel is the identity") {
    std::mt19937_64 rng(1);
    Tape tape;
    Tensor x = random_tensor({2, 3, 5, 4}, rng);
    Tensor w({3, 3, 1, 1});
    for (std::size_t k = 0; k < 3; ++k) w.at(k, k, 0, 0) = 1.0;
    Var y = conv2d(tape.constant(x), tape.constant(w), tape.constant(Tensor({3})), 1, 0);
    CHECK(y.value() == x);
}

TEST_CASE("conv2d hand-evaluated cross-correlation") {
    Tape tape;
    Var x = tape.constant(Tensor({1, 1, 2, 2}, {1, 2, 3, 4}));
    Var w = tape.constant(Tensor({1, 1, 2, 2}, {1, 0, 0, 1}));
    Var y = conv2d(x, w, tape.constant(Tensor({1})), 1, 0);
    REQUIRE(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.value()[0] == 5.0);
}

TEST_CASE("conv2d output shape follows floor((H+2p-k)/s)+1") {
    Tape tape;
    Var y = conv2d(tape.constant(Tensor({2, 3, 8, 8})), tape.constant(Tensor({4, 3, 3, 3})),
                   tape.constant(Tensor({4})), 2, 1);
    CHECK(y.shape() == Shape{2, 4, 4, 4});
}

TEST_CASE("conv2d rejects mismatched channels naming both shapes") {
    Tape tape;
    try {
        conv2d(tape.constant(Tensor({1, 3, 8, 8})), tape.constant(Tensor({4, 2, 3, 3})),
               tape.constant(Tensor({4})), 1, 1);
        FAIL("expected a shape error");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("(1,3,8,8)") != std::string::npos);
        CHECK(msg.find("(4,2,3,3)") != std::string::npos);
    }
}

TEST_CASE("mse and softmax cross-entropy reference values") {
    Tape tape;
    CHECK(mse(tape.constant(Tensor({2}, {1, 2})), tape.constant(Tensor({2}, {1, 2}))).value().item() == 0.0);
    CHECK(mse(tape.constant(Tensor({2}, {0, 0})), tape.constant(Tensor({2}, {1, 1}))).value().item() == 1.0);
    const int target[] = {0};
    Var ce = softmax_cross_entropy(tape.constant(Tensor({1, 2}, {0, 0})), target);
    CHECK(ce.value().item() == doctest::Approx(0.693147).epsilon(1e-6));
    CHECK(ce.value().item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("log is floored at 1e-8") {
    Tape tape;
    Var x = tape.leaf(Tensor({2}, {0.0, -3.0}));
    Var y = log(x);
    CHECK(y.value()[0] == doctest::Approx(std::log(1e-8)));
    CHECK(std::isfinite(y.value()[1]));
    tape.backward(sum(y));
    CHECK(tape.grad(x)[0] == 0.0);
}

TEST_CASE("grl is the identity forward and flips gradients backward") {
    std::mt19937_64 rng(3);
    Tensor x0 = random_tensor({1, 2, 3, 3}, rng);
    for (double coeff : {1.0, 0.0, 0.5}) {
        Tape tape;
        Var x = tape.leaf(x0);
        Var y = grl(x, coeff);
        CHECK(y.value() == x0);
        Tensor g = random_tensor(x0.shape(), rng);
        tape.backward(sum(mul(y, tape.constant(g))));
        const Tensor gx = tape.grad(x);
        for (std::size_t i = 0; i < g.size(); ++i) CHECK(gx[i] == -coeff * g[i]);
    }
}

TEST_CASE("backward hand derivatives and disconnected parameters") {
    Tape tape;
    Var w = tape.leaf(Tensor({1}, {3.0}));
    Var p = tape.leaf(Tensor({1}, {7.0}));
    Var loss = mse(w, tape.constant(Tensor({1})));
    tape.backward(loss);
    CHECK(tape.grad(w)[0] == 6.0);
    CHECK(tape.grad(p)[0] == 0.0);
}

TEST_CASE("backward rejects a non-scalar loss") {
    Tape tape;
    Var x = tape.leaf(Tensor({2}, {1, 2}));
    CHECK_THROWS_AS(tape.backward(relu(x)), std::invalid_argument);
}

TEST_CASE("sgd_step arithmetic") {
    Tensor p({1}, {1.0});
    std::vector<ParamRef> refs{{"p", &p}};
    std::vector<Tensor> g{Tensor({1}, {0.5})};
    sgd_step(refs, g, 0.002);
    CHECK(p[0] == doctest::Approx(0.999).epsilon(1e-15));

    Tensor q({2}, {1.5, -2.0});
    const Tensor q0 = q;
    std::vector<ParamRef> qrefs{{"q", &q}};
    sgd_step(qrefs, std::vector<Tensor>{Tensor({2})}, 0.002);
    CHECK(q == q0);
    sgd_step(qrefs, std::vector<Tensor>{Tensor({2}, {3.0, 4.0})}, 0.0);
    CHECK(q == q0);
}

TEST_CASE("sgd_step aborts on NaN and names the parameter") {
    Tensor a({1}, {1.0});
    Tensor b({1}, {2.0});
    std::vector<ParamRef> refs{{"backbone.conv0.weight", &a}, {"det_head.conv1.bias", &b}};
    std::vector<Tensor> g{Tensor({1}, {0.1}), Tensor({1}, {std::nan("")})};
    try {
        sgd_step(refs, g, 0.1);
        FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
        CHECK(std::string(e.what()).find("det_head.conv1.bias") != std::string::npos);
    }
    CHECK(a[0] == 1.0);
}

TEST_CASE("every catalog op matches central finite differences at 10 random points") {
    for (const auto& c : fogda::testing::op_catalog()) {
        const double worst = fogda::testing::worst_gradient_error(c);
        INFO("op ", std::string(c.name), " worst relative error ", worst);
        CHECK(worst < 1e-3);
    }
}

TEST_CASE("forward passes are bitwise deterministic") {
    std::mt19937_64 rng(5);
    const Tensor x = random_tensor({1, 3, 16, 16}, rng);
    const Tensor w = random_tensor({8, 3, 3, 3}, rng);
    const Tensor b = random_tensor({8}, rng);
    auto run = [&] {
        Tape tape;
        Var y = conv2d(tape.constant(x), tape.constant(w), tape.constant(b), 2, 1);
        return sigmoid(upsample_nearest2x(relu(y))).value();
    };
    CHECK(run() == run());
}

TEST_CASE("gradient accumulation over shared consumers is order independent") {
    std::mt19937_64 rng(9);
    const Tensor x0 = random_tensor({1, 2, 4, 4}, rng);
    auto grad_with = [&](bool swapped) {
        Tape tape;
        Var x = tape.leaf(x0);
        Var a = sigmoid(x);
        Var b = mul(x, x);
        Var c = exp(scale(x, 0.3));
        Var l1 = weighted_sum(a, 1), l2 = weighted_sum(b, 2), l3 = weighted_sum(c, 3);
        Var loss = swapped ? add(l3, add(l2, l1)) : add(add(l1, l2), l3);
        tape.backward(loss);
        return tape.grad(x);
    };
    const Tensor g1 = grad_with(false), g2 = grad_with(true);
    for (std::size_t i = 0; i < g1.size(); ++i) CHECK(std::abs(g1[i] - g2[i]) <= 1e-12);
}

TEST_CASE("avg_pool and minmax_normalize forward values") {
    Tape tape;
    Var p = avg_pool(tape.constant(Tensor({1, 1, 2, 2}, {0, 0, 1, 1})), 1, 1);
    CHECK(p.value()[0] == 0.5);
    Var n = minmax_normalize(tape.constant(Tensor({3}, {1, 2, 3})));
    CHECK(n.value() == Tensor({3}, {0, 0.5, 1}));
    Var z = minmax_normalize(tape.constant(Tensor({3}, {4, 4, 4})));
    CHECK(z.value() == Tensor({3}, {0, 0, 0}));
}
