#include <doctest.h>

#include <cmath>

#include "kd/grad_check.hpp"
#include "kd/ops.hpp"
#include "kd/rng.hpp"
#include "test_util.hpp"

using namespace kd;
using kdtest::random_tensor;

TEST_CASE("pointwise forward values") {
    Tensor a = Tensor::from({2}, {1, 2});
    Tensor b = Tensor::from({2}, {3, 4});
    Tensor s = add(a, b);
    CHECK(s.values()[0] == 4.0);
    CHECK(s.values()[1] == 6.0);

    Tensor r = relu(Tensor::from({3}, {-1, 0, 2}));
    CHECK(r.values()[0] == 0.0);
    CHECK(r.values()[1] == 0.0);
    CHECK(r.values()[2] == 2.0);

    CHECK(mul(a, 3.0).values()[1] == 6.0);
    CHECK(abs_(Tensor::from({2}, {-2.5, 2.5})).values()[0] == 2.5);
    CHECK(sub(a, b).values()[0] == -2.0);

    CHECK_THROWS_AS(add(a, Tensor::from({3}, {1, 2, 3})), ShapeError);
    CHECK_THROWS_AS(log_(Tensor::from({2}, {1.0, 0.0})), DomainError);
    CHECK_THROWS_AS(log_(Tensor::from({1}, {-3.0})), DomainError);
}

TEST_CASE("scalar broadcast") {
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor c = Tensor::scalar(10.0);
    Tensor s = mul(a, c);
    CHECK(s.values()[3] == 40.0);
    CHECK(add(c, a).values()[0] == 11.0);
}

TEST_CASE("gradient of mean(exp(x)) at zero") {
    Tensor x = Tensor::from({2}, {0, 0}, true);
    Tape tape;
    Tensor loss = mean_all(exp_(x));
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(x.grad()[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("linear_map basics") {
    Tensor x = Tensor::from({1, 2}, {1, 0});
    Tensor w = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor b = Tensor::zeros({2});
    Tensor y = linear(x, w, b);
    CHECK(y.values()[0] == 1.0);
    CHECK(y.values()[1] == 0.0);

    Tensor y2 = linear(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {1, 1}),
                       Tensor::from({1}, {1}));
    CHECK(y2.values()[0] == 4.0);

    CHECK_THROWS_AS(linear(x, Tensor::zeros({3, 2}), b), ShapeError);
}

TEST_CASE("linear_map gradient vs central differences") {
    double worst = 0.0;
    for (uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng = Rng::derive(71, seed);
        Tensor x = random_tensor(rng, {3, 4});
        Tensor w = random_tensor(rng, {4, 2});
        Tensor b = random_tensor(rng, {2});
        auto f = [&] { return sum_all(mul(linear(x, w, b), linear(x, w, b))); };
        worst = std::max(worst, grad_check(f, {x, w, b}, 1e-5));
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("conv2d forward") {
    Tensor ones = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor k = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor y = conv2d(ones, k, 1, 0);
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.values()[0] == 9.0);

    Rng rng(3);
    Tensor x = random_tensor(rng, {1, 1, 5, 7}, -1, 1, false);
    Tensor ident = Tensor::from({1, 1, 1, 1}, {1.0});
    Tensor same = conv2d(x, ident, 1, 0);
    for (size_t i = 0; i < x.values().size(); ++i) CHECK(same.values()[i] == x.values()[i]);

    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 1, 2, 2}), k, 1, 0), ShapeError);
    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 2, 8, 8}), k, 1, 0), ShapeError);
}

TEST_CASE("conv2d output geometry with stride and padding") {
    Tensor x = Tensor::full({2, 3, 9, 9}, 0.25);
    Tensor k = Tensor::full({4, 3, 3, 3}, 0.5);
    Tensor y = conv2d(x, k, 2, 1);
    CHECK(y.shape() == Shape{2, 4, 5, 5});
    // interior cell: full 3x3x3 window
    CHECK(y.at({0, 0, 2, 2}) == doctest::Approx(27 * 0.25 * 0.5));
    // corner cell at (0,0): pad clips the window to 2x2 per channel
    CHECK(y.at({0, 0, 0, 0}) == doctest::Approx(12 * 0.25 * 0.5));
}

TEST_CASE("conv2d gradient vs central differences") {
    double worst = 0.0;
    for (uint64_t seed = 0; seed < 3; ++seed) {
        Rng rng = Rng::derive(72, seed);
        Tensor x = random_tensor(rng, {2, 3, 8, 8});
        Tensor k = random_tensor(rng, {4, 3, 3, 3}, -0.5, 0.5);
        auto f = [&] { return mean_all(mul(conv2d(x, k, 1, 1), conv2d(x, k, 1, 1))); };
        worst = std::max(worst, grad_check(f, {x, k}, 1e-4));
    }
    CHECK(worst < 1e-5);
}

TEST_CASE("reduce forward") {
    Tensor x = Tensor::from({2, 2}, {1, 2, 3, 4});
    CHECK(mean_all(x).value() == 2.5);
    Tensor s0 = reduce(x, {0}, Reduce::sum);
    CHECK(s0.shape() == Shape{2});
    CHECK(s0.values()[0] == 4.0);
    CHECK(s0.values()[1] == 6.0);
    CHECK(max_all(x).value() == 4.0);
    CHECK_THROWS_AS(reduce(x, {2}, Reduce::sum), ShapeError);
}

TEST_CASE("grad of sum is all-ones") {
    Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    Tape tape;
    tape.backward(sum_all(x));
    for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("max backward routes to first maximal element") {
    Tensor x = Tensor::from({4}, {1.0, 7.0, 7.0, 2.0}, true);
    Tape tape;
    tape.backward(max_all(x));
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[1] == 1.0);
    CHECK(x.grad()[2] == 0.0);
    CHECK(x.grad()[3] == 0.0);
}

TEST_CASE("softmax_t values") {
    Tensor z = Tensor::from({3}, {0, 0, 0});
    Tensor p = softmax_t(z, 1.0);
    for (double v : p.values()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-12));

    // shift invariance at several temperatures
    Rng rng(5);
    for (double t : {0.5, 1.0, 2.0, 3.0}) {
        Tensor a = random_tensor(rng, {4}, -2, 2, false);
        std::vector<double> shifted(a.values().begin(), a.values().end());
        for (double& v : shifted) v += 1.7;
        Tensor b = Tensor::from({4}, std::move(shifted));
        Tensor pa = softmax_t(a, t), pb = softmax_t(b, t);
        for (size_t i = 0; i < 4; ++i)
            CHECK(pa.values()[i] == doctest::Approx(pb.values()[i]).epsilon(1e-12));
    }

    // scalar oracle: z=[2,0], T=2 -> e^1/(e^1+e^0)
    Tensor q = softmax_t(Tensor::from({2}, {2, 0}), 2.0);
    const double expect = std::exp(1.0) / (std::exp(1.0) + 1.0);
    CHECK(q.values()[0] == doctest::Approx(expect).epsilon(1e-12));

    CHECK_THROWS_AS(softmax_t(z, 0.0), DomainError);
    CHECK_THROWS_AS(softmax_t(z, -1.0), DomainError);
}

TEST_CASE("softmax_t rows sum to one") {
    Rng rng(6);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor z = random_tensor(rng, {5, 7}, -30, 30, false);
        Tensor p = softmax_t(z, rng.uniform(0.25, 4.0));
        for (int r = 0; r < 5; ++r) {
            double s = 0.0;
            for (int c = 0; c < 7; ++c) s += p.at({r, c});
            CHECK(std::fabs(s - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("sigmoid_t values") {
    for (double t : {0.5, 1.0, 2.0})
        CHECK(sigmoid_t(Tensor::scalar(0.0), t).value() == doctest::Approx(0.5).epsilon(1e-15));

    // strictly monotone on a grid, strictly inside (0,1)
    double prev = 0.0;
    for (double z = -30.0; z <= 30.0; z += 1.5) {
        const double p = sigmoid_t(Tensor::scalar(z), 1.5).value();
        CHECK(p > 0.0);
        CHECK(p < 1.0);
        CHECK(p > prev);
        prev = p;
    }
    // saturated tails stay inside the open interval
    CHECK(sigmoid_t(Tensor::scalar(500.0), 1.0).value() < 1.0);
    CHECK(sigmoid_t(Tensor::scalar(500.0), 1.0).value() > 0.999999);
    CHECK(sigmoid_t(Tensor::scalar(-5000.0), 1.0).value() > 0.0);
    CHECK(sigmoid_t(Tensor::scalar(-5000.0), 1.0).value() < 1e-9);

    // scalar oracle: z=1, T=2 -> (1+e^-0.5)^-1
    CHECK(sigmoid_t(Tensor::scalar(1.0), 2.0).value() ==
          doctest::Approx(1.0 / (1.0 + std::exp(-0.5))).epsilon(1e-14));

    CHECK_THROWS_AS(sigmoid_t(Tensor::scalar(1.0), 0.0), DomainError);
}

TEST_CASE("grad_check is exactly zero on linear functions") {
    // dyadic values and a dyadic step keep the central difference exact
    Tensor x = Tensor::from({6}, {1, 2, 3, 4, 5, 6}, true);
    CHECK(grad_check([&] { return sum_all(x); }, {x}, 0.25) == 0.0);
}

TEST_CASE("grad_check on softmax entropy") {
    double worst = 0.0;
    for (uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng = Rng::derive(73, seed);
        Tensor x = random_tensor(rng, {3, 5}, -2, 2);
        auto f = [&] {
            Tensor p = softmax_t(x, 2.0);
            return mean_all(mul(p, log_(p)));
        };
        worst = std::max(worst, grad_check(f, {x}, 1e-4));
    }
    CHECK(worst < 1e-5);
}

TEST_CASE("backward of a sum of losses equals sum of backwards") {
    Rng rng(8);
    Tensor x = random_tensor(rng, {4, 4});

    auto loss_a = [&] { return sum_all(mul(x, x)); };
    auto loss_b = [&] { return mean_all(exp_(mul(x, 0.3))); };

    x.zero_grad();
    {
        Tape tape;
        tape.backward(add(loss_a(), loss_b()));
    }
    std::vector<double> combined(x.grad().begin(), x.grad().end());

    x.zero_grad();
    {
        Tape tape;
        tape.backward(loss_a());
    }
    {
        Tape tape;
        tape.backward(loss_b());
    }
    for (size_t i = 0; i < combined.size(); ++i)
        CHECK(x.grad()[i] == doctest::Approx(combined[i]).epsilon(1e-12));
}

TEST_CASE("forward evaluation is deterministic") {
    Rng rng(9);
    Tensor x = random_tensor(rng, {2, 3, 6, 6}, -1, 1, false);
    Tensor k = random_tensor(rng, {2, 3, 3, 3}, -1, 1, false);
    Tensor y1 = conv2d(x, k, 1, 1);
    Tensor y2 = conv2d(x, k, 1, 1);
    for (size_t i = 0; i < y1.values().size(); ++i) CHECK(y1.values()[i] == y2.values()[i]);
}

TEST_CASE("no recording without an active tape") {
    Tensor x = Tensor::from({2}, {1, 2}, true);
    Tensor y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("shape surgery ops") {
    Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);

    SUBCASE("reshape round trip") {
        Tensor r = reshape(x, {3, 2});
        CHECK(r.at({2, 1}) == 6.0);
        CHECK_THROWS_AS(reshape(x, {4, 2}), ShapeError);
        Tape tape;
        tape.backward(sum_all(mul(reshape(x, {6}), reshape(x, {6}))));
        CHECK(x.grad()[2] == doctest::Approx(6.0));
    }

    SUBCASE("index_rows gathers and scatters") {
        Tensor g = index_rows(x, {1, 1, 0});
        CHECK(g.shape() == Shape{3, 3});
        CHECK(g.at({0, 0}) == 4.0);
        CHECK(g.at({2, 2}) == 3.0);
        x.zero_grad();
        {
            Tape tape;
            tape.backward(sum_all(index_rows(x, {1, 1, 0})));
        }
        CHECK(x.grad()[3] == 2.0);  // row 1 selected twice
        CHECK(x.grad()[0] == 1.0);
        CHECK_THROWS_AS(index_rows(x, {5}), ShapeError);
    }

    SUBCASE("slice and concat invert each other") {
        Tensor left = slice(x, 1, 0, 1);
        Tensor right = slice(x, 1, 1, 2);
        CHECK(left.shape() == Shape{2, 1});
        Tensor back = concat({left, right}, 1);
        for (size_t i = 0; i < 6; ++i) CHECK(back.values()[i] == x.values()[i]);
        CHECK_THROWS_AS(slice(x, 1, 2, 5), ShapeError);
        CHECK_THROWS_AS(concat({x, Tensor::zeros({3, 3})}, 1), ShapeError);
    }

    SUBCASE("concat gradient splits") {
        Tensor a = Tensor::from({1, 2}, {1, 2}, true);
        Tensor b = Tensor::from({1, 2}, {3, 4}, true);
        Tape tape;
        Tensor y = concat({a, b}, 0);
        tape.backward(sum_all(mul(y, y)));
        CHECK(a.grad()[1] == doctest::Approx(4.0));
        CHECK(b.grad()[0] == doctest::Approx(6.0));
    }
}

TEST_CASE("cross_entropy_rows matches -log softmax oracle") {
    Rng rng(11);
    Tensor z = random_tensor(rng, {4, 5}, -3, 3, false);
    std::vector<int> labels = {0, 3, 2, 4};
    Tensor ce = cross_entropy_rows(z, labels);
    for (int r = 0; r < 4; ++r) {
        Tensor p = softmax_t(index_rows(z, {r}), 1.0);
        const double expect = -std::log(p.at({0, labels[static_cast<size_t>(r)]}));
        CHECK(ce.values()[static_cast<size_t>(r)] == doctest::Approx(expect).epsilon(1e-10));
    }

    double worst = 0.0;
    for (uint64_t seed = 0; seed < 5; ++seed) {
        Rng r2 = Rng::derive(74, seed);
        Tensor zz = random_tensor(r2, {3, 4}, -2, 2);
        auto f = [&] { return mean_all(cross_entropy_rows(zz, {1, 0, 3})); };
        worst = std::max(worst, grad_check(f, {zz}, 1e-4));
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("focal_bce values and gradient") {
    // gamma=0, alpha=0.5 reduces to 0.5 * binary cross-entropy
    Rng rng(12);
    Tensor z = random_tensor(rng, {6}, -3, 3, false);
    std::vector<double> tv = {1, 0, 1, 1, 0, 0};
    Tensor t = Tensor::from({6}, std::vector<double>(tv));
    Tensor fl = focal_bce(z, t, 0.0, 0.5);
    for (size_t i = 0; i < 6; ++i) {
        const double p = 1.0 / (1.0 + std::exp(-z.values()[i]));
        const double bce = tv[i] > 0.5 ? -std::log(p) : -std::log(1.0 - p);
        CHECK(fl.values()[i] == doctest::Approx(0.5 * bce).epsilon(1e-9));
    }

    double worst = 0.0;
    for (uint64_t seed = 0; seed < 5; ++seed) {
        Rng r2 = Rng::derive(75, seed);
        Tensor zz = random_tensor(r2, {3, 4}, -3, 3);
        Tensor tt = Tensor::from({3, 4}, [&] {
            std::vector<double> v(12);
            for (double& x : v) x = r2.uniform() < 0.5 ? 0.0 : 1.0;
            return v;
        }());
        auto f = [&] { return mean_all(focal_bce(zz, tt, 2.0, 0.25)); };
        worst = std::max(worst, grad_check(f, {zz}, 1e-4));
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("smooth_l1 piecewise values") {
    Tensor pred = Tensor::from({4}, {0.0, 0.5, 2.0, -3.0});
    Tensor target = Tensor::zeros({4});
    Tensor l = smooth_l1(pred, target);
    CHECK(l.values()[0] == 0.0);
    CHECK(l.values()[1] == doctest::Approx(0.125));
    CHECK(l.values()[2] == doctest::Approx(1.5));
    CHECK(l.values()[3] == doctest::Approx(2.5));
}
