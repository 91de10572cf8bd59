#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "hotm/tensor.hpp"

using namespace hotm;
using hotm::testing::DTensor;
using hotm::testing::grad_vs_fd;
using hotm::testing::random_values;

TEST_CASE("matmul basics") {
    DTensor eye = DTensor::from_data({2, 2}, {1, 0, 0, 1});
    DTensor m = DTensor::from_data({2, 2}, {1, 2, 3, 4});
    CHECK(matmul(eye, m).data() == std::vector<double>{1, 2, 3, 4});

    DTensor row = DTensor::from_data({1, 2}, {1, 0});
    DTensor col = DTensor::from_data({2, 1}, {0, 5});
    CHECK(matmul(row, col).item() == 0.0);

    DTensor bad = DTensor::zeros({3, 2});
    CHECK_THROWS_WITH_AS(matmul(m, bad), doctest::Contains("[2x2]"), DimensionError);
}

TEST_CASE("matmul gradient matches finite differences") {
    Rng rng(7);
    auto a = random_values(rng, 12);
    auto b = random_values(rng, 8);
    double err = grad_vs_fd(
        [](const std::vector<DTensor>& in) { return sum(matmul(in[0], in[1])); },
        {{3, 4}, {4, 2}}, {a, b});
    CHECK(err < 1e-4);
}

TEST_CASE("conv2d basics") {
    DTensor x = DTensor::from_data({1, 1, 1, 1}, {2.0});
    std::vector<double> ident(9, 0.0);
    ident[4] = 1.0;
    CHECK(conv2d(x, DTensor::from_data({1, 1, 3, 3}, ident)).item() == 2.0);

    DTensor zero_k = DTensor::zeros({2, 1, 3, 3});
    DTensor img = DTensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    DTensor zero_out = conv2d(img, zero_k);
    for (double v : zero_out.data()) CHECK(v == 0.0);

    DTensor k2 = DTensor::zeros({1, 3, 3, 3});
    CHECK_THROWS_WITH_AS(conv2d(img, k2), doctest::Contains("channel mismatch"), DimensionError);
}

namespace {
// Six nested loops, no tricks: the reference the fast kernel must match.
std::vector<double> conv_reference(const std::vector<double>& x, const std::vector<double>& k,
                                   int64_t b, int64_t c, int64_t h, int64_t w, int64_t o) {
    std::vector<double> y(static_cast<size_t>(b * o * h * w), 0.0);
    for (int64_t ib = 0; ib < b; ++ib)
        for (int64_t io = 0; io < o; ++io)
            for (int64_t i = 0; i < h; ++i)
                for (int64_t j = 0; j < w; ++j)
                    for (int64_t ic = 0; ic < c; ++ic)
                        for (int64_t t = 0; t < 9; ++t) {
                            int64_t u = t / 3, v = t % 3;
                            int64_t ii = i + u - 1, jj = j + v - 1;
                            if (ii < 0 || ii >= h || jj < 0 || jj >= w) continue;
                            y[((ib * o + io) * h + i) * w + j] +=
                                x[((ib * c + ic) * h + ii) * w + jj] *
                                k[((io * c + ic) * 3 + u) * 3 + v];
                        }
    return y;
}
}  // namespace

TEST_CASE("conv2d matches the naive reference") {
    Rng rng(11);
    int64_t b = 2, c = 2, h = 5, w = 4, o = 3;
    auto xv = random_values(rng, static_cast<size_t>(b * c * h * w));
    auto kv = random_values(rng, static_cast<size_t>(o * c * 9));
    auto got = conv2d(DTensor::from_data({b, c, h, w}, xv), DTensor::from_data({o, c, 3, 3}, kv));
    auto want = conv_reference(xv, kv, b, c, h, w, o);
    for (size_t i = 0; i < want.size(); ++i) {
        CHECK(std::abs(got.data()[i] - want[i]) < 1e-6);
    }
}

TEST_CASE("elementwise examples") {
    DTensor x = DTensor::from_data({2}, {-3.0, 3.0});
    CHECK(relu(x).data() == std::vector<double>{0.0, 3.0});

    // Constant plane has zero variance; the eps guard yields exact zeros.
    DTensor plane = DTensor::full({1, 1, 3, 3}, 7.25);
    DTensor normed = instance_norm(plane);
    for (double v : normed.data()) CHECK(v == 0.0);

    DTensor y = DTensor::from_data({4}, {1, 2, 3, 4});
    y.requires_grad();
    auto g = grad(mean(y), {y});
    for (double v : g[0].data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("softmax cross entropy") {
    DTensor uniform = DTensor::zeros({2, 4});
    CHECK(softmax_cross_entropy(uniform, {1, 3}).item() ==
          doctest::Approx(std::log(4.0)).epsilon(1e-12));

    // Loss vanishes as the correct logit dominates.
    DTensor margin = DTensor::from_data({1, 2}, {100.0, 0.0});
    CHECK(softmax_cross_entropy(margin, {0}).item() < 1e-8);

    CHECK_THROWS_AS(softmax_cross_entropy(uniform, {1, 4}), InputError);
    CHECK_THROWS_AS(softmax_cross_entropy(uniform, {1}), InputError);
}

TEST_CASE("softmax cross entropy gradient matches finite differences") {
    Rng rng(13);
    auto logits = random_values(rng, 15, -2.0, 2.0);
    std::vector<uint32_t> labels{0, 2, 1, 2, 0};
    double err = grad_vs_fd(
        [&](const std::vector<DTensor>& in) { return softmax_cross_entropy(in[0], labels); },
        {{5, 3}}, {logits});
    CHECK(err < 1e-4);
}

TEST_CASE("backward basics") {
    DTensor x = DTensor::from_data({3}, {1, 2, 3});
    x.requires_grad();
    auto g = grad(sum(x), {x});
    CHECK(g[0].data() == std::vector<double>{1, 1, 1});

    DTensor y = DTensor::from_data({2}, {1, 2});
    y.requires_grad();
    auto g2 = grad(sum(square(y)), {y});
    CHECK(g2[0].data() == std::vector<double>{2, 4});

    DTensor vec = DTensor::zeros({3});
    vec.requires_grad();
    CHECK_THROWS_AS(grad(vec, {vec}), ContractError);
}

TEST_CASE("gradient oracle for primitive ops") {
    Rng rng(17);
    auto unary = [&](const char* name, auto op, double lo, double hi, double tol) {
        CAPTURE(name);
        auto v = random_values(rng, 12, lo, hi);
        double err = grad_vs_fd(
            [&](const std::vector<DTensor>& in) { return sum(op(in[0])); }, {{3, 4}}, {v});
        CHECK(err < tol);
    };
    unary("relu", [](const DTensor& t) { return relu(t); }, 0.1, 2.0, 1e-6);
    unary("exp", [](const DTensor& t) { return exp(t); }, -1.0, 1.0, 1e-6);
    unary("log", [](const DTensor& t) { return log(t); }, 0.5, 3.0, 1e-6);
    unary("sqrt", [](const DTensor& t) { return sqrt(t); }, 0.5, 3.0, 1e-6);
    unary("square", [](const DTensor& t) { return square(t); }, -2.0, 2.0, 1e-6);
    unary("scalar_mul", [](const DTensor& t) { return scalar_mul(t, 2.5); }, -2.0, 2.0, 1e-6);
    unary("transpose", [](const DTensor& t) { return sum(square(transpose(t))); }, -2.0, 2.0,
          1e-6);
    unary("reshape", [](const DTensor& t) { return sum(square(reshape(t, {12}))); }, -2.0, 2.0,
          1e-6);
    unary("flatten", [](const DTensor& t) { return sum(square(flatten(t))); }, -2.0, 2.0, 1e-6);
    unary("mean", [](const DTensor& t) { return mean(square(t)); }, -2.0, 2.0, 1e-4);

    auto binary = [&](const char* name, auto op, double tol) {
        CAPTURE(name);
        auto a = random_values(rng, 12, 0.5, 2.0);
        auto b = random_values(rng, 12, 0.5, 2.0);
        double err = grad_vs_fd(
            [&](const std::vector<DTensor>& in) { return sum(op(in[0], in[1])); },
            {{3, 4}, {3, 4}}, {a, b});
        CHECK(err < tol);
    };
    binary("add", [](const DTensor& a, const DTensor& b) { return add(a, b); }, 1e-6);
    binary("sub", [](const DTensor& a, const DTensor& b) { return sub(a, b); }, 1e-6);
    binary("mul", [](const DTensor& a, const DTensor& b) { return mul(a, b); }, 1e-6);
    binary("div", [](const DTensor& a, const DTensor& b) { return div(a, b); }, 1e-6);
    binary("dot", [](const DTensor& a, const DTensor& b) { return dot(a, b); }, 1e-6);

    SUBCASE("broadcast add and mul") {
        auto big = random_values(rng, 24);
        auto small = random_values(rng, 3);
        double err = grad_vs_fd(
            [](const std::vector<DTensor>& in) { return sum(square(add(in[0], in[1]))); },
            {{2, 3, 2, 2}, {1, 3, 1, 1}}, {big, small});
        CHECK(err < 1e-4);
        err = grad_vs_fd(
            [](const std::vector<DTensor>& in) { return sum(square(mul(in[0], in[1]))); },
            {{2, 3, 2, 2}, {1, 3, 1, 1}}, {big, small});
        CHECK(err < 1e-4);
    }

    SUBCASE("reductions and views") {
        auto v = random_values(rng, 24);
        double err = grad_vs_fd(
            [](const std::vector<DTensor>& in) {
                return sum(square(sum_to(in[0], {2, 3, 1, 1})));
            },
            {{2, 3, 2, 2}}, {v});
        CHECK(err < 1e-4);
        auto w = random_values(rng, 6);
        err = grad_vs_fd(
            [](const std::vector<DTensor>& in) {
                return sum(square(broadcast_to(in[0], {2, 3, 2, 2})));
            },
            {{2, 3, 1, 1}}, {w});
        CHECK(err < 1e-4);
        auto flat = random_values(rng, 10);
        err = grad_vs_fd(
            [](const std::vector<DTensor>& in) { return sum(square(slice(in[0], 3, 4))); },
            {{10}}, {flat});
        CHECK(err < 1e-6);
    }

    SUBCASE("pooling, norm, conv") {
        auto v = random_values(rng, 32);
        double err = grad_vs_fd(
            [](const std::vector<DTensor>& in) { return sum(square(avg_pool2d(in[0]))); },
            {{1, 2, 4, 4}}, {v});
        CHECK(err < 1e-4);
        err = grad_vs_fd(
            [](const std::vector<DTensor>& in) { return sum(square(instance_norm(in[0]))); },
            {{1, 2, 4, 4}}, {v});
        CHECK(err < 1e-4);
        auto x = random_values(rng, 2 * 2 * 4 * 4);
        auto k = random_values(rng, 3 * 2 * 9);
        err = grad_vs_fd(
            [](const std::vector<DTensor>& in) { return sum(square(conv2d(in[0], in[1]))); },
            {{2, 2, 4, 4}, {3, 2, 3, 3}}, {x, k});
        CHECK(err < 1e-4);
    }

    SUBCASE("smooth l1 both branches") {
        double err = grad_vs_fd(
            [](const std::vector<DTensor>& in) { return smooth_l1(in[0]); }, {{1}}, {{0.4}});
        CHECK(err < 1e-6);
        err = grad_vs_fd(
            [](const std::vector<DTensor>& in) { return smooth_l1(in[0]); }, {{1}}, {{-2.3}});
        CHECK(err < 1e-6);
    }
}

TEST_CASE("gradients flow through gradients") {
    // h(x) = <dL/dx, c> with L = sum((x k)^2); checking dh/dx and dh/dk covers
    // the second-order path used by the inner-loop updates.
    Rng rng(23);
    SUBCASE("matmul") {
        auto a = random_values(rng, 6);
        auto b = random_values(rng, 6);
        auto c = random_values(rng, 6);
        double err = grad_vs_fd(
            [&](const std::vector<DTensor>& in) {
                auto loss = sum(square(matmul(in[0], in[1])));
                auto g = grad(loss, {in[0]}, /*create_graph=*/true)[0];
                return dot(g, DTensor::from_data({2, 3}, c));
            },
            {{2, 3}, {3, 2}}, {a, b}, 1e-6);
        CHECK(err < 1e-4);
    }
    SUBCASE("conv2d") {
        auto x = random_values(rng, 16);
        auto k = random_values(rng, 9);
        auto c = random_values(rng, 16);
        double err = grad_vs_fd(
            [&](const std::vector<DTensor>& in) {
                auto loss = sum(square(conv2d(in[0], in[1])));
                auto g = grad(loss, {in[0]}, /*create_graph=*/true)[0];
                return dot(g, DTensor::from_data({1, 1, 4, 4}, c));
            },
            {{1, 1, 4, 4}, {1, 1, 3, 3}}, {x, k}, 1e-6);
        CHECK(err < 1e-4);
    }
    SUBCASE("two-step unroll hypergradient") {
        auto w0 = random_values(rng, 4);
        auto alpha = std::vector<double>{0.3};
        auto target = random_values(rng, 4);
        double err = grad_vs_fd(
            [&](const std::vector<DTensor>& in) {
                DTensor theta = in[0];
                for (int step = 0; step < 2; ++step) {
                    auto inner = sum(square(theta));
                    auto g = grad(inner, {theta}, /*create_graph=*/true)[0];
                    theta = sub(theta, mul(in[1], g));
                }
                return sum(square(sub(theta, DTensor::from_data({4}, target))));
            },
            {{4}, {1}}, {w0, alpha}, 1e-6);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("replay determinism") {
    Rng rng(29);
    DTensor x = DTensor::from_data({3, 4}, random_values(rng, 12));
    x.requires_grad();
    DTensor k = DTensor::from_data({2, 4}, random_values(rng, 8));
    k.requires_grad();
    auto loss = sum(square(matmul(x, transpose(k))));
    auto first = grad(loss, {x, k});
    auto second = grad(loss, {x, k});
    CHECK(std::memcmp(first[0].data().data(), second[0].data().data(), 12 * sizeof(double)) == 0);
    CHECK(std::memcmp(first[1].data().data(), second[1].data().data(), 8 * sizeof(double)) == 0);
}

TEST_CASE("detached tensors contribute no gradient") {
    DTensor x = DTensor::from_data({2}, {1.0, 2.0});
    x.requires_grad();
    auto blocked = sum(square(x.detach()));
    auto flowing = sum(square(x));
    auto g = grad(add(blocked, flowing), {x});
    CHECK(g[0].data() == std::vector<double>{2, 4});

    auto g_only_blocked = grad(blocked, {x});
    CHECK(g_only_blocked[0].data() == std::vector<double>{0, 0});
}

TEST_CASE("recording can be suspended") {
    DTensor x = DTensor::from_data({2}, {1.0, 2.0});
    x.requires_grad();
    NoGradGuard guard;
    CHECK_FALSE(square(x).has_node());
}

TEST_CASE("broadcast shape errors") {
    DTensor a = DTensor::zeros({2, 3});
    DTensor b = DTensor::zeros({2, 4});
    CHECK_THROWS_AS(add(a, b), DimensionError);
    CHECK_THROWS_AS(broadcast_to(a, {3, 3}), DimensionError);
    CHECK_THROWS_AS(sum_to(a, {4}), DimensionError);
}

TEST_CASE("flatten keeps the leading dim") {
    DTensor x = DTensor::from_data({2, 1, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
    auto flat = flatten(x);
    CHECK(flat.shape() == Shape{2, 4});
    CHECK(flat.data() == x.data());
}
