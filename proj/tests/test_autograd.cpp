#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "tcupgan/autograd.hpp"
#include "test_support.hpp"

using namespace tcupgan;
using namespace tcupgan::nn;

namespace {

using GraphFn = std::function<Var(const std::vector<Var>&)>;

double projected(const Tensor& out, const Tensor& r) {
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += static_cast<double>(out.data()[i]) * r.data()[i];
    return s;
}

// Largest |analytic - numeric| relative to the largest analytic magnitude.
double gradient_error(const GraphFn& fn, std::vector<Tensor> inputs, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<Var> leaves;
    for (auto& t : inputs) leaves.push_back(leaf(t, true));
    Var out = fn(leaves);
    Tensor r = testing::random_tensor(out->value.shape(), rng);
    std::vector<std::pair<Var, Tensor>> seeds{{out, r}};
    backward(seeds);

    const float h = 1e-2f;
    double worst = 0.0;
    double scale = 1e-3;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            auto eval = [&](float delta) {
                std::vector<Var> probe;
                for (std::size_t j = 0; j < inputs.size(); ++j) {
                    Tensor t = inputs[j];
                    if (j == k) t.data()[i] += delta;
                    probe.push_back(constant(t));
                }
                return projected(fn(probe)->value, r);
            };
            const double numeric = (eval(h) - eval(-h)) / (2.0 * h);
            const double analytic = leaves[k]->grad.empty() ? 0.0 : leaves[k]->grad.data()[i];
            worst = std::max(worst, std::abs(numeric - analytic));
            scale = std::max(scale, std::abs(analytic));
        }
    }
    return worst / scale;
}

Tensor naive_conv(const Tensor& x, const Tensor& w, const Tensor* b, int stride, int pad) {
    const Shape xs = x.shape();
    const Shape ws = w.shape();
    const int oh = (xs.h + 2 * pad - ws.h) / stride + 1;
    const int ow = (xs.w + 2 * pad - ws.w) / stride + 1;
    Tensor y(Shape{xs.n, ws.n, oh, ow});
    for (int n = 0; n < xs.n; ++n)
        for (int co = 0; co < ws.n; ++co)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    double acc = b ? b->data()[co] : 0.0;
                    for (int ci = 0; ci < xs.c; ++ci)
                        for (int ky = 0; ky < ws.h; ++ky)
                            for (int kx = 0; kx < ws.w; ++kx) {
                                const int iy = oy * stride - pad + ky;
                                const int ix = ox * stride - pad + kx;
                                if (iy < 0 || ix < 0 || iy >= xs.h || ix >= xs.w) continue;
                                acc += static_cast<double>(x.at(n, ci, iy, ix)) * w.at(co, ci, ky, kx);
                            }
                    y.at(n, co, oy, ox) = static_cast<float>(acc);
                }
    return y;
}

}  // namespace

TEST_CASE("conv2d matches a direct loop") {
    std::mt19937_64 rng(1);
    for (int stride : {1, 2}) {
        for (int k : {1, 3}) {
            const int pad = k / 2;
            Tensor x = testing::random_tensor({2, 3, 8, 8}, rng);
            Tensor w = testing::random_tensor({5, 3, k, k}, rng);
            Tensor b = testing::random_tensor({5, 1, 1, 1}, rng);
            Var y = conv2d(constant(x), constant(w), constant(b), stride, pad);
            Tensor ref = naive_conv(x, w, &b, stride, pad);
            REQUIRE(y->value.shape() == ref.shape());
            for (std::size_t i = 0; i < ref.size(); ++i) {
                CHECK(y->value.data()[i] == doctest::Approx(ref.data()[i]).epsilon(1e-5));
            }
        }
    }
}

TEST_CASE("conv2d rejects mismatched channels") {
    CHECK_THROWS_AS(conv2d(constant(Tensor({1, 2, 4, 4})), constant(Tensor({1, 3, 3, 3})), nullptr, 1, 1),
                    ShapeError);
}

TEST_CASE("gradients of elementary ops agree with finite differences") {
    std::mt19937_64 rng(2);
    const Shape s{2, 3, 4, 4};
    SUBCASE("conv2d stride 1") {
        auto fn = [](const std::vector<Var>& v) { return conv2d(v[0], v[1], v[2], 1, 1); };
        CHECK(gradient_error(fn, {testing::random_tensor(s, rng), testing::random_tensor({4, 3, 3, 3}, rng),
                                  testing::random_tensor({4, 1, 1, 1}, rng)},
                             10) < 1e-2);
    }
    SUBCASE("conv2d stride 2") {
        auto fn = [](const std::vector<Var>& v) { return conv2d(v[0], v[1], nullptr, 2, 1); };
        CHECK(gradient_error(fn, {testing::random_tensor(s, rng), testing::random_tensor({2, 3, 3, 3}, rng)},
                             11) < 1e-2);
    }
    SUBCASE("conv2d pointwise") {
        auto fn = [](const std::vector<Var>& v) { return conv2d(v[0], v[1], v[2], 1, 0); };
        CHECK(gradient_error(fn, {testing::random_tensor(s, rng), testing::random_tensor({2, 3, 1, 1}, rng),
                                  testing::random_tensor({2, 1, 1, 1}, rng)},
                             12) < 1e-2);
    }
    SUBCASE("add, sigmoid, leaky_relu") {
        auto fn = [](const std::vector<Var>& v) { return leaky_relu(sigmoid(add(v[0], v[1])), 0.2f); };
        CHECK(gradient_error(fn, {testing::random_tensor(s, rng), testing::random_tensor(s, rng)}, 13) < 1e-2);
        auto lr = [](const std::vector<Var>& v) { return leaky_relu(v[0], 0.2f); };
        CHECK(gradient_error(lr, {testing::random_tensor(s, rng, 0.1f, 1.0f)}, 14) < 1e-2);
        CHECK(gradient_error(lr, {testing::random_tensor(s, rng, -1.0f, -0.1f)}, 15) < 1e-2);
    }
    SUBCASE("layer_norm") {
        auto fn = [](const std::vector<Var>& v) { return layer_norm(v[0], v[1], v[2], 1e-5f); };
        CHECK(gradient_error(fn, {testing::random_tensor(s, rng), testing::random_tensor({3, 1, 1, 1}, rng),
                                  testing::random_tensor({3, 1, 1, 1}, rng)},
                             16) < 1e-2);
    }
    SUBCASE("concat, slice, upsample") {
        auto fn = [](const std::vector<Var>& v) {
            Var cat = concat_channels({v[0], v[1]});
            return upsample_nearest2x(slice_channels(cat, 1, 3));
        };
        CHECK(gradient_error(fn, {testing::random_tensor(s, rng), testing::random_tensor({2, 2, 4, 4}, rng)},
                             17) < 1e-2);
        auto batch = [](const std::vector<Var>& v) {
            std::vector<Var> parts{v[0], v[1]};
            return concat_batch(parts);
        };
        CHECK(gradient_error(batch, {testing::random_tensor(s, rng), testing::random_tensor(s, rng)}, 18) <
              1e-2);
    }
    SUBCASE("lstm_cell") {
        auto with_state = [](const std::vector<Var>& v) { return lstm_cell(v[0], v[1]); };
        CHECK(gradient_error(with_state,
                             {testing::random_tensor({2, 8, 3, 3}, rng), testing::random_tensor({2, 2, 3, 3}, rng)},
                             19) < 1e-2);
        auto zero_state = [](const std::vector<Var>& v) { return lstm_cell(v[0], nullptr); };
        CHECK(gradient_error(zero_state, {testing::random_tensor({1, 8, 3, 3}, rng)}, 20) < 1e-2);
    }
}

TEST_CASE("lstm_cell computes the standard gate equations") {
    Tensor g({1, 4, 1, 1}, std::vector<float>{0.3f, -0.2f, 0.5f, 0.7f});
    Tensor c0({1, 1, 1, 1}, std::vector<float>{0.4f});
    Var out = lstm_cell(constant(g), constant(c0));
    auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
    const double c = sig(-0.2) * 0.4 + sig(0.3) * std::tanh(0.7);
    const double h = sig(0.5) * std::tanh(c);
    CHECK(out->value.data()[0] == doctest::Approx(h).epsilon(1e-6));
    CHECK(out->value.data()[1] == doctest::Approx(c).epsilon(1e-6));
}

TEST_CASE("inference graphs keep no parents") {
    Var x = constant(Tensor({1, 1, 4, 4}, 1.0f));
    Var y = sigmoid(conv2d(x, constant(Tensor({1, 1, 3, 3}, 0.1f)), nullptr, 1, 1));
    CHECK_FALSE(y->requires_grad);
    CHECK(y->inputs.empty());
}

TEST_CASE("gradients accumulate over shared inputs") {
    Var a = leaf(Tensor({1, 1, 2, 2}, 0.5f), true);
    Var y = add(a, a);
    std::vector<std::pair<Var, Tensor>> seeds{{y, Tensor({1, 1, 2, 2}, 1.0f)}};
    backward(seeds);
    for (float g : a->grad.values()) CHECK(g == 2.0f);
}
