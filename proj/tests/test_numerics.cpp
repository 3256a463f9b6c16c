#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "helpers.hpp"
#include "sfa/nn.hpp"
#include "sfa/tensor.hpp"

using namespace sfa;
using D64 = TensorT<double>;

TEST_CASE("matmul identity and hand arithmetic") {
    auto eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    auto m = Tensor::from_data({2, 2}, {2, 3, 4, 5});
    auto r = matmul(eye, m);
    CHECK(r.data() == std::vector<Real>{2, 3, 4, 5});

    auto a = Tensor::from_data({1, 2}, {1, 2});
    auto b = Tensor::from_data({2, 1}, {3, 4});
    CHECK(matmul(a, b).data() == std::vector<Real>{11});
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
    auto a = Tensor::zeros({2, 3});
    auto b = Tensor::zeros({2, 2});
    CHECK_THROWS_AS(matmul(a, b), DimensionError);
}

TEST_CASE("matmul gradient of sum(output) equals ones x b^T") {
    std::mt19937 rng(11);
    auto a = D64::randn({3, 4}, rng).set_requires_grad(true);
    auto b = D64::randn({4, 2}, rng);
    auto out = matmul(a, b);
    out.backward();

    // Analytic: d sum(AB) / dA = ones(3,2) * B^T.
    std::vector<double> expect(12, 0.0);
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 4; ++k)
            for (int j = 0; j < 2; ++j) expect[i * 4 + k] += b.data()[k * 2 + j];
    CHECK(test::max_abs_diff(a.grad(), expect) < 1e-12);

    // Finite-difference oracle, step 1e-4, relative tolerance 1e-3.
    auto fd = test::finite_diff_grad<double>(a, [&]() {
        double s = 0;
        auto y_ = matmul(a, b);
            for (double v : y_.data()) s += v;
        return s;
    });
    CHECK(test::max_rel_diff(a.grad(), fd) < 1e-3);
}

// Direct nested-loop cross-correlation, the conv oracle.
static std::vector<double> conv_oracle(const D64& x, const D64& w, const D64& b, int stride,
                                       int pad, int groups) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Cout = w.dim(0), Cg = w.dim(1), K = w.dim(2);
    const int Ho = (H + 2 * pad - K) / stride + 1;
    const int Wo = (W + 2 * pad - K) / stride + 1;
    const int cpg = Cout / groups;
    std::vector<double> y(static_cast<std::size_t>(N) * Cout * Ho * Wo, 0.0);
    for (int n = 0; n < N; ++n)
        for (int co = 0; co < Cout; ++co)
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    double acc = b.numel() ? b.data()[co] : 0.0;
                    for (int cg = 0; cg < Cg; ++cg)
                        for (int ky = 0; ky < K; ++ky)
                            for (int kx = 0; kx < K; ++kx) {
                                const int iy = oy * stride + ky - pad;
                                const int ix = ox * stride + kx - pad;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                const int c = (co / cpg) * Cg + cg;
                                acc += x.data()[((n * C + c) * H + iy) * W + ix] *
                                       w.data()[((co * Cg + cg) * K + ky) * K + kx];
                            }
                    y[((n * Cout + co) * Ho + oy) * Wo + ox] = acc;
                }
    return y;
}

TEST_CASE("conv2d counting case: ones 3x3, ones kernel, pad 1") {
    auto x = Tensor::ones({1, 1, 3, 3});
    auto w = Tensor::ones({1, 1, 3, 3});
    auto b = Tensor::zeros({1});
    auto y = conv2d(x, w, b, 1, 1, 1);
    CHECK(y.shape() == Shape{1, 1, 3, 3});
    CHECK(y.data()[4] == doctest::Approx(9.0));   // center covers all nine taps
    CHECK(y.data()[0] == doctest::Approx(4.0));   // corner covers four
}

TEST_CASE("conv2d zero input gives bias broadcast") {
    auto x = Tensor::zeros({1, 2, 4, 4});
    std::mt19937 rng(3);
    auto w = Tensor::randn({3, 2, 3, 3}, rng);
    auto b = Tensor::from_data({3}, {0.5f, -1.0f, 2.0f});
    auto y = conv2d(x, w, b, 1, 1, 1);
    for (int co = 0; co < 3; ++co)
        for (int i = 0; i < 16; ++i)
            CHECK(y.data()[co * 16 + i] == doctest::Approx(b.data()[co]));
}

TEST_CASE("conv2d random 1x2x5x5 against nested-loop oracle") {
    std::mt19937 rng(17);
    auto x = D64::randn({1, 2, 5, 5}, rng);
    auto w = D64::randn({3, 2, 3, 3}, rng);
    auto b = D64::randn({3}, rng);
    for (int stride : {1, 2})
        for (int pad : {0, 1}) {
            auto y = conv2d(x, w, b, stride, pad, 1);
            auto ref = conv_oracle(x, w, b, stride, pad, 1);
            CHECK(test::max_abs_diff(y.data(), ref) < 1e-6);
        }
}

TEST_CASE("depthwise conv matches oracle and grouped validation fires") {
    std::mt19937 rng(23);
    auto x = D64::randn({2, 4, 5, 5}, rng);
    auto w = D64::randn({4, 1, 3, 3}, rng);
    auto b = D64::randn({4}, rng);
    auto y = conv2d(x, w, b, 1, 1, 4);
    CHECK(test::max_abs_diff(y.data(), conv_oracle(x, w, b, 1, 1, 4)) < 1e-6);

    CHECK_THROWS_AS(conv2d(x, w, b, 0, 1, 4), ParameterError);
    CHECK_THROWS_AS(conv2d(x, w, b, 1, -1, 4), ParameterError);
    CHECK_THROWS_AS(conv2d(x, w, b, 1, 1, 3), ParameterError);
}

TEST_CASE("conv2d gradients match finite differences") {
    std::mt19937 rng(29);
    auto x = D64::randn({1, 2, 4, 4}, rng).set_requires_grad(true);
    auto w = D64::randn({2, 2, 3, 3}, rng).set_requires_grad(true);
    auto b = D64::randn({2}, rng).set_requires_grad(true);
    auto loss = [&]() {
        double s = 0;
        auto y_ = conv2d(x, w, b, 1, 1, 1);
            for (double v : y_.data()) s += v * v;
        return s;
    };
    conv2d(x, w, b, 1, 1, 1);  // warm path
    {
        auto y = conv2d(x, w, b, 1, 1, 1);
        auto l = sum_all(mul(y, y));
        l.backward();
    }
    CHECK(test::max_rel_diff(x.grad(), test::finite_diff_grad<double>(x, loss)) < 1e-3);
    CHECK(test::max_rel_diff(w.grad(), test::finite_diff_grad<double>(w, loss)) < 1e-3);
    CHECK(test::max_rel_diff(b.grad(), test::finite_diff_grad<double>(b, loss)) < 1e-3);
}

TEST_CASE("batchnorm constant input in training mode returns beta") {
    auto x = Tensor(Shape{2, 3, 2, 2}, 5.0f);
    auto gamma = Tensor::ones({3});
    auto beta = Tensor::from_data({3}, {0.25f, -0.5f, 1.5f});
    std::vector<Real> rm(3, 0.0f), rv(3, 1.0f);
    auto y = batchnorm2d(x, gamma, beta, rm, rv, true);
    for (int c = 0; c < 3; ++c)
        for (int n = 0; n < 2; ++n)
            for (int i = 0; i < 4; ++i)
                CHECK(y.data()[(n * 3 + c) * 4 + i] == doctest::Approx(beta.data()[c]));
}

TEST_CASE("batchnorm eval with unit stats and identity affine is identity") {
    std::mt19937 rng(31);
    auto x = Tensor::randn({2, 3, 2, 2}, rng);
    auto gamma = Tensor::ones({3});
    auto beta = Tensor::zeros({3});
    std::vector<Real> rm(3, 0.0f), rv(3, 1.0f);
    auto y = batchnorm2d(x, gamma, beta, rm, rv, false, 0.1f, 0.0f);
    CHECK(test::max_abs_diff(y.data(), x.data()) < 1e-6f);
}

TEST_CASE("batchnorm training matches two-pass mean/var oracle") {
    std::mt19937 rng(37);
    auto x = D64::randn({4, 3, 5, 5}, rng);
    auto gamma = D64::from_data({3}, {1.5, 0.5, 2.0});
    auto beta = D64::from_data({3}, {0.1, -0.2, 0.0});
    std::vector<double> rm(3, 0.0), rv(3, 1.0);
    auto y = batchnorm2d(x, gamma, beta, rm, rv, true, 0.1, 1e-5);

    const int N = 4, C = 3, HW = 25;
    for (int c = 0; c < C; ++c) {
        double mean = 0.0;
        for (int n = 0; n < N; ++n)
            for (int i = 0; i < HW; ++i) mean += x.data()[(n * C + c) * HW + i];
        mean /= N * HW;
        double var = 0.0;
        for (int n = 0; n < N; ++n)
            for (int i = 0; i < HW; ++i) {
                const double d = x.data()[(n * C + c) * HW + i] - mean;
                var += d * d;
            }
        var /= N * HW;
        for (int n = 0; n < N; ++n)
            for (int i = 0; i < HW; ++i) {
                const double expect = (x.data()[(n * C + c) * HW + i] - mean) /
                                          std::sqrt(var + 1e-5) * gamma.data()[c] +
                                      beta.data()[c];
                CHECK(std::abs(y.data()[(n * C + c) * HW + i] - expect) < 1e-5);
            }
    }
}

TEST_CASE("batchnorm gradient matches finite differences") {
    std::mt19937 rng(41);
    auto x = D64::randn({3, 2, 3, 3}, rng).set_requires_grad(true);
    auto gamma = D64::from_data({2}, {1.2, 0.7}).set_requires_grad(true);
    auto beta = D64::from_data({2}, {0.3, -0.1}).set_requires_grad(true);
    auto run = [&]() {
        std::vector<double> rm(2, 0.0), rv(2, 1.0);
        return batchnorm2d(x, gamma, beta, rm, rv, true);
    };
    auto loss = [&]() {
        double s = 0;
        int i = 0;
        auto y_ = run();
            for (double v : y_.data()) s += v * v * (0.3 + 0.01 * (i++ % 7));
        return s;
    };
    {
        auto y = run();
        // weighted square sum so the gradient is not annihilated by symmetry
        auto w = D64(y.shape());
        for (std::int64_t i = 0; i < y.numel(); ++i)
            w.data()[i] = 0.3 + 0.01 * (i % 7);
        auto l = sum_all(mul(mul(y, y), w));
        l.backward();
    }
    CHECK(test::max_rel_diff(x.grad(), test::finite_diff_grad<double>(x, loss), 1e-6) < 1e-3);
    CHECK(test::max_rel_diff(gamma.grad(), test::finite_diff_grad<double>(gamma, loss)) < 1e-3);
    CHECK(test::max_rel_diff(beta.grad(), test::finite_diff_grad<double>(beta, loss)) < 1e-3);
}

TEST_CASE("custom_grad rectangular window gates the gradient") {
    auto x = Tensor::from_data({3}, {-1.0f, 2.0f, 4.0f}).set_requires_grad(true);
    auto y = custom_grad(
        x, [](Real v) { return std::floor(std::clamp(v, 0.0f, 4.0f) + 0.5f); },
        SurrogateSpec(0.0, 4.0));
    y.backward();
    CHECK(x.grad()[0] == 0.0f);  // below the window
    CHECK(x.grad()[1] == 1.0f);  // inside
    CHECK(x.grad()[2] == 1.0f);  // boundary is inclusive
}

TEST_CASE("surrogate spec rejects inverted windows") {
    CHECK_THROWS_AS(SurrogateSpec(2.0, 1.0), ParameterError);
}

TEST_CASE("adamw zero gradient and zero decay leaves parameters unchanged") {
    auto p = Tensor::from_data({3}, {1.0f, -2.0f, 0.5f}).set_requires_grad(true);
    p.zero_grad();
    std::vector<Tensor> params{p};
    AdamW<Real> opt;
    opt.step(params);
    CHECK(p.data() == std::vector<Real>{1.0f, -2.0f, 0.5f});
}

TEST_CASE("adamw first step moves opposite to gradient sign") {
    auto p = Tensor::from_data({1}, {0.0f}).set_requires_grad(true);
    p.grad().assign(1, 1.0f);
    std::vector<Tensor> params{p};
    AdamW<Real>::Hyper h;
    h.lr = 0.1f;
    AdamW<Real> opt(h);
    opt.step(params);
    CHECK(p.data()[0] < 0.0f);
}

TEST_CASE("adamw drives a quadratic bowl to the minimum") {
    auto p = D64::from_data({1}, {1.0}).set_requires_grad(true);
    std::vector<D64> params{p};
    AdamW<double>::Hyper h;
    h.lr = 0.05;
    AdamW<double> opt(h);
    for (int step = 0; step < 200; ++step) {
        p.zero_grad();
        auto loss = mul(p, p);
        loss.backward();
        opt.step(params);
    }
    CHECK(std::abs(p.data()[0]) < 1e-3);
}

TEST_CASE("adamw aborts on non-finite gradients") {
    auto p = Tensor::from_data({1}, {0.0f}).set_requires_grad(true);
    p.grad().assign(1, std::numeric_limits<Real>::quiet_NaN());
    std::vector<Tensor> params{p};
    AdamW<Real> opt;
    CHECK_THROWS(opt.step(params));
}

TEST_CASE("elementwise ops gradient-check under finite differences") {
    std::mt19937 rng(43);
    auto a = D64::randn({4, 5}, rng).set_requires_grad(true);
    auto b = D64::randn({4, 5}, rng).set_requires_grad(true);

    SUBCASE("mul") {
        auto loss = [&]() {
            double s = 0;
            auto y_ = mul(a, b);
            for (double v : y_.data()) s += v;
            return s;
        };
        mul(a, b).backward();
        CHECK(test::max_rel_diff(a.grad(), test::finite_diff_grad<double>(a, loss)) < 1e-3);
        CHECK(test::max_rel_diff(b.grad(), test::finite_diff_grad<double>(b, loss)) < 1e-3);
    }
    SUBCASE("relu") {
        auto loss = [&]() {
            double s = 0;
            auto y_ = relu(a);
            for (double v : y_.data()) s += v * v;
            return s;
        };
        auto y = relu(a);
        sum_all(mul(y, y)).backward();
        CHECK(test::max_rel_diff(a.grad(), test::finite_diff_grad<double>(a, loss)) < 1e-3);
    }
    SUBCASE("softmax") {
        auto loss = [&]() {
            double s = 0;
            int i = 0;
            auto y_ = softmax_lastdim(a);
            for (double v : y_.data()) s += v * (1 + 0.1 * (i++ % 3));
            return s;
        };
        auto y = softmax_lastdim(a);
        auto w = D64(y.shape());
        for (std::int64_t i = 0; i < y.numel(); ++i) w.data()[i] = 1 + 0.1 * (i % 3);
        sum_all(mul(y, w)).backward();
        CHECK(test::max_rel_diff(a.grad(), test::finite_diff_grad<double>(a, loss), 1e-6) < 1e-3);
    }
    SUBCASE("layernorm") {
        auto g = D64::from_data({5}, {1.0, 1.1, 0.9, 1.2, 0.8}).set_requires_grad(true);
        auto be = D64::zeros({5}).set_requires_grad(true);
        auto loss = [&]() {
            double s = 0;
            int i = 0;
            auto y_ = layernorm_lastdim(a, g, be);
            for (double v : y_.data()) s += v * v * (0.5 + 0.01 * (i++ % 5));
            return s;
        };
        auto y = layernorm_lastdim(a, g, be);
        auto w = D64(y.shape());
        for (std::int64_t i = 0; i < y.numel(); ++i) w.data()[i] = 0.5 + 0.01 * (i % 5);
        sum_all(mul(mul(y, y), w)).backward();
        CHECK(test::max_rel_diff(a.grad(), test::finite_diff_grad<double>(a, loss), 1e-6) < 1e-3);
        CHECK(test::max_rel_diff(g.grad(), test::finite_diff_grad<double>(g, loss)) < 1e-3);
    }
}

TEST_CASE("two-op chain obeys the chain rule against finite differences") {
    std::mt19937 rng(47);
    for (int trial = 0; trial < 3; ++trial) {
        auto a = D64::randn({3, 3}, rng).set_requires_grad(true);
        auto b = D64::randn({3, 3}, rng);
        auto loss = [&]() {
            double s = 0;
            auto y_ = relu(matmul(a, b));
            for (double v : y_.data()) s += v * v;
            return s;
        };
        auto y = relu(matmul(a, b));
        sum_all(mul(y, y)).backward();
        CHECK(test::max_rel_diff(a.grad(), test::finite_diff_grad<double>(a, loss), 1e-6) < 1e-3);
    }
}

TEST_CASE("softmax cross entropy gradient and value") {
    auto logits = D64::from_data({2, 3}, {1.0, 2.0, 0.5, -1.0, 0.0, 3.0}).set_requires_grad(true);
    std::vector<int> labels{1, 2};
    auto loss = softmax_cross_entropy(logits, labels);
    loss.backward();
    auto fd = test::finite_diff_grad<double>(logits, [&]() {
        return softmax_cross_entropy(logits, labels).data()[0];
    });
    CHECK(test::max_rel_diff(logits.grad(), fd, 1e-7) < 1e-3);
}

TEST_CASE("bmm with transposes matches matmul semantics") {
    std::mt19937 rng(53);
    auto a = D64::randn({2, 3, 4}, rng).set_requires_grad(true);
    auto b = D64::randn({2, 3, 5}, rng).set_requires_grad(true);
    auto y = bmm(a, b, true, false);  // [2,4,5] = a^T b per batch
    CHECK(y.shape() == Shape{2, 4, 5});
    auto loss = [&]() {
        double s = 0;
        auto y_ = bmm(a, b, true, false);
            for (double v : y_.data()) s += v * v;
        return s;
    };
    sum_all(mul(y, y)).backward();
    CHECK(test::max_rel_diff(a.grad(), test::finite_diff_grad<double>(a, loss), 1e-6) < 1e-3);
    CHECK(test::max_rel_diff(b.grad(), test::finite_diff_grad<double>(b, loss), 1e-6) < 1e-3);
}

TEST_CASE("layout round trips preserve values and gradients") {
    std::mt19937 rng(59);
    auto x = D64::randn({2, 3, 4, 4}, rng).set_requires_grad(true);
    auto tok = nchw_to_tokens(x);
    CHECK(tok.shape() == Shape{2, 16, 3});
    auto back = tokens_to_nchw(tok, 4, 4);
    CHECK(test::max_abs_diff(back.data(), x.data()) == 0.0);

    auto heads = split_heads(tok, 3);
    CHECK(heads.shape() == Shape{6, 16, 1});
    auto merged = merge_heads(heads, 3);
    CHECK(test::max_abs_diff(merged.data(), tok.data()) == 0.0);

    sum_all(mul(back, back)).backward();
    auto fd = test::finite_diff_grad<double>(x, [&]() {
        double s = 0;
        auto y_ = tokens_to_nchw(nchw_to_tokens(x), 4, 4);
            for (double v : y_.data()) s += v * v;
        return s;
    });
    CHECK(test::max_rel_diff(x.grad(), fd, 1e-6) < 1e-3);
}

TEST_CASE("determinism: identical seeds give bit-identical tensors and products") {
    std::mt19937 r1(101), r2(101);
    auto a1 = Tensor::randn({8, 8}, r1);
    auto a2 = Tensor::randn({8, 8}, r2);
    CHECK(a1.data() == a2.data());
    auto b1 = Tensor::randn({8, 8}, r1);
    auto b2 = Tensor::randn({8, 8}, r2);
    CHECK(matmul(a1, b1).data() == matmul(a2, b2).data());
}
