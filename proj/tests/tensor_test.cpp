#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "nrr/optim.hpp"
#include "nrr/tensor.hpp"

using namespace nrr;
using namespace nrr::ad;

namespace {

Tensor randn(Shape s, std::mt19937_64& rng)
{
    Tensor t(std::move(s));
    std::normal_distribution<float> n;
    for (auto& v : t.data()) v = n(rng);
    return t;
}

// Direct nested-loop convolution, [N,C,D,H,W] with [Co,C,k,k,k].
Tensor naive_conv(const Tensor& x, const Tensor& k, const Tensor& b, std::size_t s, std::size_t p)
{
    const std::size_t N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
    const std::size_t Co = k.dim(0), K = k.dim(2);
    const std::size_t Do = (D + 2 * p - K) / s + 1, Ho = (H + 2 * p - K) / s + 1, Wo = (W + 2 * p - K) / s + 1;
    Tensor out({N, Co, Do, Ho, Wo});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < Co; ++o)
            for (std::size_t d = 0; d < Do; ++d)
                for (std::size_t h = 0; h < Ho; ++h)
                    for (std::size_t w = 0; w < Wo; ++w) {
                        double acc = b[o];
                        for (std::size_t c = 0; c < C; ++c)
                            for (std::size_t a = 0; a < K; ++a)
                                for (std::size_t e = 0; e < K; ++e)
                                    for (std::size_t f = 0; f < K; ++f) {
                                        const long zi = long(d * s + a) - long(p), yi = long(h * s + e) - long(p),
                                                   xi = long(w * s + f) - long(p);
                                        if (zi < 0 || yi < 0 || xi < 0 || zi >= long(D) || yi >= long(H) ||
                                            xi >= long(W))
                                            continue;
                                        acc += double(k[(((o * C + c) * K + a) * K + e) * K + f]) *
                                               x[(((n * C + c) * D + zi) * H + yi) * W + xi];
                                    }
                        out[(((n * Co + o) * Do + d) * Ho + h) * Wo + w] = float(acc);
                    }
    return out;
}

}  // namespace

TEST(Ops, ReluValues)
{
    Var y = relu(constant(Tensor({2}, std::vector<Scalar>{-1, 2})));
    EXPECT_EQ(y.value()[0], 0);
    EXPECT_EQ(y.value()[1], 2);
}

TEST(Ops, IdentityKernelConvIsInput)
{
    std::mt19937_64 rng(1);
    Tensor x = randn({1, 1, 3, 4, 5}, rng);
    Tensor k({1, 1, 1, 1, 1}, 1.0f);
    Var y = conv3d(constant(x), constant(k), constant(Tensor({1})), {});
    EXPECT_EQ(y.value(), x);
}

TEST(Ops, ConvMatchesNaiveLoop)
{
    std::mt19937_64 rng(2);
    Tensor x({1, 1, 5, 5, 5});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = float(i) / 125.0f;
    for (auto [s, p] : {std::pair<std::size_t, std::size_t>{1, 0}, {1, 1}, {2, 1}, {2, 0}}) {
        Tensor k = randn({2, 1, 3, 3, 3}, rng), b = randn({2}, rng);
        Var y = conv3d(constant(x), constant(k), constant(b), {s, p, {0, 0, 0}});
        Tensor ref = naive_conv(x, k, b, s, p);
        ASSERT_EQ(y.shape(), ref.shape());
        for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.value()[i], ref[i], 1e-6 * (1 + std::abs(ref[i])));
    }
    Tensor xm = randn({2, 3, 4, 5, 6}, rng), k = randn({4, 3, 3, 3, 3}, rng), b = randn({4}, rng);
    Var y = conv3d(constant(xm), constant(k), constant(b), {2, 1, {0, 0, 0}});
    Tensor ref = naive_conv(xm, k, b, 2, 1);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.value()[i], ref[i], 1e-5 * (1 + std::abs(ref[i])));
}

TEST(Ops, TransposedConvIsAdjointOfConv)
{
    // <conv(x), y> == <x, convT(y)> with the same kernel and zero bias
    std::mt19937_64 rng(3);
    const ConvGeometry g{2, 1, {1, 0, 1}};
    Tensor x = randn({1, 2, 6, 5, 6}, rng), k = randn({3, 2, 3, 3, 3}, rng);
    Var cx = conv3d(constant(x), constant(k), constant(Tensor({3})), g);
    Tensor y = randn(cx.shape(), rng);
    Var ty = conv_transpose3d(constant(y), constant(k), constant(Tensor({2})), g);
    ASSERT_EQ(ty.shape(), x.shape());
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < y.size(); ++i) lhs += double(cx.value()[i]) * y[i];
    for (std::size_t i = 0; i < x.size(); ++i) rhs += double(ty.value()[i]) * x[i];
    EXPECT_NEAR(lhs, rhs, 1e-4 * std::abs(lhs));
}

TEST(Ops, OutputSizes)
{
    EXPECT_EQ(conv_out_size(24, 3, {2, 1, {0, 0, 0}}), 12u);
    EXPECT_EQ(conv_out_size(5, 3, {2, 1, {0, 0, 0}}), 3u);
    EXPECT_EQ(conv_transpose_out_size(3, 3, {2, 1, {0, 0, 0}}, 0), 5u);
    EXPECT_EQ(conv_transpose_out_size(3, 3, {2, 1, {0, 1, 0}}, 1), 6u);
}

TEST(Ops, ShapeMismatchNamesBothShapes)
{
    try {
        add(constant(Tensor({2, 3})), constant(Tensor({3, 2})));
        FAIL();
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[3,2]"), std::string::npos) << msg;
    }
    EXPECT_THROW(backward(parameter(Tensor({2}))), ShapeError);
}

TEST(Backward, UnusedParameterGetsZero)
{
    Var a = parameter(Tensor::scalar(2)), b = parameter(Tensor::scalar(5));
    ParamSet ps;
    backward(mul(a, a));
    EXPECT_FLOAT_EQ(a.grad().item(), 4);
    EXPECT_TRUE(b.grad().size() == 0 || b.grad().item() == 0);
}

TEST(Adam, FirstStepIsLrTimesSign)
{
    ParamSet ps;
    Var& w = ps.add("w", Tensor({3}, std::vector<Scalar>{1, 1, 1}));
    Adam adam(ps, {0.01});
    Tensor& g = w.grad_buffer();
    g[0] = 5;
    g[1] = -0.2f;
    g[2] = 0;
    adam.step();
    EXPECT_NEAR(w.value()[0], 0.99, 1e-6);
    EXPECT_NEAR(w.value()[1], 1.01, 1e-6);
    EXPECT_EQ(w.value()[2], 1.0f);
}

TEST(Adam, ConvergesOnQuadratic)
{
    ParamSet ps;
    Var& w = ps.add("w", Tensor::scalar(0));
    Adam adam(ps, {0.1});
    for (int i = 0; i < 200; ++i) {
        ps.zero_grad();
        Var d = add_scalar(w, -3);
        backward(mul(d, d));
        adam.step();
    }
    EXPECT_LT(std::abs(w.item() - 3), 0.05);
}

TEST(Adam, ShapeMismatchThrows)
{
    ParamSet ps;
    Var& w = ps.add("w", Tensor({2}));
    Adam adam(ps);
    w.grad_buffer() = Tensor({3}, 1.0f);
    EXPECT_THROW(adam.step(), ShapeError);
}

TEST(Checkpoint, RoundTripIsBitExact)
{
    std::mt19937_64 rng(4);
    ParamSet ps;
    ps.add("fc.weight", randn({4, 3}, rng));
    ps.add("fc.bias", randn({4}, rng));
    Checkpoint c;
    c.meta["note"] = "x";
    export_params(c, "enc", ps);
    auto path = std::filesystem::temp_directory_path() / "nrr_ckpt_test.bin";
    save_checkpoint(path, c);
    Checkpoint back = load_checkpoint(path);
    ParamSet other;
    other.add("fc.weight", Tensor({4, 3}));
    other.add("fc.bias", Tensor({4}));
    import_params(back, "enc", other);
    EXPECT_EQ(other.get("fc.weight").value(), ps.get("fc.weight").value());
    EXPECT_EQ(other.get("fc.bias").value(), ps.get("fc.bias").value());
    EXPECT_EQ(back.meta, c.meta);

    ParamSet wrong;
    wrong.add("fc.weight", Tensor({3, 4}));
    wrong.add("fc.bias", Tensor({4}));
    EXPECT_THROW(import_params(back, "enc", wrong), Error);
}

TEST(Checkpoint, CorruptHeaderRejected)
{
    auto path = std::filesystem::temp_directory_path() / "nrr_ckpt_bad.bin";
    std::ofstream(path, std::ios::binary) << "NOTACKPT";
    EXPECT_THROW(load_checkpoint(path), Error);
}
