#include "support/gradcheck.hpp"

#include "unlearn/autograd.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace unlearn;
using unlearn::testing::grad_check;
using unlearn::testing::random_tensor;

namespace {

constexpr double kTol = 1e-4;

ag::Var param(Tensor t) { return ag::Var(std::move(t), true); }

// Weighted sum so every output element gets a distinct upstream gradient.
ag::Var probe(const ag::Var& y) {
    Tensor w(y.shape());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(0.7 * static_cast<double>(i) + 0.3);
    return ag::sum(ag::mul(y, ag::constant(w)));
}

} // namespace

TEST(Autograd, ElementwiseOps) {
    Rng rng(1);
    auto x = param(random_tensor({3, 4}, rng));
    auto y = param(random_tensor({3, 4}, rng));
    auto r = grad_check(
        [](std::vector<ag::Var>& v) {
            auto a = ag::add(ag::mul(v[0], v[1]), ag::scale(ag::square(v[0]), 0.5));
            auto b = ag::sub(ag::tanh(a), ag::sigmoid(v[1]));
            return ag::add(probe(ag::exp(ag::scale(b, 0.3))), ag::mean(ag::leaky_relu(v[0], 0.1)));
        },
        {x, y});
    EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Autograd, LinearAndEmbedding) {
    Rng rng(2);
    auto x = param(random_tensor({5, 3}, rng));
    auto w = param(random_tensor({4, 3}, rng));
    auto b = param(random_tensor({4}, rng));
    auto table = param(random_tensor({3, 2}, rng));
    std::vector<int> labels{0, 2, 2, 1, 0};
    auto r = grad_check(
        [&](std::vector<ag::Var>& v) {
            auto h = ag::linear(v[0], v[1], v[2]);
            auto e = ag::embedding(v[3], labels);
            return probe(ag::concat_cols(h, e));
        },
        {x, w, b, table});
    EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Autograd, ReshapeGatherConcat) {
    Rng rng(3);
    auto x = param(random_tensor({4, 6}, rng));
    std::vector<int> rows{3, 0, 3};
    auto r = grad_check(
        [&](std::vector<ag::Var>& v) {
            auto g = ag::gather_rows(v[0], rows);
            std::vector<ag::Var> parts{g, v[0]};
            return probe(ag::reshape(ag::concat_rows(parts), {7, 2, 3}));
        },
        {x});
    EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Autograd, Conv2dStridePad) {
    Rng rng(4);
    auto x = param(random_tensor({2, 3, 6, 5}, rng));
    auto w = param(random_tensor({4, 3, 3, 3}, rng, 0.5));
    auto b = param(random_tensor({4}, rng));
    for (ag::Conv2dGeometry g : {ag::Conv2dGeometry{1, 0}, ag::Conv2dGeometry{1, 1}, ag::Conv2dGeometry{2, 1}}) {
        auto r = grad_check([&](std::vector<ag::Var>& v) { return probe(ag::conv2d(v[0], v[1], v[2], g)); }, {x, w, b});
        EXPECT_LT(r.max_rel_error, kTol) << "stride " << g.stride << " pad " << g.pad;
    }
}

TEST(Autograd, Conv2dMatchesDirectSum) {
    Rng rng(5);
    Tensor x = random_tensor({1, 2, 4, 4}, rng), w = random_tensor({3, 2, 3, 3}, rng), b = random_tensor({3}, rng);
    const Tensor y = ag::conv2d(ag::constant(x), ag::constant(w), ag::constant(b), {2, 1}).value();
    ASSERT_EQ(y.shape(), (Shape{1, 3, 2, 2}));
    for (int o = 0; o < 3; ++o)
        for (int r = 0; r < 2; ++r)
            for (int c = 0; c < 2; ++c) {
                double acc = b[o];
                for (int ch = 0; ch < 2; ++ch)
                    for (int i = 0; i < 3; ++i)
                        for (int j = 0; j < 3; ++j) {
                            const int ir = r * 2 - 1 + i, ic = c * 2 - 1 + j;
                            if (ir < 0 || ir >= 4 || ic < 0 || ic >= 4) continue;
                            acc += x[(ch * 4 + ir) * 4 + ic] * w[((o * 2 + ch) * 3 + i) * 3 + j];
                        }
                EXPECT_NEAR(y[(o * 2 + r) * 2 + c], acc, 1e-12);
            }
}

TEST(Autograd, ConvTranspose2d) {
    Rng rng(6);
    auto x = param(random_tensor({2, 3, 3, 3}, rng));
    auto w = param(random_tensor({3, 2, 4, 4}, rng, 0.5));
    auto b = param(random_tensor({2}, rng));
    auto r = grad_check([&](std::vector<ag::Var>& v) { return probe(ag::conv_transpose2d(v[0], v[1], v[2], {2, 1})); },
                        {x, w, b});
    EXPECT_LT(r.max_rel_error, kTol);
    EXPECT_EQ(ag::conv_transpose2d(x, w, b, {2, 1}).shape(), (Shape{2, 2, 6, 6}));
}

TEST(Autograd, ConvTransposeIsAdjointOfConv) {
    // <conv(x), y> == <x, convT(y)> with shared weights and zero bias.
    Rng rng(7);
    Tensor x = random_tensor({1, 2, 6, 6}, rng), w = random_tensor({3, 2, 4, 4}, rng);
    const ag::Conv2dGeometry g{2, 1};
    const Tensor cx = ag::conv2d(ag::constant(x), ag::constant(w), ag::constant(Tensor({3}, 0.0)), g).value();
    Tensor y = random_tensor(cx.shape(), rng);
    const Tensor ty = ag::conv_transpose2d(ag::constant(y), ag::constant(w), ag::constant(Tensor({2}, 0.0)), g).value();
    ASSERT_EQ(ty.shape(), x.shape());
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < y.size(); ++i) lhs += cx[i] * y[i];
    for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * ty[i];
    EXPECT_NEAR(lhs, rhs, 1e-10);
}

TEST(Autograd, MaxPool) {
    Rng rng(8);
    auto x = param(random_tensor({2, 2, 4, 6}, rng));
    auto r = grad_check([](std::vector<ag::Var>& v) { return probe(ag::max_pool2d(v[0], 2)); }, {x});
    EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Autograd, BatchNormTrainAndEval) {
    Rng rng(9);
    auto x = param(random_tensor({5, 3, 2, 2}, rng));
    auto gamma = param(random_tensor({3}, rng));
    auto beta = param(random_tensor({3}, rng));
    auto r = grad_check(
        [](std::vector<ag::Var>& v) { return probe(ag::batch_norm_train(v[0], v[1], v[2], 1e-5, nullptr)); },
        {x, gamma, beta});
    EXPECT_LT(r.max_rel_error, kTol);

    Tensor mean({3}, 0.2), var({3}, 1.7);
    r = grad_check([&](std::vector<ag::Var>& v) { return probe(ag::batch_norm_eval(v[0], v[1], v[2], mean, var, 1e-5)); },
                   {x, gamma, beta});
    EXPECT_LT(r.max_rel_error, kTol);

    auto flat = param(random_tensor({6, 4}, rng));
    auto g4 = param(random_tensor({4}, rng));
    auto b4 = param(random_tensor({4}, rng));
    r = grad_check([](std::vector<ag::Var>& v) { return probe(ag::batch_norm_train(v[0], v[1], v[2], 1e-5, nullptr)); },
                   {flat, g4, b4});
    EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Autograd, BatchStatsAreBiasedMoments) {
    Tensor x({4, 1}, {1.0, 2.0, 3.0, 6.0});
    ag::BatchStats stats;
    ag::batch_norm_train(ag::constant(x), ag::constant(Tensor({1}, 1.0)), ag::constant(Tensor({1}, 0.0)), 1e-5, &stats);
    EXPECT_DOUBLE_EQ(stats.mean[0], 3.0);
    EXPECT_DOUBLE_EQ(stats.var[0], (4.0 + 1.0 + 0.0 + 9.0) / 4.0);
}

TEST(Autograd, ChannelMoments) {
    Rng rng(10);
    auto x = param(random_tensor({3, 2, 3, 2}, rng));
    auto r = grad_check([](std::vector<ag::Var>& v) { return ag::add(probe(ag::channel_mean(v[0])), probe(ag::channel_var(v[0]))); },
                        {x});
    EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Autograd, SoftmaxAndLosses) {
    Rng rng(11);
    auto logits = param(random_tensor({4, 5}, rng, 2.0));
    std::vector<int> labels{1, 4, 0, 1};
    Tensor targets({4, 5}, 0.0);
    for (int i = 0; i < 4; ++i)
        for (int c = 0; c < 5; ++c) targets[static_cast<std::size_t>(i * 5 + c)] = (c == labels[i] ? 0.6 : 0.1);
    auto r = grad_check(
        [&](std::vector<ag::Var>& v) {
            auto a = ag::cross_entropy_sum(v[0], labels);
            auto b = ag::soft_cross_entropy_mean(v[0], targets);
            return ag::add(ag::add(a, b), ag::add(probe(ag::softmax(v[0])), probe(ag::log_softmax(v[0]))));
        },
        {logits});
    EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Autograd, CrossEntropyValue) {
    Tensor logits({1, 10}, 0.0);
    std::vector<int> label{3};
    EXPECT_NEAR(ag::cross_entropy_sum(ag::constant(logits), label).item(), std::log(10.0), 1e-12);
}

TEST(Autograd, TotalVariation) {
    Rng rng(12);
    auto x = param(random_tensor({2, 2, 3, 4}, rng));
    auto r = grad_check([](std::vector<ag::Var>& v) { return ag::total_variation(v[0]); }, {x});
    EXPECT_LT(r.max_rel_error, kTol);
    EXPECT_DOUBLE_EQ(ag::total_variation(ag::constant(Tensor({1, 1, 1, 2}, {0.0, 1.0}))).item(), 1.0);
    EXPECT_DOUBLE_EQ(ag::total_variation(ag::constant(Tensor({1, 1, 2, 2}, {0.0, 1.0, 1.0, 0.0}))).item(), 4.0);
    EXPECT_DOUBLE_EQ(ag::total_variation(ag::constant(Tensor({3, 2}, 1.0))).item(), 0.0);
}

TEST(Autograd, WarpAffine) {
    Rng rng(13);
    auto x = param(random_tensor({2, 1, 5, 5}, rng));
    const double c = std::cos(0.15), s = std::sin(0.15);
    std::vector<ag::AffineMap> maps{ag::AffineMap{c, -s, 0.37, s, c, -0.21}, ag::AffineMap{1, 0, 1.3, 0, 1, -0.6}};
    auto r = grad_check([&](std::vector<ag::Var>& v) { return probe(ag::warp_affine(v[0], maps)); }, {x});
    EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Autograd, WarpAffineIntegerShift) {
    Tensor x({1, 1, 2, 3}, {1, 2, 3, 4, 5, 6});
    std::vector<ag::AffineMap> shift{ag::AffineMap{1, 0, 1, 0, 1, 0}};
    const Tensor y = ag::warp_affine(ag::constant(x), shift).value();
    EXPECT_EQ(y.values(), (std::vector<real>{2, 3, 0, 5, 6, 0}));
    std::vector<ag::AffineMap> id{ag::AffineMap{1, 0, 0, 0, 1, 0}};
    EXPECT_EQ(ag::warp_affine(ag::constant(x), id).value(), x);
}

TEST(Autograd, DiversityGroup) {
    Rng rng(14);
    Tensor noise = random_tensor({3, 2}, rng, 0.3);
    auto f = param(random_tensor({3, 4}, rng, 0.4));
    auto r = grad_check([&](std::vector<ag::Var>& v) { return ag::diversity_group(noise, v[0]); }, {f});
    EXPECT_LT(r.max_rel_error, kTol);

    Tensor z({2, 1}, {0.0, 1.0});
    Tensor feats({2, 2}, {0.0, 0.0, 1.0, 1.0});
    EXPECT_NEAR(ag::diversity_group(z, ag::constant(feats)).item(), std::exp(-4.0), 1e-12);
}

TEST(Autograd, NoGradBuildsNoGraph) {
    auto x = param(Tensor({2}, {1.0, 2.0}));
    ag::NoGradGuard guard;
    auto y = ag::square(x);
    EXPECT_FALSE(y.requires_grad());
    EXPECT_TRUE(y.node()->parents.empty());
}

TEST(Autograd, GradientsAccumulateAcrossUses) {
    auto x = param(Tensor({1}, {3.0}));
    ag::backward(ag::sum(ag::add(ag::square(x), ag::scale(x, 2.0))));
    EXPECT_DOUBLE_EQ(x.grad()[0], 8.0);
}
