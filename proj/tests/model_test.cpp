#include "support/gradcheck.hpp"

#include "unlearn/data.hpp"
#include "unlearn/errors.hpp"
#include "unlearn/model.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

using namespace unlearn;
using namespace unlearn::model;
using unlearn::testing::grad_check;
using unlearn::testing::random_tensor;

namespace {

nn::LayerSpec layer(std::string kind, int out = 0) {
    nn::LayerSpec s;
    s.kind = std::move(kind);
    s.out = out;
    return s;
}

const data::LabeledDataset& moons() {
    static const data::LabeledDataset d = data::make_moons(100, 0.1, 7);
    return d;
}

// 200 epochs on the moons, shared by the tests that need a converged model.
const ClassifierModel& trained_moons() {
    static const ClassifierModel m = [] {
        TrainConfig tc;
        tc.epochs = 200;
        tc.seed = 3;
        return train_classifier(moons(), default_augmentations({2}), tc);
    }();
    return m;
}

std::vector<std::size_t> all_indices(std::size_t n) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    return idx;
}

} // namespace

TEST(Model, CrossEntropyGradientOfTwoLayerNet) {
    nn::ArchSpec a{"two-layer", {3}, {layer("linear", 5), layer("tanh"), layer("linear", 4)}};
    ClassifierModel m = init_classifier(a, 4, 2);
    Rng rng(8);
    const Tensor x = random_tensor({6, 3}, rng);
    const std::vector<int> y{0, 3, 1, 2, 2, 0};
    const auto loss = [&](std::vector<ag::Var>&) { return ag::cross_entropy_sum(m.net.forward(ag::constant(x)), y); };
    const auto r = grad_check(loss, m.net.parameters(), 20, 4);
    int expected = 0;
    for (const auto& p : m.net.parameters()) expected += std::min(20, static_cast<int>(p.value().size()));
    EXPECT_EQ(r.checked, expected);
    EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Model, ProbabilitiesAreNormalizedAndPure) {
    const ClassifierModel m = init_classifier(default_arch({2}, 3), 3, 1);
    Rng rng(2);
    for (int i = 0; i < 20; ++i) {
        const Tensor x = random_tensor({2}, rng, 3.0);
        const auto p = predict_proba(m, x);
        ASSERT_EQ(p.size(), 3u);
        real s = 0;
        for (real v : p) {
            EXPECT_GE(v, 0.0);
            s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-5);
        EXPECT_EQ(p, predict_proba(m, x));
    }
    EXPECT_THROW(predict_proba(m, Tensor({3}, 0.0)), ArgumentError);
}

TEST(Model, ZeroHeadIsUniform) {
    const ClassifierModel m = init_classifier(default_arch({1, 8, 8}, 10), 10, 1, true);
    Rng rng(3);
    const auto p = predict_proba(m, random_tensor({1, 8, 8}, rng));
    for (real v : p) EXPECT_NEAR(v, 0.1, 1e-12);
}

TEST(Model, FeaturesArePureAndFixedWidth) {
    const ClassifierModel m = init_classifier(default_arch({2}, 2), 2, 1);
    Rng rng(1);
    const Tensor x = random_tensor({2}, rng);
    const auto f = extract_features(m, x);
    EXPECT_EQ(f, extract_features(m, x));
    EXPECT_EQ(f.size(), 64u);
    EXPECT_EQ(extract_features(m, random_tensor({2}, rng)).size(), f.size());
    EXPECT_THROW(extract_features(m, Tensor({5}, 0.0)), ArgumentError);
}

TEST(Model, FreshBnStatisticsAndCapability) {
    const ClassifierModel m = init_classifier(default_arch({1, 8, 8}, 10), 10, 1);
    for (const auto& bn : bn_statistics(m)) {
        for (real v : bn.running_mean.values()) EXPECT_EQ(v, 0.0);
        for (real v : bn.running_var.values()) EXPECT_EQ(v, 1.0);
    }
    nn::ArchSpec plain{"plain", {2}, {layer("linear", 2)}};
    EXPECT_THROW(bn_statistics(init_classifier(plain, 2, 1)), CapabilityError);
}

TEST(Model, Entropy) {
    EXPECT_NEAR(entropy(std::vector<real>{0, 1, 0}), 0.0, 1e-12);
    EXPECT_NEAR(entropy(std::vector<real>(10, 0.1)), std::log(10.0), 1e-12);
    std::vector<real> p(10, 0.02);
    p[0] = 0.82;
    EXPECT_NEAR(entropy(p), 0.867, 5e-4);
    std::vector<real> q(10, 0.005);
    q[0] = 0.955;
    EXPECT_NEAR(entropy(q), 0.282, 5e-4);
    EXPECT_THROW(entropy(std::vector<real>{0.5, 0.6}), ArgumentError);
    EXPECT_THROW(entropy(std::vector<real>{1.5, -0.5}), ArgumentError);
}

TEST(Training, ZeroEpochsIsInitialization) {
    TrainConfig tc;
    tc.epochs = 0;
    tc.seed = 5;
    const ClassifierModel m = train_classifier(moons(), AugmentationSet{}, tc);
    const ClassifierModel fresh = init_classifier(default_arch({2}, 2), 2, derive_seed(5, "init"));
    EXPECT_EQ(m.net.flat_parameters(), fresh.net.flat_parameters());
    const ClassifierModel o = train_oracle(m, moons(), AugmentationSet{}, tc);
    EXPECT_EQ(o.net.flat_parameters(), m.net.flat_parameters());
    EXPECT_THROW(train_classifier(data::LabeledDataset(2, {2}), AugmentationSet{}, TrainConfig{}), ArgumentError);
}

TEST(Training, MoonsConvergesAndIsDeterministic) {
    const ClassifierModel& m = trained_moons();
    const auto labels = predict_labels(m, moons().all_inputs());
    int right = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) right += labels[i] == moons().label(i);
    EXPECT_GE(right, 95);

    TrainConfig tc;
    tc.epochs = 5;
    tc.seed = 9;
    const ClassifierModel a = train_classifier(moons(), default_augmentations({2}), tc);
    const ClassifierModel b = train_classifier(moons(), default_augmentations({2}), tc);
    EXPECT_EQ(a.net.flat_parameters(), b.net.flat_parameters());
    EXPECT_EQ(fingerprint(a.net), fingerprint(b.net));
}

TEST(Training, AugmentationConsistencyOfConvergedModel) {
    const ClassifierModel& m = trained_moons();
    const Tensor x = moons().all_inputs();
    const auto base = predict_labels(m, x);
    const AugmentationSet aug = default_augmentations({2});
    for (std::size_t k = 0; k < aug.size(); ++k) {
        const auto moved = predict_labels(m, aug.apply(x, k, 17));
        int same = 0;
        for (std::size_t i = 0; i < base.size(); ++i) same += base[i] == moved[i];
        EXPECT_GE(same, 95) << "transform " << k;
    }
}

TEST(Training, FeaturesAreLinearlySeparable) {
    const ClassifierModel& m = trained_moons();
    const Tensor f = extract_features_batch(m, moons().all_inputs());
    // Linear probe: logistic regression by plain gradient descent.
    const int n = f.dim(0), w = f.dim(1);
    std::vector<real> theta(static_cast<std::size_t>(w) + 1, 0.0);
    for (int it = 0; it < 500; ++it) {
        std::vector<real> g(theta.size(), 0.0);
        for (int i = 0; i < n; ++i) {
            real z = theta.back();
            for (int j = 0; j < w; ++j) z += theta[static_cast<std::size_t>(j)] * f[static_cast<std::size_t>(i * w + j)];
            const real e = 1.0 / (1.0 + std::exp(-z)) - moons().label(static_cast<std::size_t>(i));
            for (int j = 0; j < w; ++j) g[static_cast<std::size_t>(j)] += e * f[static_cast<std::size_t>(i * w + j)];
            g.back() += e;
        }
        for (std::size_t j = 0; j < theta.size(); ++j) theta[j] -= 0.05 * g[j] / n;
    }
    int right = 0;
    for (int i = 0; i < n; ++i) {
        real z = theta.back();
        for (int j = 0; j < w; ++j) z += theta[static_cast<std::size_t>(j)] * f[static_cast<std::size_t>(i * w + j)];
        right += (z > 0) == (moons().label(static_cast<std::size_t>(i)) == 1);
    }
    EXPECT_GE(right, 90);
}

TEST(Training, BnStatisticsFrozenUnderInferenceAndMatchData) {
    const ClassifierModel& m = trained_moons();
    const std::string before = fingerprint(m.net);
    Rng rng(1);
    for (int i = 0; i < 5; ++i) predict_proba_batch(m, random_tensor({7, 2}, rng));
    extract_features_batch(m, moons().all_inputs());
    EXPECT_EQ(fingerprint(m.net), before);

    // The first BN layer follows the first linear layer: recompute its mean over the data.
    const auto& bn = bn_statistics(m)[0];
    const Tensor x = moons().all_inputs();
    const Tensor& wgt = m.net.parameters()[0].value();
    const Tensor& bias = m.net.parameters()[1].value();
    const int out = bias.dim(0);
    for (int c = 0; c < out; ++c) {
        real mean = 0;
        for (int i = 0; i < x.dim(0); ++i) {
            real v = bias[static_cast<std::size_t>(c)];
            for (int k = 0; k < 2; ++k) v += wgt[static_cast<std::size_t>(c * 2 + k)] * x[static_cast<std::size_t>(i * 2 + k)];
            mean += v;
        }
        mean /= x.dim(0);
        EXPECT_NEAR(bn.running_mean[static_cast<std::size_t>(c)], mean, 0.1 + 0.1 * std::abs(mean)) << c;
    }
}

TEST(Checkpoint, RoundTrip) {
    const ClassifierModel& m = trained_moons();
    const auto dir = std::filesystem::temp_directory_path() / "unlearn_clf_roundtrip";
    std::filesystem::remove_all(dir);
    save_classifier(m, dir);
    const ClassifierModel r = load_classifier(dir);
    EXPECT_EQ(r.num_classes, m.num_classes);
    EXPECT_EQ(r.augmentations, m.augmentations);
    const Tensor x = moons().all_inputs();
    const Tensor p = predict_proba_batch(m, x), q = predict_proba_batch(r, x);
    for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p[i], q[i], 1e-5);
    // A saved model reloads to the same bits.
    save_classifier(r, dir / "again");
    EXPECT_EQ(fingerprint(load_classifier(dir / "again").net), fingerprint(r.net));
    std::filesystem::remove_all(dir);
}

TEST(Augment, ShapesAndDeterminism) {
    Rng rng(2);
    const Tensor img = random_tensor({3, 1, 8, 8}, rng);
    const AugmentationSet aug({{"shift", 2}, {"rotate", 10}, {"hflip", 0}, {"jitter", 0.1}});
    for (std::size_t k = 0; k < aug.size(); ++k) {
        const Tensor a = aug.apply(img, k, 5);
        EXPECT_EQ(a.shape(), img.shape());
        EXPECT_EQ(a, aug.apply(img, k, 5));
    }
    // Flipping twice is the identity.
    const AugmentationSet flip({{"hflip", 0}});
    EXPECT_EQ(flip.apply(flip.apply(img, 0, 1), 0, 1), img);
    EXPECT_THROW(AugmentationSet({{"shift", 1}}).check_input_shape({2}), ArgumentError);
    EXPECT_EQ(default_augmentations({2}).transforms().front().kind, "jitter");
}
