#include "support/gradcheck.hpp"

#include "unlearn/data.hpp"
#include "unlearn/errors.hpp"
#include "unlearn/filtration.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>

using namespace unlearn;
using namespace unlearn::filtration;

namespace {

constexpr real kInf = std::numeric_limits<real>::infinity();

// Index farthest from the chord on the side the curve bulges toward.
long chord_oracle(std::vector<real> y) {
    std::sort(y.begin(), y.end());
    const std::size_t n = y.size();
    const real lo = y.front(), hi = y.back();
    long best = -1;
    real best_d = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const real d = std::abs((y[i] - lo) / (hi - lo) - static_cast<real>(i) / static_cast<real>(n - 1));
        if (d > best_d) {
            best_d = d;
            best = static_cast<long>(i);
        }
    }
    return best;
}

// Two straight segments meeting at `brk`, increasing throughout.
std::vector<real> two_segment(Rng& rng, int n, int brk, bool concave) {
    real s1 = rng.uniform(0.2, 1.0), s2 = rng.uniform(2.0, 12.0);
    if (concave) std::swap(s1, s2);
    std::vector<real> y(static_cast<std::size_t>(n));
    const real offset = rng.uniform(-5.0, 5.0);
    for (int i = 0; i < n; ++i) y[static_cast<std::size_t>(i)] = offset + (i <= brk ? s1 * i : s1 * brk + s2 * (i - brk));
    std::shuffle(y.begin(), y.end(), rng.engine());
    return y;
}

struct Fixture {
    model::ClassifierModel m;
    inversion::ConditionalGenerator g;
    model::AugmentationSet aug{{{"jitter", 0.05}}};
};

const Fixture& moons_fixture() {
    static const Fixture f = [] {
        const data::LabeledDataset d = data::make_moons(100, 0.1, 3);
        model::TrainConfig tc;
        tc.epochs = 40;
        tc.seed = 1;
        Fixture out{model::train_classifier(d, model::AugmentationSet{{{"jitter", 0.05}}}, tc),
                    inversion::ConditionalGenerator({2}, 2, 8, 4)};
        return out;
    }();
    return f;
}

SoftLabeledDataset toy_soft(int n, int k, std::uint64_t seed) {
    Rng rng(seed);
    SoftLabeledDataset d(k, {2});
    for (int i = 0; i < n; ++i) {
        std::vector<real> p(static_cast<std::size_t>(k));
        real s = 0;
        for (real& v : p) s += (v = rng.uniform(0.01, 1.0));
        for (real& v : p) v /= s;
        d.add(Tensor({2}, {rng.normal(), rng.normal()}), p, {seed, i, rng.uniform_int(k)});
    }
    return d;
}

} // namespace

TEST(Knee, WorkedExample) {
    const std::vector<real> s{0, 1, 2, 3, 4, 14, 24, 34};
    const Knee k = knee_threshold(s);
    ASSERT_TRUE(k.found);
    EXPECT_EQ(k.threshold, 4.0);
    EXPECT_EQ(k.index, chord_oracle(s));
}

TEST(Knee, LinearHasNoKnee) {
    std::vector<real> s;
    for (int i = 0; i < 50; ++i) s.push_back(0.5 * i - 3);
    const Knee k = knee_threshold(s);
    EXPECT_FALSE(k.found);
    EXPECT_EQ(k.threshold, kInf);
}

TEST(Knee, PermutationInvariant) {
    Rng rng(5);
    std::vector<real> s = two_segment(rng, 40, 25, false);
    const Knee a = knee_threshold(s);
    std::shuffle(s.begin(), s.end(), rng.engine());
    const Knee b = knee_threshold(s);
    EXPECT_EQ(a.threshold, b.threshold);
    EXPECT_EQ(a.index, b.index);
}

TEST(Knee, RejectsShortOrNonFiniteInput) {
    EXPECT_THROW(knee_threshold(std::vector<real>{1, 2, 3}), ArgumentError);
    EXPECT_THROW(knee_threshold(std::vector<real>{1, 2, 3, std::nan("")}), ArgumentError);
    EXPECT_THROW(knee_threshold(std::vector<real>{1, 2, 3, 4}, 0.0), ArgumentError);
}

TEST(Knee, OracleOnRandomConcaveCurves) {
    Rng rng(2024);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 8 + rng.uniform_int(200);
        const int brk = 2 + rng.uniform_int(n - 4);
        const std::vector<real> y = two_segment(rng, n, brk, true);
        const Knee k = knee_threshold(y);
        std::vector<real> sorted = y;
        std::sort(sorted.begin(), sorted.end());
        ASSERT_TRUE(k.found) << "trial " << trial;
        EXPECT_EQ(k.index, brk) << "trial " << trial;
        EXPECT_EQ(k.index, chord_oracle(y)) << "trial " << trial;
        EXPECT_EQ(k.threshold, sorted[static_cast<std::size_t>(brk)]) << "trial " << trial;
    }
}

TEST(Knee, OracleOnRandomConvexCurves) {
    Rng rng(77);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 8 + rng.uniform_int(200);
        const int brk = 2 + rng.uniform_int(n - 4);
        const std::vector<real> y = two_segment(rng, n, brk, false);
        const Knee k = knee_threshold(y);
        ASSERT_TRUE(k.found) << "trial " << trial;
        EXPECT_EQ(k.index, brk) << "trial " << trial;
        EXPECT_EQ(k.index, chord_oracle(y)) << "trial " << trial;
    }
}

TEST(Relabel, Examples) {
    const std::vector<int> t0{0};
    const auto a = relabel(std::vector<real>{0.7, 0.2, 0.1}, t0);
    EXPECT_NEAR(a[0], 0.0, 1e-12);
    EXPECT_NEAR(a[1], 2.0 / 3.0, 1e-12);
    EXPECT_NEAR(a[2], 1.0 / 3.0, 1e-12);
    const std::vector<real> fixed{0.0, 0.4, 0.6};
    EXPECT_EQ(relabel(fixed, t0), fixed);
    const auto u = relabel(std::vector<real>{1, 0, 0}, t0);
    EXPECT_EQ(u, (std::vector<real>{0, 0.5, 0.5}));
    const std::vector<int> all{0, 1, 2};
    EXPECT_THROW(relabel(fixed, all), ArgumentError);
}

TEST(Rbf, Examples) {
    const std::vector<real> a{1, 2, 3};
    EXPECT_DOUBLE_EQ(rbf_kernel(a, a, 0.7), 1.0);
    // ||a - b||^2 = 2 sigma^2 with sigma = 1.5.
    const std::vector<real> b{1 + 1.5 * std::sqrt(2.0), 2, 3};
    EXPECT_NEAR(rbf_kernel(a, b, 1.5), std::exp(-1.0), 1e-12);
    Rng rng(3);
    for (int i = 0; i < 20; ++i) {
        std::vector<real> x(5), y(5);
        for (auto& v : x) v = rng.normal();
        for (auto& v : y) v = rng.normal();
        EXPECT_DOUBLE_EQ(rbf_kernel(x, y, 2.0), rbf_kernel(y, x, 2.0));
    }
    EXPECT_THROW(rbf_kernel(a, a, 0.0), ArgumentError);
}

TEST(Scores, MatchDoubleLoopOracle) {
    const Tensor f({3, 2}, {0, 0, 1, 1, 3, -1});
    const Tensor e({2, 2}, {0, 1, 2, 0});
    FiltrationConfig cfg;
    cfg.bandwidth = "fixed";
    cfg.sigma = 1.3;
    const Scores s = score_features(f, e, cfg);
    ASSERT_EQ(s.values.size(), 3u);
    for (int i = 0; i < 3; ++i) {
        real want = 0;
        for (int j = 0; j < 2; ++j) {
            const real d2 = std::pow(f[i * 2] - e[j * 2], 2) + std::pow(f[i * 2 + 1] - e[j * 2 + 1], 2);
            want += std::exp(-d2 / (2 * 1.3 * 1.3));
        }
        EXPECT_NEAR(s.values[static_cast<std::size_t>(i)], want, 1e-6);
    }
}

TEST(Scores, SelfCopyAndTranslationInvariance) {
    Rng rng(8);
    const Tensor f = unlearn::testing::random_tensor({6, 4}, rng);
    Tensor e = unlearn::testing::random_tensor({3, 4}, rng);
    for (int k = 0; k < 4; ++k) e[static_cast<std::size_t>(k)] = f[static_cast<std::size_t>(8 + k)];  // row 2 of f
    FiltrationConfig cfg;
    const Scores s = score_features(f, e, cfg);
    EXPECT_GE(s.values[2], 1.0);
    Tensor f2 = f, e2 = e;
    for (std::size_t i = 0; i < f2.size(); ++i) f2[i] += 3.0 * static_cast<real>(i % 4) - 1.0;
    for (std::size_t i = 0; i < e2.size(); ++i) e2[i] += 3.0 * static_cast<real>(i % 4) - 1.0;
    const Scores t = score_features(f2, e2, cfg);
    EXPECT_NEAR(s.sigma, t.sigma, 1e-9);
    for (std::size_t i = 0; i < s.values.size(); ++i) EXPECT_NEAR(s.values[i], t.values[i], 1e-9);
}

TEST(Scores, MedianDistance) {
    const Tensor a({2, 1}, {0, 10});
    const Tensor b({3, 1}, {1, 2, 4});
    // Distances 1 2 4 9 8 6 -> median of six values is (4 + 6) / 2.
    EXPECT_NEAR(median_distance(a, b), 5.0, 1e-12);
}

TEST(Scores, EmptyExemplarsRejected) {
    const Fixture& fx = moons_fixture();
    const SoftLabeledDataset d = toy_soft(5, 2, 1);
    EXPECT_THROW(similarity_scores(d, data::LabeledDataset(2, {2}), fx.m, FiltrationConfig{}), ArgumentError);
}

TEST(UnlearnSet, CountMassAndMonotonicity) {
    Rng rng(11);
    for (int trial = 0; trial < 30; ++trial) {
        const int k = 2 + rng.uniform_int(8);
        const int n = 1 + rng.uniform_int(60);
        const SoftLabeledDataset d = toy_soft(n, k, static_cast<std::uint64_t>(trial));
        std::vector<real> scores(static_cast<std::size_t>(n));
        for (real& s : scores) s = rng.uniform(0.0, 5.0);
        std::vector<int> targets{rng.uniform_int(k)};
        if (k > 3) targets.push_back((targets[0] + 1) % k);

        std::vector<real> thresholds{kInf, -kInf};
        for (int i = 0; i < 6; ++i) thresholds.push_back(rng.uniform(0.0, 5.0));
        std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
        std::vector<bool> prev(static_cast<std::size_t>(n), false);
        for (real t : thresholds) {
            const UnlearnSet u = build_unlearn_set(d, scores, t, targets);
            ASSERT_EQ(u.items.size(), d.size());
            EXPECT_EQ(u.stats.flagged + u.stats.retained, d.size());
            for (std::size_t i = 0; i < d.size(); ++i) {
                const auto& p = u.items.soft_label(i);
                real sum = 0;
                for (real v : p) sum += v;
                EXPECT_NEAR(sum, 1.0, 1e-9);
                EXPECT_EQ(u.flags[i], scores[i] >= t);
                if (u.flags[i]) {
                    for (int c : targets) EXPECT_EQ(p[static_cast<std::size_t>(c)], 0.0);
                } else {
                    EXPECT_EQ(p, d.soft_label(i));
                }
                if (prev[i]) EXPECT_TRUE(u.flags[i]) << "lowering t_f dropped a flagged item";
                EXPECT_EQ(u.items.input(i), d.input(i));
            }
            prev = u.flags;
            if (t == kInf) EXPECT_EQ(u.stats.flagged, 0u);
            if (t == -kInf) EXPECT_EQ(u.stats.flagged, d.size());
        }
    }
}

TEST(SoftDataset, SimplexCheckAndRoundTrip) {
    SoftLabeledDataset d(3, {2});
    EXPECT_THROW(d.add(Tensor({2}, 0.0), {0.5, 0.6, 0.0}), ArgumentError);
    EXPECT_THROW(d.add(Tensor({2}, 0.0), {1.2, -0.2, 0.0}), ArgumentError);
    const SoftLabeledDataset s = toy_soft(17, 4, 9);
    const auto dir = std::filesystem::temp_directory_path() / "unlearn_soft_roundtrip";
    std::filesystem::remove_all(dir);
    save_soft_dataset(s, dir);
    const SoftLabeledDataset r = load_soft_dataset(dir);
    ASSERT_EQ(r.size(), s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        EXPECT_EQ(r.provenance(i), s.provenance(i));
        for (int c = 0; c < 4; ++c) EXPECT_NEAR(r.soft_label(i)[static_cast<std::size_t>(c)], s.soft_label(i)[static_cast<std::size_t>(c)], 1e-6);
    }
    std::filesystem::remove_all(dir);
}

TEST(Candidates, IndependentRecheckAcceptsAll) {
    const Fixture& fx = moons_fixture();
    FiltrationConfig cfg;
    cfg.t_ent = 0.6;
    cfg.target_count = 150;
    cfg.chunk_size = 64;
    cfg.seed = 4;
    const Candidates c = generate_candidates(fx.g, fx.m, fx.aug, cfg, 1);
    ASSERT_EQ(c.items.size(), 150u);
    EXPECT_GE(c.stats.attempts, c.stats.accepted);
    for (std::size_t i = 0; i < c.items.size(); ++i) {
        const Provenance& p = c.items.provenance(i);
        EXPECT_TRUE(passes_filter(fx.m, c.items.input(i), fx.aug, cfg.t_ent, candidate_aug_seed(p))) << i;
        const Tensor probs = model::predict_proba_batch(fx.m, c.items.input(i).reshaped({1, 2}));
        for (int k = 0; k < 2; ++k) EXPECT_NEAR(c.items.soft_label(i)[static_cast<std::size_t>(k)], probs[static_cast<std::size_t>(k)], 1e-9);
        EXPECT_LT(model::entropy(c.items.soft_label(i)), cfg.t_ent);
    }
}

TEST(Candidates, VacuousFilterAcceptsEverything) {
    const Fixture& fx = moons_fixture();
    FiltrationConfig cfg;
    cfg.t_ent = 1e9;
    cfg.target_count = 100;
    cfg.chunk_size = 32;
    const Candidates c = generate_candidates(fx.g, fx.m, model::AugmentationSet{}, cfg, 1);
    EXPECT_EQ(c.stats.acceptance_rate(), 1.0);
    EXPECT_EQ(c.items.size(), 100u);
}

TEST(Candidates, WorkerCountDoesNotChangeResult) {
    const Fixture& fx = moons_fixture();
    FiltrationConfig cfg;
    cfg.t_ent = 0.6;
    cfg.target_count = 120;
    cfg.chunk_size = 16;
    cfg.seed = 9;
    const Candidates a = generate_candidates(fx.g, fx.m, fx.aug, cfg, 1);
    const Candidates b = generate_candidates(fx.g, fx.m, fx.aug, cfg, 3);
    EXPECT_EQ(a.items, b.items);
    EXPECT_EQ(a.stats.attempts, b.stats.attempts);
}

TEST(Candidates, ImpossibleFilterRaisesYieldError) {
    const Fixture& fx = moons_fixture();
    FiltrationConfig cfg;
    cfg.t_ent = 1e-12;
    cfg.target_count = 10;
    cfg.max_attempts = 2000;
    EXPECT_THROW(generate_candidates(fx.g, fx.m, fx.aug, cfg, 1), YieldError);
}

TEST(Config, JsonRoundTripAndValidation) {
    FiltrationConfig c;
    c.metric = "cosine";
    c.t_ent = 0.282;
    const nlohmann::json j = c;
    FiltrationConfig back = j.get<FiltrationConfig>();
    EXPECT_EQ(nlohmann::json(back), j);
    c.t_ent = 0;
    EXPECT_THROW(validate(c), ArgumentError);
    c = FiltrationConfig{};
    c.metric = "manhattan";
    EXPECT_THROW(validate(c), ArgumentError);
}
