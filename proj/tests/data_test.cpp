#include "unlearn/data.hpp"
#include "unlearn/errors.hpp"
#include "unlearn/rng.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <set>

using namespace unlearn;
using namespace unlearn::data;

namespace {

// Random dataset of small vectors with K classes.
LabeledDataset random_dataset(Rng& rng, int n, int k, int dim = 3) {
    LabeledDataset d(k, {dim});
    for (int i = 0; i < n; ++i) {
        Tensor x({dim});
        for (int j = 0; j < dim; ++j) x[static_cast<std::size_t>(j)] = rng.normal();
        d.add(std::move(x), rng.uniform_int(k));
    }
    return d;
}

LabeledDataset balanced(int per_class, int k) {
    LabeledDataset d(k, {1});
    for (int i = 0; i < per_class * k; ++i) d.add(Tensor({1}, static_cast<real>(i)), i % k);
    return d;
}

// Multiset of (input, label) pairs for set algebra on datasets.
std::multiset<std::pair<std::vector<real>, int>> items(const LabeledDataset& d) {
    std::multiset<std::pair<std::vector<real>, int>> s;
    for (std::size_t i = 0; i < d.size(); ++i) s.insert({d.input(i).values(), d.label(i)});
    return s;
}

} // namespace

TEST(Moons, ShapeClassesAndDeterminism) {
    const LabeledDataset a = make_moons(100, 0.1, 7);
    EXPECT_EQ(a.size(), 100u);
    EXPECT_EQ(a.num_classes(), 2);
    EXPECT_EQ(a.input_shape(), (Shape{2}));
    EXPECT_EQ(a.class_counts(), (std::vector<std::size_t>{50, 50}));
    EXPECT_EQ(a, make_moons(100, 0.1, 7));
    EXPECT_NE(a, make_moons(100, 0.1, 8));
    EXPECT_TRUE(make_moons(0, 0.1, 7).empty());
    EXPECT_THROW(make_moons(-1, 0.1, 7), ArgumentError);
    EXPECT_THROW(make_moons(10, -0.1, 7), ArgumentError);
}

TEST(Moons, NoiselessPointsLieOnTheArcs) {
    const LabeledDataset d = make_moons(40, 0.0, 1);
    for (std::size_t i = 0; i < d.size(); ++i) {
        const real x = d.input(i)[0], y = d.input(i)[1];
        if (d.label(i) == 0) {
            EXPECT_NEAR(x * x + y * y, 1.0, 1e-9);
            EXPECT_GE(y, -1e-12);
        } else {
            EXPECT_NEAR((x - 1) * (x - 1) + (y - 0.5) * (y - 0.5), 1.0, 1e-9);
            EXPECT_LE(y, 0.5 + 1e-12);
        }
    }
}

TEST(CorruptLabels, Definition) {
    Rng rng(3);
    LabeledDataset d(4, {1});
    for (int i = 0; i < 90; ++i) d.add(Tensor({1}, static_cast<real>(i)), i < 30 ? 1 : (i % 2 ? 0 : 3));
    const std::vector<int> targets{2, 3};
    const Corruption c = corrupt_labels(d, 1, targets, 5);
    EXPECT_EQ(c.targets.size(), 30u);
    EXPECT_EQ(c.corrupted.size(), d.size());
    for (std::size_t i = 0; i < c.targets.size(); ++i) EXPECT_TRUE(c.targets.label(i) == 2 || c.targets.label(i) == 3);
    for (std::size_t i = 0; i < d.size(); ++i) EXPECT_EQ(c.corrupted.input(i), d.input(i));
    for (std::size_t j = 0; j < c.indices.size(); ++j) EXPECT_EQ(c.corrupted.label(c.indices[j]), c.targets.label(j));

    const std::vector<int> single{0};
    const Corruption s = corrupt_labels(d, 1, single, 5);
    for (std::size_t i = 0; i < s.targets.size(); ++i) EXPECT_EQ(s.targets.label(i), 0);
    EXPECT_THROW(corrupt_labels(d, 2, targets, 5), ArgumentError);
}

TEST(CorruptLabels, UniformOverTargets) {
    LabeledDataset d(5, {1});
    for (int i = 0; i < 300; ++i) d.add(Tensor({1}, 0.0), 0);
    const std::vector<int> targets{1, 2, 4};
    const Corruption c = corrupt_labels(d, 0, targets, 11);
    std::map<int, int> counts;
    for (std::size_t i = 0; i < c.targets.size(); ++i) ++counts[c.targets.label(i)];
    // Multinomial(300, 1/3): sd = sqrt(300 * 1/3 * 2/3).
    const double sd = std::sqrt(300.0 / 3.0 * 2.0 / 3.0);
    for (int t : targets) EXPECT_NEAR(counts[t], 100.0, 3 * sd) << t;
}

TEST(CorruptLabels, IndexedSubset) {
    const LabeledDataset d = make_moons(100, 0.1, 2);
    const std::vector<double> anchor{0.0, 1.0};
    const auto idx = nearest_of_class(d, 0, anchor, 20);
    ASSERT_EQ(idx.size(), 20u);
    for (std::size_t i : idx) EXPECT_EQ(d.label(i), 0);
    // Every chosen point is at least as close as every unchosen class-0 point.
    real worst = 0;
    for (std::size_t i : idx) worst = std::max(worst, std::hypot(d.input(i)[0], d.input(i)[1] - 1.0));
    for (std::size_t i = 0; i < d.size(); ++i)
        if (d.label(i) == 0 && std::find(idx.begin(), idx.end(), i) == idx.end())
            EXPECT_GE(std::hypot(d.input(i)[0], d.input(i)[1] - 1.0), worst);
    const std::vector<int> one{1};
    const Corruption c = corrupt_labels(d, idx, 0, one, 1);
    EXPECT_EQ(c.targets.size(), 20u);
    EXPECT_EQ(c.corrupted.class_counts(), (std::vector<std::size_t>{30, 70}));
}

TEST(ClassRemoval, SplitPartitions) {
    EXPECT_EQ(class_removal_split(balanced(100, 10), 9).target.size(), 100u);
    const LabeledDataset no9 = balanced(10, 9);
    LabeledDataset wide(10, {1});
    for (std::size_t i = 0; i < no9.size(); ++i) wide.add(no9.input(i), no9.label(i));
    const Split empty = class_removal_split(wide, 9);
    EXPECT_TRUE(empty.target.empty());
    EXPECT_EQ(empty.retain, wide);

    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        const int k = 2 + rng.uniform_int(6);
        const LabeledDataset d = random_dataset(rng, rng.uniform_int(80), k);
        const int c = rng.uniform_int(k);
        const Split s = class_removal_split(d, c);
        auto all = items(s.retain);
        for (const auto& it : items(s.target)) all.insert(it);
        EXPECT_EQ(all, items(d));
        EXPECT_EQ(s.retain.size() + s.target.size(), d.size());
        for (std::size_t i = 0; i < s.target.size(); ++i) EXPECT_EQ(s.target.label(i), c);
        for (std::size_t i = 0; i < s.retain.size(); ++i) EXPECT_NE(s.retain.label(i), c);
    }
}

TEST(TargetSubset, IdentityAndThinning) {
    Rng rng(9);
    const LabeledDataset d = random_dataset(rng, 60, 3);
    EXPECT_EQ(sample_target_subset(d, 1.0, 3), d);
    EXPECT_THROW(sample_target_subset(d, 0.0, 3), ArgumentError);
    EXPECT_THROW(sample_target_subset(d, 1.5, 3), ArgumentError);
    for (std::uint64_t s = 0; s < 30; ++s) {
        const LabeledDataset t = sample_target_subset(d, 0.3, s);
        const auto full = items(d);
        for (const auto& it : items(t)) EXPECT_TRUE(full.count(it) > 0);
        EXPECT_EQ(t, sample_target_subset(d, 0.3, s));
    }
}

TEST(TargetSubset, BinomialSize) {
    Rng rng(1);
    const LabeledDataset d = random_dataset(rng, 100, 2, 1);
    double total = 0;
    const int runs = 1000;
    for (int s = 0; s < runs; ++s) total += static_cast<double>(sample_target_subset(d, 0.03, static_cast<std::uint64_t>(s)).size());
    // Mean of 1000 Binomial(100, 0.03) draws.
    const double sd = std::sqrt(100 * 0.03 * 0.97 / runs);
    EXPECT_NEAR(total / runs, 3.0, 3 * sd);

    LabeledDataset twenty(2, {1});
    for (int i = 0; i < 20; ++i) twenty.add(Tensor({1}, static_cast<real>(i)), 0);
    double t = 0;
    for (int s = 0; s < runs; ++s) t += static_cast<double>(sample_target_subset(twenty, 0.25, static_cast<std::uint64_t>(s)).size());
    EXPECT_NEAR(t / runs, 5.0, 3 * std::sqrt(20 * 0.25 * 0.75 / runs));
}

TEST(SplitSpec, JsonAndValidation) {
    SplitSpec s;
    s.mode = ScenarioMode::MislabelCorrection;
    s.source_class = 7;
    s.target_classes = {2, 3};
    s.rho = 0.03;
    s.corrupt_fraction = 0.75;
    const nlohmann::json j = s;
    EXPECT_EQ(nlohmann::json(j.get<SplitSpec>()), j);
    EXPECT_NO_THROW(validate(s, 10));
    s.rho = 0;
    EXPECT_THROW(validate(s, 10), ArgumentError);
    s.rho = 0.5;
    s.target_classes = {};
    EXPECT_THROW(validate(s, 10), ArgumentError);
    s.target_classes = {12};
    EXPECT_THROW(validate(s, 10), ArgumentError);
}

TEST(Container, RoundTripAndPoints) {
    Rng rng(4);
    const LabeledDataset d = random_dataset(rng, 25, 4, 6);
    const auto dir = std::filesystem::temp_directory_path() / "unlearn_container";
    std::filesystem::remove_all(dir);
    save_dataset(d, dir);
    const LabeledDataset back = load_dataset(dir);
    ASSERT_EQ(back.size(), d.size());
    EXPECT_EQ(back.labels(), d.labels());
    for (std::size_t i = 0; i < d.size(); ++i)
        for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(back.input(i)[k], d.input(i)[k], 1e-6 * (1 + std::abs(d.input(i)[k])));
    EXPECT_THROW(load_dataset(dir / "nope"), std::exception);

    const LabeledDataset m = make_moons(10, 0.1, 1);
    export_points_csv(m, dir / "points.csv");
    std::ifstream in(dir / "points.csv");
    std::string header;
    std::getline(in, header);
    EXPECT_EQ(header, "x0,x1,label");
    int lines = 0;
    for (std::string l; std::getline(in, l);) ++lines;
    EXPECT_EQ(lines, 10);
    std::filesystem::remove_all(dir);
}

TEST(Idx, ReadsImagesAndLabels) {
    const auto dir = std::filesystem::temp_directory_path() / "unlearn_idx";
    std::filesystem::create_directories(dir);
    {
        std::ofstream img(dir / "img", std::ios::binary), lab(dir / "lab", std::ios::binary);
        const unsigned char ih[] = {0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2};
        img.write(reinterpret_cast<const char*>(ih), sizeof ih);
        const unsigned char px[] = {0, 255, 51, 102, 255, 255, 0, 0};
        img.write(reinterpret_cast<const char*>(px), sizeof px);
        const unsigned char lh[] = {0, 0, 8, 1, 0, 0, 0, 2, 3, 9};
        lab.write(reinterpret_cast<const char*>(lh), sizeof lh);
    }
    const LabeledDataset d = load_idx(dir / "img", dir / "lab");
    ASSERT_EQ(d.size(), 2u);
    EXPECT_EQ(d.input_shape(), (Shape{1, 2, 2}));
    EXPECT_EQ(d.label(0), 3);
    EXPECT_EQ(d.label(1), 9);
    EXPECT_NEAR(d.input(0)[1], 1.0, 1e-12);
    EXPECT_NEAR(d.input(0)[2], 0.2, 1e-12);
    std::filesystem::remove_all(dir);
}

TEST(BalancedPrefix, KeepsClassesBalanced) {
    const LabeledDataset d = balanced(50, 10);
    const LabeledDataset p = balanced_prefix(d, 100);
    EXPECT_EQ(p.size(), 100u);
    for (std::size_t c : p.class_counts()) EXPECT_EQ(c, 10u);
    EXPECT_EQ(balanced_prefix(d, 0).size(), 0u);
    EXPECT_EQ(balanced_prefix(d, 10000), d);
}
