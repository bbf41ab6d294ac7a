#include "support/gradcheck.hpp"

#include "unlearn/errors.hpp"
#include "unlearn/eval.hpp"
#include "unlearn/filtration.hpp"
#include "unlearn/relearn.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>

using namespace unlearn;
using namespace unlearn::eval;

namespace {

nn::LayerSpec layer(std::string kind, int out = 0) {
    nn::LayerSpec s;
    s.kind = std::move(kind);
    s.out = out;
    return s;
}

// One linear layer on scalar inputs: class 1 for x > 0, or the reverse.
model::ClassifierModel sign_model(bool flipped) {
    nn::ArchSpec a{"sign", {1}, {layer("linear", 2)}};
    model::ClassifierModel m = model::init_classifier(a, 2, 1);
    const real s = flipped ? -10.0 : 10.0;
    m.net.parameters()[0].mutable_value() = Tensor({2, 1}, std::vector<real>{-s, s});
    m.net.parameters()[1].mutable_value() = Tensor({2}, 0.0);
    return m;
}

data::LabeledDataset sign_data(std::vector<real> xs, std::vector<int> ys) {
    data::LabeledDataset d(2, {1});
    for (std::size_t i = 0; i < xs.size(); ++i) d.add(Tensor({1}, std::vector<real>{xs[i]}), ys[i]);
    return d;
}

} // namespace

TEST(Accuracy, Examples) {
    const auto d = sign_data({-1, -2, 3, 4}, {0, 0, 1, 1});
    EXPECT_DOUBLE_EQ(accuracy(sign_model(false), d), 100.0);
    EXPECT_DOUBLE_EQ(accuracy(sign_model(true), d), 0.0);
    const auto three = sign_data({-1, -2, 3, 4}, {0, 0, 1, 0});
    EXPECT_DOUBLE_EQ(accuracy(sign_model(false), three), 75.0);
    EXPECT_THROW(accuracy(sign_model(false), data::LabeledDataset(2, {1})), ArgumentError);
}

TEST(Kl, WorkedExample) {
    const std::vector<real> p{0.5, 0.5}, q{0.25, 0.75};
    EXPECT_NEAR(kl_divergence(p, q), 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0), 1e-12);
    EXPECT_NEAR(kl_divergence(p, q), 0.1438, 1e-4);
    EXPECT_EQ(kl_divergence(p, p), 0.0);
    // Zero mass in q is floored instead of producing infinity.
    EXPECT_TRUE(std::isfinite(kl_divergence(p, std::vector<real>{1.0, 0.0})));
    EXPECT_THROW(kl_divergence(p, std::vector<real>{1.0}), ArgumentError);
}

TEST(Kl, NonNegativeAndZeroAtIdentity) {
    Rng rng(3);
    const auto d = sign_data({-1, 0.1, 0.3, 2}, {0, 1, 1, 1});
    for (int trial = 0; trial < 40; ++trial) {
        const int k = 2 + rng.uniform_int(6);
        std::vector<real> p(static_cast<std::size_t>(k)), q(static_cast<std::size_t>(k));
        real sp = 0, sq = 0;
        for (auto& v : p) sp += (v = rng.uniform(0.0, 1.0));
        for (auto& v : q) sq += (v = rng.uniform(0.0, 1.0));
        for (auto& v : p) v /= sp;
        for (auto& v : q) v /= sq;
        EXPECT_GE(kl_divergence(p, q), 0.0);
        EXPECT_NEAR(kl_divergence(p, p), 0.0, 1e-12);

        model::ClassifierModel a = model::init_classifier(model::default_arch({1}, 2), 2, static_cast<std::uint64_t>(trial));
        model::ClassifierModel b = model::init_classifier(model::default_arch({1}, 2), 2, static_cast<std::uint64_t>(trial) + 100);
        EXPECT_GE(kl_to_reference(a, b, d), 0.0);
        EXPECT_EQ(kl_to_reference(a, a, d), 0.0);
    }
    model::ClassifierModel three = model::init_classifier(model::default_arch({1}, 3), 3, 1);
    EXPECT_THROW(kl_to_reference(sign_model(false), three, d), ArgumentError);
}

TEST(MeanStd, SampleStatistics) {
    const std::vector<real> v{1, 2, 3, 4};
    const MeanStd m = mean_std(v);
    EXPECT_DOUBLE_EQ(m.mean, 2.5);
    EXPECT_NEAR(m.std, std::sqrt(5.0 / 3.0), 1e-12);
    EXPECT_EQ(mean_std(std::vector<real>{7}).std, 0.0);
}

TEST(Report, JsonRoundTripAndCsv) {
    UnlearnReport r;
    r.variant = "no-bn";
    r.scenario.target_classes = {9};
    r.scenario.rho = 0.03;
    r.rho = 0.03;
    r.original = {99.1, 98.7};
    r.oracle = {99.0, 0.4};
    r.unlearned = {98.2, 1.5};
    r.kl_vs_oracle = 0.02;
    r.kl_vs_original = 0.4;
    r.kl_points = "test";
    r.filtration.candidates = 2000;
    r.filtration.flagged = 230;
    r.filtration.t_f = 1.25;
    r.filtration.t_ent = 0.5;
    r.seeds = {{"run", 3}, {"global", 0}};
    r.seconds = {{"train", 1.5}};
    const nlohmann::json j = r;
    EXPECT_EQ(j.at("metrics").at("accuracy").at("unlearned").at("target"), 1.5);
    EXPECT_TRUE(j.contains("timing"));
    const UnlearnReport back = j.get<UnlearnReport>();
    EXPECT_EQ(nlohmann::json(back), j);
    EXPECT_EQ(metrics_text(back), metrics_text(r));

    const auto file = std::filesystem::temp_directory_path() / "unlearn_sweep.csv";
    write_sweep_csv({r, r}, file);
    std::ifstream in(file);
    std::string header, row;
    std::getline(in, header);
    std::getline(in, row);
    EXPECT_EQ(header, "rho,seed,acc_dr,acc_de,kl_oracle,kl_original");
    EXPECT_EQ(row.substr(0, 7), "0.03,3,");
    std::filesystem::remove(file);
}

TEST(Relearn, ZeroEpochsReturnsCopyAndTrainingIsDeterministic) {
    const data::LabeledDataset d = data::make_moons(60, 0.1, 2);
    model::TrainConfig tc;
    tc.epochs = 60;
    const model::ClassifierModel w_o = model::train_classifier(d, model::AugmentationSet{}, tc);

    filtration::SoftLabeledDataset soft(2, {2});
    for (std::size_t i = 0; i < d.size(); ++i) soft.add(d.input(i), d.label(i) == 0 ? std::vector<real>{0.1, 0.9} : std::vector<real>{0.9, 0.1});

    relearn::RelearnConfig rc;
    rc.epochs = 0;
    EXPECT_EQ(relearn::unlearn(w_o, soft, model::AugmentationSet{}, rc).model.net.flat_parameters(), w_o.net.flat_parameters());

    rc.epochs = 30;
    rc.optimizer.lr = 0.05;
    rc.seed = 4;
    const relearn::RelearnResult a = relearn::unlearn(w_o, soft, model::AugmentationSet{}, rc);
    const relearn::RelearnResult b = relearn::unlearn(w_o, soft, model::AugmentationSet{}, rc);
    EXPECT_EQ(a.model.net.flat_parameters(), b.model.net.flat_parameters());
    ASSERT_EQ(a.log.size(), 30u);
    EXPECT_LT(a.log.back().loss, a.log.front().loss);
    // The swapped soft labels flip most predictions.
    EXPECT_LT(accuracy(a.model, d), 30.0);
    // The source model is never modified.
    EXPECT_NE(a.model.net.flat_parameters(), w_o.net.flat_parameters());
    EXPECT_GT(accuracy(w_o, d), 90.0);
}
