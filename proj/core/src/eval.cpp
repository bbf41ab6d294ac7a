#include "unlearn/eval.hpp"

#include "unlearn/binary_io.hpp"
#include "unlearn/errors.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace unlearn::eval {

using nlohmann::json;

void to_json(json& j, const SplitAccuracy& a) { j = {{"retain", a.retain}, {"target", a.target}}; }
void from_json(const json& j, SplitAccuracy& a) {
    a.retain = j.at("retain").get<real>();
    a.target = j.at("target").get<real>();
}

namespace {

json finite_or_text(real v) {
    if (std::isfinite(v)) return v;
    return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
}

real real_from(const json& j) {
    if (j.is_number()) return j.get<real>();
    const std::string s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<real>::infinity();
    if (s == "-inf") return -std::numeric_limits<real>::infinity();
    return std::numeric_limits<real>::quiet_NaN();
}

json metrics_json(const UnlearnReport& r) {
    const FiltrationSummary& f = r.filtration;
    return {{"accuracy", {{"original", r.original}, {"oracle", r.oracle}, {"unlearned", r.unlearned}}},
            {"kl_vs_oracle", r.kl_vs_oracle},
            {"kl_vs_original", r.kl_vs_original},
            {"kl_direction", "KL(reference || unlearned)"},
            {"kl_points", r.kl_points},
            {"filtration",
             {{"candidates", f.candidates},
              {"flagged", f.flagged},
              {"attempts", f.attempts},
              {"acceptance_rate", f.acceptance_rate},
              {"t_f", finite_or_text(f.t_f)},
              {"t_ent", f.t_ent},
              {"sigma", f.sigma},
              {"target_subset", f.target_subset},
              {"target_conditioned_flagged", f.target_conditioned_flagged}}}};
}

} // namespace

real accuracy(const model::ClassifierModel& m, const data::LabeledDataset& d) {
    if (d.empty()) throw ArgumentError("accuracy of an empty dataset");
    const std::vector<int> pred = model::predict_labels(m, d.all_inputs());
    std::size_t hit = 0;
    for (std::size_t i = 0; i < d.size(); ++i) hit += pred[i] == d.label(i);
    return 100.0 * static_cast<real>(hit) / static_cast<real>(d.size());
}

real kl_divergence(std::span<const real> p, std::span<const real> q) {
    if (p.size() != q.size()) throw ArgumentError("KL of distributions with different class counts");
    real kl = 0;
    for (std::size_t c = 0; c < p.size(); ++c)
        if (p[c] > 0) kl += p[c] * (std::log(p[c]) - std::log(std::max(q[c], 1e-12)));
    // Rounding can push a near-zero divergence slightly negative.
    return std::max(kl, 0.0);
}

real kl_to_reference(const model::ClassifierModel& m, const model::ClassifierModel& ref, const data::LabeledDataset& points) {
    if (m.num_classes != ref.num_classes) throw ArgumentError("models disagree on the class count");
    if (points.empty()) throw ArgumentError("KL over an empty point set");
    const Tensor x = points.all_inputs();
    const Tensor pm = model::predict_proba_batch(m, x);
    const Tensor pr = model::predict_proba_batch(ref, x);
    real total = 0;
    for (std::size_t i = 0; i < points.size(); ++i) total += kl_divergence(pr.row(i), pm.row(i));
    return total / static_cast<real>(points.size());
}

void to_json(json& j, const UnlearnReport& r) {
    j = {{"variant", r.variant},
         {"scenario", r.scenario},
         {"rho", r.rho},
         {"seeds", r.seeds},
         {"metrics", metrics_json(r)},
         {"timing", {{"seconds", r.seconds}}}};
}

void from_json(const json& j, UnlearnReport& r) {
    r.variant = j.at("variant").get<std::string>();
    r.scenario = j.at("scenario").get<data::SplitSpec>();
    r.rho = j.at("rho").get<real>();
    r.seeds = j.at("seeds").get<std::map<std::string, std::uint64_t>>();
    const json& m = j.at("metrics");
    r.original = m.at("accuracy").at("original").get<SplitAccuracy>();
    r.oracle = m.at("accuracy").at("oracle").get<SplitAccuracy>();
    r.unlearned = m.at("accuracy").at("unlearned").get<SplitAccuracy>();
    r.kl_vs_oracle = m.at("kl_vs_oracle").get<real>();
    r.kl_vs_original = m.at("kl_vs_original").get<real>();
    r.kl_points = m.at("kl_points").get<std::string>();
    const json& f = m.at("filtration");
    r.filtration.candidates = f.at("candidates").get<std::size_t>();
    r.filtration.flagged = f.at("flagged").get<std::size_t>();
    r.filtration.attempts = f.at("attempts").get<long>();
    r.filtration.acceptance_rate = f.at("acceptance_rate").get<real>();
    r.filtration.t_f = real_from(f.at("t_f"));
    r.filtration.t_ent = f.at("t_ent").get<real>();
    r.filtration.sigma = f.at("sigma").get<real>();
    r.filtration.target_subset = f.at("target_subset").get<std::size_t>();
    r.filtration.target_conditioned_flagged = f.at("target_conditioned_flagged").get<real>();
    if (j.contains("timing")) r.seconds = j.at("timing").at("seconds").get<std::map<std::string, double>>();
}

std::string metrics_text(const UnlearnReport& r) { return metrics_json(r).dump(2); }

MeanStd mean_std(std::span<const real> values) {
    MeanStd out;
    if (values.empty()) return out;
    const auto n = static_cast<real>(values.size());
    out.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    if (values.size() > 1) {
        real ss = 0;
        for (real v : values) ss += (v - out.mean) * (v - out.mean);
        out.std = std::sqrt(ss / (n - 1));
    }
    return out;
}

void write_sweep_csv(const std::vector<UnlearnReport>& reports, const std::filesystem::path& file) {
    std::ostringstream out;
    out.precision(10);
    out << "rho,seed,acc_dr,acc_de,kl_oracle,kl_original\n";
    for (const UnlearnReport& r : reports) {
        const auto it = r.seeds.find("run");
        out << r.rho << ',' << (it == r.seeds.end() ? 0 : it->second) << ',' << r.unlearned.retain << ',' << r.unlearned.target
            << ',' << r.kl_vs_oracle << ',' << r.kl_vs_original << '\n';
    }
    io::write_text(file, out.str());
}

} // namespace unlearn::eval
