#include "unlearn/filtration.hpp"

#include "unlearn/binary_io.hpp"
#include "unlearn/errors.hpp"
#include "unlearn/rng.hpp"

#include <nlohmann/json.hpp>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

namespace unlearn::filtration {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void check_simplex(std::span<const real> p, int k) {
    if (static_cast<int>(p.size()) != k)
        throw ArgumentError("soft label has " + std::to_string(p.size()) + " entries, expected " + std::to_string(k));
    real total = 0;
    for (real v : p) {
        if (!(v >= 0)) throw ArgumentError("soft label has a negative or non-finite entry");
        total += v;
    }
    if (std::abs(total - 1.0) > 1e-5) throw ArgumentError("soft label sums to " + std::to_string(total));
}

// Entropy without the simplex check; inputs come straight from softmax.
real entropy_of(std::span<const real> p) {
    real h = 0;
    for (real v : p)
        if (v > 0) h -= v * std::log(v);
    return h;
}

Tensor with_leading_one(const Tensor& x) {
    Shape shape{1};
    shape.insert(shape.end(), x.shape().begin(), x.shape().end());
    return x.reshaped(shape);
}

Tensor item_of(const Tensor& batch, std::size_t i) {
    Shape shape(batch.shape().begin() + 1, batch.shape().end());
    const auto row = batch.row(i);
    return Tensor(shape, std::vector<real>(row.begin(), row.end()));
}

// One chunk of draws and which of them passed the filter.
struct ChunkResult {
    std::vector<int> labels;
    Tensor inputs;
    Tensor probs;
    std::vector<char> keep;
};

ChunkResult run_chunk(const inversion::ConditionalGenerator& g, const model::ClassifierModel& m,
                      const model::AugmentationSet& aug, const FiltrationConfig& cfg, std::uint64_t chunk_seed) {
    const int b = cfg.chunk_size;
    Rng rng(chunk_seed);
    Tensor z(Shape{b, g.noise_dim()});
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = rng.normal();
    ChunkResult r;
    r.labels.resize(static_cast<std::size_t>(b));
    for (int& y : r.labels) y = rng.uniform_int(g.num_classes());

    r.inputs = g.generate(z, r.labels);
    r.probs = model::predict_proba_batch(m, r.inputs);
    r.keep.assign(static_cast<std::size_t>(b), 1);
    std::vector<std::size_t> top(static_cast<std::size_t>(b));
    for (int i = 0; i < b; ++i) {
        const auto p = r.probs.row(static_cast<std::size_t>(i));
        top[static_cast<std::size_t>(i)] = model::argmax(p);
        if (!(entropy_of(p) < cfg.t_ent)) r.keep[static_cast<std::size_t>(i)] = 0;
    }
    for (std::size_t k = 0; k < aug.size(); ++k) {
        std::vector<Tensor> moved;
        moved.reserve(static_cast<std::size_t>(b));
        for (int i = 0; i < b; ++i) {
            const Tensor one = with_leading_one(item_of(r.inputs, static_cast<std::size_t>(i)));
            moved.push_back(item_of(aug.apply(one, k, candidate_aug_seed({chunk_seed, i, 0}) + k), 0));
        }
        const Tensor pk = model::predict_proba_batch(m, stack(moved));
        for (int i = 0; i < b; ++i) {
            const auto p = pk.row(static_cast<std::size_t>(i));
            if (!(entropy_of(p) < cfg.t_ent) || model::argmax(p) != top[static_cast<std::size_t>(i)])
                r.keep[static_cast<std::size_t>(i)] = 0;
        }
    }
    return r;
}

ScoreSummary summarize(std::span<const real> scores) {
    ScoreSummary s;
    if (scores.empty()) return s;
    std::vector<real> sorted(scores.begin(), scores.end());
    std::sort(sorted.begin(), sorted.end());
    s.min = sorted.front();
    s.max = sorted.back();
    s.mean = std::accumulate(sorted.begin(), sorted.end(), 0.0) / static_cast<real>(sorted.size());
    const std::size_t n = sorted.size();
    s.median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    return s;
}

real squared_distance(std::span<const real> a, std::span<const real> b) {
    real s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const real d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

} // namespace

// ---------------------------------------------------------------------------
// SoftLabeledDataset
// ---------------------------------------------------------------------------

SoftLabeledDataset::SoftLabeledDataset(int num_classes, Shape input_shape)
    : num_classes_(num_classes), input_shape_(std::move(input_shape)) {
    if (num_classes < 1) throw ArgumentError("num_classes must be positive");
}

void SoftLabeledDataset::add(Tensor input, std::vector<real> soft_label, Provenance provenance) {
    if (input.shape() != input_shape_)
        throw ArgumentError("input " + shape_to_string(input.shape()) + " does not match " + shape_to_string(input_shape_));
    check_simplex(soft_label, num_classes_);
    inputs_.push_back(std::move(input));
    labels_.push_back(std::move(soft_label));
    provenance_.push_back(provenance);
}

Tensor SoftLabeledDataset::batch(std::span<const std::size_t> indices) const {
    std::vector<Tensor> items;
    items.reserve(indices.size());
    for (std::size_t i : indices) items.push_back(inputs_.at(i));
    if (items.empty()) {
        Shape shape{0};
        shape.insert(shape.end(), input_shape_.begin(), input_shape_.end());
        return Tensor(shape);
    }
    return stack(items);
}

Tensor SoftLabeledDataset::all_inputs() const {
    std::vector<std::size_t> idx(size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return batch(idx);
}

Tensor SoftLabeledDataset::soft_labels(std::span<const std::size_t> indices) const {
    Tensor out(Shape{static_cast<int>(indices.size()), num_classes_});
    for (std::size_t r = 0; r < indices.size(); ++r) std::copy(labels_.at(indices[r]).begin(), labels_.at(indices[r]).end(), out.row(r).begin());
    return out;
}

void save_soft_dataset(const SoftLabeledDataset& d, const fs::path& dir) {
    fs::create_directories(dir);
    json meta{{"num_classes", d.num_classes()}, {"input_shape", d.input_shape()}, {"count", d.size()}, {"dtype", "float32"}};
    io::write_text(dir / "meta.json", meta.dump(2) + "\n");
    std::vector<real> inputs, labels;
    inputs.reserve(d.size() * shape_size(d.input_shape()));
    labels.reserve(d.size() * static_cast<std::size_t>(d.num_classes()));
    std::ostringstream prov;
    prov << "index,chunk_seed,draw,conditioning_label\n";
    for (std::size_t i = 0; i < d.size(); ++i) {
        inputs.insert(inputs.end(), d.input(i).values().begin(), d.input(i).values().end());
        labels.insert(labels.end(), d.soft_label(i).begin(), d.soft_label(i).end());
        const Provenance& p = d.provenance(i);
        prov << i << ',' << p.chunk_seed << ',' << p.draw << ',' << p.conditioning_label << '\n';
    }
    io::write_f32(dir / "inputs.bin", inputs);
    io::write_f32(dir / "soft_labels.bin", labels);
    io::write_text(dir / "provenance.csv", prov.str());
}

SoftLabeledDataset load_soft_dataset(const fs::path& dir) {
    if (!fs::exists(dir / "meta.json")) throw ArgumentError("dataset container missing " + (dir / "meta.json").string());
    const json meta = json::parse(io::read_text(dir / "meta.json"));
    const int k = meta.at("num_classes").get<int>();
    const Shape shape = meta.at("input_shape").get<Shape>();
    const auto count = meta.at("count").get<std::size_t>();
    const std::vector<real> inputs = io::read_f32(dir / "inputs.bin");
    const std::vector<real> labels = io::read_f32(dir / "soft_labels.bin");
    const std::size_t stride = shape_size(shape);
    const auto kk = static_cast<std::size_t>(k);
    if (inputs.size() != count * stride || labels.size() != count * kk)
        throw ArgumentError("dataset container " + dir.string() + " is inconsistent with meta.json");

    std::vector<Provenance> prov(count);
    std::istringstream in(io::read_text(dir / "provenance.csv"));
    std::string line;
    std::getline(in, line);
    for (std::size_t i = 0; i < count; ++i) {
        if (!std::getline(in, line)) throw ArgumentError(dir.string() + "/provenance.csv has too few rows");
        std::size_t index = 0;
        unsigned long long seed = 0;
        if (std::sscanf(line.c_str(), "%zu,%llu,%d,%d", &index, &seed, &prov[i].draw, &prov[i].conditioning_label) != 4)
            throw ArgumentError(dir.string() + "/provenance.csv: malformed row " + std::to_string(i + 2));
        prov[i].chunk_seed = seed;
    }

    SoftLabeledDataset out(k, shape);
    for (std::size_t i = 0; i < count; ++i) {
        std::vector<real> p(labels.begin() + static_cast<std::ptrdiff_t>(i * kk), labels.begin() + static_cast<std::ptrdiff_t>((i + 1) * kk));
        // float32 storage perturbs the sum slightly; restore exact normalization.
        const real total = std::accumulate(p.begin(), p.end(), 0.0);
        if (total > 0)
            for (real& v : p) v /= total;
        out.add(Tensor(shape, std::vector<real>(inputs.begin() + static_cast<std::ptrdiff_t>(i * stride),
                                                inputs.begin() + static_cast<std::ptrdiff_t>((i + 1) * stride))),
                std::move(p), prov[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void to_json(json& j, const FiltrationConfig& c) {
    j = {{"t_ent", c.t_ent},
         {"bandwidth", c.bandwidth},
         {"sigma", c.sigma},
         {"sensitivity", c.sensitivity},
         {"target_count", c.target_count},
         {"max_attempts", c.max_attempts},
         {"chunk_size", c.chunk_size},
         {"metric", c.metric},
         {"seed", c.seed}};
}

void from_json(const json& j, FiltrationConfig& c) {
    c.t_ent = j.value("t_ent", c.t_ent);
    c.bandwidth = j.value("bandwidth", c.bandwidth);
    c.sigma = j.value("sigma", c.sigma);
    c.sensitivity = j.value("sensitivity", c.sensitivity);
    c.target_count = j.value("target_count", c.target_count);
    c.max_attempts = j.value("max_attempts", c.max_attempts);
    c.chunk_size = j.value("chunk_size", c.chunk_size);
    c.metric = j.value("metric", c.metric);
    c.seed = j.value("seed", c.seed);
}

void validate(const FiltrationConfig& c) {
    if (!(c.t_ent > 0)) throw ArgumentError("t_ent must be > 0");
    if (!(c.sensitivity > 0)) throw ArgumentError("sensitivity must be > 0");
    if (c.bandwidth != "median" && c.bandwidth != "fixed") throw ArgumentError("bandwidth must be \"median\" or \"fixed\"");
    if (c.bandwidth == "fixed" && !(c.sigma > 0)) throw ArgumentError("sigma must be > 0");
    if (c.metric != "rbf" && c.metric != "cosine" && c.metric != "l2")
        throw ArgumentError("metric must be one of rbf, cosine, l2");
    if (c.target_count < 1) throw ArgumentError("target_count must be >= 1");
    if (c.max_attempts < 0) throw ArgumentError("max_attempts must be >= 0");
    if (c.chunk_size < 1) throw ArgumentError("chunk_size must be >= 1");
}

// ---------------------------------------------------------------------------
// Candidates
// ---------------------------------------------------------------------------

std::uint64_t candidate_aug_seed(const Provenance& p) {
    return mix_seed(derive_seed(p.chunk_seed, "augment"), static_cast<std::uint64_t>(p.draw));
}

bool passes_filter(const model::ClassifierModel& m, const Tensor& x, const model::AugmentationSet& aug, real t_ent,
                   std::uint64_t aug_seed) {
    const Tensor one = with_leading_one(x);
    const Tensor p0 = model::predict_proba_batch(m, one);
    if (!(model::entropy(p0.row(0)) < t_ent)) return false;
    const std::size_t top = model::argmax(p0.row(0));
    for (std::size_t k = 0; k < aug.size(); ++k) {
        const Tensor pk = model::predict_proba_batch(m, aug.apply(one, k, aug_seed + k));
        if (!(model::entropy(pk.row(0)) < t_ent) || model::argmax(pk.row(0)) != top) return false;
    }
    return true;
}

int default_workers() {
    const int hw = std::max(1, static_cast<int>(std::thread::hardware_concurrency()));
    if (const char* env = std::getenv("UNLEARN_NUM_WORKERS")) {
        const int n = std::atoi(env);
        if (n >= 1) return std::min(n, hw);
    }
    return hw;
}

Candidates generate_candidates(const inversion::ConditionalGenerator& g, const model::ClassifierModel& m,
                               const model::AugmentationSet& aug, const FiltrationConfig& cfg, int workers) {
    validate(cfg);
    if (g.output_shape() != m.input_shape()) throw ArgumentError("generator output does not match classifier input");
    if (g.num_classes() != m.num_classes) throw ArgumentError("generator and classifier disagree on the class count");
    aug.check_input_shape(m.input_shape());
    if (workers <= 0) workers = default_workers();

    const long cap = cfg.max_attempts > 0 ? cfg.max_attempts : 50L * cfg.target_count;
    const auto target = static_cast<std::size_t>(cfg.target_count);
    Candidates out{SoftLabeledDataset(m.num_classes, m.input_shape()), {}};
    std::uint64_t next_chunk = 0;

    while (out.items.size() < target && out.stats.attempts < cap) {
        const long remaining_chunks = (cap - out.stats.attempts + cfg.chunk_size - 1) / cfg.chunk_size;
        const int wave = static_cast<int>(std::min<long>(workers, remaining_chunks));
        std::vector<ChunkResult> results(static_cast<std::size_t>(wave));
        std::vector<std::uint64_t> seeds(static_cast<std::size_t>(wave));
        for (int w = 0; w < wave; ++w) seeds[static_cast<std::size_t>(w)] = mix_seed(cfg.seed, next_chunk + static_cast<std::uint64_t>(w));
        if (wave == 1) {
            results[0] = run_chunk(g, m, aug, cfg, seeds[0]);
        } else {
            std::vector<std::thread> threads;
            for (int w = 0; w < wave; ++w)
                threads.emplace_back([&, w] { results[static_cast<std::size_t>(w)] = run_chunk(g, m, aug, cfg, seeds[static_cast<std::size_t>(w)]); });
            for (auto& t : threads) t.join();
        }
        next_chunk += static_cast<std::uint64_t>(wave);

        // Merge in chunk order; stop at exactly target_count or the cap.
        for (int w = 0; w < wave && out.items.size() < target && out.stats.attempts < cap; ++w) {
            const ChunkResult& r = results[static_cast<std::size_t>(w)];
            for (int i = 0; i < cfg.chunk_size && out.items.size() < target && out.stats.attempts < cap; ++i) {
                ++out.stats.attempts;
                if (!r.keep[static_cast<std::size_t>(i)]) continue;
                const auto p = r.probs.row(static_cast<std::size_t>(i));
                out.items.add(item_of(r.inputs, static_cast<std::size_t>(i)), std::vector<real>(p.begin(), p.end()),
                              {seeds[static_cast<std::size_t>(w)], i, r.labels[static_cast<std::size_t>(i)]});
            }
        }
    }
    out.stats.accepted = static_cast<long>(out.items.size());
    if (out.items.size() < target) {
        if (out.stats.acceptance_rate() < 1e-3) {
            char msg[256];
            std::snprintf(msg, sizeof msg,
                          "candidate acceptance rate %.4f%% over %ld draws is below 0.1%%; review t_ent or the generator loss weights",
                          100.0 * out.stats.acceptance_rate(), out.stats.attempts);
            throw YieldError(msg);
        }
        out.stats.truncated = true;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

real rbf_kernel(std::span<const real> a, std::span<const real> b, real sigma) {
    if (!(sigma > 0)) throw ArgumentError("rbf bandwidth must be > 0");
    if (a.size() != b.size()) throw ArgumentError("rbf_kernel: vectors differ in width");
    return std::exp(-squared_distance(a, b) / (2 * sigma * sigma));
}

real median_distance(const Tensor& a, const Tensor& b) {
    std::vector<real> d;
    d.reserve(static_cast<std::size_t>(a.dim(0)) * static_cast<std::size_t>(b.dim(0)));
    for (int i = 0; i < a.dim(0); ++i)
        for (int j = 0; j < b.dim(0); ++j) d.push_back(std::sqrt(squared_distance(a.row(static_cast<std::size_t>(i)), b.row(static_cast<std::size_t>(j)))));
    if (d.empty()) throw ArgumentError("median_distance of an empty set");
    const std::size_t n = d.size();
    std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(n / 2), d.end());
    real med = d[n / 2];
    if (n % 2 == 0) med = 0.5 * (med + *std::max_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(n / 2)));
    return med;
}

Scores score_features(const Tensor& features, const Tensor& exemplars, const FiltrationConfig& cfg) {
    if (exemplars.rank() != 2 || exemplars.dim(0) == 0) throw ArgumentError("similarity scoring needs at least one exemplar");
    if (features.rank() != 2 || features.dim(1) != exemplars.dim(1)) throw ArgumentError("feature widths differ");
    Scores s;
    const auto n = static_cast<std::size_t>(features.dim(0));
    const auto e = static_cast<std::size_t>(exemplars.dim(0));
    s.values.assign(n, 0.0);
    if (cfg.metric == "rbf") {
        s.sigma = cfg.bandwidth == "fixed" ? cfg.sigma : median_distance(features, exemplars);
        // All-identical features give a zero median; any positive bandwidth scores them equally.
        if (!(s.sigma > 0)) s.sigma = 1.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < e; ++j) s.values[i] += rbf_kernel(features.row(i), exemplars.row(j), s.sigma);
    } else if (cfg.metric == "cosine") {
        const auto norm = [](std::span<const real> v) { return std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0)); };
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < e; ++j) {
                const auto a = features.row(i), b = exemplars.row(j);
                const real den = norm(a) * norm(b);
                s.values[i] += den > 0 ? std::inner_product(a.begin(), a.end(), b.begin(), 0.0) / den : 0.0;
            }
    } else {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < e; ++j) s.values[i] -= std::sqrt(squared_distance(features.row(i), exemplars.row(j)));
    }
    return s;
}

Scores similarity_scores(const SoftLabeledDataset& d_prime, const data::LabeledDataset& d_e_rho,
                         const model::ClassifierModel& m, const FiltrationConfig& cfg) {
    validate(cfg);
    if (d_e_rho.empty()) throw ArgumentError("similarity scoring needs a non-empty target subset");
    const Tensor exemplars = model::extract_features_batch(m, d_e_rho.all_inputs());
    if (d_prime.empty()) return {{}, 0.0};
    return score_features(model::extract_features_batch(m, d_prime.all_inputs()), exemplars, cfg);
}

namespace {

// Largest confirmed local maximum of d, -1 when there is none.
long kneedle_peak(const std::vector<real>& d, real step) {
    const std::size_t n = d.size();
    const auto is_local_max = [&](std::size_t i) { return d[i] > d[i - 1] && d[i] >= d[i + 1]; };
    real best = -std::numeric_limits<real>::infinity();
    long index = -1;
    for (std::size_t i = 1; i + 1 < n; ++i) {
        if (!is_local_max(i) || d[i] <= 0) continue;
        const real t = d[i] - step;
        bool confirmed = false;
        for (std::size_t j = i + 1; j < n; ++j) {
            if (d[j] < t) {
                confirmed = true;
                break;
            }
            if (j + 1 < n && is_local_max(j)) break;
        }
        if (confirmed && d[i] > best) {
            best = d[i];
            index = static_cast<long>(i);
        }
    }
    return index;
}

} // namespace

Knee knee_threshold(std::span<const real> scores, real sensitivity) {
    if (scores.size() < 4) throw ArgumentError("knee detection needs at least 4 scores");
    if (!(sensitivity > 0)) throw ArgumentError("knee sensitivity must be > 0");
    std::vector<real> y(scores.begin(), scores.end());
    for (real v : y)
        if (!std::isfinite(v)) throw ArgumentError("knee detection needs finite scores");
    std::sort(y.begin(), y.end());
    Knee knee;
    const std::size_t n = y.size();
    const real lo = y.front(), hi = y.back();
    if (!(hi > lo)) return knee;

    // Below the chord the curve is convex and its knee opens the high-score
    // tail, which is the part that gets flagged. Above it (concave) is the
    // fallback for curves that never dip under the chord.
    std::vector<real> below(n), above(n);
    for (std::size_t i = 0; i < n; ++i) {
        above[i] = (y[i] - lo) / (hi - lo) - static_cast<real>(i) / static_cast<real>(n - 1);
        below[i] = -above[i];
    }
    const real step = sensitivity / static_cast<real>(n - 1);
    knee.index = kneedle_peak(below, step);
    if (knee.index < 0) knee.index = kneedle_peak(above, step);
    if (knee.index >= 0) {
        knee.found = true;
        knee.threshold = y[static_cast<std::size_t>(knee.index)];
    }
    return knee;
}

std::vector<real> relabel(std::span<const real> soft_label, std::span<const int> target_classes) {
    const int k = static_cast<int>(soft_label.size());
    if (target_classes.empty()) throw ArgumentError("relabel needs at least one target class");
    std::vector<char> is_target(soft_label.size(), 0);
    for (int c : target_classes) {
        if (c < 0 || c >= k) throw ArgumentError("target class " + std::to_string(c) + " out of range");
        is_target[static_cast<std::size_t>(c)] = 1;
    }
    const auto kept = std::count(is_target.begin(), is_target.end(), 0);
    if (kept == 0) throw ArgumentError("relabel cannot remove every class");

    std::vector<real> out(soft_label.begin(), soft_label.end());
    real mass = 0;
    for (std::size_t c = 0; c < out.size(); ++c) {
        if (is_target[c]) out[c] = 0;
        mass += out[c];
    }
    if (mass < 1e-8) {
        for (std::size_t c = 0; c < out.size(); ++c) out[c] = is_target[c] ? 0.0 : 1.0 / static_cast<real>(kept);
    } else {
        for (real& v : out) v /= mass;
    }
    return out;
}

UnlearnSet build_unlearn_set(const SoftLabeledDataset& d_prime, std::span<const real> scores, real t_f,
                             std::span<const int> target_classes) {
    if (scores.size() != d_prime.size()) throw ArgumentError("one score per candidate is required");
    UnlearnSet out{SoftLabeledDataset(d_prime.num_classes(), d_prime.input_shape()), {}, {}};
    out.flags.resize(d_prime.size());
    for (std::size_t i = 0; i < d_prime.size(); ++i) {
        const bool flagged = scores[i] >= t_f;
        out.flags[i] = flagged;
        out.items.add(d_prime.input(i), flagged ? relabel(d_prime.soft_label(i), target_classes) : d_prime.soft_label(i),
                      d_prime.provenance(i));
        ++(flagged ? out.stats.flagged : out.stats.retained);
    }
    out.stats.t_f = t_f;
    out.stats.scores = summarize(scores);
    return out;
}

void to_json(json& j, const UnlearnSetStats& s) {
    j = {{"flagged", s.flagged},
         {"retained", s.retained},
         {"t_f", std::isfinite(s.t_f) ? json(s.t_f) : json(s.t_f > 0 ? "inf" : "-inf")},
         {"score_min", s.scores.min},
         {"score_max", s.scores.max},
         {"score_mean", s.scores.mean},
         {"score_median", s.scores.median}};
}

// ---------------------------------------------------------------------------
// Outputs
// ---------------------------------------------------------------------------

void write_scores_csv(const SoftLabeledDataset& d_prime, std::span<const real> scores, const std::vector<bool>& flags,
                      const fs::path& file) {
    if (scores.size() != d_prime.size() || flags.size() != d_prime.size())
        throw ArgumentError("scores and flags must align with the candidates");
    std::ostringstream out;
    out.precision(10);
    out << "index,conditioning_label,score,flagged\n";
    for (std::size_t i = 0; i < d_prime.size(); ++i)
        out << i << ',' << d_prime.provenance(i).conditioning_label << ',' << scores[i] << ',' << (flags[i] ? 1 : 0) << '\n';
    io::write_text(file, out.str());
}

void write_threshold_json(const Knee& knee, const Scores& scores, const FiltrationConfig& cfg, const fs::path& file) {
    json j{{"t_f", knee.found ? json(knee.threshold) : json("inf")},
           {"knee_found", knee.found},
           {"knee_index", knee.index},
           {"sigma", scores.sigma},
           {"sensitivity", cfg.sensitivity},
           {"metric", cfg.metric},
           {"bandwidth", cfg.bandwidth},
           {"t_ent", cfg.t_ent}};
    io::write_text(file, j.dump(2) + "\n");
}

bool write_sample_grid(const SoftLabeledDataset& d, const std::vector<bool>& flags, const fs::path& file,
                       std::size_t max_items) {
    const Shape& s = d.input_shape();
    if (s.size() != 3 || (s[0] != 1 && s[0] != 3) || d.empty()) return false;
    if (flags.size() != d.size()) throw ArgumentError("flags must align with the samples");
    const int c = s[0], h = s[1], w = s[2];

    // Rows ordered by conditioning label, as in a per-class sample sheet.
    std::vector<std::size_t> order(d.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return d.provenance(a).conditioning_label < d.provenance(b).conditioning_label;
    });
    if (order.size() > max_items) {
        // Keep an even spread across the sorted list.
        std::vector<std::size_t> picked;
        for (std::size_t i = 0; i < max_items; ++i) picked.push_back(order[i * order.size() / max_items]);
        order = std::move(picked);
    }
    const int cols = 20;
    const int rows = static_cast<int>((order.size() + cols - 1) / cols);
    const int cw = w + 2, ch = h + 2;
    const int width = cols * cw, height = rows * ch;
    std::vector<unsigned char> img(static_cast<std::size_t>(width) * static_cast<std::size_t>(height) * 3, 32);

    for (std::size_t n = 0; n < order.size(); ++n) {
        const std::size_t item = order[n];
        const int ox = static_cast<int>(n % cols) * cw, oy = static_cast<int>(n / cols) * ch;
        const Tensor& x = d.input(item);
        const unsigned char frame[3] = {static_cast<unsigned char>(flags[item] ? 255 : 32), static_cast<unsigned char>(flags[item] ? 0 : 32),
                                        static_cast<unsigned char>(flags[item] ? 0 : 32)};
        for (int py = 0; py < ch; ++py)
            for (int px = 0; px < cw; ++px) {
                unsigned char* dst = &img[(static_cast<std::size_t>(oy + py) * static_cast<std::size_t>(width) + static_cast<std::size_t>(ox + px)) * 3];
                if (py == 0 || px == 0 || py == ch - 1 || px == cw - 1) {
                    std::copy(frame, frame + 3, dst);
                    continue;
                }
                for (int k = 0; k < 3; ++k) {
                    const int ci = c == 1 ? 0 : k;
                    const real v = x[(static_cast<std::size_t>(ci) * static_cast<std::size_t>(h) + static_cast<std::size_t>(py - 1)) * static_cast<std::size_t>(w) + static_cast<std::size_t>(px - 1)];
                    dst[k] = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
                }
            }
    }

    if (file.has_parent_path()) fs::create_directories(file.parent_path());
    std::FILE* fp = std::fopen(file.string().c_str(), "wb");
    if (!fp) throw std::runtime_error("cannot write " + file.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw std::runtime_error("libpng failed writing " + file.string());
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < height; ++y) png_write_row(png, &img[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) * 3]);
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    return true;
}

} // namespace unlearn::filtration
