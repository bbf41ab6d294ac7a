#include "unlearn/data.hpp"

#include "unlearn/binary_io.hpp"
#include "unlearn/errors.hpp"
#include "unlearn/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>

namespace unlearn::data {

namespace fs = std::filesystem;
using nlohmann::json;

LabeledDataset::LabeledDataset(int num_classes, Shape input_shape)
    : num_classes_(num_classes), input_shape_(std::move(input_shape)) {
    if (num_classes <= 0) throw ArgumentError("num_classes must be positive");
}

void LabeledDataset::add(Tensor input, int label) {
    if (input.shape() != input_shape_)
        throw ArgumentError("input shape " + shape_to_string(input.shape()) + " != dataset shape " +
                            shape_to_string(input_shape_));
    if (label < 0 || label >= num_classes_)
        throw ArgumentError("label " + std::to_string(label) + " outside [0, " + std::to_string(num_classes_) + ")");
    inputs_.push_back(std::move(input));
    labels_.push_back(label);
}

void LabeledDataset::set_label(std::size_t i, int label) {
    if (label < 0 || label >= num_classes_) throw ArgumentError("label out of range");
    labels_.at(i) = label;
}

Tensor LabeledDataset::batch(std::span<const std::size_t> indices) const {
    Shape shape{static_cast<int>(indices.size())};
    shape.insert(shape.end(), input_shape_.begin(), input_shape_.end());
    Tensor out(shape);
    const std::size_t stride = shape_size(input_shape_);
    for (std::size_t i = 0; i < indices.size(); ++i)
        std::copy(inputs_.at(indices[i]).values().begin(), inputs_.at(indices[i]).values().end(),
                  out.data() + i * stride);
    return out;
}

Tensor LabeledDataset::all_inputs() const {
    std::vector<std::size_t> idx(size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return batch(idx);
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> indices) const {
    LabeledDataset out(num_classes_, input_shape_);
    for (std::size_t i : indices) out.add(inputs_.at(i), labels_.at(i));
    return out;
}

std::vector<std::size_t> LabeledDataset::class_counts() const {
    std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes_), 0);
    for (int l : labels_) ++counts[static_cast<std::size_t>(l)];
    return counts;
}

// ---------------------------------------------------------------------------
// SplitSpec
// ---------------------------------------------------------------------------
void to_json(json& j, const SplitSpec& s) {
    j = json{{"mode", s.mode == ScenarioMode::ClassRemoval ? "class-removal" : "mislabel-correction"},
             {"target_classes", s.target_classes},
             {"rho", s.rho}};
    if (s.source_class) j["source_class"] = *s.source_class;
    if (s.mode == ScenarioMode::MislabelCorrection) {
        j["corrupt_fraction"] = s.corrupt_fraction;
        if (s.anchor) {
            j["anchor"] = *s.anchor;
            j["corrupt_count"] = s.corrupt_count;
        }
    }
}

void from_json(const json& j, SplitSpec& s) {
    const std::string mode = j.value("mode", std::string("class-removal"));
    if (mode == "class-removal")
        s.mode = ScenarioMode::ClassRemoval;
    else if (mode == "mislabel-correction")
        s.mode = ScenarioMode::MislabelCorrection;
    else
        throw ArgumentError("unknown scenario mode '" + mode + "'");
    s.target_classes = j.value("target_classes", s.target_classes);
    if (j.contains("source_class")) s.source_class = j.at("source_class").get<int>();
    s.rho = j.value("rho", s.rho);
    s.corrupt_fraction = j.value("corrupt_fraction", s.corrupt_fraction);
    if (j.contains("anchor")) s.anchor = j.at("anchor").get<std::vector<double>>();
    s.corrupt_count = j.value("corrupt_count", s.corrupt_count);
}

void validate(const SplitSpec& s, int num_classes) {
    if (s.target_classes.empty()) throw ArgumentError("scenario needs at least one target class");
    for (int c : s.target_classes)
        if (c < 0 || c >= num_classes) throw ArgumentError("target class " + std::to_string(c) + " out of range");
    if (!(s.rho > 0.0 && s.rho <= 1.0)) throw ArgumentError("rho must lie in (0, 1], got " + std::to_string(s.rho));
    if (s.mode == ScenarioMode::MislabelCorrection) {
        if (!s.source_class) throw ArgumentError("mislabel-correction needs a source_class");
        if (std::find(s.target_classes.begin(), s.target_classes.end(), *s.source_class) != s.target_classes.end())
            throw ArgumentError("source_class must not be one of the target classes");
        if (!(s.corrupt_fraction > 0.0 && s.corrupt_fraction <= 1.0))
            throw ArgumentError("corrupt_fraction must lie in (0, 1]");
        if (s.anchor && s.corrupt_count <= 0) throw ArgumentError("anchored corruption needs corrupt_count > 0");
    }
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------
LabeledDataset make_moons(int n, double noise, std::uint64_t seed) {
    if (n < 0) throw ArgumentError("make_moons: n must be >= 0");
    if (noise < 0) throw ArgumentError("make_moons: noise must be >= 0");
    LabeledDataset out(2, Shape{2});
    if (n == 0) return out;
    const int n_upper = n / 2, n_lower = n - n_upper;
    struct Point {
        double x, y;
        int label;
    };
    std::vector<Point> points;
    const auto arc = [](int i, int count) { return count > 1 ? std::numbers::pi * i / (count - 1) : 0.0; };
    for (int i = 0; i < n_upper; ++i) {
        const double t = arc(i, n_upper);
        points.push_back({std::cos(t), std::sin(t), 0});
    }
    for (int i = 0; i < n_lower; ++i) {
        const double t = arc(i, n_lower);
        points.push_back({1.0 - std::cos(t), 0.5 - std::sin(t), 1});
    }
    Rng rng(seed);
    std::shuffle(points.begin(), points.end(), rng.engine());
    for (const Point& p : points) {
        const double nx = rng.normal() * noise, ny = rng.normal() * noise;
        out.add(Tensor(Shape{2}, {p.x + nx, p.y + ny}), p.label);
    }
    return out;
}

Corruption corrupt_labels(const LabeledDataset& d, std::span<const std::size_t> indices, int source_class,
                          std::span<const int> target_classes, std::uint64_t seed) {
    if (target_classes.empty()) throw ArgumentError("corrupt_labels: empty target class set");
    for (int c : target_classes) {
        if (c == source_class) throw ArgumentError("corrupt_labels: target classes must exclude the source class");
        if (c < 0 || c >= d.num_classes()) throw ArgumentError("corrupt_labels: target class out of range");
    }
    Corruption out{d, LabeledDataset(d.num_classes(), d.input_shape()), {}};
    Rng rng(seed);
    for (std::size_t i : indices) {
        if (d.label(i) != source_class) throw ArgumentError("corrupt_labels: item is not of the source class");
        const int label = target_classes[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(target_classes.size())))];
        out.corrupted.set_label(i, label);
        out.targets.add(d.input(i), label);
        out.indices.push_back(i);
    }
    return out;
}

Corruption corrupt_labels(const LabeledDataset& d, int source_class, std::span<const int> target_classes,
                          std::uint64_t seed) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < d.size(); ++i)
        if (d.label(i) == source_class) idx.push_back(i);
    if (idx.empty()) throw ArgumentError("corrupt_labels: source class " + std::to_string(source_class) + " absent");
    return corrupt_labels(d, idx, source_class, target_classes, seed);
}

Split class_removal_split(const LabeledDataset& d, int target_class) {
    Split out{LabeledDataset(d.num_classes(), d.input_shape()), LabeledDataset(d.num_classes(), d.input_shape())};
    for (std::size_t i = 0; i < d.size(); ++i) (d.label(i) == target_class ? out.target : out.retain).add(d.input(i), d.label(i));
    return out;
}

LabeledDataset sample_target_subset(const LabeledDataset& targets, double rho, std::uint64_t seed) {
    if (!(rho > 0.0 && rho <= 1.0)) throw ArgumentError("sample_target_subset: rho must lie in (0, 1]");
    LabeledDataset out(targets.num_classes(), targets.input_shape());
    Rng rng(seed);
    for (std::size_t i = 0; i < targets.size(); ++i) {
        // Draw for every item so that rho = 1 consumes the same stream.
        const bool keep = rng.uniform(0.0, 1.0) < rho;
        if (keep) out.add(targets.input(i), targets.label(i));
    }
    return out;
}

std::vector<std::size_t> nearest_of_class(const LabeledDataset& d, int cls, std::span<const double> anchor,
                                          std::size_t count) {
    if (anchor.size() != shape_size(d.input_shape())) throw ArgumentError("anchor dimensionality mismatch");
    std::vector<std::pair<double, std::size_t>> cand;
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (d.label(i) != cls) continue;
        double s = 0.0;
        for (std::size_t k = 0; k < anchor.size(); ++k) s += std::pow(d.input(i)[k] - anchor[k], 2);
        cand.emplace_back(s, i);
    }
    if (cand.size() < count) throw ArgumentError("nearest_of_class: not enough items of the class");
    std::stable_sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < count; ++k) out.push_back(cand[k].second);
    std::sort(out.begin(), out.end());
    return out;
}

std::pair<LabeledDataset, LabeledDataset> stratified_split(const LabeledDataset& d, double fraction) {
    std::vector<std::size_t> counts = d.class_counts();
    std::vector<std::size_t> quota(counts.size()), seen(counts.size(), 0);
    for (std::size_t c = 0; c < counts.size(); ++c)
        quota[c] = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(counts[c])));
    std::vector<std::size_t> first, second;
    for (std::size_t i = 0; i < d.size(); ++i) {
        const auto c = static_cast<std::size_t>(d.label(i));
        (seen[c]++ < quota[c] ? first : second).push_back(i);
    }
    return {d.subset(first), d.subset(second)};
}

LabeledDataset balanced_prefix(const LabeledDataset& d, std::size_t limit) {
    if (d.size() <= limit) return d;
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(d.num_classes()));
    for (std::size_t i = 0; i < d.size(); ++i) by_class[static_cast<std::size_t>(d.label(i))].push_back(i);
    std::vector<std::size_t> keep;
    for (std::size_t round = 0; keep.size() < limit; ++round)
        for (const auto& items : by_class)
            if (round < items.size() && keep.size() < limit) keep.push_back(items[round]);
    std::sort(keep.begin(), keep.end());
    return d.subset(keep);
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------
void save_dataset(const LabeledDataset& d, const fs::path& dir) {
    fs::create_directories(dir);
    json meta{{"num_classes", d.num_classes()},
              {"input_shape", d.input_shape()},
              {"count", d.size()},
              {"dtype", "float32"}};
    io::write_text(dir / "meta.json", meta.dump(2) + "\n");
    std::vector<real> flat;
    flat.reserve(d.size() * shape_size(d.input_shape()));
    for (const Tensor& t : d.inputs()) flat.insert(flat.end(), t.values().begin(), t.values().end());
    io::write_f32(dir / "inputs.bin", flat);
    io::write_u32(dir / "labels.bin", d.labels());
}

LabeledDataset load_dataset(const fs::path& dir) {
    if (!fs::exists(dir / "meta.json")) throw ArgumentError("dataset container missing " + (dir / "meta.json").string());
    const json meta = json::parse(io::read_text(dir / "meta.json"));
    if (meta.value("dtype", std::string("float32")) != "float32")
        throw ArgumentError("unsupported dataset dtype in " + dir.string());
    const int k = meta.at("num_classes").get<int>();
    const Shape shape = meta.at("input_shape").get<Shape>();
    const auto count = meta.at("count").get<std::size_t>();
    const std::vector<real> flat = io::read_f32(dir / "inputs.bin");
    const std::vector<int> labels = io::read_u32(dir / "labels.bin");
    const std::size_t stride = shape_size(shape);
    if (labels.size() != count || flat.size() != count * stride)
        throw ArgumentError("dataset container " + dir.string() + " is inconsistent with meta.json");
    LabeledDataset out(k, shape);
    for (std::size_t i = 0; i < count; ++i)
        out.add(Tensor(shape, std::vector<real>(flat.begin() + static_cast<std::ptrdiff_t>(i * stride),
                                                flat.begin() + static_cast<std::ptrdiff_t>((i + 1) * stride))),
                labels[i]);
    return out;
}

void export_points_csv(const LabeledDataset& d, const fs::path& file) {
    if (d.input_shape() != Shape{2}) throw ArgumentError("CSV export needs 2-D point inputs");
    std::ofstream out(file);
    out << "x0,x1,label\n";
    out.precision(9);
    for (std::size_t i = 0; i < d.size(); ++i) out << d.input(i)[0] << ',' << d.input(i)[1] << ',' << d.label(i) << '\n';
}

namespace {

std::uint32_t read_be32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw ArgumentError("truncated IDX header");
    return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | std::uint32_t{b[3]};
}

} // namespace

LabeledDataset load_idx(const fs::path& images, const fs::path& labels, int num_classes) {
    std::ifstream img(images, std::ios::binary), lab(labels, std::ios::binary);
    if (!img || !lab) throw ArgumentError("cannot open IDX files");
    if (read_be32(img) != 0x00000803) throw ArgumentError(images.string() + " is not an IDX3 ubyte file");
    if (read_be32(lab) != 0x00000801) throw ArgumentError(labels.string() + " is not an IDX1 ubyte file");
    const std::uint32_t n = read_be32(img), rows = read_be32(img), cols = read_be32(img);
    if (read_be32(lab) != n) throw ArgumentError("IDX image/label counts differ");
    LabeledDataset out(num_classes, Shape{1, static_cast<int>(rows), static_cast<int>(cols)});
    std::vector<unsigned char> buf(static_cast<std::size_t>(rows) * cols);
    for (std::uint32_t i = 0; i < n; ++i) {
        img.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        char l = 0;
        lab.read(&l, 1);
        if (!img || !lab) throw ArgumentError("truncated IDX payload");
        Tensor t(Shape{1, static_cast<int>(rows), static_cast<int>(cols)});
        for (std::size_t p = 0; p < buf.size(); ++p) t[p] = buf[p] / 255.0;
        out.add(std::move(t), static_cast<unsigned char>(l));
    }
    return out;
}

} // namespace unlearn::data
