#include "unlearn/augment.hpp"

#include "unlearn/errors.hpp"
#include "unlearn/rng.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <numbers>

namespace unlearn::model {

namespace {

bool is_spatial(const std::string& kind) { return kind == "shift" || kind == "rotate" || kind == "hflip"; }

void check_kind(const Transform& t) {
    if (t.kind != "identity" && t.kind != "jitter" && !is_spatial(t.kind))
        throw ArgumentError("unknown transform kind '" + t.kind + "'");
    if (t.amount < 0) throw ArgumentError("transform amount must be >= 0");
}

// Inverse map for one item: output pixel -> input sampling position.
ag::AffineMap draw_map(const Transform& t, int height, int width, Rng& rng) {
    const real cx = (width - 1) / 2.0, cy = (height - 1) / 2.0;
    if (t.kind == "shift") {
        const int p = static_cast<int>(t.amount);
        const real dx = rng.uniform_int(2 * p + 1) - p, dy = rng.uniform_int(2 * p + 1) - p;
        return {1, 0, dx, 0, 1, dy};
    }
    if (t.kind == "rotate") {
        const real theta = rng.uniform(-t.amount, t.amount) * std::numbers::pi / 180.0;
        const real c = std::cos(theta), s = std::sin(theta);
        return {c, -s, cx - c * cx + s * cy, s, c, cy - s * cx - c * cy};
    }
    // hflip
    return {-1, 0, static_cast<real>(width - 1), 0, 1, 0};
}

std::uint64_t item_seed(std::uint64_t seed, std::size_t i) { return mix_seed(seed, i); }

} // namespace

void to_json(nlohmann::json& j, const Transform& t) { j = {{"kind", t.kind}, {"amount", t.amount}}; }

void from_json(const nlohmann::json& j, Transform& t) {
    t.kind = j.at("kind").get<std::string>();
    t.amount = j.value("amount", 0.0);
    check_kind(t);
}

AugmentationSet::AugmentationSet(std::vector<Transform> transforms) : transforms_(std::move(transforms)) {
    for (const Transform& t : transforms_) check_kind(t);
}

void AugmentationSet::check_input_shape(const Shape& input_shape) const {
    for (const Transform& t : transforms_)
        if (is_spatial(t.kind) && input_shape.size() != 3)
            throw ArgumentError("transform '" + t.kind + "' needs [C, H, W] inputs, got " + shape_to_string(input_shape));
}

ag::Var AugmentationSet::apply(const ag::Var& batch, std::size_t k, std::uint64_t seed) const {
    const Transform& t = transforms_.at(k);
    const int n = batch.dim(0);
    if (t.kind == "identity") return batch;
    if (t.kind == "jitter") {
        Tensor noise(batch.shape());
        const std::size_t stride = noise.row_size();
        for (int i = 0; i < n; ++i) {
            Rng rng(item_seed(seed, static_cast<std::size_t>(i)));
            for (std::size_t e = 0; e < stride; ++e) noise[static_cast<std::size_t>(i) * stride + e] = rng.normal() * t.amount;
        }
        return ag::add(batch, ag::constant(std::move(noise)));
    }
    if (batch.value().rank() != 4) throw ArgumentError("transform '" + t.kind + "' needs a [N, C, H, W] batch");
    std::vector<ag::AffineMap> maps;
    for (int i = 0; i < n; ++i) {
        Rng rng(item_seed(seed, static_cast<std::size_t>(i)));
        maps.push_back(draw_map(t, batch.dim(2), batch.dim(3), rng));
    }
    return ag::warp_affine(batch, maps);
}

Tensor AugmentationSet::apply(const Tensor& batch, std::size_t k, std::uint64_t seed) const {
    ag::NoGradGuard guard;
    return apply(ag::constant(batch), k, seed).value();
}

ag::Var AugmentationSet::apply_random(const ag::Var& batch, std::uint64_t seed) const {
    if (transforms_.empty()) return batch;
    const int n = batch.dim(0);
    const int choices = static_cast<int>(transforms_.size()) + 1;
    Rng pick(derive_seed(seed, "pick"));
    std::vector<std::vector<int>> groups(static_cast<std::size_t>(choices));
    for (int i = 0; i < n; ++i) groups[static_cast<std::size_t>(pick.uniform_int(choices))].push_back(i);

    // Transform each group, then restore the original item order.
    std::vector<ag::Var> parts;
    std::vector<int> order;
    for (int c = 0; c < choices; ++c) {
        const auto& rows = groups[static_cast<std::size_t>(c)];
        if (rows.empty()) continue;
        ag::Var sub = ag::gather_rows(batch, rows);
        parts.push_back(c == 0 ? sub : apply(sub, static_cast<std::size_t>(c - 1), mix_seed(seed, static_cast<std::uint64_t>(c))));
        order.insert(order.end(), rows.begin(), rows.end());
    }
    std::vector<int> inverse(order.size());
    for (std::size_t pos = 0; pos < order.size(); ++pos) inverse[static_cast<std::size_t>(order[pos])] = static_cast<int>(pos);
    return ag::gather_rows(ag::concat_rows(parts), inverse);
}

void to_json(nlohmann::json& j, const AugmentationSet& a) { j = a.transforms(); }

void from_json(const nlohmann::json& j, AugmentationSet& a) { a = AugmentationSet(j.get<std::vector<Transform>>()); }

AugmentationSet default_augmentations(const Shape& input_shape) {
    if (input_shape.size() != 3) return AugmentationSet({{"jitter", 0.05}});
    if (input_shape[0] == 1) return AugmentationSet({{"shift", 2.0}, {"rotate", 10.0}});
    return AugmentationSet({{"shift", 2.0}, {"hflip", 0.0}});
}

} // namespace unlearn::model
