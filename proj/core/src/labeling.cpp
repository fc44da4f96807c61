#include "slidepipe/labeling.hpp"

#include <algorithm>
#include <cmath>

#include "slidepipe/csv.hpp"
#include "slidepipe/rng.hpp"

namespace slidepipe {

void LabelingConfig::validate() const {
    if (hard_label_threshold <= 0.0 || hard_label_threshold >= 1.0)
        throw InvalidConfig("hard_label_threshold must lie in (0,1)");
    if (epsilon < 0.0 || epsilon >= 1.0)
        throw InvalidConfig("epsilon must lie in [0,1)");
    if (epsilon > 0.0 && a1_max < 1)
        throw InvalidConfig("a1_max must be >= 1 when smoothing is enabled");
}

int hard_label(double ratio, double hard_label_threshold) {
    if (ratio < 0.0 || ratio > 1.0)
        throw RatioOutOfRange("ratio " + std::to_string(ratio) + " outside [0,1]");
    return ratio > hard_label_threshold ? 1 : 0;
}

SmoothedLabel smooth_label(int y, std::int64_t a1, const LabelingConfig& cfg) {
    cfg.validate();
    if (y != 0 && y != 1) throw DataError("class label must be 0 or 1");
    if (a1 < 0 || a1 > cfg.a1_max)
        throw RatioOutOfRange("a1 " + std::to_string(a1) + " outside [0, a1_max=" +
                              std::to_string(cfg.a1_max) + "]");
    if (cfg.epsilon == 0.0)
        return y == 1 ? SmoothedLabel{0.0, 1.0} : SmoothedLabel{1.0, 0.0};
    const double r = static_cast<double>(a1) / static_cast<double>(cfg.a1_max);
    SmoothedLabel out;
    out.p_benign = (1.0 - cfg.epsilon) * (y == 0 ? 1.0 : 0.0) + cfg.epsilon * (1.0 - r);
    out.p_malignant = (1.0 - cfg.epsilon) * (y == 1 ? 1.0 : 0.0) + cfg.epsilon * r;
    return out;
}

double soft_target_cross_entropy(const std::array<double, 2>& predicted_probs,
                                 const SmoothedLabel& target) {
    const double sum = predicted_probs[0] + predicted_probs[1];
    if (!(predicted_probs[0] > 0.0) || !(predicted_probs[1] > 0.0) ||
        std::abs(sum - 1.0) > 1e-6)
        throw NonDistribution("predicted probabilities must be positive and sum to 1");
    if (target.p_benign < -1e-12 || target.p_malignant < -1e-12 ||
        std::abs(target.p_benign + target.p_malignant - 1.0) > 1e-6)
        throw NonDistribution("target is not a distribution");
    return -(target.p_benign * std::log(predicted_probs[0]) +
             target.p_malignant * std::log(predicted_probs[1]));
}

std::vector<LabeledPatch> label_patches(std::vector<PatchRecord> patches,
                                        int slide_label, double hard_label_threshold) {
    std::vector<LabeledPatch> out;
    out.reserve(patches.size());
    for (auto& p : patches) {
        LabeledPatch lp;
        lp.slide_label = slide_label;
        if (p.mask_crop) {
            std::int64_t ones = 0;
            for (const auto v : p.mask_crop->data) ones += v;
            lp.a1 = ones;
            lp.ratio = static_cast<double>(ones) /
                       static_cast<double>(p.mask_crop->data.size());
        }
        lp.label = hard_label(lp.ratio, hard_label_threshold);
        lp.patch = std::move(p);
        out.push_back(std::move(lp));
    }
    return out;
}

std::int64_t compute_a1_max(std::span<const LabeledPatch> patches) {
    std::int64_t m = 0;
    for (const auto& p : patches) m = std::max(m, p.a1);
    return std::max<std::int64_t>(m, 1);
}

void apply_smoothing(std::vector<LabeledPatch>& patches, const LabelingConfig& cfg) {
    for (auto& p : patches) p.target = smooth_label(p.label, p.a1, cfg);
}

std::vector<std::size_t> sample_training_patches(std::span<const LabeledPatch> patches,
                                                 std::size_t requested, std::uint64_t seed) {
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < patches.size(); ++i) {
        if (patches[i].slide_label == 1 && patches[i].label == 1)
            pos.push_back(i);
        else if (patches[i].slide_label == 0)
            neg.push_back(i);
    }
    if (pos.empty())
        throw EmptyClass("no positive patches from positive slides available");
    if (neg.empty())
        throw EmptyClass("no patches from negative slides available");

    Rng rng(seed);
    rng.shuffle(pos);
    rng.shuffle(neg);
    const std::size_t per_class =
        std::min({requested / 2, pos.size(), neg.size()});
    if (per_class == 0)
        throw EmptyClass("requested sample too small for a balanced draw");

    std::vector<std::size_t> out;
    out.reserve(2 * per_class);
    out.insert(out.end(), pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(per_class));
    out.insert(out.end(), neg.begin(), neg.begin() + static_cast<std::ptrdiff_t>(per_class));
    rng.shuffle(out);
    return out;
}

namespace {

ByteRaster jitter_brightness_contrast(const ByteRaster& in, double contrast, double brightness) {
    ByteRaster out(in.channels, in.height, in.width);
    for (std::size_t i = 0; i < in.data.size(); ++i) {
        const double v = (static_cast<double>(in.data[i]) - 127.5) * contrast + 127.5 + brightness;
        out.data[i] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0l, 255l));
    }
    return out;
}

// Piecewise-bilinear displacement field over a coarse control grid; border
// nodes stay put so samples never leave the patch.
struct DisplacementField {
    int cells;
    int size;
    std::vector<double> dx, dy; // (cells+1)^2 node displacements

    static DisplacementField random(int cells, int size, double amplitude, Rng& rng) {
        DisplacementField f;
        f.cells = cells;
        f.size = size;
        const int nodes = cells + 1;
        f.dx.assign(static_cast<std::size_t>(nodes) * nodes, 0.0);
        f.dy.assign(static_cast<std::size_t>(nodes) * nodes, 0.0);
        const double amp = amplitude * size;
        for (int gy = 0; gy < nodes; ++gy)
            for (int gx = 0; gx < nodes; ++gx) {
                // draw for every node so the stream layout is stable, but only
                // interior nodes move
                const double ux = rng.uniform(-amp, amp);
                const double uy = rng.uniform(-amp, amp);
                if (gx > 0 && gx < nodes - 1 && gy > 0 && gy < nodes - 1) {
                    f.dx[static_cast<std::size_t>(gy) * nodes + gx] = ux;
                    f.dy[static_cast<std::size_t>(gy) * nodes + gx] = uy;
                }
            }
        return f;
    }

    // displacement at pixel center (x, y)
    std::pair<double, double> at(double x, double y) const {
        const int nodes = cells + 1;
        const double cell = static_cast<double>(size) / cells;
        const double gx = std::clamp(x / cell, 0.0, static_cast<double>(cells));
        const double gy = std::clamp(y / cell, 0.0, static_cast<double>(cells));
        const int x0 = std::min(static_cast<int>(gx), cells - 1);
        const int y0 = std::min(static_cast<int>(gy), cells - 1);
        const double fx = gx - x0;
        const double fy = gy - y0;
        auto node = [&](int yy, int xx, const std::vector<double>& d) {
            return d[static_cast<std::size_t>(yy) * nodes + xx];
        };
        auto lerp2 = [&](const std::vector<double>& d) {
            return (1 - fy) * ((1 - fx) * node(y0, x0, d) + fx * node(y0, x0 + 1, d)) +
                   fy * ((1 - fx) * node(y0 + 1, x0, d) + fx * node(y0 + 1, x0 + 1, d));
        };
        return {lerp2(dx), lerp2(dy)};
    }
};

double sample_bilinear(const ByteRaster& img, int c, double y, double x) {
    const int x0 = std::clamp(static_cast<int>(std::floor(x)), 0, img.width - 1);
    const int y0 = std::clamp(static_cast<int>(std::floor(y)), 0, img.height - 1);
    const int x1 = std::min(x0 + 1, img.width - 1);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double fx = std::clamp(x - x0, 0.0, 1.0);
    const double fy = std::clamp(y - y0, 0.0, 1.0);
    return (1 - fy) * ((1 - fx) * img.at(c, y0, x0) + fx * img.at(c, y0, x1)) +
           fy * ((1 - fx) * img.at(c, y1, x0) + fx * img.at(c, y1, x1));
}

} // namespace

PatchRecord augment_patch(const PatchRecord& patch, std::uint64_t seed,
                          const AugmentConfig& cfg) {
    Rng rng(seed);
    PatchRecord out = patch;

    const bool do_hflip = cfg.fold_aug && rng.bernoulli(0.5);
    const bool do_vflip = cfg.fold_aug && rng.bernoulli(0.5);
    const bool do_bc = cfg.brightness_contrast && rng.bernoulli(0.5);
    const bool do_grid = cfg.grid_distortion && rng.bernoulli(0.5);

    if (do_hflip) {
        out.pixels = flip_horizontal(out.pixels);
        if (out.mask_crop) out.mask_crop = flip_horizontal(*out.mask_crop);
    }
    if (do_vflip) {
        out.pixels = flip_vertical(out.pixels);
        if (out.mask_crop) out.mask_crop = flip_vertical(*out.mask_crop);
    }
    if (do_bc) {
        const double contrast = rng.uniform(cfg.contrast_lo, cfg.contrast_hi);
        const double brightness = rng.uniform(-cfg.brightness_delta, cfg.brightness_delta);
        out.pixels = jitter_brightness_contrast(out.pixels, contrast, brightness);
    }
    if (do_grid) {
        const int size = out.pixels.height;
        const auto field = DisplacementField::random(cfg.grid_cells, size, cfg.grid_amplitude, rng);
        ByteRaster warped(out.pixels.channels, size, size);
        ByteRaster warped_mask;
        if (out.mask_crop) warped_mask = ByteRaster(1, size, size);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                const auto [ddx, ddy] = field.at(x, y);
                const double sx = std::clamp(x + ddx, 0.0, size - 1.0);
                const double sy = std::clamp(y + ddy, 0.0, size - 1.0);
                for (int c = 0; c < out.pixels.channels; ++c)
                    warped.at(c, y, x) = static_cast<std::uint8_t>(
                        std::clamp(std::lround(sample_bilinear(out.pixels, c, sy, sx)), 0l, 255l));
                if (out.mask_crop) {
                    const int nx = static_cast<int>(std::lround(sx));
                    const int ny = static_cast<int>(std::lround(sy));
                    warped_mask.at(0, y, x) = out.mask_crop->at(0, ny, nx);
                }
            }
        out.pixels = std::move(warped);
        if (out.mask_crop) out.mask_crop = std::move(warped_mask);
    }
    return out;
}

void write_labeled_manifest(const std::filesystem::path& file,
                            std::span<const LabeledPatch> patches) {
    CsvTable t;
    t.header = {"slide_id", "origin_x", "origin_y", "a1_pixels",
                "ratio",    "hard_label", "p_benign", "p_malignant"};
    for (const auto& p : patches)
        t.rows.push_back({p.patch.slide_id, format_int(p.patch.origin_x),
                          format_int(p.patch.origin_y), format_int(p.a1),
                          format_double(p.ratio), format_int(p.label),
                          format_double(p.target.p_benign),
                          format_double(p.target.p_malignant)});
    t.write(file);
}

} // namespace slidepipe
