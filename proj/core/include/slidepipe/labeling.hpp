#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "slidepipe/tiling.hpp"

namespace slidepipe {

// Two-class target distribution from area-guided label smoothing.
struct SmoothedLabel {
    double p_benign = 1.0;    // class 0
    double p_malignant = 0.0; // class 1
};

struct LabelingConfig {
    double hard_label_threshold = 0.05; // S: a patch is positive iff ratio > S
    double epsilon = 0.1;               // smoothing strength
    std::int64_t a1_max = 1;            // max malignant pixel count over the training set

    void validate() const;
};

// 1 iff ratio > S (strict).
int hard_label(double ratio, double hard_label_threshold);

// p_k = (1-eps) * delta(k,y) + eps * a(k), with a(1) = a1/a1_max and
// a(0) = 1 - a1/a1_max.
SmoothedLabel smooth_label(int y, std::int64_t a1, const LabelingConfig& cfg);

// -sum_k target_k * ln(predicted_k) for a two-class prediction.
double soft_target_cross_entropy(const std::array<double, 2>& predicted_probs,
                                 const SmoothedLabel& target);

// A patch with its slide-level label and derived patch labels.
struct LabeledPatch {
    PatchRecord patch;
    int slide_label = 0;   // 1 = from a positive slide
    std::int64_t a1 = 0;   // malignant pixel count of the crop
    double ratio = 0.0;    // a1 / crop pixel count
    int label = 0;         // hard label vs S
    SmoothedLabel target;  // filled once a1_max is known
};

// Derives a1/ratio/hard labels for a batch of patches (mask crops required
// on patches from slides that carry ground truth; absent crops count as a1=0).
std::vector<LabeledPatch> label_patches(std::vector<PatchRecord> patches,
                                        int slide_label, double hard_label_threshold);

// Max malignant pixel count over a training patch set (>= 1 fallback so the
// smoothing ratio stays defined when no malignant pixel exists).
std::int64_t compute_a1_max(std::span<const LabeledPatch> patches);

void apply_smoothing(std::vector<LabeledPatch>& patches, const LabelingConfig& cfg);

// Balanced training draw: equal counts of positive patches from positive
// slides and negative patches from negative slides, capped by the minority
// class, reproducible from the seed. Returns indices into `patches`.
std::vector<std::size_t> sample_training_patches(std::span<const LabeledPatch> patches,
                                                 std::size_t requested, std::uint64_t seed);

struct AugmentConfig {
    bool fold_aug = true;            // horizontal/vertical flips ("folds")
    bool brightness_contrast = true;
    bool grid_distortion = true;
    double contrast_lo = 0.8;
    double contrast_hi = 1.2;
    double brightness_delta = 25.0;  // additive range, 8-bit units
    double grid_amplitude = 0.10;    // node displacement as a fraction of patch size
    int grid_cells = 4;
};

// Applies each enabled transform with independent probability 1/2 drawn from
// the seed. Geometric transforms hit pixels (bilinear) and mask (nearest)
// identically; photometric jitter leaves the mask alone.
PatchRecord augment_patch(const PatchRecord& patch, std::uint64_t seed,
                          const AugmentConfig& cfg = {});

// Labeled-patch manifest export:
// slide_id, origin_x, origin_y, a1_pixels, ratio, hard_label, p_benign, p_malignant.
void write_labeled_manifest(const std::filesystem::path& file,
                            std::span<const LabeledPatch> patches);

} // namespace slidepipe
