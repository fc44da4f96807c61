#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "slidepipe/image.hpp"

namespace slidepipe {

struct TileSpec {
    int patch_size = 1536;
    int stride = 512;

    void validate() const;
};

// A cropped tile in slide coordinates. mask_crop is present iff the slide
// carried ground truth.
struct PatchRecord {
    std::string slide_id;
    int origin_x = 0;
    int origin_y = 0;
    ByteRaster pixels;                   // 3 x P x P
    std::optional<ByteRaster> mask_crop; // 1 x P x P, values {0,1}

    int patch_size() const { return pixels.height; }
};

struct StitchedMap {
    FloatRaster probabilities;  // 1 x H x W in [0,1]; 0 where uncovered
    Raster<int> coverage_counts;
};

// Population standard deviation of all pixel values across all channels,
// in 8-bit units.
double pixel_std(const ByteRaster& pixels);

// Background rejection: keep the patch unless its joint RGB standard
// deviation is strictly below the threshold.
bool roi_keep(const PatchRecord& patch, double roi_std_threshold);

// Sliding-window tiling with clamped final row/column: origins step by
// stride, and when (dim - patch_size) is not a stride multiple one extra
// window is emitted flush against the boundary. Row-major order.
std::vector<PatchRecord> extract_grid(const SlideImage& slide, const TileSpec& spec);

// Grid origins only (no pixel copies); same order and clamping rule.
std::vector<std::pair<int, int>> grid_origins(int height, int width, const TileSpec& spec);

// Fraction of 1-pixels in a binary mask.
double malignant_ratio(const ByteRaster& mask01);

// One scored patch raster for stitching.
struct PatchProbability {
    int origin_x = 0;
    int origin_y = 0;
    FloatRaster probabilities; // 1 x P x P
};

// Mean-of-contributors stitch; uncovered pixels stay (0, count 0).
StitchedMap stitch(const std::vector<PatchProbability>& patches, int height, int width);

// Patch manifest export: slide_id, origin_x, origin_y, kept_by_roi.
struct PatchManifestRow {
    std::string slide_id;
    int origin_x = 0;
    int origin_y = 0;
    bool kept_by_roi = false;
};

void write_patch_manifest(const std::filesystem::path& file,
                          const std::vector<PatchManifestRow>& rows);

} // namespace slidepipe
