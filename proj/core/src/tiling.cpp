#include "slidepipe/tiling.hpp"

#include <cmath>

#include "slidepipe/csv.hpp"

namespace slidepipe {

void TileSpec::validate() const {
    if (patch_size < 1) throw InvalidConfig("patch_size must be >= 1");
    if (stride < 1 || stride > patch_size)
        throw InvalidConfig("stride must satisfy 1 <= stride <= patch_size");
}

double pixel_std(const ByteRaster& pixels) {
    if (pixels.empty()) throw EmptyInput("pixel_std on empty raster");
    // joint population statistics over all channels
    double sum = 0.0, sum_sq = 0.0;
    for (const auto v : pixels.data) {
        const double d = static_cast<double>(v);
        sum += d;
        sum_sq += d * d;
    }
    const double n = static_cast<double>(pixels.data.size());
    const double mean = sum / n;
    const double var = std::max(0.0, sum_sq / n - mean * mean);
    return std::sqrt(var);
}

bool roi_keep(const PatchRecord& patch, double roi_std_threshold) {
    return pixel_std(patch.pixels) >= roi_std_threshold;
}

namespace {

// Window origins along one axis: multiples of stride while they fit, plus a
// clamped final window when the boundary is not hit exactly.
std::vector<int> axis_origins(int dim, int patch, int stride) {
    std::vector<int> origins;
    for (int o = 0; o + patch <= dim; o += stride) origins.push_back(o);
    if ((dim - patch) % stride != 0) origins.push_back(dim - patch);
    return origins;
}

} // namespace

std::vector<std::pair<int, int>> grid_origins(int height, int width, const TileSpec& spec) {
    spec.validate();
    if (width < spec.patch_size || height < spec.patch_size)
        throw SlideTooSmall("slide " + std::to_string(width) + "x" + std::to_string(height) +
                            " is smaller than patch_size " + std::to_string(spec.patch_size));
    const auto xs = axis_origins(width, spec.patch_size, spec.stride);
    const auto ys = axis_origins(height, spec.patch_size, spec.stride);
    std::vector<std::pair<int, int>> out;
    out.reserve(xs.size() * ys.size());
    for (const int y : ys)
        for (const int x : xs) out.emplace_back(x, y);
    return out;
}

std::vector<PatchRecord> extract_grid(const SlideImage& slide, const TileSpec& spec) {
    slide.validate();
    const auto origins = grid_origins(slide.height(), slide.width(), spec);
    const int p = spec.patch_size;

    std::vector<PatchRecord> patches;
    patches.reserve(origins.size());
    for (const auto& [ox, oy] : origins) {
        PatchRecord rec;
        rec.slide_id = slide.id;
        rec.origin_x = ox;
        rec.origin_y = oy;
        rec.pixels = ByteRaster(3, p, p);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < p; ++y)
                for (int x = 0; x < p; ++x)
                    rec.pixels.at(c, y, x) = slide.pixels.at(c, oy + y, ox + x);
        if (slide.ground_truth) {
            ByteRaster crop(1, p, p);
            for (int y = 0; y < p; ++y)
                for (int x = 0; x < p; ++x)
                    crop.at(0, y, x) = slide.ground_truth->at(0, oy + y, ox + x);
            rec.mask_crop = std::move(crop);
        }
        patches.push_back(std::move(rec));
    }
    return patches;
}

double malignant_ratio(const ByteRaster& mask01) {
    if (mask01.empty()) throw EmptyInput("malignant_ratio on empty mask");
    std::int64_t ones = 0;
    for (const auto v : mask01.data) {
        if (v > 1) throw DataError("malignant_ratio expects {0,1} values");
        ones += v;
    }
    return static_cast<double>(ones) / static_cast<double>(mask01.data.size());
}

StitchedMap stitch(const std::vector<PatchProbability>& patches, int height, int width) {
    StitchedMap map;
    map.probabilities = FloatRaster(1, height, width, 0.0);
    map.coverage_counts = Raster<int>(1, height, width, 0);

    FloatRaster sums(1, height, width, 0.0);
    for (const auto& p : patches) {
        const int ph = p.probabilities.height;
        const int pw = p.probabilities.width;
        if (p.origin_x < 0 || p.origin_y < 0 || p.origin_x + pw > width || p.origin_y + ph > height)
            throw PatchOutOfBounds("patch at (" + std::to_string(p.origin_x) + "," +
                                   std::to_string(p.origin_y) + ") size " + std::to_string(pw) +
                                   "x" + std::to_string(ph) + " exceeds slide " +
                                   std::to_string(width) + "x" + std::to_string(height));
        for (int y = 0; y < ph; ++y)
            for (int x = 0; x < pw; ++x) {
                sums.at(0, p.origin_y + y, p.origin_x + x) += p.probabilities.at(0, y, x);
                map.coverage_counts.at(0, p.origin_y + y, p.origin_x + x) += 1;
            }
    }
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            const int n = map.coverage_counts.at(0, y, x);
            if (n > 0) map.probabilities.at(0, y, x) = sums.at(0, y, x) / n;
        }
    return map;
}

void write_patch_manifest(const std::filesystem::path& file,
                          const std::vector<PatchManifestRow>& rows) {
    CsvTable t;
    t.header = {"slide_id", "origin_x", "origin_y", "kept_by_roi"};
    t.rows.reserve(rows.size());
    for (const auto& r : rows)
        t.rows.push_back({r.slide_id, format_int(r.origin_x), format_int(r.origin_y),
                          r.kept_by_roi ? "1" : "0"});
    t.write(file);
}

} // namespace slidepipe
