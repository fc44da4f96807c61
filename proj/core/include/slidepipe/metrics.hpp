#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "slidepipe/image.hpp"

namespace slidepipe {

struct ConfusionCounts {
    std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
    std::int64_t total() const { return tp + fp + tn + fn; }
};

struct ScoredLabel {
    double score = 0.0;
    int label = 0; // 1 = positive
};

// P(score of a random positive > score of a random negative), ties counting
// one half: the Mann–Whitney estimator, computed by exhaustive pair counting.
double auc(std::span<const ScoredLabel> data);

ConfusionCounts confusion(std::span<const int> preds, std::span<const int> labels);

double accuracy(const ConfusionCounts& c);
double recall(const ConfusionCounts& c);
double precision(const ConfusionCounts& c);

// 2|A∩B| / (|A|+|B|) over binary rasters; two empty masks agree perfectly (1).
double dice(const ByteRaster& mask_a, const ByteRaster& mask_b);

struct RocPoint {
    double threshold = 0.0;
    double fpr = 0.0;
    double tpr = 0.0;
};

// ROC curve points at every distinct score threshold (descending), for
// plotting exports.
std::vector<RocPoint> roc_points(std::span<const ScoredLabel> data);

} // namespace slidepipe
