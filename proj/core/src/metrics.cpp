#include "slidepipe/metrics.hpp"

#include <algorithm>

namespace slidepipe {

double auc(std::span<const ScoredLabel> data) {
    std::int64_t n_pos = 0, n_neg = 0;
    for (const auto& d : data) (d.label == 1 ? n_pos : n_neg) += 1;
    if (n_pos == 0 || n_neg == 0)
        throw OneClassOnly("auc needs at least one positive and one negative");
    // the brute-force double loop is the reference implementation at this scale
    double favorable = 0.0;
    for (const auto& p : data) {
        if (p.label != 1) continue;
        for (const auto& n : data) {
            if (n.label != 0) continue;
            if (p.score > n.score)
                favorable += 1.0;
            else if (p.score == n.score)
                favorable += 0.5;
        }
    }
    return favorable / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

ConfusionCounts confusion(std::span<const int> preds, std::span<const int> labels) {
    if (preds.size() != labels.size())
        throw LengthMismatch("confusion: " + std::to_string(preds.size()) + " predictions vs " +
                             std::to_string(labels.size()) + " labels");
    ConfusionCounts c;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if ((preds[i] != 0 && preds[i] != 1) || (labels[i] != 0 && labels[i] != 1))
            throw DataError("confusion expects {0,1} entries");
        if (labels[i] == 1)
            (preds[i] == 1 ? c.tp : c.fn) += 1;
        else
            (preds[i] == 1 ? c.fp : c.tn) += 1;
    }
    return c;
}

double accuracy(const ConfusionCounts& c) {
    const auto denom = c.total();
    if (denom == 0) throw DivisionUndefined("accuracy of empty confusion counts");
    return static_cast<double>(c.tp + c.tn) / static_cast<double>(denom);
}

double recall(const ConfusionCounts& c) {
    const auto denom = c.tp + c.fn;
    if (denom == 0) throw DivisionUndefined("recall with no real positives");
    return static_cast<double>(c.tp) / static_cast<double>(denom);
}

double precision(const ConfusionCounts& c) {
    const auto denom = c.tp + c.fp;
    if (denom == 0) throw DivisionUndefined("precision with no predicted positives");
    return static_cast<double>(c.tp) / static_cast<double>(denom);
}

double dice(const ByteRaster& mask_a, const ByteRaster& mask_b) {
    if (!mask_a.same_shape(mask_b))
        throw ShapeMismatch("dice on rasters of different shapes");
    std::int64_t a = 0, b = 0, inter = 0;
    for (std::size_t i = 0; i < mask_a.data.size(); ++i) {
        const auto va = mask_a.data[i], vb = mask_b.data[i];
        if (va > 1 || vb > 1) throw DataError("dice expects binary masks");
        a += va;
        b += vb;
        inter += (va & vb);
    }
    if (a + b == 0) return 1.0; // agreement on "nothing malignant"
    return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

std::vector<RocPoint> roc_points(std::span<const ScoredLabel> data) {
    std::int64_t n_pos = 0, n_neg = 0;
    for (const auto& d : data) (d.label == 1 ? n_pos : n_neg) += 1;
    if (n_pos == 0 || n_neg == 0)
        throw OneClassOnly("roc_points needs both classes");
    std::vector<ScoredLabel> sorted(data.begin(), data.end());
    std::sort(sorted.begin(), sorted.end(),
              [](const ScoredLabel& a, const ScoredLabel& b) { return a.score > b.score; });
    std::vector<RocPoint> pts;
    pts.push_back({sorted.front().score + 1.0, 0.0, 0.0});
    std::int64_t tp = 0, fp = 0;
    std::size_t i = 0;
    while (i < sorted.size()) {
        const double s = sorted[i].score;
        while (i < sorted.size() && sorted[i].score == s) {
            (sorted[i].label == 1 ? tp : fp) += 1;
            ++i;
        }
        pts.push_back({s, static_cast<double>(fp) / static_cast<double>(n_neg),
                       static_cast<double>(tp) / static_cast<double>(n_pos)});
    }
    return pts;
}

} // namespace slidepipe
