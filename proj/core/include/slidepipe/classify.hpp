#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "slidepipe/tiling.hpp"

namespace slidepipe {

// Contract any patch-classification model must satisfy: patch pixels to
// malignancy probability, deterministic for a fixed model state. A single
// instance is not assumed callable from several threads; parallel scoring
// shards patches across clones.
class PatchScorer {
public:
    virtual ~PatchScorer() = default;
    virtual double score(const ByteRaster& patch_rgb) const = 0;
    virtual std::unique_ptr<PatchScorer> clone() const = 0;
    virtual std::string model_id() const = 0;
};

struct PatchScore {
    std::size_t patch_index = 0; // position in the slide's grid order
    double p = 0.0;
};

struct Stage1Config {
    double tau = 0.1; // per-patch positive threshold
    double T = 0.1;   // pre-prediction ratio threshold

    void validate() const;
};

enum class PreLabel { positive, negative };

struct WsiDecision {
    PreLabel pre_label = PreLabel::negative;
    double score = 0.0;
    int n_positive_patches = 0;
    int n_negative_patches = 0;
};

struct ScorePartition {
    std::vector<PatchScore> positive; // p >= tau
    std::vector<PatchScore> negative; // p < tau
};

ScorePartition partition_scores(std::span<const PatchScore> scores, double tau);

PreLabel pre_predict(int n_pos, int n_neg, double T);

// Eq-style WSI decision: partition by tau, pre-predict by T, then average the
// selected side's scores. The averaged set is provably non-empty.
WsiDecision wsi_score(std::span<const PatchScore> scores, const Stage1Config& cfg);

// Per-patch arithmetic mean across models; all models must have scored the
// same ordered patch list.
std::vector<PatchScore> ensemble_average(
    const std::vector<std::vector<PatchScore>>& per_model_scores);

// Indices (grid order preserved) of patches whose ensembled score clears the
// Stage-2 cut.
std::vector<std::size_t> select_key_patches(std::span<const PatchScore> ensembled,
                                            double key_threshold);

// Deterministic parallel scoring: patches are sharded across per-worker
// clones of the scorer; the result vector is ordered by patch index
// regardless of thread count.
std::vector<PatchScore> score_patches(const PatchScorer& scorer,
                                      std::span<const PatchRecord> patches,
                                      int threads = 1);

// ---- CSV exports ----

struct ScoreExportRow {
    std::string slide_id;
    int origin_x = 0;
    int origin_y = 0;
    std::string model_id; // architecture id or "ensemble"
    double score = 0.0;
};

void write_score_csv(const std::filesystem::path& file,
                     std::span<const ScoreExportRow> rows);

struct DecisionRow {
    std::string slide_id;
    PreLabel pre_label = PreLabel::negative;
    double score = 0.0;
};

void write_decision_csv(const std::filesystem::path& file,
                        std::span<const DecisionRow> rows);
std::vector<DecisionRow> read_decision_csv(const std::filesystem::path& file);

const char* to_string(PreLabel label);

} // namespace slidepipe
