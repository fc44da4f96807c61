#include "slidepipe/classify.hpp"

#include <algorithm>
#include <thread>

#include "slidepipe/csv.hpp"

namespace slidepipe {

void Stage1Config::validate() const {
    if (!(tau > 0.0 && tau < 1.0)) throw InvalidConfig("tau must lie in (0,1)");
    if (!(T > 0.0 && T <= 1.0)) throw InvalidConfig("T must lie in (0,1]");
}

ScorePartition partition_scores(std::span<const PatchScore> scores, double tau) {
    if (scores.empty()) throw EmptyInput("partition_scores on empty score list");
    ScorePartition part;
    for (const auto& s : scores) {
        if (s.p < 0.0 || s.p > 1.0)
            throw DataError("patch score outside [0,1]");
        (s.p >= tau ? part.positive : part.negative).push_back(s);
    }
    return part;
}

PreLabel pre_predict(int n_pos, int n_neg, double T) {
    if (n_pos < 0 || n_neg < 0 || n_pos + n_neg < 1)
        throw NoPatches("pre_predict needs at least one patch");
    const double ratio = static_cast<double>(n_pos) / static_cast<double>(n_pos + n_neg);
    return ratio >= T ? PreLabel::positive : PreLabel::negative;
}

WsiDecision wsi_score(std::span<const PatchScore> scores, const Stage1Config& cfg) {
    cfg.validate();
    if (scores.empty()) throw NoPatches("wsi_score on empty score list");
    const auto part = partition_scores(scores, cfg.tau);
    WsiDecision d;
    d.n_positive_patches = static_cast<int>(part.positive.size());
    d.n_negative_patches = static_cast<int>(part.negative.size());
    d.pre_label = pre_predict(d.n_positive_patches, d.n_negative_patches, cfg.T);

    // When pre-positive with T > 0 the ratio forces |S_p| >= 1; a pre-negative
    // verdict with S_n empty would need ratio 1 >= T, i.e. pre-positive.
    const auto& side = d.pre_label == PreLabel::positive ? part.positive : part.negative;
    double sum = 0.0;
    for (const auto& s : side) sum += s.p;
    d.score = sum / static_cast<double>(side.size());
    return d;
}

std::vector<PatchScore> ensemble_average(
    const std::vector<std::vector<PatchScore>>& per_model_scores) {
    if (per_model_scores.empty()) throw EmptyInput("ensemble_average needs >= 1 model");
    const auto& first = per_model_scores.front();
    for (const auto& m : per_model_scores) {
        if (m.size() != first.size())
            throw RaggedInput("models scored different patch counts");
        for (std::size_t i = 0; i < m.size(); ++i)
            if (m[i].patch_index != first[i].patch_index)
                throw RaggedInput("models scored differently ordered patch lists");
    }
    std::vector<PatchScore> out = first;
    for (std::size_t i = 0; i < out.size(); ++i) {
        double sum = 0.0;
        for (const auto& m : per_model_scores) sum += m[i].p;
        out[i].p = sum / static_cast<double>(per_model_scores.size());
    }
    return out;
}

std::vector<std::size_t> select_key_patches(std::span<const PatchScore> ensembled,
                                            double key_threshold) {
    std::vector<std::size_t> keys;
    for (const auto& s : ensembled)
        if (s.p >= key_threshold) keys.push_back(s.patch_index);
    return keys;
}

std::vector<PatchScore> score_patches(const PatchScorer& scorer,
                                      std::span<const PatchRecord> patches,
                                      int threads) {
    std::vector<PatchScore> out(patches.size());
    if (patches.empty()) return out;
    threads = std::clamp<int>(threads, 1, static_cast<int>(patches.size()));
    if (threads == 1) {
        for (std::size_t i = 0; i < patches.size(); ++i)
            out[i] = PatchScore{i, scorer.score(patches[i].pixels)};
        return out;
    }
    // one scorer replica per worker; contiguous shards keep results ordered
    std::vector<std::unique_ptr<PatchScorer>> replicas;
    replicas.reserve(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t) replicas.push_back(scorer.clone());
    std::vector<std::thread> workers;
    const std::size_t per = (patches.size() + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
        const std::size_t lo = per * static_cast<std::size_t>(t);
        const std::size_t hi = std::min(patches.size(), lo + per);
        if (lo >= hi) break;
        workers.emplace_back([&, lo, hi, t] {
            for (std::size_t i = lo; i < hi; ++i)
                out[i] = PatchScore{i, replicas[static_cast<std::size_t>(t)]->score(patches[i].pixels)};
        });
    }
    for (auto& w : workers) w.join();
    return out;
}

const char* to_string(PreLabel label) {
    return label == PreLabel::positive ? "positive" : "negative";
}

void write_score_csv(const std::filesystem::path& file,
                     std::span<const ScoreExportRow> rows) {
    CsvTable t;
    t.header = {"slide_id", "origin_x", "origin_y", "model_id", "score"};
    for (const auto& r : rows)
        t.rows.push_back({r.slide_id, format_int(r.origin_x), format_int(r.origin_y),
                          r.model_id, format_double(r.score)});
    t.write(file);
}

void write_decision_csv(const std::filesystem::path& file,
                        std::span<const DecisionRow> rows) {
    CsvTable t;
    t.header = {"slide_id", "pre_label", "score"};
    for (const auto& r : rows)
        t.rows.push_back({r.slide_id, to_string(r.pre_label), format_double(r.score)});
    t.write(file);
}

std::vector<DecisionRow> read_decision_csv(const std::filesystem::path& file) {
    const auto t = CsvTable::read(file);
    const int id = t.column("slide_id");
    const int lbl = t.column("pre_label");
    const int sc = t.column("score");
    if (id < 0 || lbl < 0 || sc < 0)
        throw IoError("decision CSV missing required columns: " + file.string());
    std::vector<DecisionRow> rows;
    for (const auto& r : t.rows) {
        DecisionRow d;
        d.slide_id = r[static_cast<std::size_t>(id)];
        d.pre_label = r[static_cast<std::size_t>(lbl)] == "positive" ? PreLabel::positive
                                                                     : PreLabel::negative;
        d.score = std::stod(r[static_cast<std::size_t>(sc)]);
        rows.push_back(std::move(d));
    }
    return rows;
}

} // namespace slidepipe
