#pragma once

// Discriminator-guided triage: per-slice patch-score statistics, a linear
// selection cut in (mean, variance) space, and the human review queue.

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tcupgan/dataset.hpp"
#include "tcupgan/losses.hpp"
#include "tcupgan/model.hpp"

namespace tcupgan {

struct SliceStats {
    std::string cube_id;
    int slice_index = 0;
    double mean = 0.0;
    /// Population variance of the slice's patch scores.
    double variance = 0.0;
    /// Tversky loss against ground truth; only present in calibration runs.
    std::optional<double> tl;

    nlohmann::json to_json() const;
    static SliceStats from_json(const nlohmann::json& j);
};

/// Linear boundary d = w_mean * mean + w_var * variance + bias; d < 0 sends a
/// slice to human review.
struct SelectionCut {
    double w_mean = 1.0;
    double w_var = 0.0;
    double bias = -0.5;
    double tl0 = 0.3;

    double decision(const SliceStats& s) const { return w_mean * s.mean + w_var * s.variance + bias; }
    void validate() const;
    nlohmann::json to_json() const;
    static SelectionCut from_json(const nlohmann::json& j);
};

/// One record per depth slice of `grid`.
std::vector<SliceStats> slice_stats(const PatchScoreGrid& grid, const std::string& cube_id);

/// Generator prediction plus discriminator scores of (image, prediction).
struct ScoredCube {
    PredictionCube prediction;
    PatchScoreGrid grid;
};

ScoredCube score_cube(const GeneratorParams& gen, const DiscriminatorParams& disc,
                      const ImageCube& image);

std::vector<SliceStats> score_dataset(const GeneratorParams& gen, const DiscriminatorParams& disc,
                                      std::span<const CubePair> data, bool with_ground_truth,
                                      const TverskyParams& tversky = {});
std::vector<SliceStats> score_dataset(const GeneratorParams& gen, const DiscriminatorParams& disc,
                                      const DatasetManifest& data, bool with_ground_truth,
                                      const TverskyParams& tversky = {});

struct CutFitOptions {
    /// Boundaries whose recall of tl >= tl0 slices falls below this are skipped.
    double min_recall = 0.9;
    /// Minimum number of labelled records.
    std::size_t min_records = 100;
};

struct CutFitReport {
    SelectionCut cut;
    double balanced_accuracy = 0.0;
    double recall = 0.0;
    double specificity = 0.0;
};

/// Coarse-to-fine search over boundary angle (with w_mean > 0) and an exact
/// sweep over offsets, maximizing balanced accuracy of "tl >= tl0 goes to
/// humans". The result depends only on the multiset of records.
CutFitReport fit_selection_cut_report(std::span<const SliceStats> stats, double tl0 = 0.3,
                                      const CutFitOptions& options = {});
SelectionCut fit_selection_cut(std::span<const SliceStats> stats, double tl0 = 0.3,
                               const CutFitOptions& options = {});

struct SelectedSlice {
    SliceStats stats;
    double decision = 0.0;
};

struct SelectionSummary {
    std::size_t n_total = 0;
    std::size_t n_selected = 0;
    double reduction_fraction = 0.0;

    nlohmann::json to_json() const;
};

struct Selection {
    /// Ordered worst first: ascending decision, then (cube_id, slice_index).
    std::vector<SelectedSlice> selected;
    SelectionSummary summary;
};

Selection apply_cut(std::span<const SliceStats> stats, const SelectionCut& cut);

struct QueueRecord {
    std::string cube_id;
    int slice_index = 0;
    double mean = 0.0;
    double variance = 0.0;
    double decision_value = 0.0;
    std::string image;
    std::string machine_mask;
    std::string heatmap;

    nlohmann::json to_json() const;
    static QueueRecord from_json(const nlohmann::json& j);
};

/// Nearest-cell upsampling of one slice's grid to (height, width), 8-bit.
GrayImage heatmap_image(const PatchScoreGrid& grid, int slice, int height, int width);

/// Writes queue.jsonl, summary.json and assets/ (image, machine mask,
/// heatmap PNG per selected slice) into `out_dir`. Asset paths in the queue
/// are relative to `out_dir`. When `data` is empty only the queue and summary
/// are written and asset paths are left blank.
std::vector<QueueRecord> export_review_queue(const Selection& selection,
                                             std::span<const CubePair> data,
                                             const GeneratorParams* gen,
                                             const DiscriminatorParams* disc,
                                             const SelectionCut& cut,
                                             const std::filesystem::path& out_dir);

std::vector<QueueRecord> read_queue(const std::filesystem::path& queue_file);

void write_stats_jsonl(const std::filesystem::path& path, std::span<const SliceStats> stats);
std::vector<SliceStats> read_stats_jsonl(const std::filesystem::path& path);

/// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> x, std::span<const double> y);

}  // namespace tcupgan
