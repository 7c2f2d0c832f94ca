#pragma once

#include <optional>
#include <span>
#include <vector>

#include "tcupgan/cube.hpp"

namespace tcupgan {

/// Tversky weights: alpha on false negatives, beta on false positives,
/// gamma as the focusing exponent.
struct TverskyParams {
    double alpha = 0.7;
    double beta = 0.3;
    double gamma = 0.7;

    void validate() const;
};

/// Soft confusion counts; with binary predictions these are pixel counts.
struct ConfusionCounts {
    double tp = 0.0;
    double fn = 0.0;
    double fp = 0.0;
    double tn = 0.0;
};

struct LossBreakdown {
    double ti = 0.0;
    double tl = 0.0;
    double ftl = 0.0;
    double adv = 0.0;
    double total = 0.0;
};

enum class Granularity { PerSlice, PerCube };

inline constexpr double kLogEpsilon = 1e-7;
inline constexpr double kDefaultLambdaAdv = 0.2;

/// Soft counts over one slice (or any pair of aligned buffers).
ConfusionCounts soft_confusion(std::span<const float> pred, std::span<const float> target);

/// Per-slice (D records) or per-cube (1 record) soft counts. Throws on shape
/// mismatch or a non-binary target.
std::vector<ConfusionCounts> confusion(const PredictionCube& pred, const MaskCube& target,
                                       Granularity granularity);

/// TI = tp / (tp + alpha fn + beta fp), TL = 1 - TI, FTL = TL^gamma.
/// tp = fn = fp = 0 counts as a perfect empty slice (TI = 1).
LossBreakdown focal_tversky_loss(const ConfusionCounts& counts, const TverskyParams& params);

/// FTL of one slice and its gradient with respect to each soft prediction.
double focal_tversky_gradient(std::span<const float> pred, std::span<const float> target,
                              const TverskyParams& params, std::span<double> grad);

/// Mean over patches of -log(real) - log(1 - fake), with scores clamped by kLogEpsilon.
double discriminator_bce(const PatchScoreGrid& real, const PatchScoreGrid& fake);
double discriminator_bce(std::span<const float> real, std::span<const float> fake);

/// d(discriminator_bce)/d(score) for each real and fake entry.
void discriminator_bce_gradient(std::span<const float> real, std::span<const float> fake,
                                std::span<float> grad_real, std::span<float> grad_fake);

/// mean(-log(fake)) and its gradient (optional).
double adversarial_term(std::span<const float> fake, std::span<float> grad = {});

/// total = mean per-slice FTL + lambda_adv * mean(-log(fake)). ti/tl/ftl are
/// slice averages (ti = 1 - tl).
LossBreakdown generator_objective(const PredictionCube& pred, const MaskCube& target,
                                  const PatchScoreGrid& fake_scores, const TverskyParams& params,
                                  double lambda_adv = kDefaultLambdaAdv);

struct HardCounts {
    long long tp = 0;
    long long fn = 0;
    long long fp = 0;
    long long tn = 0;

    HardCounts& operator+=(const HardCounts& o) {
        tp += o.tp;
        fn += o.fn;
        fp += o.fp;
        tn += o.tn;
        return *this;
    }
};

HardCounts hard_confusion(std::span<const float> pred, std::span<const float> target,
                          double threshold = 0.5);

struct SegmentationMetrics {
    double accuracy = 0.0;
    std::optional<double> precision;  // empty when tp + fp == 0
    std::optional<double> recall;     // empty when tp + fn == 0
};

SegmentationMetrics metrics_from_counts(const HardCounts& counts);
SegmentationMetrics segmentation_metrics(const PredictionCube& pred, const MaskCube& target,
                                         double threshold = 0.5);

/// Tversky loss of one slice from hard counts at `threshold`.
double hard_tversky_loss(std::span<const float> pred, std::span<const float> target,
                         const TverskyParams& params, double threshold = 0.5);

}  // namespace tcupgan
