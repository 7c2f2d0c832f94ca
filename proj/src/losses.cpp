#include "tcupgan/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace tcupgan {

namespace {

double clamp_prob(double p) { return std::clamp(p, kLogEpsilon, 1.0 - kLogEpsilon); }

void check_binary(std::span<const float> target) {
    for (float y : target) {
        if (y != 0.0f && y != 1.0f) throw ValidationError("target mask must be binary");
    }
}

}  // namespace

void TverskyParams::validate() const {
    if (!(alpha > 0.0) || !(beta > 0.0) || !(gamma > 0.0)) {
        throw ValidationError("Tversky alpha, beta and gamma must all be positive");
    }
}

ConfusionCounts soft_confusion(std::span<const float> pred, std::span<const float> target) {
    if (pred.size() != target.size()) {
        throw ShapeError("confusion: prediction has " + std::to_string(pred.size()) +
                         " pixels, target " + std::to_string(target.size()));
    }
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double p = pred[i];
        const double y = target[i];
        c.tp += p * y;
        c.fn += (1.0 - p) * y;
        c.fp += p * (1.0 - y);
        c.tn += (1.0 - p) * (1.0 - y);
    }
    return c;
}

std::vector<ConfusionCounts> confusion(const PredictionCube& pred, const MaskCube& target,
                                       Granularity granularity) {
    const Volume& p = pred.volume;
    const Volume& t = target.volume;
    if (!p.same_shape(t)) {
        throw ShapeError("confusion: prediction " + p.shape_str() + " vs target " + t.shape_str());
    }
    check_binary(t.voxels);
    if (granularity == Granularity::PerCube) return {soft_confusion(p.voxels, t.voxels)};
    std::vector<ConfusionCounts> out;
    out.reserve(p.depth);
    for (int d = 0; d < p.depth; ++d) out.push_back(soft_confusion(p.slice(d), t.slice(d)));
    return out;
}

LossBreakdown focal_tversky_loss(const ConfusionCounts& c, const TverskyParams& params) {
    params.validate();
    if (c.tp < 0 || c.fn < 0 || c.fp < 0 || c.tn < 0) {
        throw ValidationError("confusion counts must be non-negative");
    }
    LossBreakdown out;
    const double denom = c.tp + params.alpha * c.fn + params.beta * c.fp;
    out.ti = denom > 0.0 ? c.tp / denom : 1.0;
    out.tl = 1.0 - out.ti;
    out.ftl = std::pow(out.tl, params.gamma);
    out.total = out.ftl;
    return out;
}

double focal_tversky_gradient(std::span<const float> pred, std::span<const float> target,
                              const TverskyParams& params, std::span<double> grad) {
    if (grad.size() != pred.size()) throw ShapeError("gradient buffer size mismatch");
    const ConfusionCounts c = soft_confusion(pred, target);
    const LossBreakdown loss = focal_tversky_loss(c, params);
    const double denom = c.tp + params.alpha * c.fn + params.beta * c.fp;
    std::fill(grad.begin(), grad.end(), 0.0);
    // At TL = 0 the focal factor TL^(gamma-1) is singular for gamma < 1; the
    // minimum is already reached there, so no gradient is emitted.
    if (denom <= 0.0 || loss.tl <= 0.0) return loss.ftl;
    const double dftl_dti = -params.gamma * std::pow(loss.tl, params.gamma - 1.0);
    const double inv = 1.0 / (denom * denom);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double y = target[i];
        // d tp = y, d fn = -y, d fp = 1 - y
        const double ddenom = y - params.alpha * y + params.beta * (1.0 - y);
        const double dti = (y * denom - c.tp * ddenom) * inv;
        grad[i] = dftl_dti * dti;
    }
    return loss.ftl;
}

double discriminator_bce(std::span<const float> real, std::span<const float> fake) {
    if (real.size() != fake.size() || real.empty()) {
        throw ShapeError("discriminator_bce: real and fake grids must be non-empty and match");
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < real.size(); ++i) {
        sum += -std::log(clamp_prob(real[i])) - std::log(1.0 - clamp_prob(fake[i]));
    }
    return sum / static_cast<double>(real.size());
}

double discriminator_bce(const PatchScoreGrid& real, const PatchScoreGrid& fake) {
    if (real.depth != fake.depth || real.rows != fake.rows || real.cols != fake.cols) {
        throw ShapeError("discriminator_bce: grid shapes differ");
    }
    return discriminator_bce(real.scores, fake.scores);
}

void discriminator_bce_gradient(std::span<const float> real, std::span<const float> fake,
                                std::span<float> grad_real, std::span<float> grad_fake) {
    const double m = static_cast<double>(real.size());
    for (std::size_t i = 0; i < real.size(); ++i) {
        const double r = real[i];
        const double f = fake[i];
        const bool r_inside = r > kLogEpsilon && r < 1.0 - kLogEpsilon;
        const bool f_inside = f > kLogEpsilon && f < 1.0 - kLogEpsilon;
        grad_real[i] = r_inside ? static_cast<float>(-1.0 / (r * m)) : 0.0f;
        grad_fake[i] = f_inside ? static_cast<float>(1.0 / ((1.0 - f) * m)) : 0.0f;
    }
}

double adversarial_term(std::span<const float> fake, std::span<float> grad) {
    if (fake.empty()) throw ShapeError("adversarial_term: empty score grid");
    const double m = static_cast<double>(fake.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < fake.size(); ++i) {
        const double f = fake[i];
        sum += -std::log(clamp_prob(f));
        if (!grad.empty()) {
            const bool inside = f > kLogEpsilon && f < 1.0 - kLogEpsilon;
            grad[i] = inside ? static_cast<float>(-1.0 / (f * m)) : 0.0f;
        }
    }
    return sum / m;
}

LossBreakdown generator_objective(const PredictionCube& pred, const MaskCube& target,
                                  const PatchScoreGrid& fake_scores, const TverskyParams& params,
                                  double lambda_adv) {
    if (!(lambda_adv >= 0.0)) throw ValidationError("lambda_adv must be non-negative");
    if (fake_scores.depth != pred.volume.depth) {
        throw ShapeError("generator_objective: score grid depth does not match prediction depth");
    }
    const auto per_slice = confusion(pred, target, Granularity::PerSlice);
    LossBreakdown out;
    for (const auto& c : per_slice) {
        const LossBreakdown s = focal_tversky_loss(c, params);
        out.tl += s.tl;
        out.ftl += s.ftl;
    }
    out.tl /= static_cast<double>(per_slice.size());
    out.ftl /= static_cast<double>(per_slice.size());
    out.ti = 1.0 - out.tl;
    out.adv = adversarial_term(fake_scores.scores);
    out.total = lambda_adv > 0.0 ? out.ftl + lambda_adv * out.adv : out.ftl;
    return out;
}

HardCounts hard_confusion(std::span<const float> pred, std::span<const float> target,
                          double threshold) {
    if (pred.size() != target.size()) throw ShapeError("hard_confusion: size mismatch");
    HardCounts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] >= threshold;
        const bool y = target[i] >= 0.5f;
        if (p && y) ++c.tp;
        else if (!p && y) ++c.fn;
        else if (p && !y) ++c.fp;
        else ++c.tn;
    }
    return c;
}

SegmentationMetrics metrics_from_counts(const HardCounts& c) {
    SegmentationMetrics m;
    const long long n = c.tp + c.fn + c.fp + c.tn;
    m.accuracy = n > 0 ? static_cast<double>(c.tp + c.tn) / static_cast<double>(n) : 1.0;
    if (c.tp + c.fp > 0) m.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
    if (c.tp + c.fn > 0) m.recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    return m;
}

SegmentationMetrics segmentation_metrics(const PredictionCube& pred, const MaskCube& target,
                                         double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0)) {
        throw ValidationError("metric threshold must lie in (0, 1)");
    }
    if (!pred.volume.same_shape(target.volume)) {
        throw ShapeError("segmentation_metrics: prediction " + pred.volume.shape_str() +
                         " vs target " + target.volume.shape_str());
    }
    return metrics_from_counts(hard_confusion(pred.volume.voxels, target.volume.voxels, threshold));
}

double hard_tversky_loss(std::span<const float> pred, std::span<const float> target,
                         const TverskyParams& params, double threshold) {
    const HardCounts h = hard_confusion(pred, target, threshold);
    const ConfusionCounts c{static_cast<double>(h.tp), static_cast<double>(h.fn),
                            static_cast<double>(h.fp), static_cast<double>(h.tn)};
    return focal_tversky_loss(c, params).tl;
}

}  // namespace tcupgan
