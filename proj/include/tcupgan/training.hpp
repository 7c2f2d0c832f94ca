#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "tcupgan/checkpoint.hpp"
#include "tcupgan/dataset.hpp"
#include "tcupgan/losses.hpp"
#include "tcupgan/model.hpp"

namespace tcupgan {

/// Raised when a loss term turns non-finite.
class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct AdamConfig {
    double lr = 2e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    explicit Adam(AdamConfig config = {}) : config_(config) {}

    /// One update; parameters without an entry in `grads` see a zero gradient.
    void step(ParameterSet& params, const ParameterSet& grads);

    long long steps() const { return steps_; }
    const AdamConfig& config() const { return config_; }

    void save(Checkpoint& ckpt, const std::string& prefix) const;
    void load(const Checkpoint& ckpt, const std::string& prefix);

private:
    AdamConfig config_;
    ParameterSet m_;
    ParameterSet v_;
    long long steps_ = 0;
};

struct TrainConfig {
    int epochs = 50;
    int batch_size = 1;
    double gen_lr = 2e-4;
    double disc_lr = 2e-4;
    double adam_beta1 = 0.5;
    double adam_beta2 = 0.999;
    double lambda_adv = kDefaultLambdaAdv;
    TverskyParams tversky;
    std::uint64_t seed = 0;
    /// Write a checkpoint every N epochs (0: only at the end).
    int checkpoint_every = 0;
    double validation_fraction = 0.1;
    std::string manifest;
    GeneratorConfig generator;
    DiscriminatorConfig discriminator;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochRecord {
    int epoch = 0;
    double gen_ftl = 0.0;
    double gen_adv = 0.0;
    double disc_bce = 0.0;
    /// Hard-count Tversky loss of the training batches seen this epoch.
    double train_tl = 0.0;
    std::optional<double> val_tl;
    std::optional<SegmentationMetrics> val_metrics;

    nlohmann::json to_json() const;
    static EpochRecord from_json(const nlohmann::json& j);
};

struct TrainingHistory {
    std::vector<EpochRecord> records;

    std::string to_jsonl() const;
    void write_jsonl(const std::filesystem::path& path) const;
};

struct SliceLoss {
    std::string cube_id;
    int slice_index = 0;
    double tl = 0.0;
};

struct EvaluationReport {
    SegmentationMetrics metrics;
    HardCounts counts;
    std::vector<SliceLoss> slices;

    double mean_tl() const;
    nlohmann::json to_json() const;
};

EvaluationReport evaluate(const GeneratorParams& gen, std::span<const CubePair> data,
                          double threshold = 0.5, const TverskyParams& tversky = {});
/// Rejects a checkpoint whose architecture differs from `expected` when given.
EvaluationReport evaluate(const GeneratorParams& gen, const DatasetManifest& data,
                          double threshold = 0.5, const TverskyParams& tversky = {},
                          const std::optional<GeneratorConfig>& expected = std::nullopt);

/// Owns both networks and their optimizers for one training run.
class Trainer {
public:
    Trainer(TrainConfig config, std::vector<CubePair> train, std::vector<CubePair> validation = {});

    /// Restores parameters, optimizer moments, epoch counter and history.
    static Trainer resume(const Checkpoint& ckpt, TrainConfig config, std::vector<CubePair> train,
                          std::vector<CubePair> validation = {});

    const EpochRecord& run_epoch();

    int epoch() const { return epoch_; }
    const GeneratorParams& generator() const { return gen_; }
    const DiscriminatorParams& discriminator() const { return disc_; }
    const TrainingHistory& history() const { return history_; }
    const TrainConfig& config() const { return config_; }

    Checkpoint checkpoint() const;

private:
    struct StepLosses {
        double ftl = 0.0;
        double adv = 0.0;
        double bce = 0.0;
        double tl = 0.0;
        int slices = 0;
    };

    StepLosses train_batch(std::span<const std::size_t> batch);

    TrainConfig config_;
    std::vector<CubePair> train_;
    std::vector<CubePair> validation_;
    GeneratorParams gen_;
    DiscriminatorParams disc_;
    Adam gen_opt_;
    Adam disc_opt_;
    int epoch_ = 0;
    TrainingHistory history_;
};

/// Splits cube indices into (train, validation) by source cube so overlapping
/// crops never straddle the split.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_by_source(
    const DatasetManifest& manifest, double validation_fraction, std::uint64_t seed);

struct TrainResult {
    GeneratorParams generator;
    DiscriminatorParams discriminator;
    TrainingHistory history;
};

using EpochCallback = std::function<void(const Trainer&, const EpochRecord&)>;

/// Full run over a manifest. Writes history.jsonl and checkpoints into
/// `out_dir` when it is non-empty. With `resume_from`, continues from that
/// checkpoint's epoch up to `config.epochs`.
TrainResult train(const TrainConfig& config, const DatasetManifest& data,
                  const std::filesystem::path& out_dir = {}, const EpochCallback& on_epoch = {},
                  const Checkpoint* resume_from = nullptr);

}  // namespace tcupgan
