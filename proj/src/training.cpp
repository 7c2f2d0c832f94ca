#include "tcupgan/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace tcupgan {

namespace fs = std::filesystem;

namespace {

void require_finite(double v, const char* term) {
    if (!std::isfinite(v)) {
        throw TrainingError(std::string("non-finite ") + term + " (" + std::to_string(v) + ")");
    }
}

ParameterSet collect_grads(const ParamVars& vars) {
    ParameterSet grads;
    for (const auto& [name, var] : vars) {
        if (!var->grad.empty()) grads.emplace(name, var->grad);
    }
    return grads;
}

nlohmann::json optional_json(const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::optional<double> optional_from(const nlohmann::json& j, const char* key) {
    if (!j.contains(key) || j[key].is_null()) return std::nullopt;
    return j[key].get<double>();
}

nlohmann::json metrics_json(const SegmentationMetrics& m) {
    return {{"accuracy", m.accuracy},
            {"precision", optional_json(m.precision)},
            {"recall", optional_json(m.recall)}};
}

std::mt19937_64 epoch_rng(std::uint64_t seed, int epoch) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(epoch), 0x5eedu};
    return std::mt19937_64(seq);
}

}  // namespace

// ---- Adam ----------------------------------------------------------------------

void Adam::step(ParameterSet& params, const ParameterSet& grads) {
    ++steps_;
    if (config_.lr == 0.0) return;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
    for (auto& [name, p] : params) {
        auto git = grads.find(name);
        auto [mit, m_new] = m_.try_emplace(name, p.shape());
        auto [vit, v_new] = v_.try_emplace(name, p.shape());
        float* m = mit->second.data();
        float* v = vit->second.data();
        float* w = p.data();
        const float* g = git != grads.end() ? git->second.data() : nullptr;
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = g ? g[i] : 0.0;
            m[i] = static_cast<float>(config_.beta1 * m[i] + (1.0 - config_.beta1) * gi);
            v[i] = static_cast<float>(config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi);
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            w[i] -= static_cast<float>(config_.lr * mhat / (std::sqrt(vhat) + config_.eps));
        }
    }
}

void Adam::save(Checkpoint& ckpt, const std::string& prefix) const {
    ckpt.metadata["optimizers"][prefix] = {{"steps", steps_}};
    for (const auto& [name, t] : m_) ckpt.tensors[prefix + "/m/" + name] = t;
    for (const auto& [name, t] : v_) ckpt.tensors[prefix + "/v/" + name] = t;
}

void Adam::load(const Checkpoint& ckpt, const std::string& prefix) {
    m_.clear();
    v_.clear();
    steps_ = ckpt.metadata.at("optimizers").at(prefix).at("steps").get<long long>();
    const std::string mp = prefix + "/m/";
    const std::string vp = prefix + "/v/";
    for (const auto& [name, t] : ckpt.tensors) {
        if (name.starts_with(mp)) m_.emplace(name.substr(mp.size()), t);
        else if (name.starts_with(vp)) v_.emplace(name.substr(vp.size()), t);
    }
}

// ---- config / records ---------------------------------------------------------------

void TrainConfig::validate() const {
    if (epochs <= 0) throw ValidationError("epochs must be positive");
    if (batch_size <= 0) throw ValidationError("batch size must be positive");
    if (!(gen_lr >= 0.0) || !(disc_lr >= 0.0)) {
        throw ValidationError("learning rates must be non-negative");
    }
    if (!(lambda_adv >= 0.0)) throw ValidationError("lambda_adv must be non-negative");
    if (checkpoint_every < 0) throw ValidationError("checkpoint cadence must be non-negative");
    if (validation_fraction < 0.0 || validation_fraction >= 1.0) {
        throw ValidationError("validation fraction must lie in [0, 1)");
    }
    tversky.validate();
    generator.validate();
    discriminator.validate();
}

nlohmann::json TrainConfig::to_json() const {
    return {{"epochs", epochs},
            {"batch_size", batch_size},
            {"gen_lr", gen_lr},
            {"disc_lr", disc_lr},
            {"adam_beta1", adam_beta1},
            {"adam_beta2", adam_beta2},
            {"lambda_adv", lambda_adv},
            {"tversky", {{"alpha", tversky.alpha}, {"beta", tversky.beta}, {"gamma", tversky.gamma}}},
            {"seed", seed},
            {"checkpoint_every", checkpoint_every},
            {"validation_fraction", validation_fraction},
            {"manifest", manifest},
            {"generator", generator.to_json()},
            {"discriminator", discriminator.to_json()}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.gen_lr = j.value("gen_lr", c.gen_lr);
    c.disc_lr = j.value("disc_lr", c.disc_lr);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.lambda_adv = j.value("lambda_adv", c.lambda_adv);
    if (j.contains("tversky")) {
        const auto& t = j["tversky"];
        c.tversky = {t.value("alpha", 0.7), t.value("beta", 0.3), t.value("gamma", 0.7)};
    }
    c.seed = j.value("seed", c.seed);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
    c.manifest = j.value("manifest", c.manifest);
    if (j.contains("generator")) c.generator = GeneratorConfig::from_json(j["generator"]);
    if (j.contains("discriminator")) c.discriminator = DiscriminatorConfig::from_json(j["discriminator"]);
    c.validate();
    return c;
}

nlohmann::json EpochRecord::to_json() const {
    nlohmann::json j = {{"epoch", epoch},          {"gen_ftl", gen_ftl},
                        {"gen_adv", gen_adv},      {"disc_bce", disc_bce},
                        {"train_tl", train_tl},    {"val_tl", optional_json(val_tl)}};
    j["val_metrics"] = val_metrics ? metrics_json(*val_metrics) : nlohmann::json(nullptr);
    return j;
}

EpochRecord EpochRecord::from_json(const nlohmann::json& j) {
    EpochRecord r;
    r.epoch = j.at("epoch").get<int>();
    r.gen_ftl = j.at("gen_ftl").get<double>();
    r.gen_adv = j.at("gen_adv").get<double>();
    r.disc_bce = j.at("disc_bce").get<double>();
    r.train_tl = j.at("train_tl").get<double>();
    r.val_tl = optional_from(j, "val_tl");
    if (j.contains("val_metrics") && !j["val_metrics"].is_null()) {
        const auto& m = j["val_metrics"];
        r.val_metrics = SegmentationMetrics{m.at("accuracy").get<double>(),
                                            optional_from(m, "precision"),
                                            optional_from(m, "recall")};
    }
    return r;
}

std::string TrainingHistory::to_jsonl() const {
    std::ostringstream os;
    for (const auto& r : records) os << r.to_json().dump() << "\n";
    return os.str();
}

void TrainingHistory::write_jsonl(const fs::path& path) const {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write history " + path.string());
    out << to_jsonl();
}

// ---- evaluation ------------------------------------------------------------------

double EvaluationReport::mean_tl() const {
    if (slices.empty()) return 0.0;
    double sum = 0.0;
    for (const auto& s : slices) sum += s.tl;
    return sum / static_cast<double>(slices.size());
}

nlohmann::json EvaluationReport::to_json() const {
    nlohmann::json table = nlohmann::json::array();
    for (const auto& s : slices) {
        table.push_back({{"cube_id", s.cube_id}, {"slice_index", s.slice_index}, {"tl", s.tl}});
    }
    return {{"metrics", metrics_json(metrics)}, {"mean_tl", mean_tl()}, {"slices", table}};
}

EvaluationReport evaluate(const GeneratorParams& gen, std::span<const CubePair> data,
                          double threshold, const TverskyParams& tversky) {
    if (!(threshold > 0.0 && threshold < 1.0)) {
        throw ValidationError("evaluation threshold must lie in (0, 1)");
    }
    gen.validate();
    EvaluationReport report;
    for (const auto& pair : data) {
        pair.mask.validate_against(pair.image);
        const GeneratorOutput out = generator_forward(gen, pair.image);
        const Volume& pred = out.prediction.volume;
        for (int d = 0; d < pred.depth; ++d) {
            report.counts += hard_confusion(pred.slice(d), pair.mask.volume.slice(d), threshold);
            report.slices.push_back({pair.image.cube_id, d,
                                     hard_tversky_loss(pred.slice(d), pair.mask.volume.slice(d),
                                                       tversky, threshold)});
        }
    }
    report.metrics = metrics_from_counts(report.counts);
    return report;
}

EvaluationReport evaluate(const GeneratorParams& gen, const DatasetManifest& data, double threshold,
                          const TverskyParams& tversky, const std::optional<GeneratorConfig>& expected) {
    if (expected && !(*expected == gen.config)) {
        throw ValidationError("checkpoint generator architecture " + gen.config.to_json().dump() +
                              " does not match configured " + expected->to_json().dump());
    }
    const auto cubes = load_all(data);
    return evaluate(gen, cubes, threshold, tversky);
}

// ---- trainer ----------------------------------------------------------------------

Trainer::Trainer(TrainConfig config, std::vector<CubePair> train, std::vector<CubePair> validation)
    : config_(std::move(config)),
      train_(std::move(train)),
      validation_(std::move(validation)),
      gen_opt_({config_.gen_lr, config_.adam_beta1, config_.adam_beta2, 1e-8}),
      disc_opt_({config_.disc_lr, config_.adam_beta1, config_.adam_beta2, 1e-8}) {
    config_.validate();
    if (train_.empty()) throw ValidationError("training set is empty");
    const Volume& first = train_.front().image.volume;
    for (const auto& p : train_) {
        p.image.validate();
        p.mask.validate_against(p.image);
        if (!p.image.volume.same_shape(first)) {
            throw ValidationError("training cubes must share one shape; '" + p.image.cube_id +
                                  "' is " + p.image.volume.shape_str());
        }
    }
    if (first.height % config_.generator.required_divisor() != 0) {
        throw ValidationError("slice size " + std::to_string(first.height) +
                              " is not divisible by " +
                              std::to_string(config_.generator.required_divisor()));
    }
    if (first.height % config_.discriminator.required_divisor() != 0) {
        throw ValidationError("slice size " + std::to_string(first.height) +
                              " is not divisible by the discriminator stride product " +
                              std::to_string(config_.discriminator.required_divisor()));
    }
    gen_ = init_generator(config_.generator, config_.seed);
    disc_ = init_discriminator(config_.discriminator, config_.seed ^ 0x9e3779b97f4a7c15ULL);
}

Trainer Trainer::resume(const Checkpoint& ckpt, TrainConfig config, std::vector<CubePair> train,
                        std::vector<CubePair> validation) {
    Trainer t(std::move(config), std::move(train), std::move(validation));
    t.gen_ = load_generator(ckpt);
    t.disc_ = load_discriminator(ckpt);
    if (!(t.gen_.config == t.config_.generator) || !(t.disc_.config == t.config_.discriminator)) {
        throw ValidationError("checkpoint architecture does not match the training configuration");
    }
    t.gen_opt_.load(ckpt, "optimizer/generator");
    t.disc_opt_.load(ckpt, "optimizer/discriminator");
    const auto& meta = ckpt.metadata.at("training");
    t.epoch_ = meta.at("epoch").get<int>();
    for (const auto& r : meta.at("history")) t.history_.records.push_back(EpochRecord::from_json(r));
    return t;
}

Checkpoint Trainer::checkpoint() const {
    Checkpoint ckpt;
    store_generator(ckpt, gen_);
    store_discriminator(ckpt, disc_);
    gen_opt_.save(ckpt, "optimizer/generator");
    disc_opt_.save(ckpt, "optimizer/discriminator");
    nlohmann::json history = nlohmann::json::array();
    for (const auto& r : history_.records) history.push_back(r.to_json());
    ckpt.metadata["training"] = {{"epoch", epoch_}, {"config", config_.to_json()}, {"history", history}};
    return ckpt;
}

Trainer::StepLosses Trainer::train_batch(std::span<const std::size_t> batch) {
    const Volume& shape = train_[batch.front()].image.volume;
    const int n = static_cast<int>(batch.size());
    const int depth = shape.depth;
    const int h = shape.height;
    const int w = shape.width;
    const std::size_t plane = shape.slice_size();

    std::vector<Tensor> steps;
    for (int t = 0; t < depth; ++t) {
        Tensor step({n, 1, h, w});
        for (int b = 0; b < n; ++b) {
            auto src = train_[batch[b]].image.volume.slice(t);
            std::copy(src.begin(), src.end(), step.sample(b).begin());
        }
        steps.push_back(std::move(step));
    }

    const ParamVars gen_vars = bind_parameters(gen_.tensors, true);
    GeneratorGraph graph = generator_graph(gen_.config, gen_vars, steps);

    // Discriminator batch index is t * n + b.
    const int slices = depth * n;
    Tensor real_in({slices, 2, h, w});
    Tensor fake_in({slices, 2, h, w});
    Tensor images_all({slices, 1, h, w});
    for (int t = 0; t < depth; ++t) {
        for (int b = 0; b < n; ++b) {
            const int i = t * n + b;
            const auto& pair = train_[batch[b]];
            auto img = pair.image.volume.slice(t);
            auto msk = pair.mask.volume.slice(t);
            const float* pred = graph.predictions[t]->value.sample(b).data();
            std::copy(img.begin(), img.end(), real_in.sample(i).begin());
            std::copy(msk.begin(), msk.end(), real_in.sample(i).begin() + plane);
            std::copy(img.begin(), img.end(), fake_in.sample(i).begin());
            std::copy(pred, pred + plane, fake_in.sample(i).begin() + plane);
            std::copy(img.begin(), img.end(), images_all.sample(i).begin());
        }
    }

    StepLosses losses;
    losses.slices = slices;

    // (1) discriminator: consensus masks are real, generated masks are fake.
    {
        const ParamVars disc_vars = bind_parameters(disc_.tensors, true);
        nn::Var real_out = discriminator_graph(disc_.config, disc_vars, nn::constant(std::move(real_in)));
        nn::Var fake_out = discriminator_graph(disc_.config, disc_vars, nn::constant(std::move(fake_in)));
        losses.bce = discriminator_bce(real_out->value.values(), fake_out->value.values());
        require_finite(losses.bce, "discriminator BCE");
        Tensor grad_real(real_out->value.shape());
        Tensor grad_fake(fake_out->value.shape());
        discriminator_bce_gradient(real_out->value.values(), fake_out->value.values(),
                                   grad_real.values(), grad_fake.values());
        std::vector<std::pair<nn::Var, Tensor>> seeds;
        seeds.emplace_back(real_out, std::move(grad_real));
        seeds.emplace_back(fake_out, std::move(grad_fake));
        nn::backward(seeds);
        disc_opt_.step(disc_.tensors, collect_grads(disc_vars));
    }

    // (2) generator: per-slice focal Tversky plus the adversarial term.
    std::vector<std::pair<nn::Var, Tensor>> seeds;
    std::vector<double> grad(plane);
    const double scale = 1.0 / static_cast<double>(slices);
    for (int t = 0; t < depth; ++t) {
        const nn::Var& pred = graph.predictions[t];
        Tensor seed(pred->value.shape());
        for (int b = 0; b < n; ++b) {
            auto p = pred->value.sample(b);
            auto y = train_[batch[b]].mask.volume.slice(t);
            losses.ftl += focal_tversky_gradient(p, y, config_.tversky, grad) * scale;
            losses.tl += hard_tversky_loss(p, y, config_.tversky) * scale;
            auto s = seed.sample(b);
            for (std::size_t i = 0; i < plane; ++i) s[i] = static_cast<float>(grad[i] * scale);
        }
        seeds.emplace_back(pred, std::move(seed));
    }
    require_finite(losses.ftl, "generator FTL");

    const ParamVars disc_const = bind_parameters(disc_.tensors, false);
    nn::Var fake_scores;
    if (config_.lambda_adv > 0.0) {
        nn::Var preds_all = nn::concat_batch(graph.predictions);
        nn::Var disc_in = nn::concat_channels({nn::constant(std::move(images_all)), preds_all});
        fake_scores = discriminator_graph(disc_.config, disc_const, disc_in);
        Tensor adv_grad(fake_scores->value.shape());
        losses.adv = adversarial_term(fake_scores->value.values(), adv_grad.values());
        for (float& g : adv_grad.values()) g *= static_cast<float>(config_.lambda_adv);
        seeds.emplace_back(fake_scores, std::move(adv_grad));
    } else {
        // Reported for monitoring only; it does not reach the generator.
        Tensor fake_only({slices, 2, h, w});
        for (int i = 0; i < slices; ++i) {
            auto dst = fake_only.sample(i);
            auto img = images_all.sample(i);
            std::copy(img.begin(), img.end(), dst.begin());
            const int t = i / n;
            const int b = i % n;
            auto p = graph.predictions[t]->value.sample(b);
            std::copy(p.begin(), p.end(), dst.begin() + plane);
        }
        nn::Var scores = discriminator_graph(disc_.config, disc_const, nn::constant(std::move(fake_only)));
        losses.adv = adversarial_term(scores->value.values());
    }
    require_finite(losses.adv, "generator adversarial term");
    nn::backward(seeds);
    gen_opt_.step(gen_.tensors, collect_grads(gen_vars));
    return losses;
}

const EpochRecord& Trainer::run_epoch() {
    std::vector<std::size_t> order(train_.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto rng = epoch_rng(config_.seed, epoch_);
    std::shuffle(order.begin(), order.end(), rng);

    EpochRecord rec;
    rec.epoch = epoch_ + 1;
    int total_slices = 0;
    for (std::size_t start = 0; start < order.size(); start += config_.batch_size) {
        const std::size_t end = std::min(order.size(), start + config_.batch_size);
        const StepLosses s =
            train_batch(std::span<const std::size_t>(order.data() + start, end - start));
        rec.gen_ftl += s.ftl * s.slices;
        rec.gen_adv += s.adv * s.slices;
        rec.disc_bce += s.bce * s.slices;
        rec.train_tl += s.tl * s.slices;
        total_slices += s.slices;
    }
    rec.gen_ftl /= total_slices;
    rec.gen_adv /= total_slices;
    rec.disc_bce /= total_slices;
    rec.train_tl /= total_slices;
    if (!validation_.empty()) {
        const EvaluationReport report = evaluate(gen_, validation_, 0.5, config_.tversky);
        rec.val_tl = report.mean_tl();
        rec.val_metrics = report.metrics;
    }
    ++epoch_;
    history_.records.push_back(rec);
    return history_.records.back();
}

// ---- end-to-end -----------------------------------------------------------------------

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_by_source(
    const DatasetManifest& manifest, double validation_fraction, std::uint64_t seed) {
    std::vector<std::string> sources;
    for (const auto& c : manifest.cubes) sources.push_back(c.source_id.empty() ? c.cube_id : c.source_id);
    std::vector<std::string> groups = sources;
    std::sort(groups.begin(), groups.end());
    groups.erase(std::unique(groups.begin(), groups.end()), groups.end());
    std::mt19937_64 rng(seed);
    std::shuffle(groups.begin(), groups.end(), rng);
    std::size_t n_val = static_cast<std::size_t>(
        std::floor(validation_fraction * static_cast<double>(groups.size()) + 0.5));
    if (groups.size() > 0) n_val = std::min(n_val, groups.size() - 1);
    const std::vector<std::string> val_groups(groups.begin(), groups.begin() + static_cast<long>(n_val));

    std::pair<std::vector<std::size_t>, std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < sources.size(); ++i) {
        const bool is_val =
            std::find(val_groups.begin(), val_groups.end(), sources[i]) != val_groups.end();
        (is_val ? out.second : out.first).push_back(i);
    }
    return out;
}

TrainResult train(const TrainConfig& config, const DatasetManifest& data, const fs::path& out_dir,
                  const EpochCallback& on_epoch, const Checkpoint* resume_from) {
    config.validate();
    if (data.cubes.empty()) throw ValidationError("dataset is empty");
    data.validate();
    const auto [train_idx, val_idx] = split_by_source(data, config.validation_fraction, config.seed);
    std::vector<CubePair> train_set;
    std::vector<CubePair> val_set;
    for (auto i : train_idx) train_set.push_back(load_cube(data, i));
    for (auto i : val_idx) val_set.push_back(load_cube(data, i));

    Trainer trainer = resume_from
                          ? Trainer::resume(*resume_from, config, std::move(train_set), std::move(val_set))
                          : Trainer(config, std::move(train_set), std::move(val_set));
    while (trainer.epoch() < config.epochs) {
        const EpochRecord& rec = trainer.run_epoch();
        if (on_epoch) on_epoch(trainer, rec);
        if (!out_dir.empty()) {
            trainer.history().write_jsonl(out_dir / "history.jsonl");
            if (config.checkpoint_every > 0 && trainer.epoch() % config.checkpoint_every == 0) {
                write_checkpoint(out_dir / ("checkpoint_epoch" + std::to_string(trainer.epoch()) + ".ckpt"),
                                 trainer.checkpoint());
            }
        }
    }
    if (!out_dir.empty()) write_checkpoint(out_dir / "final.ckpt", trainer.checkpoint());
    return {trainer.generator(), trainer.discriminator(), trainer.history()};
}

}  // namespace tcupgan
