#include <doctest.h>

#include <cmath>
#include <limits>

#include "tcupgan/training.hpp"
#include "test_support.hpp"

using namespace tcupgan;
namespace fs = std::filesystem;

namespace {

std::vector<CubePair> small_pairs(int n, std::uint64_t seed) {
    SynthConfig s;
    s.n_cubes = n;
    s.depth = 3;
    s.size = 16;
    s.droplets_min = 1;
    s.droplets_max = 2;
    s.radius_min = 2;
    s.radius_max = 5;
    s.depth_radius_min = 1;
    s.depth_radius_max = 2;
    s.seed = seed;
    std::vector<CubePair> out;
    for (auto& c : synthesize_cubes(s)) out.push_back(std::move(c.pair));
    return out;
}

TrainConfig small_config() {
    TrainConfig c;
    c.epochs = 2;
    c.gen_lr = 1e-2;
    c.disc_lr = 1e-2;
    c.seed = 5;
    c.validation_fraction = 0.0;
    c.generator = testing::tiny_generator();
    c.discriminator = testing::tiny_discriminator();
    return c;
}

bool same_params(const ParameterSet& a, const ParameterSet& b) {
    if (a.size() != b.size()) return false;
    for (const auto& [name, t] : a) {
        if (!t.identical(b.at(name))) return false;
    }
    return true;
}

// Generator-only Adam on the focal Tversky loss, one cube per step.
std::vector<double> pure_ftl_run(const TrainConfig& cfg, const CubePair& pair, int epochs) {
    GeneratorParams gen = init_generator(cfg.generator, cfg.seed);
    Adam opt({cfg.gen_lr, cfg.adam_beta1, cfg.adam_beta2, 1e-8});
    const Volume& v = pair.image.volume;
    std::vector<double> out;
    for (int e = 0; e < epochs; ++e) {
        std::vector<Tensor> steps;
        for (int t = 0; t < v.depth; ++t) {
            auto s = v.slice(t);
            steps.emplace_back(Shape{1, 1, v.height, v.width}, std::vector<float>(s.begin(), s.end()));
        }
        const ParamVars vars = bind_parameters(gen.tensors, true);
        GeneratorGraph graph = generator_graph(gen.config, vars, steps);
        std::vector<std::pair<nn::Var, Tensor>> seeds;
        std::vector<double> grad(v.slice_size());
        double ftl = 0.0;
        for (int t = 0; t < v.depth; ++t) {
            const nn::Var& p = graph.predictions[t];
            ftl += focal_tversky_gradient(p->value.values(), pair.mask.volume.slice(t), cfg.tversky, grad) /
                   v.depth;
            Tensor seed(p->value.shape());
            for (std::size_t i = 0; i < grad.size(); ++i) seed.data()[i] = static_cast<float>(grad[i] / v.depth);
            seeds.emplace_back(p, std::move(seed));
        }
        nn::backward(seeds);
        ParameterSet grads;
        for (const auto& [name, var] : vars) {
            if (!var->grad.empty()) grads.emplace(name, var->grad);
        }
        opt.step(gen.tensors, grads);
        out.push_back(ftl);
    }
    return out;
}

}  // namespace

TEST_CASE("one epoch over two cubes") {
    TrainConfig cfg = small_config();
    Trainer t(cfg, small_pairs(2, 1));
    const EpochRecord& r = t.run_epoch();
    CHECK(r.epoch == 1);
    CHECK(std::isfinite(r.gen_ftl));
    CHECK(std::isfinite(r.gen_adv));
    CHECK(std::isfinite(r.disc_bce));
    CHECK(r.train_tl >= 0.0);
    CHECK(r.train_tl <= 1.0);
    CHECK(t.history().records.size() == 1);
    CHECK_FALSE(r.val_tl.has_value());
}

TEST_CASE("without the adversarial term training is pure focal Tversky") {
    TrainConfig cfg = small_config();
    cfg.lambda_adv = 0.0;
    cfg.disc_lr = 0.0;
    const auto data = small_pairs(1, 2);
    Trainer t(cfg, data);
    const auto oracle = pure_ftl_run(cfg, data[0], 4);
    for (int e = 0; e < 4; ++e) {
        const EpochRecord& r = t.run_epoch();
        CHECK(r.gen_ftl == doctest::Approx(oracle[e]).epsilon(1e-9));
        CHECK(std::isfinite(r.gen_adv));
    }

    // The discriminator's own updates cannot reach the generator when lambda is 0.
    TrainConfig moving = cfg;
    moving.disc_lr = 5e-2;
    Trainer a(cfg, data), b(moving, data);
    for (int e = 0; e < 3; ++e) {
        CHECK(a.run_epoch().gen_ftl == b.run_epoch().gen_ftl);
    }
    CHECK(same_params(a.generator().tensors, b.generator().tensors));
    CHECK_FALSE(same_params(a.discriminator().tensors, b.discriminator().tensors));
}

TEST_CASE("each phase only moves its own network") {
    const auto data = small_pairs(2, 3);
    TrainConfig frozen_gen = small_config();
    frozen_gen.gen_lr = 0.0;
    Trainer a(frozen_gen, data);
    const GeneratorParams g0 = a.generator();
    const DiscriminatorParams d0 = a.discriminator();
    a.run_epoch();
    CHECK(same_params(a.generator().tensors, g0.tensors));
    CHECK_FALSE(same_params(a.discriminator().tensors, d0.tensors));

    TrainConfig frozen_disc = small_config();
    frozen_disc.disc_lr = 0.0;
    Trainer b(frozen_disc, data);
    b.run_epoch();
    CHECK(same_params(b.discriminator().tensors, d0.tensors));
    CHECK_FALSE(same_params(b.generator().tensors, g0.tensors));
}

TEST_CASE("same seed reproduces the history; resume continues exactly") {
    const auto data = small_pairs(3, 4);
    TrainConfig cfg = small_config();
    cfg.epochs = 3;
    Trainer straight(cfg, data);
    for (int e = 0; e < 3; ++e) straight.run_epoch();
    Trainer again(cfg, data);
    for (int e = 0; e < 3; ++e) again.run_epoch();
    CHECK(straight.history().to_jsonl() == again.history().to_jsonl());

    Trainer first(cfg, data);
    first.run_epoch();
    const Checkpoint ckpt = deserialize_checkpoint(serialize_checkpoint(first.checkpoint()));
    Trainer resumed = Trainer::resume(ckpt, cfg, data);
    CHECK(resumed.epoch() == 1);
    resumed.run_epoch();
    resumed.run_epoch();
    CHECK(resumed.history().to_jsonl() == straight.history().to_jsonl());
    CHECK(same_params(resumed.generator().tensors, straight.generator().tensors));
    CHECK(same_params(resumed.discriminator().tensors, straight.discriminator().tensors));

    TrainConfig other = cfg;
    other.generator.bottleneck_width = 5;
    CHECK_THROWS_AS(Trainer::resume(ckpt, other, data), ValidationError);
}

TEST_CASE("non-finite losses abort with the offending term") {
    const auto data = small_pairs(1, 6);
    TrainConfig cfg = small_config();
    const Checkpoint clean = Trainer(cfg, data).checkpoint();
    auto message = [&](const std::string& tensor, const TrainConfig& c) {
        Checkpoint ckpt = clean;
        ckpt.tensors.at(tensor).fill(std::numeric_limits<float>::quiet_NaN());
        Trainer broken = Trainer::resume(ckpt, c, data);
        try {
            broken.run_epoch();
        } catch (const TrainingError& e) {
            return std::string(e.what());
        }
        return std::string("no error");
    };
    CHECK(message("discriminator/stage0.w", cfg).find("discriminator BCE") != std::string::npos);
    // NaN masks reach the discriminator phase first.
    CHECK(message("generator/head.b", cfg).find("non-finite") != std::string::npos);
}

TEST_CASE("trainer input validation") {
    TrainConfig cfg = small_config();
    CHECK_THROWS_AS(Trainer(cfg, {}), ValidationError);
    auto mixed = small_pairs(1, 7);
    mixed.push_back(CubePair{testing::random_image("odd", 3, 24, 1), testing::random_mask(3, 24, 1)});
    CHECK_THROWS_AS(Trainer(cfg, mixed), ValidationError);
    TrainConfig bad = cfg;
    bad.epochs = 0;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = cfg;
    bad.gen_lr = -1.0;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    CHECK(TrainConfig::from_json(cfg.to_json()).to_json() == cfg.to_json());
}

TEST_CASE("validation split keeps crops of one source together") {
    DatasetManifest m;
    for (int s = 0; s < 6; ++s)
        for (int k = 0; k < 10; ++k) {
            ManifestEntry e;
            e.cube_id = "src" + std::to_string(s) + "_c" + std::to_string(k);
            e.source_id = "src" + std::to_string(s);
            m.cubes.push_back(e);
        }
    const auto [train_idx, val_idx] = split_by_source(m, 0.34, 3);
    CHECK(train_idx.size() + val_idx.size() == 60);
    CHECK(val_idx.size() == 20);
    for (auto v : val_idx)
        for (auto t : train_idx) CHECK(m.cubes[v].source_id != m.cubes[t].source_id);
    CHECK(split_by_source(m, 0.34, 3) == split_by_source(m, 0.34, 3));
    CHECK(split_by_source(m, 0.0, 3).second.empty());
    // At least one source always stays in training.
    CHECK_FALSE(split_by_source(m, 0.99, 3).first.empty());
}

TEST_CASE("train writes history and checkpoints at the cadence") {
    testing::TempDir dir;
    SynthConfig s;
    s.n_cubes = 3;
    s.depth = 2;
    s.size = 16;
    s.droplets_min = 1;
    s.droplets_max = 1;
    s.radius_min = 2;
    s.radius_max = 4;
    s.seed = 8;
    const DatasetManifest m = synthesize_dataset(s, dir / "data");
    TrainConfig cfg = small_config();
    cfg.epochs = 4;
    cfg.checkpoint_every = 2;
    cfg.validation_fraction = 0.34;
    int calls = 0;
    const TrainResult r = train(cfg, m, dir / "run", [&](const Trainer&, const EpochRecord&) { ++calls; });
    CHECK(calls == 4);
    REQUIRE(r.history.records.size() == 4);
    for (int e = 0; e < 4; ++e) {
        CHECK(r.history.records[e].epoch == e + 1);
        CHECK(r.history.records[e].val_tl.has_value());
    }
    CHECK(fs::exists(dir / "run" / "history.jsonl"));
    CHECK(fs::exists(dir / "run" / "checkpoint_epoch2.ckpt"));
    CHECK(fs::exists(dir / "run" / "checkpoint_epoch4.ckpt"));
    CHECK_FALSE(fs::exists(dir / "run" / "checkpoint_epoch1.ckpt"));
    const Checkpoint fin = read_checkpoint(dir / "run" / "final.ckpt");
    CHECK(same_params(load_generator(fin).tensors, r.generator.tensors));

    const Checkpoint mid = read_checkpoint(dir / "run" / "checkpoint_epoch2.ckpt");
    const TrainResult cont = train(cfg, m, {}, {}, &mid);
    CHECK(cont.history.to_jsonl() == r.history.to_jsonl());

    DatasetManifest empty;
    CHECK_THROWS_AS(train(cfg, empty), ValidationError);
}
