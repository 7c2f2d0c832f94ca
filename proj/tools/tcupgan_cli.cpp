// tcupgan: command-line entry point for dataset preparation, training,
// scoring, triage and the review service.

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "tcupgan/checkpoint.hpp"
#include "tcupgan/dataset.hpp"
#include "tcupgan/service.hpp"
#include "tcupgan/training.hpp"
#include "tcupgan/triage.hpp"

// After Eigen: <resolv.h> defines a _res macro.
#include <CLI11.hpp>
#include <httplib.h>
#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tcupgan;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

struct Common {
    std::string config;
    std::uint64_t seed = 0;
    std::string out;
    bool force = false;
};

CLI::App* add_command(CLI::App& app, const std::string& name, const std::string& description,
                      Common& common) {
    CLI::App* sub = app.add_subcommand(name, description);
    sub->add_option("--config", common.config, "JSON file with option values (keys are flag names, '-' -> '_')");
    sub->add_option("--seed", common.seed, "Random seed");
    sub->add_option("--out", common.out, "Output path");
    sub->add_flag("--force", common.force, "Overwrite existing outputs");
    return sub;
}

void log_resolved(const CLI::App& sub) {
    json options = json::object();
    for (const CLI::Option* opt : sub.get_options()) {
        std::string name = opt->get_single_name();
        if (name == "help" || name == "config") continue;
        std::replace(name.begin(), name.end(), '-', '_');
        const auto values = opt->count() > 0 ? opt->results() : std::vector<std::string>{};
        if (values.empty()) {
            options[name] = opt->get_default_str();
        } else if (values.size() == 1) {
            options[name] = values.front();
        } else {
            options[name] = values;
        }
    }
    std::cerr << json{{"command", sub.get_name()}, {"options", options}}.dump() << "\n";
}

void require_out(const Common& c) {
    if (c.out.empty()) throw ValidationError("--out is required");
}

void guard_clobber(const fs::path& target, const Common& c) {
    if (fs::exists(target) && !c.force) {
        throw ValidationError("refusing to overwrite " + target.string() + " (pass --force)");
    }
}

void write_json_file(const fs::path& path, const json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ValidationError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

std::string config_scalar(const json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    if (v.is_number()) return v.dump();
    throw ValidationError("config values must be scalars or flat arrays");
}

// Fills options not given on the command line from a flat JSON object.
void apply_config_file(CLI::App& sub, const std::string& path) {
    json j = read_json_file(path);
    if (!j.is_object()) throw ValidationError("config " + path + " must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        std::string flag = key;
        std::replace(flag.begin(), flag.end(), '_', '-');
        CLI::Option* opt = key == "config" ? nullptr : sub.get_option_no_throw("--" + flag);
        if (opt == nullptr) throw ValidationError("unknown config key '" + key + "' for " + sub.get_name());
        if (opt->count() > 0) continue;
        std::vector<std::string> inputs;
        if (value.is_array()) {
            for (const auto& v : value) inputs.push_back(config_scalar(v));
        } else {
            inputs.push_back(config_scalar(value));
        }
        try {
            for (const auto& in : inputs) opt->add_result(in);
            opt->run_callback();
        } catch (const CLI::Error& e) {
            throw ValidationError("config key '" + key + "': " + e.what());
        }
    }
}

httplib::Server* g_server = nullptr;

void stop_server(int) {
    if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Volumetric segmentation with discriminator-guided review triage", "tcupgan"};
    app.option_defaults()->always_capture_default();
    app.require_subcommand(1);
    app.failure_message(CLI::FailureMessage::help);

    Common common;

    // synth
    SynthConfig synth;
    auto* synth_cmd = add_command(app, "synth", "Write a seeded synthetic droplet dataset", common);
    synth_cmd->add_option("--n-cubes", synth.n_cubes, "Number of cubes");
    synth_cmd->add_option("--depth", synth.depth, "Slices per cube");
    synth_cmd->add_option("--size", synth.size, "Slice height and width");
    synth_cmd->add_option("--droplets-min", synth.droplets_min, "Minimum droplets per cube");
    synth_cmd->add_option("--droplets-max", synth.droplets_max, "Maximum droplets per cube");
    synth_cmd->add_option("--radius-min", synth.radius_min, "Minimum in-plane semi-axis (px)");
    synth_cmd->add_option("--radius-max", synth.radius_max, "Maximum in-plane semi-axis (px)");
    synth_cmd->add_option("--depth-radius-min", synth.depth_radius_min, "Minimum depth semi-axis (slices)");
    synth_cmd->add_option("--depth-radius-max", synth.depth_radius_max, "Maximum depth semi-axis (slices)");
    synth_cmd->add_option("--contrast-min", synth.contrast_min, "Minimum droplet darkening");
    synth_cmd->add_option("--contrast-max", synth.contrast_max, "Maximum droplet darkening");
    synth_cmd->add_option("--noise-sigma", synth.noise_sigma, "Gaussian noise level");
    synth_cmd->add_option("--id-prefix", synth.id_prefix, "Cube id prefix");

    // build
    std::string raw_manifest;
    BuildOptions build_opts;
    auto* build_cmd = add_command(app, "build", "Consensus, stack, resize and TenCrop raw annotations", common);
    build_cmd->add_option("--raw", raw_manifest, "Raw slices/annotations JSON")->check(CLI::ExistingFile);
    build_cmd->add_option("--resize", build_opts.resize, "Resize target (px)");
    build_cmd->add_option("--crop", build_opts.crop, "Crop size (px)");

    // train
    TrainConfig tc;
    std::string resume;
    auto* train_cmd = add_command(app, "train", "Adversarial training of generator and discriminator", common);
    train_cmd->add_option("--manifest", tc.manifest, "Dataset manifest.json");
    train_cmd->add_option("--epochs", tc.epochs, "Total epochs");
    train_cmd->add_option("--batch-size", tc.batch_size, "Cubes per batch");
    train_cmd->add_option("--gen-lr", tc.gen_lr, "Generator learning rate");
    train_cmd->add_option("--disc-lr", tc.disc_lr, "Discriminator learning rate");
    train_cmd->add_option("--adam-beta1", tc.adam_beta1, "Adam beta1");
    train_cmd->add_option("--adam-beta2", tc.adam_beta2, "Adam beta2");
    train_cmd->add_option("--lambda-adv", tc.lambda_adv, "Adversarial term weight");
    train_cmd->add_option("--alpha", tc.tversky.alpha, "Tversky false-negative weight");
    train_cmd->add_option("--beta", tc.tversky.beta, "Tversky false-positive weight");
    train_cmd->add_option("--gamma", tc.tversky.gamma, "Focal exponent");
    train_cmd->add_option("--checkpoint-every", tc.checkpoint_every, "Checkpoint period in epochs (0: final only)");
    train_cmd->add_option("--validation-fraction", tc.validation_fraction, "Held-out fraction of source cubes");
    train_cmd->add_option("--encoder-widths", tc.generator.encoder_widths, "Generator encoder channel widths");
    train_cmd->add_option("--bottleneck-width", tc.generator.bottleneck_width, "Generator bottleneck width");
    train_cmd->add_option("--disc-widths", tc.discriminator.widths, "Discriminator stage widths (last must be 1)");
    train_cmd->add_option("--resume", resume, "Checkpoint to continue from")->check(CLI::ExistingFile);

    // eval
    std::string ckpt_path;
    std::string manifest_path;
    double threshold = 0.5;
    auto* eval_cmd = add_command(app, "eval", "Segmentation metrics of a checkpoint on a dataset", common);
    eval_cmd->add_option("--checkpoint", ckpt_path, "Checkpoint file")->check(CLI::ExistingFile);
    eval_cmd->add_option("--manifest", manifest_path, "Dataset manifest.json")->check(CLI::ExistingFile);
    eval_cmd->add_option("--threshold", threshold, "Binarization threshold");

    // score
    bool with_gt = false;
    auto* score_cmd = add_command(app, "score", "Per-slice discriminator statistics as JSON lines", common);
    score_cmd->add_option("--checkpoint", ckpt_path, "Checkpoint file")->check(CLI::ExistingFile);
    score_cmd->add_option("--manifest", manifest_path, "Dataset manifest.json")->check(CLI::ExistingFile);
    score_cmd->add_flag("--with-gt", with_gt, "Also record the Tversky loss against ground truth");

    // fit-cut
    std::string stats_path;
    double tl0 = 0.3;
    CutFitOptions fit_opts;
    auto* fit_cmd = add_command(app, "fit-cut", "Fit the triage boundary on labelled statistics", common);
    fit_cmd->add_option("--stats", stats_path, "Stats JSON lines with tl")->check(CLI::ExistingFile);
    fit_cmd->add_option("--tl0", tl0, "Loss above which a slice needs a human");
    fit_cmd->add_option("--min-recall", fit_opts.min_recall, "Minimum recall of bad slices");
    fit_cmd->add_option("--min-records", fit_opts.min_records, "Minimum number of records");

    // select
    std::string cut_path;
    auto* select_cmd = add_command(app, "select", "Apply a cut and export the review queue", common);
    select_cmd->add_option("--cut", cut_path, "Cut JSON")->check(CLI::ExistingFile);
    select_cmd->add_option("--stats", stats_path, "Stats JSON lines")->check(CLI::ExistingFile);
    select_cmd->add_option("--checkpoint", ckpt_path, "Checkpoint for asset rendering")->check(CLI::ExistingFile);
    select_cmd->add_option("--manifest", manifest_path, "Dataset for asset rendering")->check(CLI::ExistingFile);

    // serve
    std::string queue_dir;
    std::string export_dir;
    std::string host = "127.0.0.1";
    int port = 8080;
    auto* serve_cmd = add_command(app, "serve", "Serve the review queue over HTTP; --out is the state directory", common);
    serve_cmd->add_option("--queue", queue_dir, "Directory holding queue.jsonl")->check(CLI::ExistingDirectory);
    serve_cmd->add_option("--manifest", manifest_path, "Source dataset manifest.json")->check(CLI::ExistingFile);
    serve_cmd->add_option("--export-dir", export_dir, "Export directory (default: <out>/export)");
    serve_cmd->add_option("--host", host, "Bind address");
    serve_cmd->add_option("--port", port, "Bind port")->check(CLI::Range(1, 65535));

    // export-retrain
    std::string state_dir;
    auto* export_cmd = add_command(app, "export-retrain", "Fold corrections into a retraining manifest", common);
    export_cmd->add_option("--manifest", manifest_path, "Source dataset manifest.json")->check(CLI::ExistingFile);
    export_cmd->add_option("--state", state_dir, "Service state directory")->check(CLI::ExistingDirectory);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitValidation;
    }

    try {
        CLI::App* sub = app.get_subcommands().front();
        if (!common.config.empty()) apply_config_file(*sub, common.config);
        log_resolved(*sub);

        if (sub == synth_cmd) {
            require_out(common);
            guard_clobber(fs::path(common.out) / "manifest.json", common);
            synth.seed = common.seed;
            const auto m = synthesize_dataset(synth, common.out);
            std::cout << json{{"manifest", (fs::path(common.out) / "manifest.json").string()},
                              {"cubes", m.cubes.size()}}.dump() << "\n";
        } else if (sub == build_cmd) {
            require_out(common);
            if (raw_manifest.empty()) throw ValidationError("--raw is required");
            guard_clobber(fs::path(common.out) / "manifest.json", common);
            const auto m = build_dataset(raw_manifest, build_opts, common.out);
            std::cout << json{{"manifest", (fs::path(common.out) / "manifest.json").string()},
                              {"cubes", m.cubes.size()}}.dump() << "\n";
        } else if (sub == train_cmd) {
            require_out(common);
            if (tc.manifest.empty()) throw ValidationError("--manifest is required");
            tc.seed = common.seed;
            tc.validate();
            const fs::path out = common.out;
            if (resume.empty()) guard_clobber(out / "final.ckpt", common);
            fs::create_directories(out);
            const DatasetManifest data = read_manifest(tc.manifest);
            std::optional<Checkpoint> from;
            if (!resume.empty()) from = read_checkpoint(resume);
            write_json_file(out / "config.json", tc.to_json());
            train(tc, data, out,
                  [](const Trainer&, const EpochRecord& r) { std::cerr << r.to_json().dump() << "\n"; },
                  from ? &*from : nullptr);
            std::cout << json{{"checkpoint", (out / "final.ckpt").string()}}.dump() << "\n";
        } else if (sub == eval_cmd) {
            if (ckpt_path.empty() || manifest_path.empty()) {
                throw ValidationError("--checkpoint and --manifest are required");
            }
            if (!common.out.empty()) guard_clobber(common.out, common);
            const GeneratorParams gen = load_generator(read_checkpoint(ckpt_path));
            const EvaluationReport report = evaluate(gen, read_manifest(manifest_path), threshold);
            json summary = report.to_json();
            summary["mean_tl"] = report.mean_tl();
            if (!common.out.empty()) write_json_file(common.out, summary);
            std::cout << summary.dump() << "\n";
        } else if (sub == score_cmd) {
            require_out(common);
            if (ckpt_path.empty() || manifest_path.empty()) {
                throw ValidationError("--checkpoint and --manifest are required");
            }
            guard_clobber(common.out, common);
            const Checkpoint ckpt = read_checkpoint(ckpt_path);
            const auto stats = score_dataset(load_generator(ckpt), load_discriminator(ckpt),
                                             read_manifest(manifest_path), with_gt);
            if (fs::path(common.out).has_parent_path()) fs::create_directories(fs::path(common.out).parent_path());
            write_stats_jsonl(common.out, stats);
            std::cout << json{{"stats", common.out}, {"records", stats.size()}}.dump() << "\n";
        } else if (sub == fit_cmd) {
            require_out(common);
            if (stats_path.empty()) throw ValidationError("--stats is required");
            guard_clobber(common.out, common);
            const auto stats = read_stats_jsonl(stats_path);
            const CutFitReport report = fit_selection_cut_report(stats, tl0, fit_opts);
            write_json_file(common.out, report.cut.to_json());
            std::cout << json{{"cut", report.cut.to_json()},
                              {"balanced_accuracy", report.balanced_accuracy},
                              {"recall", report.recall},
                              {"specificity", report.specificity}}.dump() << "\n";
        } else if (sub == select_cmd) {
            require_out(common);
            if (cut_path.empty() || stats_path.empty()) throw ValidationError("--cut and --stats are required");
            if (ckpt_path.empty() != manifest_path.empty()) {
                throw ValidationError("--checkpoint and --manifest must be given together");
            }
            const fs::path out = common.out;
            guard_clobber(out / "queue.jsonl", common);
            const SelectionCut cut = SelectionCut::from_json(read_json_file(cut_path));
            const auto stats = read_stats_jsonl(stats_path);
            const Selection selection = apply_cut(stats, cut);
            std::vector<CubePair> data;
            std::optional<GeneratorParams> gen;
            std::optional<DiscriminatorParams> disc;
            if (!ckpt_path.empty()) {
                const Checkpoint ckpt = read_checkpoint(ckpt_path);
                gen = load_generator(ckpt);
                disc = load_discriminator(ckpt);
                const DatasetManifest m = read_manifest(manifest_path);
                std::set<std::string> wanted;
                for (const auto& s : selection.selected) wanted.insert(s.stats.cube_id);
                for (std::size_t i = 0; i < m.cubes.size(); ++i) {
                    if (wanted.contains(m.cubes[i].cube_id)) data.push_back(load_cube(m, i));
                }
            }
            export_review_queue(selection, data, gen ? &*gen : nullptr, disc ? &*disc : nullptr, cut, out);
            std::cout << selection.summary.to_json().dump() << "\n";
        } else if (sub == serve_cmd) {
            require_out(common);
            if (queue_dir.empty()) throw ValidationError("--queue is required");
            ServiceOptions opts;
            opts.queue_dir = queue_dir;
            opts.dataset_manifest = manifest_path;
            opts.state_dir = common.out;
            opts.export_dir = export_dir.empty() ? fs::path(common.out) / "export" : fs::path(export_dir);
            ReviewService service(opts);
            httplib::Server server;
            register_routes(server, service);
            g_server = &server;
            std::signal(SIGINT, stop_server);
            std::signal(SIGTERM, stop_server);
            if (!server.bind_to_port(host, port)) {
                throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
            }
            std::cerr << "listening on http://" << host << ":" << port << "\n";
            server.listen_after_bind();
            g_server = nullptr;
        } else if (sub == export_cmd) {
            require_out(common);
            if (manifest_path.empty() || state_dir.empty()) {
                throw ValidationError("--manifest and --state are required");
            }
            guard_clobber(fs::path(common.out) / "manifest.json", common);
            const auto log = read_correction_log(fs::path(state_dir) / "corrections.jsonl");
            const LoopState state = replay(log);
            export_retrain_manifest(read_manifest(manifest_path), state, state_dir, common.out);
            std::cout << json{{"manifest", (fs::path(common.out) / "manifest.json").string()},
                              {"replaced", state.latest.size()}}.dump() << "\n";
        }
        return 0;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const ServiceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.status() < 500 ? kExitValidation : kExitRuntime;
    } catch (const json::exception& e) {
        std::cerr << "error: malformed input: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}
