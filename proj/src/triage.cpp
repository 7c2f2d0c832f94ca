#include "tcupgan/triage.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <tuple>

namespace tcupgan {

namespace fs = std::filesystem;

namespace {

bool stats_less(const SliceStats& a, const SliceStats& b) {
    return std::tie(a.mean, a.variance, a.tl, a.cube_id, a.slice_index) <
           std::tie(b.mean, b.variance, b.tl, b.cube_id, b.slice_index);
}

struct Candidate {
    double angle = 0.0;
    double offset = 0.0;
    double balanced_accuracy = -1.0;
    double recall = 0.0;
    double specificity = 0.0;
};

// Best offset for one direction in standardized space. Positives should fall
// below the offset (d < 0).
Candidate sweep(double angle, const std::vector<double>& zm, const std::vector<double>& zv,
                const std::vector<char>& positive, std::size_t n_pos, std::size_t n_neg,
                double min_recall) {
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    const std::size_t n = zm.size();
    std::vector<std::pair<double, char>> proj(n);
    for (std::size_t i = 0; i < n; ++i) proj[i] = {c * zm[i] + s * zv[i], positive[i]};
    std::sort(proj.begin(), proj.end());

    Candidate best;
    best.angle = angle;
    std::size_t pos_below = 0;
    std::size_t neg_below = 0;
    // Offset k sits just above the first k projections; k = n selects everything.
    for (std::size_t k = 0; k <= n; ++k) {
        if (k > 0) {
            (proj[k - 1].second ? pos_below : neg_below) += 1;
            if (k < n && proj[k].first == proj[k - 1].first) continue;
        }
        const double recall = static_cast<double>(pos_below) / static_cast<double>(n_pos);
        const double spec = static_cast<double>(n_neg - neg_below) / static_cast<double>(n_neg);
        if (recall < min_recall) continue;
        const double ba = 0.5 * (recall + spec);
        if (ba > best.balanced_accuracy + 1e-12) {
            double offset;
            if (k == 0) offset = proj.front().first - 1.0;
            else if (k == n) offset = proj.back().first + 1.0;
            else offset = 0.5 * (proj[k - 1].first + proj[k].first);
            best.offset = offset;
            best.balanced_accuracy = ba;
            best.recall = recall;
            best.specificity = spec;
        }
    }
    return best;
}

void average_ranks(std::span<const double> v, std::vector<double>& ranks) {
    const std::size_t n = v.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    ranks.assign(n, 0.0);
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
        i = j + 1;
    }
}

std::string asset_name(const std::string& cube_id, int slice, const char* kind) {
    std::string safe = cube_id;
    std::replace(safe.begin(), safe.end(), '/', '_');
    return "assets/" + safe + "_" + std::to_string(slice) + "_" + kind + ".png";
}

}  // namespace

nlohmann::json SliceStats::to_json() const {
    nlohmann::json j = {{"cube_id", cube_id},
                        {"slice_index", slice_index},
                        {"mean", mean},
                        {"variance", variance}};
    j["tl"] = tl ? nlohmann::json(*tl) : nlohmann::json(nullptr);
    return j;
}

SliceStats SliceStats::from_json(const nlohmann::json& j) {
    SliceStats s;
    s.cube_id = j.at("cube_id").get<std::string>();
    s.slice_index = j.at("slice_index").get<int>();
    s.mean = j.at("mean").get<double>();
    s.variance = j.at("variance").get<double>();
    if (j.contains("tl") && !j["tl"].is_null()) s.tl = j["tl"].get<double>();
    return s;
}

void SelectionCut::validate() const {
    if (w_mean == 0.0 && w_var == 0.0 && bias == 0.0) {
        throw ValidationError("selection cut weights are all zero");
    }
    if (!(tl0 > 0.0 && tl0 < 1.0)) throw ValidationError("tl0 must lie in (0, 1)");
}

nlohmann::json SelectionCut::to_json() const {
    return {{"w_mean", w_mean}, {"w_var", w_var}, {"bias", bias}, {"tl0", tl0}};
}

SelectionCut SelectionCut::from_json(const nlohmann::json& j) {
    SelectionCut c{j.at("w_mean").get<double>(), j.at("w_var").get<double>(),
                   j.at("bias").get<double>(), j.value("tl0", 0.3)};
    c.validate();
    return c;
}

std::vector<SliceStats> slice_stats(const PatchScoreGrid& grid, const std::string& cube_id) {
    std::vector<SliceStats> out;
    out.reserve(grid.depth);
    const double m = static_cast<double>(grid.cells());
    for (int d = 0; d < grid.depth; ++d) {
        auto row = grid.slice(d);
        double sum = 0.0;
        for (float v : row) sum += v;
        const double mean = sum / m;
        double sq = 0.0;
        for (float v : row) sq += (v - mean) * (v - mean);
        out.push_back({cube_id, d, mean, sq / m, std::nullopt});
    }
    return out;
}

ScoredCube score_cube(const GeneratorParams& gen, const DiscriminatorParams& disc,
                      const ImageCube& image) {
    ScoredCube out;
    out.prediction = generator_forward(gen, image).prediction;
    out.grid = discriminator_forward(disc, image, out.prediction.volume);
    return out;
}

std::vector<SliceStats> score_dataset(const GeneratorParams& gen, const DiscriminatorParams& disc,
                                      std::span<const CubePair> data, bool with_ground_truth,
                                      const TverskyParams& tversky) {
    std::vector<SliceStats> out;
    for (const auto& pair : data) {
        const Volume& v = pair.image.volume;
        if (v.height % gen.config.required_divisor() != 0 ||
            v.height % disc.config.required_divisor() != 0) {
            throw ValidationError("cube '" + pair.image.cube_id + "' of shape " + v.shape_str() +
                                  " does not fit the model architecture");
        }
        const ScoredCube scored = score_cube(gen, disc, pair.image);
        auto stats = slice_stats(scored.grid, pair.image.cube_id);
        if (with_ground_truth) {
            pair.mask.validate_against(pair.image);
            for (int d = 0; d < v.depth; ++d) {
                stats[d].tl = hard_tversky_loss(scored.prediction.volume.slice(d),
                                                pair.mask.volume.slice(d), tversky);
            }
        }
        out.insert(out.end(), stats.begin(), stats.end());
    }
    return out;
}

std::vector<SliceStats> score_dataset(const GeneratorParams& gen, const DiscriminatorParams& disc,
                                      const DatasetManifest& data, bool with_ground_truth,
                                      const TverskyParams& tversky) {
    std::vector<SliceStats> out;
    for (std::size_t i = 0; i < data.cubes.size(); ++i) {
        const CubePair pair = load_cube(data, i);
        auto s = score_dataset(gen, disc, std::span<const CubePair>(&pair, 1), with_ground_truth, tversky);
        out.insert(out.end(), s.begin(), s.end());
    }
    return out;
}

CutFitReport fit_selection_cut_report(std::span<const SliceStats> input, double tl0,
                                      const CutFitOptions& options) {
    if (!(tl0 > 0.0 && tl0 < 1.0)) throw ValidationError("tl0 must lie in (0, 1)");
    std::vector<SliceStats> stats;
    for (const auto& s : input) {
        if (s.tl) stats.push_back(s);
    }
    if (stats.size() < options.min_records) {
        throw ValidationError("cut fitting needs at least " + std::to_string(options.min_records) +
                              " records with tl, got " + std::to_string(stats.size()));
    }
    std::sort(stats.begin(), stats.end(), stats_less);

    const std::size_t n = stats.size();
    std::vector<char> positive(n);
    std::size_t n_pos = 0;
    for (std::size_t i = 0; i < n; ++i) {
        positive[i] = *stats[i].tl >= tl0 ? 1 : 0;
        n_pos += positive[i];
    }
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) {
        throw ValidationError("cut fitting needs slices on both sides of tl0 = " +
                              std::to_string(tl0) + " (got " + std::to_string(n_pos) +
                              " with tl >= tl0 and " + std::to_string(n_neg) + " below)");
    }

    double mu_m = 0.0, mu_v = 0.0;
    for (const auto& s : stats) {
        mu_m += s.mean;
        mu_v += s.variance;
    }
    mu_m /= n;
    mu_v /= n;
    double sd_m = 0.0, sd_v = 0.0;
    for (const auto& s : stats) {
        sd_m += (s.mean - mu_m) * (s.mean - mu_m);
        sd_v += (s.variance - mu_v) * (s.variance - mu_v);
    }
    sd_m = std::sqrt(sd_m / n);
    sd_v = std::sqrt(sd_v / n);
    if (sd_m == 0.0) sd_m = 1.0;
    if (sd_v == 0.0) sd_v = 1.0;
    std::vector<double> zm(n), zv(n);
    for (std::size_t i = 0; i < n; ++i) {
        zm[i] = (stats[i].mean - mu_m) / sd_m;
        zv[i] = (stats[i].variance - mu_v) / sd_v;
    }

    constexpr double deg = std::numbers::pi / 180.0;
    Candidate best;
    auto consider = [&](double angle) {
        const Candidate c = sweep(angle, zm, zv, positive, n_pos, n_neg, options.min_recall);
        if (c.balanced_accuracy > best.balanced_accuracy + 1e-12) best = c;
    };
    // Coarse pass over (-90, 90) degrees, visiting angles nearest the pure
    // mean threshold first so ties resolve toward it.
    std::vector<double> coarse;
    for (int k = -35; k <= 35; ++k) coarse.push_back(2.5 * k * deg);
    std::stable_sort(coarse.begin(), coarse.end(),
                     [](double a, double b) { return std::abs(a) < std::abs(b); });
    for (double a : coarse) consider(a);
    for (double step : {0.125 * deg, 0.00625 * deg}) {
        const double center = best.angle;
        for (int k = 1; k <= 20; ++k) {
            for (int sign : {-1, 1}) {
                const double a = center + sign * k * step;
                if (std::abs(a) < 89.9 * deg) consider(a);
            }
        }
    }

    // Back to raw (mean, variance) coordinates.
    const double c = std::cos(best.angle);
    const double s = std::sin(best.angle);
    CutFitReport report;
    report.cut.w_mean = c / sd_m;
    report.cut.w_var = s / sd_v;
    report.cut.bias = -best.offset - c * mu_m / sd_m - s * mu_v / sd_v;
    report.cut.tl0 = tl0;
    report.balanced_accuracy = best.balanced_accuracy;
    report.recall = best.recall;
    report.specificity = best.specificity;
    return report;
}

SelectionCut fit_selection_cut(std::span<const SliceStats> stats, double tl0,
                               const CutFitOptions& options) {
    return fit_selection_cut_report(stats, tl0, options).cut;
}

nlohmann::json SelectionSummary::to_json() const {
    return {{"n_total", n_total}, {"n_selected", n_selected}, {"reduction_fraction", reduction_fraction}};
}

Selection apply_cut(std::span<const SliceStats> stats, const SelectionCut& cut) {
    cut.validate();
    Selection out;
    for (const auto& s : stats) {
        const double d = cut.decision(s);
        if (d < 0.0) out.selected.push_back({s, d});
    }
    std::sort(out.selected.begin(), out.selected.end(), [](const SelectedSlice& a, const SelectedSlice& b) {
        return std::tie(a.decision, a.stats.cube_id, a.stats.slice_index) <
               std::tie(b.decision, b.stats.cube_id, b.stats.slice_index);
    });
    out.summary.n_total = stats.size();
    out.summary.n_selected = out.selected.size();
    out.summary.reduction_fraction =
        stats.empty() ? 0.0
                      : 1.0 - static_cast<double>(out.summary.n_selected) /
                                  static_cast<double>(out.summary.n_total);
    return out;
}

nlohmann::json QueueRecord::to_json() const {
    return {{"cube_id", cube_id},   {"slice_index", slice_index},
            {"mean", mean},         {"variance", variance},
            {"decision_value", decision_value},
            {"image", image},       {"machine_mask", machine_mask},
            {"heatmap", heatmap}};
}

QueueRecord QueueRecord::from_json(const nlohmann::json& j) {
    QueueRecord r;
    r.cube_id = j.at("cube_id").get<std::string>();
    r.slice_index = j.at("slice_index").get<int>();
    r.mean = j.at("mean").get<double>();
    r.variance = j.at("variance").get<double>();
    r.decision_value = j.at("decision_value").get<double>();
    r.image = j.value("image", "");
    r.machine_mask = j.value("machine_mask", "");
    r.heatmap = j.value("heatmap", "");
    return r;
}

GrayImage heatmap_image(const PatchScoreGrid& grid, int slice, int height, int width) {
    GrayImage img{height, width, std::vector<std::uint8_t>(static_cast<std::size_t>(height) * width)};
    auto row = grid.slice(slice);
    for (int y = 0; y < height; ++y) {
        const int gy = y * grid.rows / height;
        for (int x = 0; x < width; ++x) {
            const int gx = x * grid.cols / width;
            const float v = std::clamp(row[gy * grid.cols + gx], 0.0f, 1.0f);
            img.pixels[static_cast<std::size_t>(y) * width + x] =
                static_cast<std::uint8_t>(std::lround(v * 255.0f));
        }
    }
    return img;
}

std::vector<QueueRecord> export_review_queue(const Selection& selection,
                                             std::span<const CubePair> data,
                                             const GeneratorParams* gen,
                                             const DiscriminatorParams* disc,
                                             const SelectionCut& cut, const fs::path& out_dir) {
    if (selection.selected.empty()) throw ValidationError("nothing selected for review");
    const bool with_assets = !data.empty();
    if (with_assets && (!gen || !disc)) {
        throw ValidationError("asset export needs generator and discriminator parameters");
    }
    std::error_code ec;
    fs::create_directories(out_dir / "assets", ec);
    if (ec || !fs::is_directory(out_dir)) {
        throw ValidationError("output directory " + out_dir.string() + " is not writable");
    }
    {
        std::ofstream probe(out_dir / ".write_probe");
        if (!probe) throw ValidationError("output directory " + out_dir.string() + " is not writable");
    }
    fs::remove(out_dir / ".write_probe", ec);

    std::map<std::string, const CubePair*> by_id;
    for (const auto& p : data) by_id[p.image.cube_id] = &p;
    std::map<std::string, ScoredCube> scored;

    std::vector<QueueRecord> records;
    for (const auto& sel : selection.selected) {
        QueueRecord r{sel.stats.cube_id, sel.stats.slice_index, sel.stats.mean, sel.stats.variance,
                      sel.decision, "", "", ""};
        if (with_assets) {
            auto it = by_id.find(r.cube_id);
            if (it == by_id.end()) {
                throw ValidationError("selected cube '" + r.cube_id + "' is not in the dataset");
            }
            const CubePair& pair = *it->second;
            auto sit = scored.find(r.cube_id);
            if (sit == scored.end()) {
                sit = scored.emplace(r.cube_id, score_cube(*gen, *disc, pair.image)).first;
            }
            const Volume& v = pair.image.volume;
            if (r.slice_index < 0 || r.slice_index >= v.depth) {
                throw ValidationError("slice index out of range for cube '" + r.cube_id + "'");
            }
            const auto images = unstack_images(v);
            r.image = asset_name(r.cube_id, r.slice_index, "image");
            r.machine_mask = asset_name(r.cube_id, r.slice_index, "mask");
            r.heatmap = asset_name(r.cube_id, r.slice_index, "heatmap");
            write_gray_png(out_dir / r.image, images[r.slice_index]);
            write_mask_png(out_dir / r.machine_mask,
                           unstack_masks(sit->second.prediction.volume)[r.slice_index]);
            write_gray_png(out_dir / r.heatmap,
                           heatmap_image(sit->second.grid, r.slice_index, v.height, v.width));
        }
        records.push_back(std::move(r));
    }

    std::ofstream queue(out_dir / "queue.jsonl", std::ios::trunc);
    for (const auto& r : records) queue << r.to_json().dump() << "\n";
    std::ofstream summary(out_dir / "summary.json", std::ios::trunc);
    nlohmann::json sj = selection.summary.to_json();
    sj["cut"] = cut.to_json();
    summary << sj.dump(2) << "\n";
    if (!queue || !summary) throw std::runtime_error("failed writing review queue");
    return records;
}

std::vector<QueueRecord> read_queue(const fs::path& queue_file) {
    std::ifstream in(queue_file);
    if (!in) throw ValidationError("cannot open queue " + queue_file.string());
    std::vector<QueueRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) out.push_back(QueueRecord::from_json(nlohmann::json::parse(line)));
    }
    return out;
}

void write_stats_jsonl(const fs::path& path, std::span<const SliceStats> stats) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& s : stats) out << s.to_json().dump() << "\n";
}

std::vector<SliceStats> read_stats_jsonl(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open stats file " + path.string());
    std::vector<SliceStats> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) out.push_back(SliceStats::from_json(nlohmann::json::parse(line)));
    }
    return out;
}

double spearman(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) {
        throw ValidationError("spearman needs two equally sized samples of at least 2");
    }
    std::vector<double> rx, ry;
    average_ranks(x, rx);
    average_ranks(y, ry);
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

}  // namespace tcupgan
