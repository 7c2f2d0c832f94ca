#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "tcupgan/image_io.hpp"
#include "tcupgan/triage.hpp"
#include "test_support.hpp"

using namespace tcupgan;
namespace fs = std::filesystem;

namespace {

std::vector<SliceStats> random_stats(std::mt19937_64& rng, std::size_t n) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<SliceStats> out;
    for (std::size_t i = 0; i < n; ++i) {
        SliceStats s;
        s.cube_id = "c" + std::to_string(i / 10);
        s.slice_index = static_cast<int>(i % 10);
        s.mean = u(rng);
        s.variance = 0.05 * u(rng);
        // Noisy, decreasing in the mean.
        s.tl = std::clamp(1.0 - s.mean + 0.3 * (u(rng) - 0.5), 0.0, 1.0);
        out.push_back(s);
    }
    return out;
}

std::vector<CubePair> scored_pairs() {
    std::vector<CubePair> out;
    for (int c = 0; c < 2; ++c) {
        out.push_back({testing::random_image("cube" + std::to_string(c), 3, 16, 20 + c),
                       testing::random_mask(3, 16, 30 + c)});
    }
    return out;
}

}  // namespace

TEST_CASE("slice statistics of a patch grid") {
    PatchScoreGrid g{2, 2, 2, {0.1f, 0.3f, 0.5f, 0.7f, 1.0f, 1.0f, 1.0f, 1.0f}};
    const auto s = slice_stats(g, "x");
    REQUIRE(s.size() == 2);
    CHECK(s[0].mean == doctest::Approx(0.4));
    CHECK(s[0].variance == doctest::Approx(0.05));
    CHECK(s[1].mean == doctest::Approx(1.0));
    CHECK(s[1].variance == 0.0);
    CHECK(s[1].slice_index == 1);
    CHECK_FALSE(s[0].tl.has_value());
}

TEST_CASE("scoring a dataset") {
    const GeneratorParams gen = init_generator(testing::tiny_generator(), 1);
    const DiscriminatorParams disc = init_discriminator(testing::tiny_discriminator(), 2);
    const auto pairs = scored_pairs();
    const auto with = score_dataset(gen, disc, pairs, true);
    const auto without = score_dataset(gen, disc, pairs, false);
    REQUIRE(with.size() == 6);
    REQUIRE(without.size() == 6);
    for (std::size_t i = 0; i < with.size(); ++i) {
        CHECK(with[i].mean > 0.0);
        CHECK(with[i].mean < 1.0);
        CHECK(with[i].variance >= 0.0);
        CHECK(with[i].variance <= 0.25);
        REQUIRE(with[i].tl.has_value());
        CHECK(*with[i].tl >= 0.0);
        CHECK(*with[i].tl <= 1.0);
        CHECK_FALSE(without[i].tl.has_value());
        CHECK(with[i].mean == without[i].mean);
    }
    std::vector<CubePair> odd{{testing::random_image("odd", 2, 12, 1), testing::random_mask(2, 12, 1)}};
    CHECK_THROWS_AS(score_dataset(gen, disc, odd, false), ValidationError);
}

TEST_CASE("cut fitting ignores record order") {
    std::mt19937_64 rng(1);
    auto stats = random_stats(rng, 300);
    const CutFitReport a = fit_selection_cut_report(stats);
    for (int trial = 0; trial < 3; ++trial) {
        std::shuffle(stats.begin(), stats.end(), rng);
        const CutFitReport b = fit_selection_cut_report(stats);
        CHECK(b.cut.w_mean == a.cut.w_mean);
        CHECK(b.cut.w_var == a.cut.w_var);
        CHECK(b.cut.bias == a.cut.bias);
    }
    CHECK(a.cut.w_mean > 0.0);
    CHECK(a.recall >= 0.9);
}

TEST_CASE("cut fitting honours the recall floor") {
    std::mt19937_64 rng(2);
    for (double floor : {0.5, 0.8, 0.95, 1.0}) {
        const auto stats = random_stats(rng, 200);
        CutFitOptions opt;
        opt.min_recall = floor;
        const CutFitReport r = fit_selection_cut_report(stats, 0.3, opt);
        std::size_t pos = 0, caught = 0;
        for (const auto& s : stats) {
            if (*s.tl >= 0.3) {
                ++pos;
                if (r.cut.decision(s) < 0.0) ++caught;
            }
        }
        const double recall = static_cast<double>(caught) / static_cast<double>(pos);
        CHECK(recall >= floor);
        CHECK(recall == doctest::Approx(r.recall));
    }
}

TEST_CASE("with tl = 1 - mean the fit is the mean threshold") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<SliceStats> stats;
        for (int i = 0; i < 250; ++i) {
            SliceStats s;
            s.cube_id = "c";
            s.slice_index = i;
            s.mean = u(rng);
            s.variance = 0.1 * u(rng);
            s.tl = 1.0 - s.mean;
            stats.push_back(s);
        }
        const CutFitReport r = fit_selection_cut_report(stats, 0.3);
        CHECK(r.balanced_accuracy == 1.0);
        CHECK(r.cut.w_var == doctest::Approx(0.0).epsilon(1e-12));
        for (const auto& s : stats) {
            CHECK((r.cut.decision(s) < 0.0) == (1.0 - s.mean >= 0.3));
        }
    }
}

TEST_CASE("cut fitting rejects unusable calibration sets") {
    std::mt19937_64 rng(4);
    auto stats = random_stats(rng, 50);
    CHECK_THROWS_AS(fit_selection_cut(stats), ValidationError);
    auto all_good = random_stats(rng, 200);
    for (auto& s : all_good) s.tl = 0.0;
    CHECK_THROWS_AS(fit_selection_cut(all_good), ValidationError);
    auto unlabelled = random_stats(rng, 200);
    for (auto& s : unlabelled) s.tl.reset();
    CHECK_THROWS_AS(fit_selection_cut(unlabelled), ValidationError);
    CHECK_THROWS_AS(fit_selection_cut(random_stats(rng, 200), 1.5), ValidationError);
}

TEST_CASE("apply_cut selects exactly the negative decisions, worst first") {
    std::mt19937_64 rng(5);
    const auto stats = random_stats(rng, 137);
    const auto copy = stats;
    const SelectionCut cut{1.0, -2.0, -0.45, 0.3};
    const Selection sel = apply_cut(stats, cut);
    std::size_t expected = 0;
    for (const auto& s : stats) expected += cut.decision(s) < 0.0 ? 1 : 0;
    CHECK(sel.selected.size() == expected);
    CHECK(sel.summary.n_total == 137);
    CHECK(sel.summary.n_selected == expected);
    CHECK(sel.summary.reduction_fraction == 1.0 - static_cast<double>(expected) / 137.0);
    for (std::size_t i = 0; i < sel.selected.size(); ++i) {
        CHECK(sel.selected[i].decision < 0.0);
        CHECK(sel.selected[i].decision == cut.decision(sel.selected[i].stats));
        if (i > 0) CHECK(sel.selected[i - 1].decision <= sel.selected[i].decision);
    }
    for (std::size_t i = 0; i < stats.size(); ++i) {
        CHECK(stats[i].mean == copy[i].mean);
        CHECK(stats[i].cube_id == copy[i].cube_id);
    }
    const Selection none = apply_cut({}, cut);
    CHECK(none.summary.n_total == 0);
    CHECK(none.summary.reduction_fraction == 0.0);
    CHECK_THROWS_AS(apply_cut(stats, SelectionCut{0.0, 0.0, 0.0, 0.3}), ValidationError);
}

TEST_CASE("review queue export") {
    testing::TempDir dir;
    const GeneratorParams gen = init_generator(testing::tiny_generator(), 1);
    const DiscriminatorParams disc = init_discriminator(testing::tiny_discriminator(), 2);
    const auto pairs = scored_pairs();
    const auto stats = score_dataset(gen, disc, pairs, false);
    Selection sel;
    for (int i : {4, 0, 2}) sel.selected.push_back({stats[i], -1.0 + 0.1 * i});
    sel.summary = {stats.size(), 3, 0.5};
    const SelectionCut cut;
    const auto records = export_review_queue(sel, pairs, &gen, &disc, cut, dir / "q");
    REQUIRE(records.size() == 3);
    std::size_t assets = 0;
    for (const auto& e : fs::directory_iterator(dir / "q" / "assets")) assets += e.is_regular_file() ? 1 : 0;
    CHECK(assets == 9);
    CHECK(fs::exists(dir / "q" / "summary.json"));

    const auto back = read_queue(dir / "q" / "queue.jsonl");
    REQUIRE(back.size() == 3);
    for (std::size_t k = 0; k < 3; ++k) {
        CHECK(back[k].to_json() == records[k].to_json());
        const auto& r = back[k];
        const CubePair& pair = pairs[r.cube_id == "cube0" ? 0 : 1];
        const ScoredCube scored = score_cube(gen, disc, pair.image);
        CHECK(read_gray_png(dir / "q" / r.image) == unstack_images(pair.image.volume)[r.slice_index]);
        CHECK(read_mask_png(dir / "q" / r.machine_mask) ==
              unstack_masks(scored.prediction.volume)[r.slice_index]);
        const GrayImage heat = read_gray_png(dir / "q" / r.heatmap);
        CHECK(heat.height == 16);
        const auto row = scored.grid.slice(r.slice_index);
        const auto [lo, hi] = std::minmax_element(row.begin(), row.end());
        const auto [plo, phi] = std::minmax_element(heat.pixels.begin(), heat.pixels.end());
        CHECK(std::abs(*plo / 255.0 - *lo) <= 1.0 / 255.0);
        CHECK(std::abs(*phi / 255.0 - *hi) <= 1.0 / 255.0);
        CHECK(r.decision_value < 0.0);
    }

    const auto bare = export_review_queue(sel, {}, nullptr, nullptr, cut, dir / "bare");
    for (const auto& r : bare) CHECK(r.image.empty());
    CHECK_THROWS_AS(export_review_queue(Selection{}, pairs, &gen, &disc, cut, dir / "empty"), ValidationError);
    CHECK_THROWS_AS(export_review_queue(sel, pairs, nullptr, nullptr, cut, dir / "nomodel"), ValidationError);
}

TEST_CASE("heatmap upsampling is nearest-cell") {
    PatchScoreGrid g{1, 2, 2, {0.0f, 1.0f, 0.5f, 0.25f}};
    const GrayImage h = heatmap_image(g, 0, 4, 6);
    CHECK(h.pixels[0] == 0);
    CHECK(h.pixels[5] == 255);
    CHECK(h.pixels[3 * 6 + 0] == 128);
    CHECK(h.pixels[3 * 6 + 5] == 64);
}

TEST_CASE("stats files round-trip") {
    testing::TempDir dir;
    std::mt19937_64 rng(6);
    auto stats = random_stats(rng, 20);
    stats[3].tl.reset();
    write_stats_jsonl(dir / "s.jsonl", stats);
    const auto back = read_stats_jsonl(dir / "s.jsonl");
    REQUIRE(back.size() == 20);
    for (std::size_t i = 0; i < 20; ++i) CHECK(back[i].to_json() == stats[i].to_json());
    CHECK_FALSE(back[3].tl.has_value());
    CHECK_THROWS_AS(read_stats_jsonl(dir / "none.jsonl"), ValidationError);
}

TEST_CASE("spearman correlation") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 5 + trial;
        std::vector<double> x(n), y(n);
        for (std::size_t i = 0; i < n; ++i) {
            x[i] = u(rng);
            y[i] = u(rng);
        }
        // Without ties: 1 - 6 sum d^2 / (n (n^2 - 1)).
        std::vector<std::size_t> ix(n), iy(n);
        std::iota(ix.begin(), ix.end(), 0);
        std::iota(iy.begin(), iy.end(), 0);
        std::sort(ix.begin(), ix.end(), [&](auto a, auto b) { return x[a] < x[b]; });
        std::sort(iy.begin(), iy.end(), [&](auto a, auto b) { return y[a] < y[b]; });
        std::vector<double> rx(n), ry(n);
        for (std::size_t r = 0; r < n; ++r) {
            rx[ix[r]] = static_cast<double>(r);
            ry[iy[r]] = static_cast<double>(r);
        }
        double d2 = 0.0;
        for (std::size_t i = 0; i < n; ++i) d2 += (rx[i] - ry[i]) * (rx[i] - ry[i]);
        const double nn = static_cast<double>(n);
        CHECK(spearman(x, y) == doctest::Approx(1.0 - 6.0 * d2 / (nn * (nn * nn - 1.0))).epsilon(1e-12));
    }
    const std::vector<double> a{1, 2, 2, 3}, b{1, 2, 3, 4}, c{4, 3, 2, 1};
    CHECK(spearman(a, b) == doctest::Approx(4.5 / std::sqrt(22.5)));
    CHECK(spearman(b, c) == doctest::Approx(-1.0));
    const std::vector<double> flat{1, 1, 1, 1};
    CHECK(spearman(flat, b) == 0.0);
    CHECK_THROWS_AS(spearman(std::vector<double>{1}, std::vector<double>{1}), ValidationError);
}
