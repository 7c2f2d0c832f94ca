#include <doctest.h>

#include <thread>

#include "tcupgan/image_io.hpp"
#include "tcupgan/service.hpp"
#include "test_support.hpp"

#include <httplib.h>

using namespace tcupgan;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<std::uint8_t> as_bytes(const std::string& s) { return {s.begin(), s.end()}; }

// Small dataset, a four-slice review queue and an empty state directory.
struct Fixture {
    testing::TempDir dir;
    DatasetManifest data;
    std::vector<QueueRecord> queue;
    ServiceOptions options;

    Fixture() {
        SynthConfig s;
        s.n_cubes = 2;
        s.depth = 3;
        s.size = 16;
        s.droplets_min = 1;
        s.droplets_max = 2;
        s.radius_min = 2;
        s.radius_max = 5;
        s.seed = 3;
        data = synthesize_dataset(s, dir / "data");
        const auto pairs = load_all(data);
        const GeneratorParams gen = init_generator(testing::tiny_generator(), 1);
        const DiscriminatorParams disc = init_discriminator(testing::tiny_discriminator(), 2);
        const auto stats = score_dataset(gen, disc, pairs, false);
        Selection sel;
        for (int i : {0, 1, 3, 5}) sel.selected.push_back({stats[i], -1.0});
        sel.summary = {stats.size(), 4, 1.0 - 4.0 / 6.0};
        queue = export_review_queue(sel, pairs, &gen, &disc, SelectionCut{}, dir / "queue");
        options = {dir / "queue", dir / "data" / "manifest.json", dir / "state", dir / "export"};
    }
};

// Serves `service` on an ephemeral port for the lifetime of the object.
struct Running {
    httplib::Server server;
    std::thread thread;
    int port = 0;

    explicit Running(ReviewService& service) {
        register_routes(server, service);
        port = server.bind_to_any_port("127.0.0.1");
        thread = std::thread([this] { server.listen_after_bind(); });
        server.wait_until_ready();
    }
    ~Running() {
        server.stop();
        thread.join();
    }
    httplib::Client client() const { return httplib::Client("127.0.0.1", port); }
};

json correction_body(const std::string& cube, int slice, const std::vector<std::uint8_t>& png) {
    return {{"cube_id", cube}, {"slice_index", slice}, {"author", "tester"}, {"mask_png_base64", base64_encode(png)}};
}

Bitmap square_mask(int size, int lo, int hi) {
    Bitmap m(size, size);
    for (int y = lo; y < hi; ++y)
        for (int x = lo; x < hi; ++x) m.at(y, x) = 1;
    return m;
}

}  // namespace

TEST_CASE("encoding helpers") {
    CHECK(base64_encode(as_bytes("hello")) == "aGVsbG8=");
    CHECK(base64_decode("aGVsbG8=") == as_bytes("hello"));
    CHECK(base64_decode("aGVs\nbG8=") == as_bytes("hello"));
    CHECK(base64_decode("").empty());
    CHECK_THROWS_AS(base64_decode("abc"), ValidationError);
    CHECK(sha256_hex(as_bytes("abc")) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("queue, ingest and export over HTTP") {
    Fixture f;
    ReviewService service(f.options);
    Running run(service);
    auto cli = run.client();

    auto health = cli.Get("/api/health");
    REQUIRE(health);
    CHECK(health->status == 200);
    CHECK(health->get_header_value(kApiVersionHeader) == kApiVersion);
    CHECK(json::parse(health->body).at("status") == "ok");

    auto q = cli.Get("/api/queue");
    REQUIRE(q);
    const json items = json::parse(q->body);
    REQUIRE(items.size() == 4);
    for (const auto& it : items) {
        CHECK(it.at("status") == "pending");
        CHECK(it.at("height") == 16);
        CHECK(it.at("correction_id").is_null());
    }
    CHECK(json::parse(cli.Get("/api/queue?limit=2")->body).size() == 2);

    const std::string cube = items[0].at("cube_id");
    const int slice = items[0].at("slice_index");
    const std::string base = "/api/slices/" + cube + "/" + std::to_string(slice);
    auto img = cli.Get(base + "/image");
    REQUIRE(img);
    CHECK(img->status == 200);
    CHECK(img->get_header_value("Content-Type") == "image/png");
    CHECK(as_bytes(img->body) == read_file_bytes(f.dir / "queue" / f.queue[0].image));
    CHECK(as_bytes(cli.Get(base + "/heatmap")->body) == read_file_bytes(f.dir / "queue" / f.queue[0].heatmap));
    CHECK(as_bytes(cli.Get(base + "/mask")->body) == read_file_bytes(f.dir / "queue" / f.queue[0].machine_mask));

    const Bitmap corrected = square_mask(16, 3, 9);
    const auto png = encode_png(mask_to_gray(corrected));
    auto post = cli.Post("/api/corrections", correction_body(cube, slice, png).dump(), "application/json");
    REQUIRE(post);
    CHECK(post->status == 200);
    const json r1 = json::parse(post->body);
    CHECK(r1.at("correction_id") == "corr-000001");
    CHECK(r1.at("duplicate") == false);

    auto again = cli.Post("/api/corrections", correction_body(cube, slice, png).dump(), "application/json");
    CHECK(json::parse(again->body).at("correction_id") == "corr-000001");
    CHECK(json::parse(again->body).at("duplicate") == true);
    CHECK(read_correction_log(service.log_file()).size() == 1);

    const json corrected_items = json::parse(cli.Get("/api/queue?status=corrected")->body);
    REQUIRE(corrected_items.size() == 1);
    CHECK(corrected_items[0].at("correction_id") == "corr-000001");
    CHECK(json::parse(cli.Get("/api/queue?status=pending")->body).size() == 3);
    CHECK(gray_to_mask(decode_png(as_bytes(cli.Get(base + "/mask")->body))) == corrected);

    auto exp = cli.Get("/api/export");
    REQUIRE(exp);
    CHECK(exp->status == 200);
    const DatasetManifest out = read_manifest(f.dir / "export" / "manifest.json");
    REQUIRE(out.cubes.size() == f.data.cubes.size());
    bool noted = false;
    for (const auto& n : out.notes) noted = noted || n.find("corr-000001") != std::string::npos;
    CHECK(noted);
    for (std::size_t c = 0; c < out.cubes.size(); ++c) {
        const CubePair orig = load_cube(f.data, c);
        const CubePair now = load_cube(out, c);
        CHECK(now.image.volume.voxels == orig.image.volume.voxels);
        const auto orig_masks = unstack_masks(orig.mask.volume);
        const auto now_masks = unstack_masks(now.mask.volume);
        for (int z = 0; z < 3; ++z) {
            if (out.cubes[c].cube_id == cube && z == slice) {
                CHECK(now_masks[z] == corrected);
            } else {
                CHECK(now_masks[z] == orig_masks[z]);
            }
        }
    }
    // The source dataset is untouched.
    CHECK(read_manifest(f.options.dataset_manifest).cubes[0].masks == f.data.cubes[0].masks);
}

TEST_CASE("request errors name the problem") {
    Fixture f;
    ReviewService service(f.options);
    Running run(service);
    auto cli = run.client();
    const std::string cube = f.queue[0].cube_id;
    const int slice = f.queue[0].slice_index;

    const auto wrong = encode_png(mask_to_gray(square_mask(8, 1, 4)));
    auto r = cli.Post("/api/corrections", correction_body(cube, slice, wrong).dump(), "application/json");
    REQUIRE(r);
    CHECK(r->status == 400);
    const std::string msg = json::parse(r->body).at("error");
    CHECK(msg.find("(8, 8)") != std::string::npos);
    CHECK(msg.find("(H, W) = (16, 16)") != std::string::npos);

    GrayImage gray{16, 16, std::vector<std::uint8_t>(256, 77)};
    r = cli.Post("/api/corrections", correction_body(cube, slice, encode_png(gray)).dump(), "application/json");
    CHECK(r->status == 400);
    r = cli.Post("/api/corrections", correction_body(cube, slice, as_bytes("not a png")).dump(),
                 "application/json");
    CHECK(r->status == 400);
    json bad_b64 = correction_body(cube, slice, wrong);
    bad_b64["mask_png_base64"] = "a";
    CHECK(cli.Post("/api/corrections", bad_b64.dump(), "application/json")->status == 400);
    CHECK(cli.Post("/api/corrections", "{not json", "application/json")->status == 400);
    CHECK(cli.Post("/api/corrections", json{{"cube_id", cube}}.dump(), "application/json")->status == 400);

    const auto ok = encode_png(mask_to_gray(square_mask(16, 2, 5)));
    r = cli.Post("/api/corrections", correction_body("nope", 0, ok).dump(), "application/json");
    CHECK(r->status == 404);
    CHECK(cli.Get("/api/slices/" + cube + "/99/image")->status == 404);
    CHECK(cli.Get("/api/slices/nope/0/mask")->status == 404);
    CHECK(cli.Get("/api/queue?status=weird")->status == 400);
    CHECK(cli.Get("/api/queue?limit=x")->status == 400);
    CHECK(cli.Get("/api/export")->status == 409);
    CHECK(read_correction_log(service.log_file()).empty());
}

TEST_CASE("resubmitted machine masks round-trip byte-identical") {
    Fixture f;
    ReviewService service(f.options);
    Running run(service);
    auto cli = run.client();
    for (const auto& rec : f.queue) {
        const std::string base = "/api/slices/" + rec.cube_id + "/" + std::to_string(rec.slice_index);
        const std::string machine = cli.Get(base + "/mask")->body;
        CHECK(as_bytes(machine) == read_file_bytes(f.dir / "queue" / rec.machine_mask));
        auto r = cli.Post("/api/corrections", correction_body(rec.cube_id, rec.slice_index, as_bytes(machine)).dump(),
                          "application/json");
        REQUIRE(r->status == 200);
        const std::string id = json::parse(r->body).at("correction_id");
        CHECK(as_bytes(cli.Get(base + "/mask")->body) == as_bytes(machine));
        CHECK(read_file_bytes(f.options.state_dir / "masks" / (id + ".png")) == as_bytes(machine));
    }
}

TEST_CASE("replaying the log reproduces service state") {
    Fixture f;
    json before_queue;
    LoopState before;
    {
        ReviewService service(f.options);
        for (int k = 0; k < 3; ++k) {
            CorrectionSubmission sub{f.queue[k % 2].cube_id, f.queue[k % 2].slice_index, "a",
                                     encode_png(mask_to_gray(square_mask(16, k, 6 + k)))};
            CHECK_FALSE(service.ingest(sub).duplicate);
        }
        before = service.state();
        before_queue = service.queue();
    }
    const auto log = read_correction_log(f.options.state_dir / "corrections.jsonl");
    REQUIRE(log.size() == 3);
    CHECK_FALSE(log[0].supersedes.has_value());
    CHECK(log[2].supersedes == log[0].correction_id);
    CHECK(replay(log) == before);
    CHECK(before.latest.size() == 2);
    CHECK(before.log_length == 3);

    ReviewService restarted(f.options);
    CHECK(restarted.state() == before);
    CHECK(restarted.queue() == before_queue);
    CorrectionSubmission next{f.queue[3].cube_id, f.queue[3].slice_index, "b",
                              encode_png(mask_to_gray(square_mask(16, 1, 2)))};
    CHECK(restarted.ingest(next).correction_id == "corr-000004");
}

TEST_CASE("queue items with missing assets are marked broken") {
    Fixture f;
    fs::remove(f.dir / "queue" / f.queue[1].image);
    ReviewService service(f.options);
    const json broken = service.queue("broken");
    REQUIRE(broken.size() == 1);
    CHECK(broken[0].at("cube_id") == f.queue[1].cube_id);
    CHECK(service.queue("pending").size() == 3);
    CorrectionSubmission sub{f.queue[1].cube_id, f.queue[1].slice_index, "",
                             encode_png(mask_to_gray(square_mask(16, 1, 3)))};
    try {
        service.ingest(sub);
        FAIL("expected a conflict");
    } catch (const ServiceError& e) {
        CHECK(e.status() == 409);
    }
}

TEST_CASE("service configuration errors") {
    Fixture f;
    ServiceOptions missing = f.options;
    missing.queue_dir = f.dir / "nowhere";
    CHECK_THROWS_AS(ReviewService{missing}, ValidationError);

    ServiceOptions no_data = f.options;
    no_data.dataset_manifest.clear();
    ReviewService service(no_data);
    service.ingest({f.queue[0].cube_id, f.queue[0].slice_index, "",
                    encode_png(mask_to_gray(square_mask(16, 1, 3)))});
    try {
        service.export_retrain();
        FAIL("expected unavailable");
    } catch (const ServiceError& e) {
        CHECK(e.status() == 503);
    }
    CHECK_THROWS_AS(export_retrain_manifest(f.data, service.state(), f.options.state_dir, f.dir / "data"),
                    ValidationError);
    CHECK_THROWS_AS(export_retrain_manifest(f.data, LoopState{}, f.options.state_dir, f.dir / "x"),
                    ValidationError);
}
