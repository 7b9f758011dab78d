#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "veinmatch/gallery.hpp"
#include "veinmatch/infer32.hpp"
#include "veinmatch/pipeline.hpp"
#include "veinmatch/rng.hpp"

using namespace veinmatch;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("veinmatch_gal_" + std::to_string(Rng(std::random_device{}()).next_u64()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

ModelSpec tiny_spec() {
    ModelSpec spec;
    spec.input_height = 16;
    spec.input_width = 16;
    spec.blocks = {{1, 3, 2, true, true}};
    spec.head.hidden = {4};
    spec.head.dropout = 0.0;
    spec.head.classes = 2;
    return spec;
}

GrayImage test_image(std::uint64_t seed) {
    Rng rng(seed);
    GrayImage img(16, 16);
    for (auto& p : img.pixels)
        p = static_cast<std::uint8_t>(40 + rng.uniform_index(180));
    return img;
}

} // namespace

TEST_SUITE("gallery") {
    TEST_CASE("enroll then read back returns identical values") {
        TempDir dir;
        const fs::path gal = dir.path / "subjects.gallery.jsonl";
        const ModelParams model = build_model(tiny_spec(), 3);
        const GalleryEntry e = enroll(gal, "s01", {test_image(1)}, model);

        const Gallery g = read_gallery(gal);
        REQUIRE(g.entries.size() == 1);
        CHECK(g.entries[0].id == "s01");
        CHECK(g.entries[0].embedding == e.embedding);
        CHECK(g.entries[0].norm == e.norm);
        CHECK(g.model_hash == model_content_hash(model));
    }

    TEST_CASE("two identical images enroll the same as a single image") {
        TempDir dir;
        const ModelParams model = build_model(tiny_spec(), 3);
        const GrayImage img = test_image(2);
        const GalleryEntry one =
            enroll(dir.path / "a.gallery.jsonl", "x", {img}, model);
        const GalleryEntry two =
            enroll(dir.path / "b.gallery.jsonl", "x", {img, img}, model);
        REQUIRE(one.embedding.size() == two.embedding.size());
        for (std::size_t i = 0; i < one.embedding.size(); ++i)
            CHECK(two.embedding[i] == doctest::Approx(one.embedding[i]).epsilon(1e-15));
    }

    TEST_CASE("a different model cannot extend an existing gallery") {
        TempDir dir;
        const fs::path gal = dir.path / "subjects.gallery.jsonl";
        enroll(gal, "s01", {test_image(1)}, build_model(tiny_spec(), 3));
        CHECK_THROWS_AS(enroll(gal, "s02", {test_image(2)}, build_model(tiny_spec(), 4)),
                        GalleryError);
    }

    TEST_CASE("verify scores the enrollment image at about 1 and accepts") {
        TempDir dir;
        const fs::path gal = dir.path / "subjects.gallery.jsonl";
        const ModelParams model = build_model(tiny_spec(), 3);
        const GrayImage img = test_image(5);
        enroll(gal, "s01", {img}, model);
        const VerifyResult r = verify(gal, "s01", img, model, 0.9);
        CHECK(r.score == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(r.accepted);
        CHECK(r.seconds >= 0.0);
    }

    TEST_CASE("unknown subjects and mismatched models are errors") {
        TempDir dir;
        const fs::path gal = dir.path / "subjects.gallery.jsonl";
        const ModelParams model = build_model(tiny_spec(), 3);
        enroll(gal, "s01", {test_image(1)}, model);
        CHECK_THROWS_AS(verify(gal, "nobody", test_image(2), model, 0.5), GalleryError);
        CHECK_THROWS_AS(verify(gal, "s01", test_image(2), build_model(tiny_spec(), 9), 0.5),
                        GalleryError);
    }

    TEST_CASE("a reader never sees the in-progress temp file") {
        TempDir dir;
        const fs::path gal = dir.path / "subjects.gallery.jsonl";
        const ModelParams model = build_model(tiny_spec(), 3);
        enroll(gal, "s01", {test_image(1)}, model);
        {
            // a crashed writer leaves a temp file behind
            std::ofstream tmp(gal.string() + ".tmp");
            tmp << "torn half-written data";
        }
        const Gallery g = read_gallery(gal);
        CHECK(g.entries.size() == 1);
        CHECK(g.entries[0].id == "s01");
    }

    TEST_CASE("the advisory lock blocks a second writer") {
        TempDir dir;
        const fs::path gal = dir.path / "subjects.gallery.jsonl";
        const ModelParams model = build_model(tiny_spec(), 3);
        {
            std::ofstream lock(gal.string() + ".lock");
            lock << "held";
        }
        CHECK_THROWS_AS(enroll(gal, "s01", {test_image(1)}, model), GalleryError);
        fs::remove(gal.string() + ".lock");
        enroll(gal, "s01", {test_image(1)}, model); // released lock lets it through
    }

    TEST_CASE("appending preserves earlier entries") {
        TempDir dir;
        const fs::path gal = dir.path / "subjects.gallery.jsonl";
        const ModelParams model = build_model(tiny_spec(), 3);
        enroll(gal, "s01", {test_image(1)}, model);
        enroll(gal, "s02", {test_image(2)}, model);
        const Gallery g = read_gallery(gal);
        REQUIRE(g.entries.size() == 2);
        CHECK(g.entries[0].id == "s01");
        CHECK(g.entries[1].id == "s02");
    }
}

TEST_SUITE("model persistence") {
    TEST_CASE("save/load round-trips parameters bit-exactly") {
        TempDir dir;
        const ModelParams model = build_model(tiny_spec(), 6);
        save_model(model, dir.path / "model");
        const ModelParams back = load_model(dir.path / "model");
        CHECK(checkpoint_bytes(back.tensors) == checkpoint_bytes(model.tensors));
        CHECK(model_content_hash(back) == model_content_hash(model));
    }

    TEST_CASE("content hash tracks both spec and parameters") {
        const ModelParams a = build_model(tiny_spec(), 6);
        ModelParams b = a;
        b.tensors.at("head.out.weight")[0] += 1e-9;
        CHECK(model_content_hash(a) != model_content_hash(b));
        ModelSpec other_spec = tiny_spec();
        other_spec.head.dropout = 0.25;
        ModelParams c = a;
        c.spec = other_spec;
        CHECK(model_content_hash(a) != model_content_hash(c));
    }
}

TEST_SUITE("float inference") {
    TEST_CASE("f32 embeddings agree with the double path") {
        const ModelParams model = build_model(tiny_spec(), 8);
        const Infer32 engine(model);
        for (std::uint64_t seed : {11ULL, 12ULL, 13ULL}) {
            const GrayImage img = test_image(seed);
            const auto fd = extract_embedding(model, to_tensor(img));
            const auto ff = engine.embed(img);
            REQUIRE(fd.size() == ff.size());
            const double cos = cosine_similarity(fd, ff);
            CHECK(cos > 1.0 - 1e-6);
        }
    }
}
