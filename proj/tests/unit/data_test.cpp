#include <doctest.h>

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "helpers.hpp"
#include "hotm/data.hpp"
#include "hotm/eval.hpp"
#include "hotm/expert.hpp"

using namespace hotm;
namespace fs = std::filesystem;

namespace {
fs::path temp_dir(const char* name) {
    fs::path dir = fs::temp_directory_path() / "hotm_tests" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}
}  // namespace

TEST_CASE("blob generation is deterministic and class-separated") {
    auto a = generate_blobs(3, 20, 8, 123);
    auto b = generate_blobs(3, 20, 8, 123);
    CHECK(hotm::testing::bits_equal(a.images.data(), b.images.data()));
    CHECK(a.labels == b.labels);

    auto c = generate_blobs(3, 20, 8, 124);
    CHECK_FALSE(hotm::testing::bits_equal(a.images.data(), c.images.data()));

    // Pixelwise class means must differ pairwise.
    const int64_t chw = 64;
    std::vector<std::vector<double>> means(3, std::vector<double>(chw, 0.0));
    for (int64_t i = 0; i < a.n(); ++i) {
        for (int64_t p = 0; p < chw; ++p) {
            means[a.labels[i]][p] += a.images.data()[i * chw + p] / 20.0;
        }
    }
    for (int u = 0; u < 3; ++u) {
        for (int v = u + 1; v < 3; ++v) {
            double dist = 0;
            for (int64_t p = 0; p < chw; ++p) {
                dist += (means[u][p] - means[v][p]) * (means[u][p] - means[v][p]);
            }
            CHECK(dist > 0.0);
        }
    }

    CHECK_THROWS_AS(generate_blobs(50, 5, 4, 0), ConstructionError);
    CHECK_THROWS_AS(generate_blobs(1, 5, 8, 0), InputError);
}

TEST_CASE("dataset save and load round trip") {
    auto ds = generate_blobs(3, 10, 8, 5);
    auto dir = temp_dir("roundtrip");
    save_dataset(ds, dir);
    auto loaded = load_dataset(dir);
    CHECK(hotm::testing::bits_equal(ds.images.data(), loaded.images.data()));
    CHECK(ds.labels == loaded.labels);
    CHECK(ds.class_count == loaded.class_count);
    // Loading twice gives identical bits.
    auto again = load_dataset(dir / "manifest.json");
    CHECK(hotm::testing::bits_equal(loaded.images.data(), again.images.data()));
}

TEST_CASE("dataset integrity failures") {
    auto ds = generate_blobs(3, 10, 8, 6);
    SUBCASE("truncated image payload") {
        auto dir = temp_dir("truncated");
        save_dataset(ds, dir);
        fs::resize_file(dir / "images.bin", 100);
        CHECK_THROWS_AS(load_dataset(dir), IntegrityError);
    }
    SUBCASE("manifest count disagrees with labels") {
        auto dir = temp_dir("count_mismatch");
        save_dataset(ds, dir);
        std::ofstream(dir / "labels.bin", std::ios::binary | std::ios::trunc)
            .write("\0\0\0\0", 4);
        CHECK_THROWS_AS(load_dataset(dir), IntegrityError);
    }
    SUBCASE("unknown format version") {
        auto dir = temp_dir("version");
        save_dataset(ds, dir);
        nlohmann::json manifest;
        std::ifstream(dir / "manifest.json") >> manifest;
        manifest["format_version"] = 2;
        std::ofstream(dir / "manifest.json", std::ios::trunc) << manifest.dump();
        CHECK_THROWS_AS(load_dataset(dir), VersionError);
    }
}

TEST_CASE("synthetic initialization") {
    auto real = generate_blobs(3, 20, 8, 7);
    auto syn = init_synthetic(real, 1, 9);
    CHECK(syn.images.shape() == Shape{3, 1, 8, 8});
    CHECK(syn.labels == std::vector<uint32_t>{0, 1, 2});
    CHECK(syn.alpha == 0.01f);

    // Every synthetic image is a bit-exact copy of some real image of the
    // same class.
    const int64_t chw = 64;
    for (int64_t s = 0; s < 3; ++s) {
        bool found = false;
        for (int64_t i = 0; i < real.n() && !found; ++i) {
            if (real.labels[i] != syn.labels[s]) continue;
            found = std::memcmp(real.images.data().data() + i * chw,
                                syn.images.data().data() + s * chw, chw * sizeof(float)) == 0;
        }
        CHECK(found);
    }

    auto syn2 = init_synthetic(real, 1, 9);
    CHECK(hotm::testing::bits_equal(syn.images.data(), syn2.images.data()));

    auto tiny = generate_blobs(3, 2, 8, 7);
    CHECK_THROWS_AS(init_synthetic(tiny, 3, 0), InputError);
}

TEST_CASE("a fresh convnet separates blobs") {
    auto train = generate_blobs(3, 200, 8, 0);
    auto test = generate_blobs(3, 100, 8, 1);
    ArchSpec arch{ArchKind::Convnet, 2, 16, 1, 8, 8, 3, NormKind::Instance};
    auto traj = train_teacher(train, arch, 20, 0.05, 64, 0);
    double acc = accuracy(arch, traj.snapshots.back(), test.images, test.labels);
    CHECK(acc > 0.95);
}
