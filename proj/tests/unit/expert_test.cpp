#include <doctest.h>

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "helpers.hpp"
#include "hotm/expert.hpp"

using namespace hotm;
namespace fs = std::filesystem;

namespace {

ArchSpec blob_arch() { return {ArchKind::Convnet, 2, 8, 1, 8, 8, 3, NormKind::Instance}; }

LabeledDataset& blobs() {
    static LabeledDataset ds = generate_blobs(3, 40, 8, 2);
    return ds;
}

fs::path temp_dir(const char* name) {
    fs::path dir = fs::temp_directory_path() / "hotm_tests" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("teacher training records one snapshot per epoch") {
    auto traj = train_teacher(blobs(), blob_arch(), 3, 0.05, 64, 1);
    CHECK(traj.snapshots.size() == 4);
    CHECK(traj.epoch_losses.size() == 3);
    // Snapshot zero is the seeded initialization.
    auto init = init_params<float>(blob_arch(), 1);
    CHECK(hotm::testing::bits_equal(traj.snapshots[0].data(), init.values.data()));
    CHECK_THROWS_AS(train_teacher(blobs(), blob_arch(), 1, 0.05, 64, 1), InputError);
}

TEST_CASE("zero learning rate freezes the trajectory") {
    auto traj = train_teacher(blobs(), blob_arch(), 3, 0.0, 64, 1);
    for (const auto& snap : traj.snapshots) {
        CHECK(hotm::testing::bits_equal(snap.data(), traj.snapshots[0].data()));
    }
}

TEST_CASE("training reduces the loss on separable data") {
    auto traj = train_teacher(blobs(), blob_arch(), 8, 0.05, 64, 3);
    CHECK(traj.epoch_losses.back() < traj.epoch_losses.front());
}

TEST_CASE("divergent teachers fail with the epoch index") {
    ArchSpec mlp{ArchKind::Mlp, 1, 8, 1, 8, 8, 3, NormKind::None};
    try {
        train_teacher(blobs(), mlp, 4, 1e37, 64, 3);
        FAIL("expected a training error");
    } catch (const TrainingError& e) {
        CHECK(e.epoch >= 1);
        CHECK(e.epoch <= 4);
    }
}

TEST_CASE("teacher training is deterministic") {
    auto a = train_teacher(blobs(), blob_arch(), 3, 0.05, 32, 5);
    auto b = train_teacher(blobs(), blob_arch(), 3, 0.05, 32, 5);
    for (size_t s = 0; s < a.snapshots.size(); ++s) {
        CHECK(hotm::testing::bits_equal(a.snapshots[s].data(), b.snapshots[s].data()));
    }
}

TEST_CASE("trajectory persistence round trip") {
    auto traj = train_teacher(blobs(), blob_arch(), 3, 0.05, 64, 8);
    auto dir = temp_dir("traj_roundtrip");
    save_trajectory(traj, dir);
    auto loaded = load_trajectory(dir);
    CHECK(loaded.meta.arch == traj.meta.arch);
    CHECK(loaded.meta.seed == traj.meta.seed);
    CHECK(loaded.meta.epochs == traj.meta.epochs);
    CHECK(loaded.meta.dataset_sha256 == traj.meta.dataset_sha256);
    CHECK(loaded.layout == traj.layout);
    REQUIRE(loaded.snapshots.size() == traj.snapshots.size());
    for (size_t s = 0; s < traj.snapshots.size(); ++s) {
        CHECK(hotm::testing::bits_equal(loaded.snapshots[s].data(), traj.snapshots[s].data()));
    }
}

TEST_CASE("trajectory integrity failures") {
    auto traj = train_teacher(blobs(), blob_arch(), 3, 0.05, 64, 8);
    SUBCASE("missing snapshot records") {
        auto dir = temp_dir("traj_records");
        save_trajectory(traj, dir);
        nlohmann::json manifest;
        std::ifstream(dir / "manifest.json") >> manifest;
        manifest["epochs"] = 10;
        std::ofstream(dir / "manifest.json", std::ios::trunc) << manifest.dump();
        CHECK_THROWS_AS(load_trajectory(dir), IntegrityError);
    }
    SUBCASE("architecture does not match the layout") {
        auto dir = temp_dir("traj_arch");
        save_trajectory(traj, dir);
        nlohmann::json manifest;
        std::ifstream(dir / "manifest.json") >> manifest;
        manifest["arch"]["width"] = 16;
        std::ofstream(dir / "manifest.json", std::ios::trunc) << manifest.dump();
        CHECK_THROWS_AS(load_trajectory(dir), IntegrityError);
    }
    SUBCASE("param_count disagrees with the layout") {
        auto dir = temp_dir("traj_count");
        save_trajectory(traj, dir);
        nlohmann::json manifest;
        std::ifstream(dir / "manifest.json") >> manifest;
        manifest["param_count"] = 17;
        std::ofstream(dir / "manifest.json", std::ios::trunc) << manifest.dump();
        CHECK_THROWS_AS(load_trajectory(dir), IntegrityError);
    }
}

TEST_CASE("segment sampling") {
    auto traj = train_teacher(blobs(), blob_arch(), 6, 0.05, 64, 4);
    std::vector<Trajectory> pool{traj};
    Rng rng(1);

    auto seg = sample_segment(pool, 0, 0, 2, rng);
    CHECK(seg.t == 0);
    CHECK(hotm::testing::bits_equal(seg.theta_start.data(), traj.snapshots[0].data()));
    CHECK(hotm::testing::bits_equal(seg.theta_mid.data(), traj.snapshots[1].data()));
    CHECK(hotm::testing::bits_equal(seg.theta_target.data(), traj.snapshots[2].data()));

    // floor(5/2) = 2
    auto wide = segment_at(traj, 1, 5);
    CHECK(hotm::testing::bits_equal(wide.theta_mid.data(), traj.snapshots[3].data()));

    CHECK_THROWS_AS(sample_segment({}, 0, 0, 2, rng), InputError);
    CHECK_THROWS_AS(sample_segment(pool, 0, 5, 2, rng), InputError);
    CHECK_THROWS_AS(segment_at(traj, 0, 1), InputError);

    // t stays within bounds over many draws
    for (int i = 0; i < 100; ++i) {
        auto s = sample_segment(pool, 1, 3, 2, rng);
        CHECK(s.t >= 1);
        CHECK(s.t <= 3);
    }
}
