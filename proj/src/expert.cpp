#include "hotm/expert.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "train_loop.hpp"

namespace hotm {

namespace fs = std::filesystem;
using nlohmann::json;

Trajectory train_teacher(const LabeledDataset& real, const ArchSpec& arch, int epochs,
                         double teacher_lr, int batch_size, uint64_t seed) {
    if (epochs < 2) throw InputError("train_teacher needs at least 2 epochs");
    if (batch_size < 1) throw InputError("batch_size must be positive");
    if (arch.in_c != real.c() || arch.in_h != real.h() || arch.in_w != real.w() ||
        arch.num_classes != real.class_count) {
        throw DimensionError("arch input " + std::to_string(arch.in_c) + "x" +
                             std::to_string(arch.in_h) + "x" + std::to_string(arch.in_w) + "/" +
                             std::to_string(arch.num_classes) + " classes does not match dataset");
    }

    Trajectory traj;
    traj.meta = {arch, seed, epochs, teacher_lr, batch_size, dataset_fingerprint(real)};
    ParamVector init = init_params<float>(arch, seed);
    traj.layout = init.layout;
    traj.snapshots.reserve(static_cast<size_t>(epochs) + 1);
    traj.snapshots.push_back(init.values.detach());
    traj.epoch_losses.reserve(static_cast<size_t>(epochs));

    detail::SgdOptions opt{teacher_lr, epochs, batch_size, seed};
    detail::sgd_train<float>(arch, init.values, real.images, real.labels, opt,
                             [&](int, const Tensor& theta, double loss) {
                                 traj.snapshots.push_back(theta.detach());
                                 traj.epoch_losses.push_back(loss);
                             });
    return traj;
}

namespace {

json layout_to_json(const Layout& layout) {
    json arr = json::array();
    for (const auto& e : layout) {
        arr.push_back({{"name", e.name}, {"shape", e.shape}, {"offset", e.offset},
                       {"length", e.length}});
    }
    return arr;
}

Layout layout_from_json(const json& arr) {
    Layout layout;
    for (const auto& e : arr) {
        LayoutEntry entry;
        entry.name = e.at("name").get<std::string>();
        entry.shape = e.at("shape").get<Shape>();
        entry.offset = e.at("offset").get<int64_t>();
        entry.length = e.at("length").get<int64_t>();
        layout.push_back(std::move(entry));
    }
    return layout;
}

}  // namespace

void save_trajectory(const Trajectory& traj, const fs::path& dir) {
    fs::create_directories(dir);
    int64_t count = traj.layout.empty() ? 0 : traj.layout.back().offset + traj.layout.back().length;
    json manifest{{"format_version", 1},
                  {"arch", traj.meta.arch.to_json()},
                  {"seed", traj.meta.seed},
                  {"epochs", traj.meta.epochs},
                  {"teacher_lr", traj.meta.teacher_lr},
                  {"batch_size", traj.meta.batch_size},
                  {"param_count", count},
                  {"layout", layout_to_json(traj.layout)},
                  {"dataset_sha256", traj.meta.dataset_sha256}};
    {
        std::ofstream out(dir / "manifest.json", std::ios::trunc);
        if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
        out << manifest.dump(2) << '\n';
    }
    std::ofstream out(dir / "snapshots.bin", std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + (dir / "snapshots.bin").string());
    for (const auto& snap : traj.snapshots) {
        const auto& v = snap.data();
        out.write(reinterpret_cast<const char*>(v.data()),
                  static_cast<std::streamsize>(v.size() * sizeof(float)));
    }
    if (!out) throw IoError("short write to " + (dir / "snapshots.bin").string());
}

Trajectory load_trajectory(const fs::path& dir) {
    json manifest;
    {
        std::ifstream in(dir / "manifest.json");
        if (!in) throw IoError("cannot open " + (dir / "manifest.json").string());
        try {
            in >> manifest;
        } catch (const json::exception& e) {
            throw IntegrityError("malformed trajectory manifest: " + std::string(e.what()));
        }
    }
    int version = manifest.at("format_version").get<int>();
    if (version != 1) {
        throw VersionError("unknown trajectory format version " + std::to_string(version));
    }

    Trajectory traj;
    traj.meta.arch = ArchSpec::from_json(manifest.at("arch"));
    traj.meta.seed = manifest.at("seed").get<uint64_t>();
    traj.meta.epochs = manifest.at("epochs").get<int>();
    traj.meta.teacher_lr = manifest.at("teacher_lr").get<double>();
    traj.meta.batch_size = manifest.at("batch_size").get<int>();
    traj.meta.dataset_sha256 = manifest.at("dataset_sha256").get<std::string>();
    traj.layout = layout_from_json(manifest.at("layout"));

    const Layout expected = layout_for(traj.meta.arch);
    if (traj.layout != expected) {
        throw IntegrityError("trajectory layout does not match its architecture");
    }
    int64_t count = manifest.at("param_count").get<int64_t>();
    int64_t layout_total = traj.layout.back().offset + traj.layout.back().length;
    if (count != layout_total) {
        throw IntegrityError("manifest param_count " + std::to_string(count) +
                             " disagrees with layout total " + std::to_string(layout_total));
    }

    std::ifstream in(dir / "snapshots.bin", std::ios::binary | std::ios::ate);
    if (!in) throw IoError("cannot open " + (dir / "snapshots.bin").string());
    int64_t bytes = static_cast<int64_t>(in.tellg());
    in.seekg(0);
    int64_t expected_bytes =
        (int64_t(traj.meta.epochs) + 1) * count * static_cast<int64_t>(sizeof(float));
    if (bytes != expected_bytes) {
        throw IntegrityError("snapshots.bin holds " + std::to_string(bytes) +
                             " bytes, manifest expects " + std::to_string(expected_bytes));
    }
    traj.snapshots.reserve(static_cast<size_t>(traj.meta.epochs) + 1);
    for (int s = 0; s <= traj.meta.epochs; ++s) {
        std::vector<float> values(static_cast<size_t>(count));
        in.read(reinterpret_cast<char*>(values.data()),
                static_cast<std::streamsize>(values.size() * sizeof(float)));
        if (!in) throw IoError("short read from " + (dir / "snapshots.bin").string());
        traj.snapshots.push_back(Tensor::from_data({count}, std::move(values)));
    }

    // Epoch zero must be the seeded initialization.
    ParamVector init = init_params<float>(traj.meta.arch, traj.meta.seed);
    if (traj.snapshots[0].data() != init.values.data()) {
        throw IntegrityError("trajectory snapshot 0 does not match init for seed " +
                             std::to_string(traj.meta.seed));
    }
    return traj;
}

ExpertSegment segment_at(const Trajectory& traj, int t, int span) {
    if (span < 2) throw InputError("segment span must be at least 2");
    if (t < 0 || t + span > traj.meta.epochs) {
        throw InputError("segment [" + std::to_string(t) + ", " + std::to_string(t + span) +
                         "] exceeds trajectory of " + std::to_string(traj.meta.epochs) +
                         " epochs");
    }
    ExpertSegment seg;
    seg.theta_start = traj.snapshots[static_cast<size_t>(t)].detach();
    seg.theta_mid = traj.snapshots[static_cast<size_t>(t + span / 2)].detach();
    seg.theta_target = traj.snapshots[static_cast<size_t>(t + span)].detach();
    seg.t = t;
    seg.span = span;
    return seg;
}

ExpertSegment sample_segment(const std::vector<Trajectory>& pool, int t_min, int t_max, int span,
                             Rng& rng) {
    if (pool.empty()) throw InputError("sample_segment: empty trajectory pool");
    if (t_min < 0 || t_min > t_max) throw InputError("sample_segment: invalid epoch range");
    for (const auto& traj : pool) {
        if (t_max + span > traj.meta.epochs) {
            throw InputError("sample_segment: t_max + span exceeds a trajectory of " +
                             std::to_string(traj.meta.epochs) + " epochs");
        }
    }
    const auto& traj = pool[static_cast<size_t>(rng.uniform_int(int64_t(pool.size())))];
    int t = t_min + static_cast<int>(rng.uniform_int(int64_t(t_max - t_min + 1)));
    return segment_at(traj, t, span);
}

}  // namespace hotm
