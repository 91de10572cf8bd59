#pragma once

// Teacher training, per-epoch trajectory recording, bit-exact persistence and
// (start, intermediate, target) segment sampling for the distillation loop.
//
// On-disk trajectory format (one directory):
//   manifest.json   {format_version:1, arch, seed, epochs, teacher_lr,
//                    batch_size, param_count, layout, dataset_sha256}
//   snapshots.bin   (epochs+1) consecutive records of param_count
//                   little-endian float32 values

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hotm/data.hpp"
#include "hotm/model.hpp"
#include "hotm/rng.hpp"

namespace hotm {

struct TrajectoryMeta {
    ArchSpec arch;
    uint64_t seed = 0;
    int epochs = 0;
    double teacher_lr = 0.01;
    int batch_size = 256;
    std::string dataset_sha256;
};

struct Trajectory {
    std::vector<Tensor> snapshots;  // epochs+1 flat parameter vectors, index = epoch
    Layout layout;
    TrajectoryMeta meta;
    std::vector<double> epoch_losses;  // mean loss per epoch; in-memory only
};

// Plain SGD (no momentum, no weight decay) over shuffled mini-batches, one
// snapshot after every epoch plus the initial one. Deterministic per seed.
Trajectory train_teacher(const LabeledDataset& real, const ArchSpec& arch, int epochs,
                         double teacher_lr, int batch_size, uint64_t seed);

void save_trajectory(const Trajectory& traj, const std::filesystem::path& dir);
Trajectory load_trajectory(const std::filesystem::path& dir);

// Expert snapshots at t, t + floor(span/2) and t + span.
template <typename S>
struct SegmentT {
    TensorT<S> theta_start;
    TensorT<S> theta_mid;
    TensorT<S> theta_target;
    int t = 0;
    int span = 0;
};

using ExpertSegment = SegmentT<float>;

ExpertSegment segment_at(const Trajectory& traj, int t, int span);

// Trajectory chosen uniformly, start epoch uniform in [t_min, t_max].
ExpertSegment sample_segment(const std::vector<Trajectory>& pool, int t_min, int t_max, int span,
                             Rng& rng);

}  // namespace hotm
