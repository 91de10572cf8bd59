#pragma once

// Dataset ingestion, the blob-image generator used for desk-scale experiments,
// and the learnable synthetic dataset container.
//
// On-disk dataset format (one directory):
//   manifest.json  {format_version:1, n, c, h, w, class_count,
//                   dtype:"f32le", labels_dtype:"u32le"}
//   images.bin     n*c*h*w little-endian float32, C-order
//   labels.bin     n little-endian uint32

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hotm/tensor.hpp"

namespace hotm {

struct LabeledDataset {
    Tensor images;  // [n, c, h, w], detached, immutable after construction
    std::vector<uint32_t> labels;
    int class_count = 0;

    int64_t n() const { return images.shape()[0]; }
    int64_t c() const { return images.shape()[1]; }
    int64_t h() const { return images.shape()[2]; }
    int64_t w() const { return images.shape()[3]; }
};

// Learnable images plus fixed class-balanced labels and the learnable student
// learning rate. Labels never change across outer updates; alpha is clamped
// positive by the distillation loop. Images are not range-constrained.
struct SyntheticDataset {
    Tensor images;  // [(class_count * ipc), c, h, w], detached between updates
    std::vector<uint32_t> labels;
    float alpha = 0.01f;
    int class_count = 0;
    int ipc = 0;
};

// One Gaussian intensity blob per class at a class-specific location, with
// per-sample jitter in position, size and amplitude plus additive pixel noise.
// Deterministic per seed.
LabeledDataset generate_blobs(int class_count, int per_class, int image_hw, uint64_t seed);

void save_dataset(const LabeledDataset& ds, const std::filesystem::path& dir);

// Accepts the dataset directory or the manifest path itself.
LabeledDataset load_dataset(const std::filesystem::path& manifest_or_dir);

// Copies ipc uniformly sampled (distinct) real images per class.
SyntheticDataset init_synthetic(const LabeledDataset& real, int ipc, uint64_t seed,
                                float alpha_init = 0.01f);

// SHA-256 over dims, image payload and labels; recorded in expert manifests.
std::string dataset_fingerprint(const LabeledDataset& ds);

std::string image_payload_sha256(const Tensor& images);

}  // namespace hotm
