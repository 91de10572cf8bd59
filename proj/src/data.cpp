#include "hotm/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "hotm/digest.hpp"
#include "hotm/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "binary formats are little-endian; big-endian hosts are unsupported");

namespace hotm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Blob rendering knobs, in units of the image side where noted. Every sample
// also carries one distractor blob at a uniformly random position: a single
// real image is an ambiguous class template, while class statistics over many
// samples stay cleanly separable.
constexpr double kSigmaFrac = 0.16;       // blob radius / image side
constexpr double kSigmaJitter = 0.25;     // relative radius variation
constexpr double kCenterJitterFrac = 0.17;  // class-center jitter / image side
constexpr double kAmpLo = 0.55;
constexpr double kAmpHi = 1.0;
constexpr double kDistractorAmpLo = 0.45;
constexpr double kDistractorAmpHi = 0.9;
constexpr double kPixelNoise = 0.15;      // additive uniform noise ceiling

void write_binary(const fs::path& path, const void* bytes, size_t count) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(static_cast<const char*>(bytes), static_cast<std::streamsize>(count));
    if (!out) throw IoError("short write to " + path.string());
}

std::vector<char> read_binary(const fs::path& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw IoError("cannot open " + path.string());
    auto size = in.tellg();
    in.seekg(0);
    std::vector<char> bytes(static_cast<size_t>(size));
    in.read(bytes.data(), size);
    if (!in) throw IoError("short read from " + path.string());
    return bytes;
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw IntegrityError("malformed JSON in " + path.string() + ": " + e.what());
    }
    return j;
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << j.dump(2) << '\n';
}

// Greedy max-min-distance placement of class centers on the odd-coordinate
// grid. Deterministic; independent of the sampling seed so class positions
// stay comparable across datasets of the same geometry.
std::vector<std::pair<double, double>> class_centers(int class_count, int hw) {
    std::vector<std::pair<double, double>> cells;
    for (int y = 1; y < hw; y += 2) {
        for (int x = 1; x < hw; x += 2) cells.emplace_back(double(y), double(x));
    }
    if (static_cast<size_t>(class_count) > cells.size()) {
        throw ConstructionError("image side " + std::to_string(hw) + " cannot host " +
                                std::to_string(class_count) + " distinct blob centers (max " +
                                std::to_string(cells.size()) + ")");
    }
    std::vector<std::pair<double, double>> chosen{cells[0]};
    std::vector<bool> used(cells.size(), false);
    used[0] = true;
    while (chosen.size() < static_cast<size_t>(class_count)) {
        double best = -1.0;
        size_t best_i = 0;
        for (size_t i = 0; i < cells.size(); ++i) {
            if (used[i]) continue;
            double nearest = 1e300;
            for (const auto& c : chosen) {
                double dy = cells[i].first - c.first;
                double dx = cells[i].second - c.second;
                nearest = std::min(nearest, dy * dy + dx * dx);
            }
            if (nearest > best) {
                best = nearest;
                best_i = i;
            }
        }
        used[best_i] = true;
        chosen.push_back(cells[best_i]);
    }
    return chosen;
}

}  // namespace

LabeledDataset generate_blobs(int class_count, int per_class, int image_hw, uint64_t seed) {
    if (class_count < 2) throw InputError("generate_blobs needs at least 2 classes");
    if (per_class < 1) throw InputError("generate_blobs needs at least 1 sample per class");
    if (image_hw < 2) throw ConstructionError("image side must be at least 2");
    auto centers = class_centers(class_count, image_hw);

    const int64_t n = int64_t(class_count) * per_class;
    const int64_t hw = image_hw;
    std::vector<float> images(static_cast<size_t>(n * hw * hw));
    std::vector<uint32_t> labels(static_cast<size_t>(n));
    Rng rng(substream(seed, 0xB10B));

    const double sigma_base = kSigmaFrac * image_hw;
    const double jitter = kCenterJitterFrac * image_hw;
    int64_t sample = 0;
    for (int cls = 0; cls < class_count; ++cls) {
        for (int s = 0; s < per_class; ++s, ++sample) {
            labels[static_cast<size_t>(sample)] = static_cast<uint32_t>(cls);
            double cy = centers[cls].first + rng.uniform(-jitter, jitter);
            double cx = centers[cls].second + rng.uniform(-jitter, jitter);
            double sigma = sigma_base * (1.0 + rng.uniform(-kSigmaJitter, kSigmaJitter));
            double amp = rng.uniform(kAmpLo, kAmpHi);
            double dy_c = rng.uniform(1.0, image_hw - 2.0);
            double dx_c = rng.uniform(1.0, image_hw - 2.0);
            double d_sigma = sigma_base * (1.0 + rng.uniform(-kSigmaJitter, kSigmaJitter));
            double d_amp = rng.uniform(kDistractorAmpLo, kDistractorAmpHi);
            double inv = 1.0 / (2.0 * sigma * sigma);
            double d_inv = 1.0 / (2.0 * d_sigma * d_sigma);
            float* img = images.data() + sample * hw * hw;
            for (int64_t y = 0; y < hw; ++y) {
                for (int64_t x = 0; x < hw; ++x) {
                    double dy = double(y) - cy;
                    double dx = double(x) - cx;
                    double v = amp * std::exp(-(dy * dy + dx * dx) * inv);
                    double ddy = double(y) - dy_c;
                    double ddx = double(x) - dx_c;
                    v += d_amp * std::exp(-(ddy * ddy + ddx * ddx) * d_inv);
                    v += rng.uniform(0.0, kPixelNoise);
                    img[y * hw + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
                }
            }
        }
    }

    LabeledDataset ds;
    ds.images = Tensor::from_data({n, 1, hw, hw}, std::move(images));
    ds.labels = std::move(labels);
    ds.class_count = class_count;
    return ds;
}

void save_dataset(const LabeledDataset& ds, const fs::path& dir) {
    fs::create_directories(dir);
    json manifest{{"format_version", 1},
                  {"n", ds.n()},
                  {"c", ds.c()},
                  {"h", ds.h()},
                  {"w", ds.w()},
                  {"class_count", ds.class_count},
                  {"dtype", "f32le"},
                  {"labels_dtype", "u32le"}};
    write_json(dir / "manifest.json", manifest);
    const auto& img = ds.images.data();
    write_binary(dir / "images.bin", img.data(), img.size() * sizeof(float));
    write_binary(dir / "labels.bin", ds.labels.data(), ds.labels.size() * sizeof(uint32_t));
}

LabeledDataset load_dataset(const fs::path& manifest_or_dir) {
    fs::path manifest_path = manifest_or_dir;
    if (fs::is_directory(manifest_path)) manifest_path /= "manifest.json";
    json manifest = read_json(manifest_path);
    const fs::path dir = manifest_path.parent_path();

    int version = manifest.at("format_version").get<int>();
    if (version != 1) {
        throw VersionError("unknown dataset format version " + std::to_string(version));
    }
    if (manifest.at("dtype").get<std::string>() != "f32le" ||
        manifest.at("labels_dtype").get<std::string>() != "u32le") {
        throw VersionError("unsupported dataset dtypes");
    }
    int64_t n = manifest.at("n").get<int64_t>();
    int64_t c = manifest.at("c").get<int64_t>();
    int64_t h = manifest.at("h").get<int64_t>();
    int64_t w = manifest.at("w").get<int64_t>();
    int class_count = manifest.at("class_count").get<int>();
    if (n < 1 || c < 1 || h < 1 || w < 1 || class_count < 1) {
        throw IntegrityError("dataset manifest has non-positive dimensions");
    }
    if (n < class_count) {
        throw IntegrityError("dataset holds fewer samples than classes");
    }

    auto img_bytes = read_binary(dir / "images.bin");
    if (img_bytes.size() != static_cast<size_t>(n * c * h * w) * sizeof(float)) {
        throw IntegrityError("images.bin holds " + std::to_string(img_bytes.size()) +
                             " bytes, manifest expects " +
                             std::to_string(n * c * h * w * sizeof(float)));
    }
    auto label_bytes = read_binary(dir / "labels.bin");
    if (label_bytes.size() != static_cast<size_t>(n) * sizeof(uint32_t)) {
        throw IntegrityError("labels.bin holds " + std::to_string(label_bytes.size()) +
                             " bytes, manifest expects " + std::to_string(n * sizeof(uint32_t)));
    }

    std::vector<float> images(static_cast<size_t>(n * c * h * w));
    std::memcpy(images.data(), img_bytes.data(), img_bytes.size());
    std::vector<uint32_t> labels(static_cast<size_t>(n));
    std::memcpy(labels.data(), label_bytes.data(), label_bytes.size());
    for (uint32_t y : labels) {
        if (y >= static_cast<uint32_t>(class_count)) {
            throw IntegrityError("label " + std::to_string(y) + " out of range for " +
                                 std::to_string(class_count) + " classes");
        }
    }

    LabeledDataset ds;
    ds.images = Tensor::from_data({n, c, h, w}, std::move(images));
    ds.labels = std::move(labels);
    ds.class_count = class_count;
    return ds;
}

SyntheticDataset init_synthetic(const LabeledDataset& real, int ipc, uint64_t seed,
                                float alpha_init) {
    if (ipc < 1) throw InputError("ipc must be at least 1");
    std::vector<std::vector<int64_t>> per_class(static_cast<size_t>(real.class_count));
    for (int64_t i = 0; i < real.n(); ++i) {
        per_class[real.labels[static_cast<size_t>(i)]].push_back(i);
    }
    for (int cls = 0; cls < real.class_count; ++cls) {
        if (per_class[static_cast<size_t>(cls)].size() < static_cast<size_t>(ipc)) {
            throw InputError("class " + std::to_string(cls) + " has only " +
                             std::to_string(per_class[static_cast<size_t>(cls)].size()) +
                             " samples, ipc=" + std::to_string(ipc));
        }
    }

    Rng rng(substream(seed, 0x5EED));
    const int64_t chw = real.c() * real.h() * real.w();
    std::vector<float> images(static_cast<size_t>(int64_t(real.class_count) * ipc * chw));
    std::vector<uint32_t> labels(static_cast<size_t>(real.class_count) * ipc);
    const auto& src = real.images.data();
    int64_t row = 0;
    for (int cls = 0; cls < real.class_count; ++cls) {
        auto& pool = per_class[static_cast<size_t>(cls)];
        rng.shuffle(pool);
        for (int s = 0; s < ipc; ++s, ++row) {
            labels[static_cast<size_t>(row)] = static_cast<uint32_t>(cls);
            const float* from = src.data() + pool[static_cast<size_t>(s)] * chw;
            std::copy(from, from + chw, images.begin() + row * chw);
        }
    }

    SyntheticDataset ds;
    ds.images = Tensor::from_data({row, real.c(), real.h(), real.w()}, std::move(images));
    ds.labels = std::move(labels);
    ds.alpha = alpha_init;
    ds.class_count = real.class_count;
    ds.ipc = ipc;
    return ds;
}

std::string dataset_fingerprint(const LabeledDataset& ds) {
    Sha256 h;
    int64_t dims[5] = {ds.n(), ds.c(), ds.h(), ds.w(), ds.class_count};
    h.update(dims, sizeof(dims));
    const auto& img = ds.images.data();
    h.update(img.data(), img.size() * sizeof(float));
    h.update(ds.labels.data(), ds.labels.size() * sizeof(uint32_t));
    return h.hex();
}

std::string image_payload_sha256(const Tensor& images) {
    const auto& v = images.data();
    return sha256_hex(v.data(), v.size() * sizeof(float));
}

}  // namespace hotm
