#pragma once

// Trains fresh networks from scratch on a distilled dataset and reports
// classification accuracy as mean +/- population standard deviation over
// multiple seeds, including cross-architecture evaluation.

#include <cstdint>
#include <optional>
#include <vector>

#include <json.hpp>

#include "hotm/data.hpp"
#include "hotm/model.hpp"

namespace hotm {

struct EvalReport {
    std::vector<double> per_seed_accuracies;  // fractions in [0, 1]
    double mean = 0.0;
    double stddev = 0.0;  // population
    ArchSpec arch;
    int epochs = 0;
    double eval_lr = 0.0;

    nlohmann::json to_json() const;
    // "77.23±0.65" style: percent, two decimals.
    std::string mean_std_percent() const;
};

// Per seed: fresh initialization, plain SGD at lr = distilled.alpha (or the
// override) for `epochs` epochs on the distilled set, top-1 accuracy on the
// test set. Never mutates the distilled dataset; deterministic per seed.
EvalReport evaluate(const SyntheticDataset& distilled, const LabeledDataset& test,
                    const ArchSpec& arch, const std::vector<uint64_t>& seeds, int epochs,
                    std::optional<double> lr_override = std::nullopt, int jobs = 1);

// Control: trains on ipc random real images per class (fresh draw per seed).
EvalReport baseline_random_subset(const LabeledDataset& real, const LabeledDataset& test, int ipc,
                                  const std::vector<uint64_t>& seeds, const ArchSpec& arch,
                                  int epochs, double lr, int jobs = 1);

std::vector<EvalReport> cross_arch(const SyntheticDataset& distilled, const LabeledDataset& test,
                                   const std::vector<ArchSpec>& archs,
                                   const std::vector<uint64_t>& seeds, int epochs,
                                   std::optional<double> lr_override = std::nullopt, int jobs = 1);

// Top-1 accuracy of a trained parameter vector over a labeled set.
double accuracy(const ArchSpec& arch, const Tensor& params, const Tensor& images,
                const std::vector<uint32_t>& labels);

}  // namespace hotm
