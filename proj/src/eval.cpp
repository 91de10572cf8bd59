#include "hotm/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <thread>

#include "train_loop.hpp"

namespace hotm {

nlohmann::json EvalReport::to_json() const {
    return nlohmann::json{{"arch", arch.to_json()},
                          {"epochs", epochs},
                          {"eval_lr", eval_lr},
                          {"per_seed_accuracies", per_seed_accuracies},
                          {"mean", mean},
                          {"std", stddev}};
}

std::string EvalReport::mean_std_percent() const {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f±%.2f", 100.0 * mean, 100.0 * stddev);
    return buf;
}

double accuracy(const ArchSpec& arch, const Tensor& params, const Tensor& images,
                const std::vector<uint32_t>& labels) {
    NoGradGuard no_grad;
    const int64_t n = images.shape()[0];
    const int64_t chunk = 256;
    int64_t correct = 0;
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    for (int64_t start = 0; start < n; start += chunk) {
        int64_t count = std::min(chunk, n - start);
        Tensor batch = detail::gather_rows(images, order, start, count);
        Tensor logits = forward(arch, params, batch);
        const auto& lv = logits.data();
        int64_t classes = logits.shape()[1];
        for (int64_t r = 0; r < count; ++r) {
            const float* row = lv.data() + r * classes;
            int64_t best = static_cast<int64_t>(
                std::max_element(row, row + classes) - row);
            if (best == static_cast<int64_t>(labels[static_cast<size_t>(start + r)])) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(n);
}

namespace {

EvalReport summarize(std::vector<double> accs, const ArchSpec& arch, int epochs, double lr) {
    EvalReport report;
    report.per_seed_accuracies = std::move(accs);
    report.arch = arch;
    report.epochs = epochs;
    report.eval_lr = lr;
    double sum = 0.0;
    for (double a : report.per_seed_accuracies) sum += a;
    report.mean = sum / static_cast<double>(report.per_seed_accuracies.size());
    double var = 0.0;
    for (double a : report.per_seed_accuracies) var += (a - report.mean) * (a - report.mean);
    report.stddev = std::sqrt(var / static_cast<double>(report.per_seed_accuracies.size()));
    return report;
}

// Runs one job per seed, at most `jobs` at a time. Results are ordered by
// seed position regardless of scheduling.
void for_each_seed(size_t count, int jobs, const std::function<void(size_t)>& fn) {
    if (jobs <= 1 || count <= 1) {
        for (size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<size_t> next{0};
    auto worker = [&]() {
        while (true) {
            size_t i = next.fetch_add(1);
            if (i >= count) return;
            fn(i);
        }
    };
    size_t n_threads = std::min<size_t>(static_cast<size_t>(jobs), count);
    std::vector<std::thread> threads;
    threads.reserve(n_threads);
    for (size_t t = 0; t < n_threads; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
}

}  // namespace

EvalReport evaluate(const SyntheticDataset& distilled, const LabeledDataset& test,
                    const ArchSpec& arch, const std::vector<uint64_t>& seeds, int epochs,
                    std::optional<double> lr_override, int jobs) {
    if (seeds.empty()) throw InputError("evaluate: need at least one seed");
    if (epochs < 0) throw InputError("evaluate: epochs must be >= 0");
    if (distilled.class_count != test.class_count) {
        throw InputError("evaluate: distilled set has " + std::to_string(distilled.class_count) +
                         " classes, test set has " + std::to_string(test.class_count));
    }
    if (arch.num_classes != distilled.class_count || arch.in_c != distilled.images.shape()[1] ||
        arch.in_h != distilled.images.shape()[2] || arch.in_w != distilled.images.shape()[3]) {
        throw InputError("evaluate: architecture does not match the distilled images");
    }
    const double lr = lr_override.value_or(static_cast<double>(distilled.alpha));
    Tensor train_images = distilled.images.detach();

    std::vector<double> accs(seeds.size(), 0.0);
    for_each_seed(seeds.size(), jobs, [&](size_t i) {
        ParamVector init = init_params<float>(arch, seeds[i]);
        detail::SgdOptions opt{lr, epochs, 256, seeds[i]};
        Tensor theta = detail::sgd_train<float>(arch, init.values, train_images, distilled.labels,
                                                opt);
        accs[i] = accuracy(arch, theta, test.images, test.labels);
    });
    return summarize(std::move(accs), arch, epochs, lr);
}

EvalReport baseline_random_subset(const LabeledDataset& real, const LabeledDataset& test, int ipc,
                                  const std::vector<uint64_t>& seeds, const ArchSpec& arch,
                                  int epochs, double lr, int jobs) {
    if (seeds.empty()) throw InputError("baseline: need at least one seed");
    std::vector<double> accs(seeds.size(), 0.0);
    for_each_seed(seeds.size(), jobs, [&](size_t i) {
        SyntheticDataset subset = init_synthetic(real, ipc, seeds[i], static_cast<float>(lr));
        ParamVector init = init_params<float>(arch, seeds[i]);
        detail::SgdOptions opt{lr, epochs, 256, seeds[i]};
        Tensor theta = detail::sgd_train<float>(arch, init.values, subset.images, subset.labels,
                                                opt);
        accs[i] = accuracy(arch, theta, test.images, test.labels);
    });
    return summarize(std::move(accs), arch, epochs, lr);
}

std::vector<EvalReport> cross_arch(const SyntheticDataset& distilled, const LabeledDataset& test,
                                   const std::vector<ArchSpec>& archs,
                                   const std::vector<uint64_t>& seeds, int epochs,
                                   std::optional<double> lr_override, int jobs) {
    std::vector<EvalReport> reports;
    reports.reserve(archs.size());
    for (const auto& arch : archs) {
        reports.push_back(evaluate(distilled, test, arch, seeds, epochs, lr_override, jobs));
    }
    return reports;
}

}  // namespace hotm
