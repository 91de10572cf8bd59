#pragma once

// Internal plain-SGD training loop shared by teacher training and evaluation.
// Mini-batches are reshuffled every epoch; when the batch covers the whole set
// the natural sample order is used so that full-batch runs are reproducible
// step-for-step by other full-batch consumers of the same data.

#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "hotm/model.hpp"
#include "hotm/rng.hpp"

namespace hotm::detail {

struct SgdOptions {
    double lr = 0.01;
    int epochs = 1;
    int batch_size = 256;
    uint64_t seed = 0;
};

template <typename S>
TensorT<S> gather_rows(const TensorT<S>& images, const std::vector<int64_t>& idx, int64_t start,
                       int64_t count) {
    const auto& src = images.data();
    int64_t chw = images.numel() / images.shape()[0];
    std::vector<S> out(static_cast<size_t>(count * chw));
    for (int64_t r = 0; r < count; ++r) {
        const S* from = src.data() + idx[static_cast<size_t>(start + r)] * chw;
        std::copy(from, from + chw, out.begin() + r * chw);
    }
    Shape shape = images.shape();
    shape[0] = count;
    return TensorT<S>::from_data(std::move(shape), std::move(out));
}

// Returns the parameters after `epochs` epochs. `on_epoch` (if set) sees the
// 1-based epoch index, the parameters after that epoch, and its mean loss.
template <typename S>
TensorT<S> sgd_train(const ArchSpec& spec, const TensorT<S>& params0, const TensorT<S>& images,
                     const std::vector<uint32_t>& labels, const SgdOptions& opt,
                     const std::function<void(int, const TensorT<S>&, double)>& on_epoch = {}) {
    const int64_t n = images.shape()[0];
    const int64_t bs = std::min<int64_t>(opt.batch_size, n);
    const bool full_batch = bs >= n;
    TensorT<S> theta = params0.detach();
    Rng shuffle_rng(substream(opt.seed, 0x50F1E));
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 1; epoch <= opt.epochs; ++epoch) {
        if (!full_batch) shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        int batches = 0;
        for (int64_t start = 0; start < n; start += bs) {
            const int64_t count = std::min<int64_t>(bs, n - start);
            TensorT<S> batch;
            std::vector<uint32_t> batch_labels;
            if (full_batch) {
                batch = images;
                batch_labels = labels;
            } else {
                batch = gather_rows(images, order, start, count);
                batch_labels.resize(static_cast<size_t>(count));
                for (int64_t r = 0; r < count; ++r) {
                    batch_labels[static_cast<size_t>(r)] =
                        labels[static_cast<size_t>(order[static_cast<size_t>(start + r)])];
                }
            }
            TensorT<S> leaf = theta.detach();
            leaf.requires_grad();
            TensorT<S> loss = softmax_cross_entropy(forward(spec, leaf, batch), batch_labels);
            double lv = static_cast<double>(loss.item());
            if (!std::isfinite(lv)) {
                throw TrainingError("non-finite training loss at epoch " + std::to_string(epoch),
                                    epoch);
            }
            auto gs = grad(loss, {leaf});
            theta = sub(theta, scalar_mul(gs[0], static_cast<S>(opt.lr))).detach();
            loss_sum += lv;
            ++batches;
        }
        if (on_epoch) on_epoch(epoch, theta, loss_sum / batches);
    }
    return theta;
}

}  // namespace hotm::detail
