#pragma once

// Dense tensors with reverse-mode automatic differentiation.
//
// Tensors are value types: copies share an immutable payload, so retaining a
// graph never aliases mutable state. Every op records a node onto an implicit
// graph when recording is enabled and at least one input is attached. Backward
// rules are themselves written in terms of these same ops, which means a
// gradient computed with create_graph=true is a differentiable function of the
// original leaves — this is what lets an outer loss differentiate through
// parameter updates taken in an inner training loop.
//
// Single precision is the working type; double is instantiated alongside it
// for finite-difference oracle tests.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "hotm/errors.hpp"

namespace hotm {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename S>
class TensorT;

// One recorded operation. `parents` is aligned with the op's inputs (null for
// constant inputs). `vjp` maps the upstream gradient to per-input gradients;
// entries whose mask flag is false may be left undefined.
template <typename S>
struct NodeT {
    uint64_t id = 0;
    std::vector<std::shared_ptr<NodeT<S>>> parents;
    std::function<std::vector<TensorT<S>>(const TensorT<S>&, const std::vector<char>&)> vjp;
};

template <typename S>
class TensorT {
public:
    using Scalar = S;

    TensorT() = default;

    static TensorT zeros(Shape shape);
    static TensorT full(Shape shape, S value);
    static TensorT from_data(Shape shape, std::vector<S> values);
    // Shares an existing payload (used by views such as reshape/detach).
    static TensorT from_shared(Shape shape, std::shared_ptr<const std::vector<S>> values);

    bool defined() const { return data_ != nullptr; }
    const Shape& shape() const { return shape_; }
    int64_t numel() const { return defined() ? static_cast<int64_t>(data_->size()) : 0; }
    const std::vector<S>& data() const;
    std::shared_ptr<const std::vector<S>> shared_data() const { return data_; }

    // Value of a one-element tensor.
    S item() const;

    // Same payload, no graph attachment. Gradients never flow through.
    TensorT detach() const;

    // Marks a detached tensor as a differentiation leaf.
    TensorT& requires_grad();

    bool has_node() const { return node != nullptr; }

    // Graph linkage; managed by the op layer.
    std::shared_ptr<NodeT<S>> node;

private:
    Shape shape_;
    std::shared_ptr<const std::vector<S>> data_;
};

using Tensor = TensorT<float>;

// Disables graph recording for the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

namespace detail {
bool recording();
// Forces recording on or off (used by backward to honor create_graph).
class RecordScope {
public:
    explicit RecordScope(bool on);
    ~RecordScope();

private:
    bool prev_;
};
}  // namespace detail

// Elementwise binary ops with numpy-style right-aligned broadcasting.
template <typename S> TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b);
template <typename S> TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b);
template <typename S> TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b);
template <typename S> TensorT<S> div(const TensorT<S>& a, const TensorT<S>& b);
template <typename S> TensorT<S> scalar_mul(const TensorT<S>& a, S factor);

template <typename S> TensorT<S> relu(const TensorT<S>& a);
template <typename S> TensorT<S> exp(const TensorT<S>& a);
template <typename S> TensorT<S> log(const TensorT<S>& a);
template <typename S> TensorT<S> sqrt(const TensorT<S>& a);
template <typename S> TensorT<S> square(const TensorT<S>& a);

// Reductions. sum/mean collapse to a one-element tensor; sum_to folds onto any
// broadcast-compatible target shape (the adjoint of broadcast_to).
template <typename S> TensorT<S> sum(const TensorT<S>& a);
template <typename S> TensorT<S> mean(const TensorT<S>& a);
template <typename S> TensorT<S> sum_to(const TensorT<S>& a, const Shape& target);
template <typename S> TensorT<S> broadcast_to(const TensorT<S>& a, const Shape& target);

template <typename S> TensorT<S> reshape(const TensorT<S>& a, const Shape& target);
// Collapses everything after the leading dim: [b, ...] -> [b, rest].
template <typename S> TensorT<S> flatten(const TensorT<S>& a);
template <typename S> TensorT<S> transpose(const TensorT<S>& a);
// Contiguous window of a 1-D tensor.
template <typename S> TensorT<S> slice(const TensorT<S>& a, int64_t offset, int64_t length);

template <typename S> TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b);

// 3x3 cross-correlation, stride 1, zero padding 1: [b,c,h,w] x [o,c,3,3] -> [b,o,h,w].
template <typename S> TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& k);

// 2x2 average pooling, stride 2; spatial dims must be even.
template <typename S> TensorT<S> avg_pool2d(const TensorT<S>& x);

// Per-(sample, channel) plane normalization to zero mean / unit variance,
// eps inside the variance square root, no learned affine.
template <typename S> TensorT<S> instance_norm(const TensorT<S>& x, S eps = S(1e-5));

// Mean over the batch of -log softmax(logits)[label], stabilized by row-max
// subtraction. The stabilizer enters as a constant, which leaves the value and
// all derivatives unchanged; everything else is built from primitives so the
// result supports differentiation through its own gradient.
template <typename S>
TensorT<S> softmax_cross_entropy(const TensorT<S>& logits, const std::vector<uint32_t>& labels);

// Smooth L1 with transition point 1, one-element tensors only.
template <typename S> TensorT<S> smooth_l1(const TensorT<S>& diff);

template <typename S> TensorT<S> dot(const TensorT<S>& a, const TensorT<S>& b);

template <typename S> bool all_finite(const TensorT<S>& a);

// Gradients of a scalar loss with respect to `wrt` (leaves or interior nodes).
// Unreached targets get zeros. With create_graph=true the returned tensors are
// themselves recorded functions of the original leaves. The graph is retained:
// repeated calls over the same graph give bit-identical results.
template <typename S>
std::vector<TensorT<S>> grad(const TensorT<S>& loss, const std::vector<TensorT<S>>& wrt,
                             bool create_graph = false);

}  // namespace hotm
