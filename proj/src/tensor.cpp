#include "hotm/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace hotm {

// ----------------------------- shape utilities -----------------------------

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {

void check_shape(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one extent");
    for (int64_t d : shape) {
        if (d <= 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
}

// Right-aligned broadcast result of two shapes.
Shape broadcast_shape(const Shape& a, const Shape& b) {
    size_t rank = std::max(a.size(), b.size());
    Shape out(rank, 1);
    for (size_t i = 0; i < rank; ++i) {
        int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw DimensionError("shapes " + shape_str(a) + " and " + shape_str(b) +
                                 " are not broadcast-compatible");
        }
        out[i] = std::max(da, db);
    }
    return out;
}

thread_local bool g_recording = true;
std::atomic<uint64_t> g_next_node_id{1};

}  // namespace

// ------------------------------ tensor basics ------------------------------

template <typename S>
TensorT<S> TensorT<S>::zeros(Shape shape) {
    return full(std::move(shape), S(0));
}

template <typename S>
TensorT<S> TensorT<S>::full(Shape shape, S value) {
    check_shape(shape);
    auto data = std::make_shared<std::vector<S>>(static_cast<size_t>(shape_numel(shape)), value);
    return from_shared(std::move(shape), std::move(data));
}

template <typename S>
TensorT<S> TensorT<S>::from_data(Shape shape, std::vector<S> values) {
    check_shape(shape);
    if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
        throw DimensionError("payload of " + std::to_string(values.size()) +
                             " values does not fill shape " + shape_str(shape));
    }
    return from_shared(std::move(shape), std::make_shared<std::vector<S>>(std::move(values)));
}

template <typename S>
TensorT<S> TensorT<S>::from_shared(Shape shape, std::shared_ptr<const std::vector<S>> values) {
    TensorT t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(values);
    return t;
}

template <typename S>
const std::vector<S>& TensorT<S>::data() const {
    if (!defined()) throw ContractError("tensor is not defined");
    return *data_;
}

template <typename S>
S TensorT<S>::item() const {
    if (numel() != 1) {
        throw ContractError("item() requires a one-element tensor, got " + shape_str(shape_));
    }
    return (*data_)[0];
}

template <typename S>
TensorT<S> TensorT<S>::detach() const {
    TensorT t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
}

template <typename S>
TensorT<S>& TensorT<S>::requires_grad() {
    if (!defined()) throw ContractError("requires_grad on an undefined tensor");
    if (node) throw ContractError("requires_grad: tensor is already attached to a graph");
    node = std::make_shared<NodeT<S>>();
    node->id = g_next_node_id.fetch_add(1, std::memory_order_relaxed);
    return *this;
}

NoGradGuard::NoGradGuard() : prev_(g_recording) { g_recording = false; }
NoGradGuard::~NoGradGuard() { g_recording = prev_; }

namespace detail {
bool recording() { return g_recording; }
RecordScope::RecordScope(bool on) : prev_(g_recording) { g_recording = on; }
RecordScope::~RecordScope() { g_recording = prev_; }
}  // namespace detail

// ------------------------------ op recording -------------------------------

namespace {

template <typename S>
using VjpFn = std::function<std::vector<TensorT<S>>(const TensorT<S>&, const std::vector<char>&)>;

template <typename S>
void attach(TensorT<S>& result, std::initializer_list<TensorT<S>> inputs, VjpFn<S> vjp) {
    if (!g_recording) return;
    bool any = false;
    for (const auto& in : inputs) any = any || in.has_node();
    if (!any) return;
    auto node = std::make_shared<NodeT<S>>();
    node->id = g_next_node_id.fetch_add(1, std::memory_order_relaxed);
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.node);
    node->vjp = std::move(vjp);
    result.node = std::move(node);
}

// Strides of `shape` remapped into `target` rank, with 0 where `shape` is 1.
std::vector<int64_t> broadcast_strides(const Shape& shape, const Shape& target) {
    std::vector<int64_t> strides(target.size(), 0);
    int64_t stride = 1;
    size_t off = target.size() - shape.size();
    for (size_t i = shape.size(); i-- > 0;) {
        strides[off + i] = shape[i] == 1 ? 0 : stride;
        stride *= shape[i];
    }
    return strides;
}

template <typename S, typename Fn>
TensorT<S> unary_map(const TensorT<S>& a, Fn fn) {
    const auto& src = a.data();
    std::vector<S> out(src.size());
    for (size_t i = 0; i < src.size(); ++i) out[i] = fn(src[i]);
    return TensorT<S>::from_data(a.shape(), std::move(out));
}

template <typename S, typename Fn>
TensorT<S> binary_same(const TensorT<S>& a, const TensorT<S>& b, Fn fn) {
    const auto& da = a.data();
    const auto& db = b.data();
    std::vector<S> out(da.size());
    for (size_t i = 0; i < da.size(); ++i) out[i] = fn(da[i], db[i]);
    return TensorT<S>::from_data(a.shape(), std::move(out));
}

// Materializes both operands at the broadcast shape. The inserted
// broadcast_to nodes own the reduction in the backward pass.
template <typename S>
std::pair<TensorT<S>, TensorT<S>> broadcast_pair(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape() == b.shape()) return {a, b};
    Shape target = broadcast_shape(a.shape(), b.shape());
    TensorT<S> ba = a.shape() == target ? a : broadcast_to(a, target);
    TensorT<S> bb = b.shape() == target ? b : broadcast_to(b, target);
    return {ba, bb};
}

}  // namespace

// ----------------------------- elementwise ops -----------------------------

template <typename S>
TensorT<S> add(const TensorT<S>& a0, const TensorT<S>& b0) {
    auto [a, b] = broadcast_pair(a0, b0);
    TensorT<S> r = binary_same(a, b, [](S x, S y) { return x + y; });
    attach<S>(r, {a, b}, [](const TensorT<S>& g, const std::vector<char>& need) {
        std::vector<TensorT<S>> gr(2);
        if (need[0]) gr[0] = g;
        if (need[1]) gr[1] = g;
        return gr;
    });
    return r;
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a0, const TensorT<S>& b0) {
    auto [a, b] = broadcast_pair(a0, b0);
    TensorT<S> r = binary_same(a, b, [](S x, S y) { return x - y; });
    attach<S>(r, {a, b}, [](const TensorT<S>& g, const std::vector<char>& need) {
        std::vector<TensorT<S>> gr(2);
        if (need[0]) gr[0] = g;
        if (need[1]) gr[1] = scalar_mul(g, S(-1));
        return gr;
    });
    return r;
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a0, const TensorT<S>& b0) {
    auto [a, b] = broadcast_pair(a0, b0);
    TensorT<S> r = binary_same(a, b, [](S x, S y) { return x * y; });
    attach<S>(r, {a, b}, [a, b](const TensorT<S>& g, const std::vector<char>& need) {
        std::vector<TensorT<S>> gr(2);
        if (need[0]) gr[0] = mul(g, b);
        if (need[1]) gr[1] = mul(g, a);
        return gr;
    });
    return r;
}

template <typename S>
TensorT<S> div(const TensorT<S>& a0, const TensorT<S>& b0) {
    auto [a, b] = broadcast_pair(a0, b0);
    TensorT<S> r = binary_same(a, b, [](S x, S y) { return x / y; });
    attach<S>(r, {a, b}, [a, b](const TensorT<S>& g, const std::vector<char>& need) {
        std::vector<TensorT<S>> gr(2);
        if (need[0]) gr[0] = div(g, b);
        if (need[1]) gr[1] = scalar_mul(div(mul(g, a), mul(b, b)), S(-1));
        return gr;
    });
    return r;
}

template <typename S>
TensorT<S> scalar_mul(const TensorT<S>& a, S factor) {
    TensorT<S> r = unary_map(a, [factor](S x) { return x * factor; });
    attach<S>(r, {a}, [factor](const TensorT<S>& g, const std::vector<char>& need) {
        std::vector<TensorT<S>> gr(1);
        if (need[0]) gr[0] = scalar_mul(g, factor);
        return gr;
    });
    return r;
}

template <typename S>
TensorT<S> relu(const TensorT<S>& a) {
    TensorT<S> r = unary_map(a, [](S x) { return x > S(0) ? x : S(0); });
    attach<S>(r, {a}, [a](const TensorT<S>& g, const std::vector<char>& need) {
        std::vector<TensorT<S>> gr(1);
        if (need[0]) {
            // Activation mask from the forward values; constant by design of
            // the subgradient, so higher derivatives stay exact a.e.
            const auto& src = a.data();
            std::vector<S> mask(src.size());
            for (size_t i = 0; i < src.size(); ++i) mask[i] = src[i] > S(0) ? S(1) : S(0);
            gr[0] = mul(g, TensorT<S>::from_data(a.shape(), std::move(mask)));
        }
        return gr;
    });
    return r;
}

template <typename S>
TensorT<S> exp(const TensorT<S>& a) {
    TensorT<S> r = unary_map(a, [](S x) { return std::exp(x); });
    attach<S>(r, {a}, [a](const TensorT<S>& g, const std::vector<char>& need) {
        std::vector<TensorT<S>> gr(1);
        if (need[0]) gr[0] = mul(g, exp(a));
        return gr;
    });
    return r;
}

template <typename S>
TensorT<S> log(const TensorT<S>& a) {
    TensorT<S> r = unary_map(a, [](S x) { return std::log(x); });
    attach<S>(r, {a}, [a](const TensorT<S>& g, const std::vector<char>& need) {
        std::vector<TensorT<S>> gr(1);
        if (need[0]) gr[0] = div(g, a);
        return gr;
    });
    return r;
}

template <typename S>
TensorT<S> sqrt(const TensorT<S>& a) {
    TensorT<S> r = unary_map(a, [](S x) { return std::sqrt(x); });
    attach<S>(r, {a}, [a](const TensorT<S>& g, const std::vector<char>& need) {
        std::vector<TensorT<S>> gr(1);
        if (need[0]) gr[0] = div(g, scalar_mul(sqrt(a), S(2)));
        return gr;
    });
    return r;
}

template <typename S>
TensorT<S> square(const TensorT<S>& a) {
    return mul(a, a);
}

// ------------------------------- reductions --------------------------------

template <typename S>
TensorT<S> broadcast_to(const TensorT<S>& a, const Shape& target) {
    check_shape(target);
    if (a.shape() == target) return a;
    if (a.shape().size() > target.size()) {
        throw DimensionError("cannot broadcast " + shape_str(a.shape()) + " to lower-rank " +
                             shape_str(target));
    }
    size_t off = target.size() - a.shape().size();
    for (size_t i = 0; i < a.shape().size(); ++i) {
        if (a.shape()[i] != 1 && a.shape()[i] != target[off + i]) {
            throw DimensionError("cannot broadcast " + shape_str(a.shape()) + " to " +
                                 shape_str(target));
        }
    }
    const auto& src = a.data();
    int64_t n = shape_numel(target);
    std::vector<S> out(static_cast<size_t>(n));
    // Fast paths: pure fill, and expansion of trailing dims that are 1 in the
    // source (prefix copied blockwise). Covers the scalar, plane-statistic
    // and row-vector uses; anything else takes the generic odometer.
    if (a.numel() == 1) {
        std::fill(out.begin(), out.end(), src[0]);
    } else {
        size_t off = target.size() - a.shape().size();
        bool suffix_expand = off == 0;
        int64_t kept = 1, block = 1;
        if (suffix_expand) {
            size_t d = 0;
            for (; d < a.shape().size() && a.shape()[d] == target[d]; ++d) kept *= target[d];
            for (size_t e = d; e < a.shape().size(); ++e) {
                suffix_expand = suffix_expand && a.shape()[e] == 1;
            }
            for (size_t e = d; e < target.size(); ++e) block *= target[e];
        }
        if (suffix_expand) {
            for (int64_t p = 0; p < kept; ++p) {
                std::fill(out.begin() + p * block, out.begin() + (p + 1) * block,
                          src[static_cast<size_t>(p)]);
            }
        } else {
            auto strides = broadcast_strides(a.shape(), target);
            std::vector<int64_t> idx(target.size(), 0);
            for (int64_t lin = 0; lin < n; ++lin) {
                int64_t src_off = 0;
                for (size_t d = 0; d < target.size(); ++d) src_off += idx[d] * strides[d];
                out[static_cast<size_t>(lin)] = src[static_cast<size_t>(src_off)];
                for (size_t d = target.size(); d-- > 0;) {
                    if (++idx[d] < target[d]) break;
                    idx[d] = 0;
                }
            }
        }
    }
    TensorT<S> r = TensorT<S>::from_data(target, std::move(out));
    Shape orig = a.shape();
    attach<S>(r, {a}, [orig](const TensorT<S>& g, const std::vector<char>& need) {
        std::vector<TensorT<S>> gr(1);
        if (need[0]) gr[0] = sum_to(g, orig);
        return gr;
    });
    return r;
}

template <typename S>
TensorT<S> sum_to(const TensorT<S>& a, const Shape& target) {
    check_shape(target);
    if (a.shape() == target) return a;
    if (target.size() > a.shape().size()) {
        throw DimensionError("cannot reduce " + shape_str(a.shape()) + " to higher-rank " +
                             shape_str(target));
    }
    size_t off = a.shape().size() - target.size();
    for (size_t i = 0; i < target.size(); ++i) {
        if (target[i] != 1 && target[i] != a.shape()[off + i]) {
            throw DimensionError("cannot reduce " + shape_str(a.shape()) + " to " +
                                 shape_str(target));
        }
    }
    const auto& src = a.data();
    std::vector<S> out(static_cast<size_t>(shape_numel(target)), S(0));
    int64_t n = static_cast<int64_t>(src.size());
    // Fast paths mirroring broadcast_to: reduce-to-one-element, and reduction
    // of trailing dims onto a kept prefix.
    if (shape_numel(target) == 1) {
        S acc = S(0);
        for (int64_t lin = 0; lin < n; ++lin) acc += src[static_cast<size_t>(lin)];
        out[0] = acc;
    } else {
        size_t off = a.shape().size() - target.size();
        bool suffix_reduce = off == 0;
        int64_t kept = 1, block = 1;
        if (suffix_reduce) {
            size_t d = 0;
            for (; d < target.size() && target[d] == a.shape()[d]; ++d) kept *= target[d];
            for (size_t e = d; e < target.size(); ++e) {
                suffix_reduce = suffix_reduce && target[e] == 1;
            }
            for (size_t e = d; e < a.shape().size(); ++e) block *= a.shape()[e];
        }
        if (suffix_reduce) {
            for (int64_t p = 0; p < kept; ++p) {
                S acc = S(0);
                const S* s = src.data() + p * block;
                for (int64_t q = 0; q < block; ++q) acc += s[q];
                out[static_cast<size_t>(p)] = acc;
            }
        } else {
            auto strides = broadcast_strides(target, a.shape());
            std::vector<int64_t> idx(a.shape().size(), 0);
            for (int64_t lin = 0; lin < n; ++lin) {
                int64_t dst_off = 0;
                for (size_t d = 0; d < a.shape().size(); ++d) dst_off += idx[d] * strides[d];
                out[static_cast<size_t>(dst_off)] += src[static_cast<size_t>(lin)];
                for (size_t d = a.shape().size(); d-- > 0;) {
                    if (++idx[d] < a.shape()[d]) break;
                    idx[d] = 0;
                }
            }
        }
    }
    TensorT<S> r = TensorT<S>::from_data(target, std::move(out));
    Shape orig = a.shape();
    attach<S>(r, {a}, [orig](const TensorT<S>& g, const std::vector<char>& need) {
        std::vector<TensorT<S>> gr(1);
        if (need[0]) gr[0] = broadcast_to(g, orig);
        return gr;
    });
    return r;
}

template <typename S>
TensorT<S> sum(const TensorT<S>& a) {
    if (a.numel() == 1 && a.shape() == Shape{1}) return a;
    return sum_to(a, Shape{1});
}

template <typename S>
TensorT<S> mean(const TensorT<S>& a) {
    return scalar_mul(sum(a), static_cast<S>(1.0 / static_cast<double>(a.numel())));
}

// -------------------------------- view ops ---------------------------------

template <typename S>
TensorT<S> reshape(const TensorT<S>& a, const Shape& target) {
    check_shape(target);
    if (shape_numel(target) != a.numel()) {
        throw DimensionError("cannot reshape " + shape_str(a.shape()) + " into " +
                             shape_str(target));
    }
    TensorT<S> r = TensorT<S>::from_shared(target, a.shared_data());
    Shape orig = a.shape();
    attach<S>(r, {a}, [orig](const TensorT<S>& g, const std::vector<char>& need) {
        std::vector<TensorT<S>> gr(1);
        if (need[0]) gr[0] = reshape(g, orig);
        return gr;
    });
    return r;
}

template <typename S>
TensorT<S> flatten(const TensorT<S>& a) {
    int64_t lead = a.shape()[0];
    return reshape(a, {lead, a.numel() / lead});
}

template <typename S>
TensorT<S> transpose(const TensorT<S>& a) {
    if (a.shape().size() != 2) {
        throw DimensionError("transpose expects a rank-2 tensor, got " + shape_str(a.shape()));
    }
    int64_t rows = a.shape()[0], cols = a.shape()[1];
    const auto& src = a.data();
    std::vector<S> out(src.size());
    for (int64_t i = 0; i < rows; ++i) {
        for (int64_t j = 0; j < cols; ++j) {
            out[static_cast<size_t>(j * rows + i)] = src[static_cast<size_t>(i * cols + j)];
        }
    }
    TensorT<S> r = TensorT<S>::from_data({cols, rows}, std::move(out));
    attach<S>(r, {a}, [](const TensorT<S>& g, const std::vector<char>& need) {
        std::vector<TensorT<S>> gr(1);
        if (need[0]) gr[0] = transpose(g);
        return gr;
    });
    return r;
}

namespace {
// Adjoint of slice: embeds a window into zeros of the original length.
template <typename S>
TensorT<S> scatter1d(const TensorT<S>& a, int64_t offset, int64_t total) {
    const auto& src = a.data();
    std::vector<S> out(static_cast<size_t>(total), S(0));
    std::copy(src.begin(), src.end(), out.begin() + offset);
    TensorT<S> r = TensorT<S>::from_data({total}, std::move(out));
    int64_t length = a.numel();
    attach<S>(r, {a}, [offset, length](const TensorT<S>& g, const std::vector<char>& need) {
        std::vector<TensorT<S>> gr(1);
        if (need[0]) gr[0] = slice(g, offset, length);
        return gr;
    });
    return r;
}
}  // namespace

template <typename S>
TensorT<S> slice(const TensorT<S>& a, int64_t offset, int64_t length) {
    if (a.shape().size() != 1) {
        throw DimensionError("slice expects a rank-1 tensor, got " + shape_str(a.shape()));
    }
    if (offset < 0 || length <= 0 || offset + length > a.numel()) {
        throw DimensionError("slice [" + std::to_string(offset) + ", " +
                             std::to_string(offset + length) + ") out of range for " +
                             shape_str(a.shape()));
    }
    const auto& src = a.data();
    std::vector<S> out(src.begin() + offset, src.begin() + offset + length);
    TensorT<S> r = TensorT<S>::from_data({length}, std::move(out));
    int64_t total = a.numel();
    attach<S>(r, {a}, [offset, total](const TensorT<S>& g, const std::vector<char>& need) {
        std::vector<TensorT<S>> gr(1);
        if (need[0]) gr[0] = scatter1d(g, offset, total);
        return gr;
    });
    return r;
}

// ------------------------------ linear algebra -----------------------------

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2) {
        throw DimensionError("matmul expects rank-2 tensors, got " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()));
    }
    if (a.shape()[1] != b.shape()[0]) {
        throw DimensionError("matmul inner dimensions disagree: " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
    int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    const auto& da = a.data();
    const auto& db = b.data();
    std::vector<S> out(static_cast<size_t>(m * n), S(0));
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t p = 0; p < k; ++p) {
            S av = da[static_cast<size_t>(i * k + p)];
            const S* brow = db.data() + p * n;
            S* orow = out.data() + i * n;
            for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    TensorT<S> r = TensorT<S>::from_data({m, n}, std::move(out));
    attach<S>(r, {a, b}, [a, b](const TensorT<S>& g, const std::vector<char>& need) {
        std::vector<TensorT<S>> gr(2);
        if (need[0]) gr[0] = matmul(g, transpose(b));
        if (need[1]) gr[1] = matmul(transpose(a), g);
        return gr;
    });
    return r;
}

// conv2d and its two adjoints form a trilinear family that is closed under
// differentiation, so each can express its backward pass with the other two.
namespace {

template <typename S>
TensorT<S> conv2d_input_grad(const TensorT<S>& g, const TensorT<S>& k);
template <typename S>
TensorT<S> conv2d_kernel_grad(const TensorT<S>& x, const TensorT<S>& g);

// Copies every channel plane of one sample into a zero-padded (h+2)x(w+2)
// buffer so the 3x3 taps below run without bounds checks.
template <typename S>
void pad_sample(const S* src, int64_t channels, int64_t h, int64_t w, std::vector<S>& padded) {
    const int64_t pw = w + 2;
    std::fill(padded.begin(), padded.end(), S(0));
    for (int64_t ch = 0; ch < channels; ++ch) {
        const S* s = src + ch * h * w;
        S* d = padded.data() + ch * (h + 2) * pw + pw + 1;
        for (int64_t i = 0; i < h; ++i) std::copy(s + i * w, s + (i + 1) * w, d + i * pw);
    }
}

// out[i, j] += sum of the nine taps of `kern` over the padded plane.
template <typename S>
void accumulate_taps(const S* padded, const S* kern, int64_t h, int64_t w, S* out) {
    const int64_t pw = w + 2;
    const S k00 = kern[0], k01 = kern[1], k02 = kern[2];
    const S k10 = kern[3], k11 = kern[4], k12 = kern[5];
    const S k20 = kern[6], k21 = kern[7], k22 = kern[8];
    for (int64_t i = 0; i < h; ++i) {
        const S* r0 = padded + i * pw;
        const S* r1 = r0 + pw;
        const S* r2 = r1 + pw;
        S* orow = out + i * w;
        for (int64_t j = 0; j < w; ++j) {
            orow[j] += k00 * r0[j] + k01 * r0[j + 1] + k02 * r0[j + 2] +
                       k10 * r1[j] + k11 * r1[j + 1] + k12 * r1[j + 2] +
                       k20 * r2[j] + k21 * r2[j + 1] + k22 * r2[j + 2];
        }
    }
}

template <typename S>
std::vector<S> conv_fwd_kernel(const std::vector<S>& x, const std::vector<S>& k, int64_t b,
                               int64_t c, int64_t h, int64_t w, int64_t o) {
    std::vector<S> y(static_cast<size_t>(b * o * h * w), S(0));
    std::vector<S> padded(static_cast<size_t>(c * (h + 2) * (w + 2)));
    for (int64_t ib = 0; ib < b; ++ib) {
        pad_sample(x.data() + ib * c * h * w, c, h, w, padded);
        for (int64_t io = 0; io < o; ++io) {
            S* ys = y.data() + (ib * o + io) * h * w;
            for (int64_t ic = 0; ic < c; ++ic) {
                accumulate_taps(padded.data() + ic * (h + 2) * (w + 2),
                                k.data() + (io * c + ic) * 9, h, w, ys);
            }
        }
    }
    return y;
}

template <typename S>
TensorT<S> conv2d_input_grad(const TensorT<S>& g, const TensorT<S>& k) {
    int64_t b = g.shape()[0], o = g.shape()[1], h = g.shape()[2], w = g.shape()[3];
    int64_t c = k.shape()[1];
    const auto& dg = g.data();
    const auto& dk = k.data();
    // x_bar[b,c] = sum_o of g[b,o] correlated with the rotated kernel.
    std::vector<S> out(static_cast<size_t>(b * c * h * w), S(0));
    std::vector<S> padded(static_cast<size_t>(o * (h + 2) * (w + 2)));
    for (int64_t ib = 0; ib < b; ++ib) {
        pad_sample(dg.data() + ib * o * h * w, o, h, w, padded);
        for (int64_t ic = 0; ic < c; ++ic) {
            S* xs = out.data() + (ib * c + ic) * h * w;
            for (int64_t io = 0; io < o; ++io) {
                const S* ks = dk.data() + (io * c + ic) * 9;
                S rotated[9];
                for (int t = 0; t < 9; ++t) rotated[t] = ks[8 - t];
                accumulate_taps(padded.data() + io * (h + 2) * (w + 2), rotated, h, w, xs);
            }
        }
    }
    TensorT<S> r = TensorT<S>::from_data({b, c, h, w}, std::move(out));
    attach<S>(r, {g, k}, [g, k](const TensorT<S>& s, const std::vector<char>& need) {
        std::vector<TensorT<S>> gr(2);
        if (need[0]) gr[0] = conv2d(s, k);
        if (need[1]) gr[1] = conv2d_kernel_grad(s, g);
        return gr;
    });
    return r;
}

template <typename S>
TensorT<S> conv2d_kernel_grad(const TensorT<S>& x, const TensorT<S>& g) {
    int64_t b = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    int64_t o = g.shape()[1];
    const auto& dx = x.data();
    const auto& dg = g.data();
    std::vector<S> out(static_cast<size_t>(o * c * 9), S(0));
    std::vector<S> padded(static_cast<size_t>(c * (h + 2) * (w + 2)));
    const int64_t pw = w + 2;
    for (int64_t ib = 0; ib < b; ++ib) {
        pad_sample(dx.data() + ib * c * h * w, c, h, w, padded);
        for (int64_t io = 0; io < o; ++io) {
            const S* gs = dg.data() + (ib * o + io) * h * w;
            for (int64_t ic = 0; ic < c; ++ic) {
                const S* xp = padded.data() + ic * (h + 2) * pw;
                S acc[9] = {S(0), S(0), S(0), S(0), S(0), S(0), S(0), S(0), S(0)};
                for (int64_t i = 0; i < h; ++i) {
                    const S* grow = gs + i * w;
                    const S* r0 = xp + i * pw;
                    const S* r1 = r0 + pw;
                    const S* r2 = r1 + pw;
                    for (int64_t j = 0; j < w; ++j) {
                        const S gv = grow[j];
                        acc[0] += gv * r0[j];
                        acc[1] += gv * r0[j + 1];
                        acc[2] += gv * r0[j + 2];
                        acc[3] += gv * r1[j];
                        acc[4] += gv * r1[j + 1];
                        acc[5] += gv * r1[j + 2];
                        acc[6] += gv * r2[j];
                        acc[7] += gv * r2[j + 1];
                        acc[8] += gv * r2[j + 2];
                    }
                }
                S* ks = out.data() + (io * c + ic) * 9;
                for (int t = 0; t < 9; ++t) ks[t] += acc[t];
            }
        }
    }
    TensorT<S> r = TensorT<S>::from_data({o, c, 3, 3}, std::move(out));
    attach<S>(r, {x, g}, [x, g](const TensorT<S>& t, const std::vector<char>& need) {
        std::vector<TensorT<S>> gr(2);
        if (need[0]) gr[0] = conv2d_input_grad(g, t);
        if (need[1]) gr[1] = conv2d(x, t);
        return gr;
    });
    return r;
}

}  // namespace

template <typename S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& k) {
    if (x.shape().size() != 4 || k.shape().size() != 4) {
        throw DimensionError("conv2d expects rank-4 tensors, got " + shape_str(x.shape()) +
                             " and " + shape_str(k.shape()));
    }
    if (k.shape()[2] != 3 || k.shape()[3] != 3) {
        throw DimensionError("conv2d kernels must be 3x3, got " + shape_str(k.shape()));
    }
    if (x.shape()[1] != k.shape()[1]) {
        throw DimensionError("conv2d channel mismatch: input " + shape_str(x.shape()) +
                             " vs kernel " + shape_str(k.shape()));
    }
    int64_t b = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    int64_t o = k.shape()[0];
    TensorT<S> r =
        TensorT<S>::from_data({b, o, h, w}, conv_fwd_kernel(x.data(), k.data(), b, c, h, w, o));
    attach<S>(r, {x, k}, [x, k](const TensorT<S>& g, const std::vector<char>& need) {
        std::vector<TensorT<S>> gr(2);
        if (need[0]) gr[0] = conv2d_input_grad(g, k);
        if (need[1]) gr[1] = conv2d_kernel_grad(x, g);
        return gr;
    });
    return r;
}

// --------------------------------- pooling ---------------------------------

namespace {
// Nearest-neighbor 2x upsample; paired with avg_pool2d in both directions.
template <typename S>
TensorT<S> upsample2x(const TensorT<S>& a) {
    int64_t b = a.shape()[0], c = a.shape()[1], h = a.shape()[2], w = a.shape()[3];
    const auto& src = a.data();
    std::vector<S> out(static_cast<size_t>(b * c * 4 * h * w));
    for (int64_t p = 0; p < b * c; ++p) {
        const S* s = src.data() + p * h * w;
        S* d = out.data() + p * 4 * h * w;
        for (int64_t i = 0; i < h; ++i) {
            for (int64_t j = 0; j < w; ++j) {
                S v = s[i * w + j];
                d[(2 * i) * 2 * w + 2 * j] = v;
                d[(2 * i) * 2 * w + 2 * j + 1] = v;
                d[(2 * i + 1) * 2 * w + 2 * j] = v;
                d[(2 * i + 1) * 2 * w + 2 * j + 1] = v;
            }
        }
    }
    TensorT<S> r = TensorT<S>::from_data({b, c, 2 * h, 2 * w}, std::move(out));
    attach<S>(r, {a}, [](const TensorT<S>& g, const std::vector<char>& need) {
        std::vector<TensorT<S>> gr(1);
        if (need[0]) gr[0] = scalar_mul(avg_pool2d(g), S(4));
        return gr;
    });
    return r;
}
}  // namespace

template <typename S>
TensorT<S> avg_pool2d(const TensorT<S>& x) {
    if (x.shape().size() != 4) {
        throw DimensionError("avg_pool2d expects a rank-4 tensor, got " + shape_str(x.shape()));
    }
    int64_t b = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    if (h % 2 != 0 || w % 2 != 0) {
        throw DimensionError("avg_pool2d needs even spatial dims, got " + shape_str(x.shape()));
    }
    const auto& src = x.data();
    int64_t oh = h / 2, ow = w / 2;
    std::vector<S> out(static_cast<size_t>(b * c * oh * ow));
    for (int64_t p = 0; p < b * c; ++p) {
        const S* s = src.data() + p * h * w;
        S* d = out.data() + p * oh * ow;
        for (int64_t i = 0; i < oh; ++i) {
            for (int64_t j = 0; j < ow; ++j) {
                S acc = s[(2 * i) * w + 2 * j] + s[(2 * i) * w + 2 * j + 1] +
                        s[(2 * i + 1) * w + 2 * j] + s[(2 * i + 1) * w + 2 * j + 1];
                d[i * ow + j] = acc * S(0.25);
            }
        }
    }
    TensorT<S> r = TensorT<S>::from_data({b, c, oh, ow}, std::move(out));
    attach<S>(r, {x}, [](const TensorT<S>& g, const std::vector<char>& need) {
        std::vector<TensorT<S>> gr(1);
        if (need[0]) gr[0] = scalar_mul(upsample2x(g), S(0.25));
        return gr;
    });
    return r;
}

// ------------------------------ nn composites ------------------------------

template <typename S>
TensorT<S> instance_norm(const TensorT<S>& x, S eps) {
    if (x.shape().size() != 4) {
        throw DimensionError("instance_norm expects a rank-4 tensor, got " + shape_str(x.shape()));
    }
    int64_t b = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    Shape plane{b, c, 1, 1};
    S inv_count = static_cast<S>(1.0 / static_cast<double>(h * w));
    TensorT<S> plane_mean = scalar_mul(sum_to(x, plane), inv_count);
    TensorT<S> centered = sub(x, plane_mean);
    TensorT<S> variance = scalar_mul(sum_to(square(centered), plane), inv_count);
    TensorT<S> denom = sqrt(add(variance, TensorT<S>::full(plane, eps)));
    return div(centered, denom);
}

template <typename S>
TensorT<S> softmax_cross_entropy(const TensorT<S>& logits, const std::vector<uint32_t>& labels) {
    if (logits.shape().size() != 2) {
        throw DimensionError("softmax_cross_entropy expects [batch x classes] logits, got " +
                             shape_str(logits.shape()));
    }
    int64_t b = logits.shape()[0], c = logits.shape()[1];
    if (static_cast<int64_t>(labels.size()) != b) {
        throw InputError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for a batch of " + std::to_string(b));
    }
    for (uint32_t y : labels) {
        if (y >= static_cast<uint32_t>(c)) {
            throw InputError("label " + std::to_string(y) + " out of range for " +
                             std::to_string(c) + " classes");
        }
    }
    const auto& src = logits.data();
    std::vector<S> row_max(static_cast<size_t>(b));
    std::vector<S> pick(static_cast<size_t>(b * c), S(0));
    for (int64_t i = 0; i < b; ++i) {
        const S* row = src.data() + i * c;
        row_max[static_cast<size_t>(i)] = *std::max_element(row, row + c);
        pick[static_cast<size_t>(i * c + labels[static_cast<size_t>(i)])] = S(1);
    }
    // The row-max shift is a per-row constant; cross entropy is exactly
    // invariant under it, so it carries no gradient.
    TensorT<S> shifted = sub(logits, TensorT<S>::from_data({b, 1}, std::move(row_max)));
    TensorT<S> log_norm = log(sum_to(exp(shifted), Shape{b, 1}));
    TensorT<S> picked = sum_to(mul(shifted, TensorT<S>::from_data({b, c}, std::move(pick))),
                               Shape{b, 1});
    return mean(sub(log_norm, picked));
}

template <typename S>
TensorT<S> smooth_l1(const TensorT<S>& diff) {
    if (diff.numel() != 1) {
        throw ContractError("smooth_l1 expects a one-element tensor, got " +
                            shape_str(diff.shape()));
    }
    S v = diff.data()[0];
    if (std::abs(static_cast<double>(v)) < 1.0) {
        return scalar_mul(square(diff), S(0.5));
    }
    TensorT<S> linear = scalar_mul(diff, v > S(0) ? S(1) : S(-1));
    return sub(linear, TensorT<S>::full({1}, S(0.5)));
}

template <typename S>
TensorT<S> dot(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("dot expects matching shapes, got " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()));
    }
    return sum(mul(a, b));
}

template <typename S>
bool all_finite(const TensorT<S>& a) {
    for (S v : a.data()) {
        if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
}

// --------------------------------- backward --------------------------------

template <typename S>
std::vector<TensorT<S>> grad(const TensorT<S>& loss, const std::vector<TensorT<S>>& wrt,
                             bool create_graph) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("grad: loss must be a defined one-element tensor");
    }
    std::vector<TensorT<S>> out(wrt.size());
    for (size_t i = 0; i < wrt.size(); ++i) {
        if (!wrt[i].defined() || !wrt[i].has_node()) {
            throw ContractError("grad: target " + std::to_string(i) +
                                " is not attached to a graph");
        }
        out[i] = TensorT<S>::zeros(wrt[i].shape());
    }
    if (!loss.has_node()) return out;

    using Node = NodeT<S>;

    // Reachable subgraph, ordered by creation id. Inputs always precede their
    // consumers, so ascending id is a topological order.
    std::vector<Node*> order;
    {
        std::unordered_set<Node*> seen;
        std::vector<Node*> stack{loss.node.get()};
        seen.insert(loss.node.get());
        while (!stack.empty()) {
            Node* n = stack.back();
            stack.pop_back();
            order.push_back(n);
            for (const auto& p : n->parents) {
                if (p && seen.insert(p.get()).second) stack.push_back(p.get());
            }
        }
        std::sort(order.begin(), order.end(),
                  [](const Node* a, const Node* b) { return a->id < b->id; });
    }

    // A node needs a visit only if some requested target lies beneath it.
    std::unordered_set<Node*> targets;
    for (const auto& w : wrt) targets.insert(w.node.get());
    std::unordered_map<Node*, char> leads;
    leads.reserve(order.size());
    for (Node* n : order) {
        char l = targets.count(n) ? 1 : 0;
        if (!l) {
            for (const auto& p : n->parents) {
                if (p && leads[p.get()]) {
                    l = 1;
                    break;
                }
            }
        }
        leads[n] = l;
    }
    if (!leads[loss.node.get()]) return out;

    std::unordered_map<Node*, TensorT<S>> adjoint;
    adjoint.reserve(order.size());
    adjoint[loss.node.get()] = TensorT<S>::full({1}, S(1));

    detail::RecordScope rec(create_graph);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (!leads[n] || !n->vjp) continue;
        auto found = adjoint.find(n);
        if (found == adjoint.end()) continue;
        std::vector<char> need(n->parents.size(), 0);
        bool any = false;
        for (size_t i = 0; i < n->parents.size(); ++i) {
            if (n->parents[i] && leads[n->parents[i].get()]) {
                need[i] = 1;
                any = true;
            }
        }
        if (!any) continue;
        auto grads = n->vjp(found->second, need);
        for (size_t i = 0; i < n->parents.size(); ++i) {
            if (!need[i] || !grads[i].defined()) continue;
            Node* p = n->parents[i].get();
            auto slot = adjoint.find(p);
            if (slot == adjoint.end()) {
                adjoint.emplace(p, grads[i]);
            } else {
                slot->second = add(slot->second, grads[i]);
            }
        }
    }

    for (size_t i = 0; i < wrt.size(); ++i) {
        auto found = adjoint.find(wrt[i].node.get());
        if (found != adjoint.end()) out[i] = found->second;
    }
    return out;
}

// ---------------------------- instantiations -------------------------------

#define HOTM_INSTANTIATE_TENSOR(S)                                                            \
    template class TensorT<S>;                                                                \
    template TensorT<S> add(const TensorT<S>&, const TensorT<S>&);                            \
    template TensorT<S> sub(const TensorT<S>&, const TensorT<S>&);                            \
    template TensorT<S> mul(const TensorT<S>&, const TensorT<S>&);                            \
    template TensorT<S> div(const TensorT<S>&, const TensorT<S>&);                            \
    template TensorT<S> scalar_mul(const TensorT<S>&, S);                                     \
    template TensorT<S> relu(const TensorT<S>&);                                              \
    template TensorT<S> exp(const TensorT<S>&);                                               \
    template TensorT<S> log(const TensorT<S>&);                                               \
    template TensorT<S> sqrt(const TensorT<S>&);                                              \
    template TensorT<S> square(const TensorT<S>&);                                            \
    template TensorT<S> sum(const TensorT<S>&);                                               \
    template TensorT<S> mean(const TensorT<S>&);                                              \
    template TensorT<S> sum_to(const TensorT<S>&, const Shape&);                              \
    template TensorT<S> broadcast_to(const TensorT<S>&, const Shape&);                        \
    template TensorT<S> reshape(const TensorT<S>&, const Shape&);                             \
    template TensorT<S> flatten(const TensorT<S>&);                                           \
    template TensorT<S> transpose(const TensorT<S>&);                                         \
    template TensorT<S> slice(const TensorT<S>&, int64_t, int64_t);                           \
    template TensorT<S> matmul(const TensorT<S>&, const TensorT<S>&);                         \
    template TensorT<S> conv2d(const TensorT<S>&, const TensorT<S>&);                         \
    template TensorT<S> avg_pool2d(const TensorT<S>&);                                        \
    template TensorT<S> instance_norm(const TensorT<S>&, S);                                  \
    template TensorT<S> softmax_cross_entropy(const TensorT<S>&, const std::vector<uint32_t>&); \
    template TensorT<S> smooth_l1(const TensorT<S>&);                                         \
    template TensorT<S> dot(const TensorT<S>&, const TensorT<S>&);                            \
    template bool all_finite(const TensorT<S>&);                                              \
    template std::vector<TensorT<S>> grad(const TensorT<S>&, const std::vector<TensorT<S>>&, bool);

HOTM_INSTANTIATE_TENSOR(float)
HOTM_INSTANTIATE_TENSOR(double)

#undef HOTM_INSTANTIATE_TENSOR

}  // namespace hotm
