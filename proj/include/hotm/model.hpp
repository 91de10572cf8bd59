#pragma once

// Network definitions with purely functional forward passes: parameters live
// in a flat vector with a layout map, and the forward pass is differentiable
// with respect to both the parameters and the input batch.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "hotm/tensor.hpp"

namespace hotm {

enum class ArchKind { Mlp, Convnet };
enum class NormKind { Instance, None };

struct ArchSpec {
    ArchKind kind = ArchKind::Convnet;
    int depth = 2;   // conv blocks, or hidden layers for the MLP (0 = linear head only)
    int width = 16;  // channels, or hidden units
    int in_c = 1;
    int in_h = 8;
    int in_w = 8;
    int num_classes = 3;
    NormKind norm = NormKind::Instance;

    int input_features() const { return in_c * in_h * in_w; }
    void validate() const;
    std::string to_string() const;

    nlohmann::json to_json() const;
    static ArchSpec from_json(const nlohmann::json& j);

    bool operator==(const ArchSpec&) const = default;
};

// Parses the compact CLI form, e.g. "convnet:d=2:w=16:norm=instance" or
// "mlp:d=1:w=32". Input shape and class count are filled in by the caller.
ArchSpec parse_arch(const std::string& text);

struct LayoutEntry {
    std::string name;
    Shape shape;
    int64_t offset = 0;
    int64_t length = 0;

    bool operator==(const LayoutEntry&) const = default;
};

using Layout = std::vector<LayoutEntry>;

// The layout is a pure function of the spec; two parameter vectors built from
// the same spec are always index-compatible.
Layout layout_for(const ArchSpec& spec);
int64_t param_count(const ArchSpec& spec);

template <typename S>
struct ParamVectorT {
    TensorT<S> values;  // flat, 1-D
    Layout layout;
};

using ParamVector = ParamVectorT<float>;

// Kaiming-uniform weights, zero biases; bit-identical per (spec, seed).
template <typename S>
ParamVectorT<S> init_params(const ArchSpec& spec, uint64_t seed);

// Logits [batch x classes]. Differentiable w.r.t. both arguments; synthetic
// pixels receive gradients through `batch`.
template <typename S>
TensorT<S> forward(const ArchSpec& spec, const TensorT<S>& flat_params, const TensorT<S>& batch);

// Views of the flat vector as per-layer tensors; differentiable when the flat
// vector is graph-attached.
template <typename S>
std::vector<TensorT<S>> unflatten(const ParamVectorT<S>& params);

// Inverse of unflatten; flatten(unflatten(p)) is bit-exact.
template <typename S>
ParamVectorT<S> flatten(const std::vector<TensorT<S>>& layers, const Layout& layout);

}  // namespace hotm
