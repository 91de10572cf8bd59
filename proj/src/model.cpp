#include "hotm/model.hpp"

#include <cmath>
#include <sstream>

#include "hotm/rng.hpp"

namespace hotm {

namespace {

const char* kind_name(ArchKind k) { return k == ArchKind::Mlp ? "mlp" : "convnet"; }
const char* norm_name(NormKind n) { return n == NormKind::Instance ? "instance" : "none"; }

}  // namespace

void ArchSpec::validate() const {
    if (width < 1) throw ConstructionError("arch width must be positive");
    if (in_c < 1 || in_h < 1 || in_w < 1) throw ConstructionError("arch input shape must be positive");
    if (num_classes < 2) throw ConstructionError("arch needs at least two classes");
    if (kind == ArchKind::Mlp) {
        if (depth < 0) throw ConstructionError("mlp depth must be >= 0");
    } else {
        if (depth < 1) throw ConstructionError("convnet depth must be >= 1");
        int h = in_h, w = in_w;
        for (int d = 0; d < depth; ++d) {
            if (h % 2 != 0 || w % 2 != 0) {
                throw ConstructionError("convnet depth " + std::to_string(depth) +
                                        " does not divide input " + std::to_string(in_h) + "x" +
                                        std::to_string(in_w) + " by 2^depth");
            }
            h /= 2;
            w /= 2;
        }
    }
}

std::string ArchSpec::to_string() const {
    std::ostringstream os;
    os << kind_name(kind) << ":d=" << depth << ":w=" << width;
    if (kind == ArchKind::Convnet) os << ":norm=" << norm_name(norm);
    return os.str();
}

nlohmann::json ArchSpec::to_json() const {
    return nlohmann::json{{"kind", kind_name(kind)}, {"depth", depth},       {"width", width},
                          {"in_c", in_c},            {"in_h", in_h},         {"in_w", in_w},
                          {"classes", num_classes},  {"norm", norm_name(norm)}};
}

ArchSpec ArchSpec::from_json(const nlohmann::json& j) {
    ArchSpec s;
    std::string kind = j.at("kind").get<std::string>();
    if (kind == "mlp") {
        s.kind = ArchKind::Mlp;
    } else if (kind == "convnet") {
        s.kind = ArchKind::Convnet;
    } else {
        throw ConstructionError("unknown arch kind '" + kind + "'");
    }
    s.depth = j.at("depth").get<int>();
    s.width = j.at("width").get<int>();
    s.in_c = j.at("in_c").get<int>();
    s.in_h = j.at("in_h").get<int>();
    s.in_w = j.at("in_w").get<int>();
    s.num_classes = j.at("classes").get<int>();
    std::string norm = j.at("norm").get<std::string>();
    if (norm == "instance") {
        s.norm = NormKind::Instance;
    } else if (norm == "none") {
        s.norm = NormKind::None;
    } else {
        throw ConstructionError("unknown norm kind '" + norm + "'");
    }
    s.validate();
    return s;
}

ArchSpec parse_arch(const std::string& text) {
    ArchSpec s;
    std::string head = text;
    std::string opts;
    if (auto colon = text.find(':'); colon != std::string::npos) {
        head = text.substr(0, colon);
        opts = text.substr(colon + 1);
    }
    if (head == "mlp") {
        s.kind = ArchKind::Mlp;
        s.depth = 1;
        s.width = 32;
        s.norm = NormKind::None;
    } else if (head == "convnet") {
        s.kind = ArchKind::Convnet;
        s.depth = 2;
        s.width = 16;
        s.norm = NormKind::Instance;
    } else {
        throw ConstructionError("unknown arch '" + head + "' (expected mlp or convnet)");
    }
    std::istringstream is(opts);
    std::string item;
    while (std::getline(is, item, ':')) {
        if (item.empty()) continue;
        auto eq = item.find('=');
        if (eq == std::string::npos) throw ConstructionError("bad arch option '" + item + "'");
        std::string key = item.substr(0, eq);
        std::string val = item.substr(eq + 1);
        if (key == "d" || key == "depth") {
            s.depth = std::stoi(val);
        } else if (key == "w" || key == "width") {
            s.width = std::stoi(val);
        } else if (key == "norm") {
            if (val == "instance") {
                s.norm = NormKind::Instance;
            } else if (val == "none") {
                s.norm = NormKind::None;
            } else {
                throw ConstructionError("unknown norm '" + val + "'");
            }
        } else {
            throw ConstructionError("unknown arch option '" + key + "'");
        }
    }
    return s;
}

// ---------------------------------- layout ---------------------------------

Layout layout_for(const ArchSpec& spec) {
    spec.validate();
    Layout layout;
    int64_t offset = 0;
    auto push = [&](std::string name, Shape shape) {
        int64_t len = shape_numel(shape);
        layout.push_back({std::move(name), std::move(shape), offset, len});
        offset += len;
    };
    if (spec.kind == ArchKind::Mlp) {
        int64_t in = spec.input_features();
        for (int d = 0; d < spec.depth; ++d) {
            std::string base = "fc" + std::to_string(d + 1);
            push(base + ".weight", {spec.width, in});
            push(base + ".bias", {spec.width});
            in = spec.width;
        }
        push("head.weight", {spec.num_classes, in});
        push("head.bias", {spec.num_classes});
    } else {
        int64_t in_ch = spec.in_c;
        int h = spec.in_h, w = spec.in_w;
        for (int d = 0; d < spec.depth; ++d) {
            std::string base = "conv" + std::to_string(d + 1);
            push(base + ".weight", {spec.width, in_ch, 3, 3});
            push(base + ".bias", {spec.width});
            in_ch = spec.width;
            h /= 2;
            w /= 2;
        }
        push("head.weight", {spec.num_classes, in_ch * h * w});
        push("head.bias", {spec.num_classes});
    }
    return layout;
}

int64_t param_count(const ArchSpec& spec) {
    const Layout layout = layout_for(spec);
    return layout.back().offset + layout.back().length;
}

// ------------------------------- parameters --------------------------------

template <typename S>
ParamVectorT<S> init_params(const ArchSpec& spec, uint64_t seed) {
    Layout layout = layout_for(spec);
    std::vector<S> values(static_cast<size_t>(layout.back().offset + layout.back().length), S(0));
    Rng rng(substream(seed, 0x1717));
    for (const auto& entry : layout) {
        if (entry.name.size() < 7 || entry.name.substr(entry.name.size() - 7) != ".weight") {
            continue;  // biases stay zero
        }
        int64_t fan_in = 1;
        for (size_t d = 1; d < entry.shape.size(); ++d) fan_in *= entry.shape[d];
        double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        for (int64_t i = 0; i < entry.length; ++i) {
            values[static_cast<size_t>(entry.offset + i)] =
                static_cast<S>(rng.uniform(-bound, bound));
        }
    }
    ParamVectorT<S> p;
    const int64_t total = static_cast<int64_t>(values.size());
    p.layout = std::move(layout);
    p.values = TensorT<S>::from_data({total}, std::move(values));
    return p;
}

// --------------------------------- forward ---------------------------------

namespace {

template <typename S>
TensorT<S> layer_view(const TensorT<S>& flat, const LayoutEntry& entry) {
    return reshape(slice(flat, entry.offset, entry.length), entry.shape);
}

template <typename S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& weight, const TensorT<S>& bias) {
    int64_t out = weight.shape()[0];
    return add(matmul(x, transpose(weight)), reshape(bias, {1, out}));
}

}  // namespace

template <typename S>
TensorT<S> forward(const ArchSpec& spec, const TensorT<S>& flat_params, const TensorT<S>& batch) {
    const Layout layout = layout_for(spec);
    int64_t total = layout.back().offset + layout.back().length;
    if (flat_params.shape().size() != 1 || flat_params.numel() != total) {
        throw ContractError("parameter vector " + shape_str(flat_params.shape()) +
                            " does not match layout of " + std::to_string(total) + " values");
    }
    if (batch.shape().size() != 4 || batch.shape()[1] != spec.in_c ||
        batch.shape()[2] != spec.in_h || batch.shape()[3] != spec.in_w) {
        throw DimensionError("batch " + shape_str(batch.shape()) + " does not match input " +
                             std::to_string(spec.in_c) + "x" + std::to_string(spec.in_h) + "x" +
                             std::to_string(spec.in_w));
    }
    size_t li = 0;
    auto next = [&]() -> TensorT<S> { return layer_view(flat_params, layout[li++]); };

    if (spec.kind == ArchKind::Mlp) {
        TensorT<S> x = flatten(batch);
        for (int d = 0; d < spec.depth; ++d) {
            TensorT<S> weight = next();
            TensorT<S> bias = next();
            x = relu(linear(x, weight, bias));
        }
        TensorT<S> weight = next();
        TensorT<S> bias = next();
        return linear(x, weight, bias);
    }

    TensorT<S> x = batch;
    for (int d = 0; d < spec.depth; ++d) {
        TensorT<S> kernel = next();
        TensorT<S> bias = next();
        x = add(conv2d(x, kernel), reshape(bias, {1, spec.width, 1, 1}));
        if (spec.norm == NormKind::Instance) x = instance_norm(x);
        x = relu(x);
        x = avg_pool2d(x);
    }
    TensorT<S> weight = next();
    TensorT<S> bias = next();
    return linear(flatten(x), weight, bias);
}

// --------------------------- flatten / unflatten ----------------------------

template <typename S>
std::vector<TensorT<S>> unflatten(const ParamVectorT<S>& params) {
    int64_t total = params.layout.empty()
                        ? 0
                        : params.layout.back().offset + params.layout.back().length;
    if (params.values.shape().size() != 1 || params.values.numel() != total) {
        throw ContractError("parameter vector does not match its layout");
    }
    std::vector<TensorT<S>> layers;
    layers.reserve(params.layout.size());
    for (const auto& entry : params.layout) layers.push_back(layer_view(params.values, entry));
    return layers;
}

template <typename S>
ParamVectorT<S> flatten(const std::vector<TensorT<S>>& layers, const Layout& layout) {
    if (layers.size() != layout.size()) {
        throw ContractError("flatten: " + std::to_string(layers.size()) + " layers for a layout of " +
                            std::to_string(layout.size()));
    }
    int64_t total = layout.empty() ? 0 : layout.back().offset + layout.back().length;
    std::vector<S> values(static_cast<size_t>(total));
    for (size_t i = 0; i < layers.size(); ++i) {
        if (layers[i].shape() != layout[i].shape) {
            throw ContractError("flatten: layer " + layout[i].name + " has shape " +
                                shape_str(layers[i].shape()) + ", layout expects " +
                                shape_str(layout[i].shape));
        }
        const auto& src = layers[i].data();
        std::copy(src.begin(), src.end(), values.begin() + layout[i].offset);
    }
    ParamVectorT<S> p;
    p.layout = layout;
    p.values = TensorT<S>::from_data({total}, std::move(values));
    return p;
}

#define HOTM_INSTANTIATE_MODEL(S)                                                       \
    template ParamVectorT<S> init_params(const ArchSpec&, uint64_t);                    \
    template TensorT<S> forward(const ArchSpec&, const TensorT<S>&, const TensorT<S>&); \
    template std::vector<TensorT<S>> unflatten(const ParamVectorT<S>&);                 \
    template ParamVectorT<S> flatten(const std::vector<TensorT<S>>&, const Layout&);

HOTM_INSTANTIATE_MODEL(float)
HOTM_INSTANTIATE_MODEL(double)

#undef HOTM_INSTANTIATE_MODEL

}  // namespace hotm
