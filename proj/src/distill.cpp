#include "hotm/distill.hpp"

#include <chrono>
#include <cmath>
#include <limits>

#include "train_loop.hpp"

namespace hotm {

Granularity parse_granularity(const std::string& text) {
    if (text == "layer") return Granularity::Layer;
    if (text == "scalar") return Granularity::Scalar;
    throw ConfigError("unknown granularity '" + text + "' (expected layer or scalar)");
}

std::string granularity_name(Granularity g) {
    return g == Granularity::Layer ? "layer" : "scalar";
}

void DistillConfig::validate() const {
    if (iterations < 0) throw ConfigError("iterations must be >= 0");
    if (expert_span < 2) throw ConfigError("expert_span must be >= 2");
    if (student_steps < 2) throw ConfigError("student_steps must be >= 2");
    if (t_min < 0 || t_min > t_max) throw ConfigError("epoch range [t_min, t_max] is invalid");
    if (ho_weight < 0) throw ConfigError("ho_weight must be >= 0");
    if (kappa_base <= 0) throw ConfigError("kappa_base must be > 0");
    if (kappa_growth <= 1.0) {
        throw ConfigError("growth factor mu must satisfy mu > 1, got " +
                          std::to_string(kappa_growth));
    }
    if (kappa_period < 1) throw ConfigError("kappa_period must be >= 1");
    if (outer_lr_images <= 0 || outer_lr_alpha <= 0) {
        throw ConfigError("outer learning rates must be > 0");
    }
    if (outer_momentum < 0 || outer_momentum >= 1) {
        throw ConfigError("outer_momentum must lie in [0, 1)");
    }
    if (eps <= 0) throw ConfigError("eps must be > 0");
    if (ipc < 1) throw ConfigError("ipc must be >= 1");
    if (alpha_init <= 0) throw ConfigError("alpha_init must be > 0");
    if (max_segment_retries < 1) throw ConfigError("max_segment_retries must be >= 1");
}

// ------------------------------ matching units ------------------------------

std::vector<UnitRange> unit_ranges(const Layout& layout, Granularity granularity) {
    std::vector<UnitRange> units;
    if (granularity == Granularity::Layer) {
        // One unit per layer: weight and bias entries share a name prefix and
        // are contiguous by construction.
        for (const auto& entry : layout) {
            std::string prefix = entry.name.substr(0, entry.name.find('.'));
            if (!units.empty() && units.back().name == prefix) {
                units.back().length += entry.length;
            } else {
                units.push_back({prefix, entry.offset, entry.length});
            }
        }
    } else {
        for (const auto& entry : layout) {
            for (int64_t i = 0; i < entry.length; ++i) {
                units.push_back({entry.name + "[" + std::to_string(i) + "]", entry.offset + i, 1});
            }
        }
    }
    return units;
}

// -------------------------------- student unroll ----------------------------

template <typename S>
UnrollResultT<S> student_unroll(const ArchSpec& arch, const SegmentT<S>& segment,
                                const TensorT<S>& images, const std::vector<uint32_t>& labels,
                                const TensorT<S>& alpha, int steps) {
    if (steps < 1) throw ContractError("student_unroll needs at least one step");
    if (alpha.numel() != 1) throw ContractError("alpha must be a one-element tensor");

    // The start snapshot enters as a constant; the per-step gradient is taken
    // with respect to a private leaf so nothing flows back into the expert.
    TensorT<S> theta = segment.theta_start.detach();
    theta.requires_grad();

    UnrollResultT<S> out;
    const int mid_at = steps / 2;
    if (mid_at == 0) out.theta_mid = theta;
    for (int step = 0; step < steps; ++step) {
        TensorT<S> loss = softmax_cross_entropy(forward(arch, theta, images), labels);
        TensorT<S> g = grad(loss, {theta}, /*create_graph=*/true)[0];
        theta = sub(theta, mul(alpha, g));
        if (!all_finite(theta)) {
            throw DivergenceError("student unroll diverged at step " + std::to_string(step + 1),
                                  step + 1);
        }
        if (step + 1 == mid_at) out.theta_mid = theta;
    }
    out.theta_final = theta;
    return out;
}

// --------------------------------- losses -----------------------------------

namespace {

template <typename S>
double sum_sq_diff(const TensorT<S>& a, const TensorT<S>& b, int64_t offset, int64_t length) {
    const auto& da = a.data();
    const auto& db = b.data();
    double acc = 0.0;
    for (int64_t i = offset; i < offset + length; ++i) {
        double d = static_cast<double>(da[static_cast<size_t>(i)]) -
                   static_cast<double>(db[static_cast<size_t>(i)]);
        acc += d * d;
    }
    return acc;
}

// Detached per-unit loss values (for selection and logging): one plain pass,
// no graph involvement.
template <typename S>
std::vector<double> unit_loss_values(const TensorT<S>& theta_final, const SegmentT<S>& segment,
                                     const std::vector<UnitRange>& units, double eps) {
    std::vector<double> values(units.size());
    for (size_t u = 0; u < units.size(); ++u) {
        double num = sum_sq_diff(theta_final, segment.theta_target, units[u].offset,
                                 units[u].length);
        double den = sum_sq_diff(segment.theta_target, segment.theta_start, units[u].offset,
                                 units[u].length);
        values[u] = num / (den + eps);
    }
    return values;
}

// Gradient-bearing sum of the selected unit losses, regrouped as one weighted
// squared difference: sum_u v_u * l_u == sum_j w_j (theta_j - target_j)^2 with
// w_j = v_{u(j)} / (den_{u(j)} + eps). Keeps the graph small regardless of
// the unit count.
template <typename S>
TensorT<S> selected_units_term(const TensorT<S>& theta_final, const SegmentT<S>& segment,
                               const std::vector<UnitRange>& units,
                               const std::vector<uint8_t>& selected, double eps) {
    bool any = false;
    std::vector<S> weights(static_cast<size_t>(theta_final.numel()), S(0));
    for (size_t u = 0; u < units.size(); ++u) {
        if (!selected[u]) continue;
        any = true;
        double den = sum_sq_diff(segment.theta_target, segment.theta_start, units[u].offset,
                                 units[u].length);
        S w = static_cast<S>(1.0 / (den + eps));
        for (int64_t j = units[u].offset; j < units[u].offset + units[u].length; ++j) {
            weights[static_cast<size_t>(j)] = w;
        }
    }
    if (!any) return {};
    TensorT<S> w = TensorT<S>::from_data(theta_final.shape(), std::move(weights));
    return sum(mul(w, square(sub(theta_final, segment.theta_target.detach()))));
}

}  // namespace

template <typename S>
TensorT<S> matching_loss(const TensorT<S>& theta_final, const SegmentT<S>& segment, double eps) {
    if (theta_final.numel() != segment.theta_target.numel()) {
        throw DimensionError("matching_loss: student " + shape_str(theta_final.shape()) +
                             " vs expert " + shape_str(segment.theta_target.shape()));
    }
    double denom =
        sum_sq_diff(segment.theta_target, segment.theta_start, 0, segment.theta_target.numel());
    if (denom < eps) {
        throw DegenerateSegmentError("expert displacement " + std::to_string(denom) +
                                     " is below eps");
    }
    TensorT<S> diff = sub(theta_final, segment.theta_target.detach());
    return scalar_mul(sum(square(diff)), static_cast<S>(1.0 / (denom + eps)));
}

template <typename S>
UnitLossesT<S> per_unit_losses(const TensorT<S>& theta_final, const SegmentT<S>& segment,
                               const Layout& layout, Granularity granularity, double eps) {
    if (theta_final.shape().size() != 1) {
        throw ContractError("per_unit_losses expects a flat parameter vector");
    }
    UnitLossesT<S> out;
    out.unit_map = unit_ranges(layout, granularity);
    out.values.reserve(out.unit_map.size());
    for (const auto& unit : out.unit_map) {
        double denom = sum_sq_diff(segment.theta_target, segment.theta_start, unit.offset,
                                   unit.length);
        TensorT<S> diff = sub(slice(theta_final, unit.offset, unit.length),
                              slice(segment.theta_target.detach(), unit.offset, unit.length));
        out.values.push_back(scalar_mul(sum(square(diff)), static_cast<S>(1.0 / (denom + eps))));
    }
    return out;
}

double kappa_at(int64_t iteration, const DistillConfig& cfg) {
    if (iteration < 0) throw InputError("kappa_at: iteration must be >= 0");
    return cfg.kappa_base * std::pow(cfg.kappa_growth,
                                     static_cast<double>(iteration / cfg.kappa_period));
}

std::vector<uint8_t> select_easy(const std::vector<double>& unit_losses, double kappa) {
    std::vector<uint8_t> v(unit_losses.size());
    for (size_t i = 0; i < unit_losses.size(); ++i) v[i] = unit_losses[i] < kappa ? 1 : 0;
    return v;
}

template <typename S>
TensorT<S> high_order_potential(const TensorT<S>& a, const TensorT<S>& b, const TensorT<S>& c,
                                double eps) {
    if (a.shape() != b.shape() || b.shape() != c.shape()) {
        throw DimensionError("high_order_potential expects matching shapes");
    }
    TensorT<S> leg_ab = sub(a, b);
    TensorT<S> leg_cb = sub(c, b);
    TensorT<S> norm_ab = sqrt(sum(square(leg_ab)));
    TensorT<S> norm_cb = sqrt(sum(square(leg_cb)));
    if (static_cast<double>(norm_ab.item()) < eps || static_cast<double>(norm_cb.item()) < eps) {
        throw DegenerateAngleError("triangle leg norm below eps");
    }
    return dot(div(leg_ab, broadcast_to(norm_ab, leg_ab.shape())),
               div(leg_cb, broadcast_to(norm_cb, leg_cb.shape())));
}

template <typename S>
TensorT<S> hotm_loss(const SegmentT<S>& segment, const TensorT<S>& theta_mid,
                     const TensorT<S>& theta_final, double eps) {
    // Expert cosine over detached snapshots: a plain constant.
    S expert_cos = high_order_potential(segment.theta_start.detach(), segment.theta_mid.detach(),
                                        segment.theta_target.detach(), eps)
                       .item();
    TensorT<S> student_cos =
        high_order_potential(segment.theta_start.detach(), theta_mid, theta_final, eps);
    return smooth_l1(sub(student_cos, TensorT<S>::full({1}, expert_cos)));
}

template <typename S>
TotalLossT<S> total_loss(const UnitLossesT<S>& unit_losses, const std::vector<uint8_t>& selected,
                         double kappa, const TensorT<S>& global_tm, const TensorT<S>& ho_term,
                         double ho_weight, bool e2c_enabled, bool ho_enabled) {
    TotalLossT<S> out;
    double reported = 0.0;
    TensorT<S> objective;
    if (e2c_enabled) {
        if (selected.size() != unit_losses.values.size()) {
            throw ContractError("selection vector does not match unit count");
        }
        int64_t picked = 0;
        for (size_t i = 0; i < selected.size(); ++i) {
            if (!selected[i]) continue;
            ++picked;
            reported += static_cast<double>(unit_losses.values[i].item());
            objective = objective.defined() ? add(objective, unit_losses.values[i])
                                            : unit_losses.values[i];
        }
        if (std::isfinite(kappa)) reported -= kappa * static_cast<double>(picked);
    } else {
        reported = static_cast<double>(global_tm.item());
        objective = global_tm;
    }
    if (ho_enabled && ho_term.defined() && ho_weight != 0.0) {
        reported += ho_weight * static_cast<double>(ho_term.item());
        TensorT<S> weighted = scalar_mul(ho_term, static_cast<S>(ho_weight));
        objective = objective.defined() ? add(objective, weighted) : weighted;
    }
    if (!objective.defined()) objective = TensorT<S>::zeros({1});
    out.objective = objective;
    out.reported = reported;
    return out;
}

// -------------------------------- outer loop --------------------------------

DistillResult run_distillation(const LabeledDataset& real, const std::vector<Trajectory>& pool,
                               const DistillConfig& cfg) {
    cfg.validate();
    if (pool.empty()) throw InputError("run_distillation: empty trajectory pool");
    const ArchSpec arch = pool[0].meta.arch;
    const Layout& layout = pool[0].layout;
    for (const auto& traj : pool) {
        if (!(traj.meta.arch == arch)) {
            throw InputError("run_distillation: trajectories disagree on architecture");
        }
        if (cfg.t_max + cfg.expert_span > traj.meta.epochs) {
            throw ConfigError("t_max + expert_span exceeds a trajectory of " +
                              std::to_string(traj.meta.epochs) + " epochs");
        }
    }
    if (arch.in_c != real.c() || arch.in_h != real.h() || arch.in_w != real.w() ||
        arch.num_classes != real.class_count) {
        throw InputError("run_distillation: dataset does not match the expert architecture");
    }

    DistillResult result;
    result.distilled = init_synthetic(real, cfg.ipc, cfg.seed,
                                      static_cast<float>(cfg.alpha_init));
    if (cfg.iterations == 0) return result;

    SyntheticDataset& ds = result.distilled;
    Rng rng(substream(cfg.seed, 0xD157));
    Tensor images = ds.images.detach();
    float alpha = ds.alpha;
    Tensor momentum_images = Tensor::zeros(images.shape());
    double momentum_alpha = 0.0;
    result.log.reserve(static_cast<size_t>(cfg.iterations));

    for (int64_t iteration = 0; iteration < cfg.iterations; ++iteration) {
        ExpertSegment segment;
        bool found = false;
        for (int retry = 0; retry < cfg.max_segment_retries; ++retry) {
            segment = sample_segment(pool, cfg.t_min, cfg.t_max, cfg.expert_span, rng);
            double displacement = sum_sq_diff(segment.theta_target, segment.theta_start, 0,
                                              segment.theta_target.numel());
            if (displacement >= cfg.eps) {
                found = true;
                break;
            }
        }
        if (!found) {
            throw DegenerateSegmentError("no non-degenerate segment after " +
                                         std::to_string(cfg.max_segment_retries) +
                                         " retries at iteration " + std::to_string(iteration));
        }

        Tensor image_leaf = images.detach();
        image_leaf.requires_grad();
        Tensor alpha_leaf = Tensor::full({1}, alpha);
        alpha_leaf.requires_grad();

        UnrollResultT<float> unrolled;
        try {
            unrolled = student_unroll(arch, segment, image_leaf, ds.labels, alpha_leaf,
                                      cfg.student_steps);
        } catch (const DivergenceError& e) {
            throw DivergenceError(std::string(e.what()) + " (outer iteration " +
                                      std::to_string(iteration) + ")",
                                  iteration);
        }

        const double kappa = kappa_at(iteration, cfg);
        const std::vector<UnitRange> units = unit_ranges(layout, cfg.granularity);
        std::vector<double> unit_values =
            unit_loss_values(unrolled.theta_final, segment, units, cfg.eps);
        std::vector<uint8_t> selected = cfg.e2c_enabled
                                            ? select_easy(unit_values, kappa)
                                            : std::vector<uint8_t>(unit_values.size(), 1);

        Tensor global_tm = matching_loss(unrolled.theta_final, segment, cfg.eps);
        Tensor ho_term;
        if (cfg.ho_enabled) {
            try {
                ho_term = hotm_loss(segment, unrolled.theta_mid, unrolled.theta_final, cfg.eps);
            } catch (const DegenerateAngleError&) {
                // Degenerate angle: the potential term is absent this iteration.
            }
        }

        // The combined objective of the iteration (selected units or the
        // global matching loss, plus the weighted potential term).
        double reported = 0.0;
        Tensor objective;
        if (cfg.e2c_enabled) {
            objective = selected_units_term(unrolled.theta_final, segment, units, selected,
                                            cfg.eps);
            int64_t picked = 0;
            for (size_t i = 0; i < selected.size(); ++i) {
                if (selected[i]) {
                    reported += unit_values[i];
                    ++picked;
                }
            }
            reported -= kappa * static_cast<double>(picked);
        } else {
            objective = global_tm;
            reported = static_cast<double>(global_tm.item());
        }
        if (cfg.ho_enabled && ho_term.defined() && cfg.ho_weight != 0.0) {
            reported += cfg.ho_weight * static_cast<double>(ho_term.item());
            Tensor weighted = scalar_mul(ho_term, static_cast<float>(cfg.ho_weight));
            objective = objective.defined() ? add(objective, weighted) : weighted;
        }
        if (!objective.defined()) objective = Tensor::zeros({1});
        auto grads = grad(objective, {image_leaf, alpha_leaf});

        momentum_images = add(scalar_mul(momentum_images, static_cast<float>(cfg.outer_momentum)),
                              grads[0]);
        images = sub(images, scalar_mul(momentum_images, static_cast<float>(cfg.outer_lr_images)))
                     .detach();
        momentum_alpha = cfg.outer_momentum * momentum_alpha +
                         static_cast<double>(grads[1].item());
        alpha = static_cast<float>(alpha - cfg.outer_lr_alpha * momentum_alpha);
        if (alpha < 1e-6f) alpha = 1e-6f;
        if (!all_finite(images) || !std::isfinite(static_cast<double>(alpha))) {
            throw DivergenceError("synthetic data diverged at iteration " +
                                      std::to_string(iteration),
                                  iteration);
        }

        IterationLog entry;
        entry.iteration = iteration;
        entry.loss = reported;
        entry.l_tm = static_cast<double>(global_tm.item());
        entry.l_hotm = ho_term.defined() ? static_cast<double>(ho_term.item()) : 0.0;
        int64_t picked = 0;
        for (uint8_t flag : selected) picked += flag;
        entry.selected_frac = selected.empty()
                                  ? 0.0
                                  : static_cast<double>(picked) / static_cast<double>(selected.size());
        entry.kappa = kappa;
        entry.alpha = static_cast<double>(alpha);
        if (cfg.log_units) {
            entry.unit_losses = unit_values;
            entry.selected = selected;
        }
        result.log.push_back(std::move(entry));
    }

    ds.images = images.detach();
    ds.alpha = alpha;
    return result;
}

// ------------------------------ gradient check ------------------------------

namespace {

struct TinyInstance {
    ArchSpec arch;
    Layout layout;
    SegmentT<double> segment;
    std::vector<double> pixels;  // 3 images x 2 features
    std::vector<uint32_t> labels;
    double alpha = 0.05;
};

// Three Gaussian clusters on the unit circle, 2 features per sample.
TinyInstance build_tiny_instance() {
    TinyInstance inst;
    inst.arch = ArchSpec{ArchKind::Mlp, 1, 8, 2, 1, 1, 3, NormKind::None};
    inst.layout = layout_for(inst.arch);

    Rng rng(substream(41, 0xA1));
    const int per_class = 10;
    const int n = 3 * per_class;
    std::vector<double> features(static_cast<size_t>(n) * 2);
    std::vector<uint32_t> labels(static_cast<size_t>(n));
    for (int cls = 0; cls < 3; ++cls) {
        double angle = 2.0943951023931953 * cls;  // 2*pi/3 spacing
        for (int s = 0; s < per_class; ++s) {
            int row = cls * per_class + s;
            features[2 * row] = std::cos(angle) + 0.3 * rng.normal();
            features[2 * row + 1] = std::sin(angle) + 0.3 * rng.normal();
            labels[static_cast<size_t>(row)] = static_cast<uint32_t>(cls);
        }
    }
    TensorT<double> images = TensorT<double>::from_data({n, 2, 1, 1}, features);

    // Expert: two full-batch SGD epochs recorded as the segment snapshots.
    ParamVectorT<double> theta0 = init_params<double>(inst.arch, 1);
    std::vector<TensorT<double>> snaps{theta0.values};
    detail::SgdOptions opt{0.1, 2, n, 1};
    detail::sgd_train<double>(inst.arch, theta0.values, images, labels, opt,
                              [&](int, const TensorT<double>& theta, double) {
                                  snaps.push_back(theta.detach());
                              });
    inst.segment = {snaps[0], snaps[1], snaps[2], 0, 2};

    // Synthetic set: one sample per class.
    inst.labels = {0, 1, 2};
    for (int cls = 0; cls < 3; ++cls) {
        inst.pixels.push_back(features[static_cast<size_t>(2 * cls * per_class)]);
        inst.pixels.push_back(features[static_cast<size_t>(2 * cls * per_class + 1)]);
    }
    return inst;
}

// Gradient-bearing objective of the tiny instance: all units selected
// (kappa = +inf), potential weight 0.5, two student steps.
TensorT<double> tiny_objective(const TinyInstance& inst, const TensorT<double>& images,
                               const TensorT<double>& alpha) {
    auto unrolled = student_unroll(inst.arch, inst.segment, images, inst.labels, alpha, 2);
    auto units = per_unit_losses(unrolled.theta_final, inst.segment, inst.layout,
                                 Granularity::Layer, 1e-12);
    std::vector<uint8_t> all(units.values.size(), 1);
    TensorT<double> global_tm = matching_loss(unrolled.theta_final, inst.segment, 1e-12);
    TensorT<double> ho = hotm_loss(inst.segment, unrolled.theta_mid, unrolled.theta_final, 1e-12);
    return total_loss(units, all, std::numeric_limits<double>::infinity(), global_tm, ho, 0.5,
                      true, true)
        .objective;
}

double tiny_objective_value(const TinyInstance& inst, const std::vector<double>& pixels,
                            double alpha) {
    TensorT<double> images = TensorT<double>::from_data({3, 2, 1, 1}, pixels);
    TensorT<double> a = TensorT<double>::full({1}, alpha);
    return tiny_objective(inst, images, a).item();
}

}  // namespace

GradCheckReport run_hypergradient_check(double fd_step) {
    auto start = std::chrono::steady_clock::now();
    TinyInstance inst = build_tiny_instance();

    TensorT<double> images = TensorT<double>::from_data({3, 2, 1, 1}, inst.pixels);
    images.requires_grad();
    TensorT<double> alpha = TensorT<double>::full({1}, inst.alpha);
    alpha.requires_grad();
    auto analytic = grad(tiny_objective(inst, images, alpha), {images, alpha});

    auto rel_err = [](double a, double fd) {
        double diff = std::abs(a - fd);
        return diff / std::max({std::abs(a), std::abs(fd), 1e-8});
    };

    GradCheckReport report;
    const auto& pixel_grad = analytic[0].data();
    for (size_t i = 0; i < inst.pixels.size(); ++i) {
        auto plus = inst.pixels;
        auto minus = inst.pixels;
        plus[i] += fd_step;
        minus[i] -= fd_step;
        double fd = (tiny_objective_value(inst, plus, inst.alpha) -
                     tiny_objective_value(inst, minus, inst.alpha)) /
                    (2.0 * fd_step);
        report.max_rel_err = std::max(report.max_rel_err, rel_err(pixel_grad[i], fd));
        ++report.checked;
    }
    double fd_alpha = (tiny_objective_value(inst, inst.pixels, inst.alpha + fd_step) -
                       tiny_objective_value(inst, inst.pixels, inst.alpha - fd_step)) /
                      (2.0 * fd_step);
    report.alpha_rel_err = rel_err(analytic[1].item(), fd_alpha);
    report.max_rel_err = std::max(report.max_rel_err, report.alpha_rel_err);
    ++report.checked;
    report.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

// ------------------------------ instantiations ------------------------------

#define HOTM_INSTANTIATE_DISTILL(S)                                                          \
    template UnrollResultT<S> student_unroll(const ArchSpec&, const SegmentT<S>&,            \
                                             const TensorT<S>&, const std::vector<uint32_t>&, \
                                             const TensorT<S>&, int);                        \
    template TensorT<S> matching_loss(const TensorT<S>&, const SegmentT<S>&, double);        \
    template UnitLossesT<S> per_unit_losses(const TensorT<S>&, const SegmentT<S>&,           \
                                            const Layout&, Granularity, double);             \
    template TensorT<S> high_order_potential(const TensorT<S>&, const TensorT<S>&,           \
                                             const TensorT<S>&, double);                     \
    template TensorT<S> hotm_loss(const SegmentT<S>&, const TensorT<S>&, const TensorT<S>&,  \
                                  double);                                                   \
    template TotalLossT<S> total_loss(const UnitLossesT<S>&, const std::vector<uint8_t>&,    \
                                      double, const TensorT<S>&, const TensorT<S>&, double,  \
                                      bool, bool);

HOTM_INSTANTIATE_DISTILL(float)
HOTM_INSTANTIATE_DISTILL(double)

#undef HOTM_INSTANTIATE_DISTILL

}  // namespace hotm
