#pragma once

// The distillation core: the differentiable N-step student unroll, the
// terminal matching loss, per-unit losses with easy-to-complex selection, the
// shape-wise trajectory potential, the combined objective, and the outer loop
// that updates the synthetic images and the student learning rate.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hotm/data.hpp"
#include "hotm/expert.hpp"
#include "hotm/model.hpp"

namespace hotm {

enum class Granularity { Layer, Scalar };

Granularity parse_granularity(const std::string& text);
std::string granularity_name(Granularity g);

struct DistillConfig {
    int64_t iterations = 2000;
    int expert_span = 2;    // epochs between expert start and target
    int student_steps = 10; // inner SGD steps per iteration
    int t_min = 0;
    int t_max = 10;
    double ho_weight = 0.5;      // weight of the shape potential term
    double kappa_base = 5e-9;
    double kappa_growth = 1.5;   // threshold growth factor, must be > 1
    int64_t kappa_period = 500;  // iterations between threshold increments
    Granularity granularity = Granularity::Layer;
    double outer_lr_images = 100.0;
    double outer_lr_alpha = 1e-5;
    double outer_momentum = 0.5;
    double eps = 1e-12;
    bool ho_enabled = true;
    bool e2c_enabled = true;
    uint64_t seed = 0;
    int ipc = 1;
    double alpha_init = 0.01;
    bool log_units = false;      // include per-unit losses and selections in the log
    int max_segment_retries = 16;

    void validate() const;  // throws ConfigError
};

struct SelectionState {
    double kappa = 0.0;
    std::vector<uint8_t> selected;  // v, one flag per matching unit
    int64_t iteration = 0;
};

struct UnitRange {
    std::string name;
    int64_t offset = 0;
    int64_t length = 0;
};

// Per-unit matching losses, graph-attached so selected units can drive the
// synthetic-data update.
template <typename S>
struct UnitLossesT {
    std::vector<TensorT<S>> values;
    std::vector<UnitRange> unit_map;
};

using UnitLosses = UnitLossesT<float>;

// The ranges partition [0, param_count): one per layer (weight+bias block) or
// one per scalar coordinate.
std::vector<UnitRange> unit_ranges(const Layout& layout, Granularity granularity);

template <typename S>
struct UnrollResultT {
    TensorT<S> theta_mid;    // after floor(steps/2) updates
    TensorT<S> theta_final;  // after all updates
};

// N plain-SGD steps at the learnable rate alpha on the full synthetic batch,
// starting from the expert's start snapshot (entered as a constant). Both
// returned parameter vectors remain differentiable functions of `images` and
// `alpha`. The whole unroll stays recorded on one graph, so memory grows as
// O(steps x parameter count x synthetic batch).
template <typename S>
UnrollResultT<S> student_unroll(const ArchSpec& arch, const SegmentT<S>& segment,
                                const TensorT<S>& images, const std::vector<uint32_t>& labels,
                                const TensorT<S>& alpha, int steps);

// ||theta_final - theta_target||^2 / (||theta_target - theta_start||^2 + eps).
// Throws DegenerateSegmentError when the expert displacement is below eps.
template <typename S>
TensorT<S> matching_loss(const TensorT<S>& theta_final, const SegmentT<S>& segment, double eps);

// The matching loss restricted to each unit's index range, eps-guarded per
// unit denominator.
template <typename S>
UnitLossesT<S> per_unit_losses(const TensorT<S>& theta_final, const SegmentT<S>& segment,
                               const Layout& layout, Granularity granularity, double eps);

// kappa_base * growth^floor(iteration / period); monotone nondecreasing.
double kappa_at(int64_t iteration, const DistillConfig& cfg);

// v_i = 1 iff loss_i < kappa (strict). Selection reads detached values and is
// not differentiated.
std::vector<uint8_t> select_easy(const std::vector<double>& unit_losses, double kappa);

// Cosine of the angle at vertex b over the full flattened vectors. Throws
// DegenerateAngleError when a leg norm falls below eps.
template <typename S>
TensorT<S> high_order_potential(const TensorT<S>& a, const TensorT<S>& b, const TensorT<S>& c,
                                double eps);

// Smooth-L1 (transition point 1) between the expert cosine (a detached
// constant) and the student cosine.
template <typename S>
TensorT<S> hotm_loss(const SegmentT<S>& segment, const TensorT<S>& theta_mid,
                     const TensorT<S>& theta_final, double eps);

template <typename S>
struct TotalLossT {
    TensorT<S> objective;  // gradient-bearing value
    double reported = 0.0; // objective including the -kappa * sum(v) term
};

// Gradient-bearing value: sum of selected unit losses (or the global matching
// loss when selection is disabled) plus the weighted potential term. The
// -kappa*sum(v) term is constant in the synthetic data for fixed v, so it
// appears only in the reported objective. With both switches off the
// objective is exactly the global matching loss.
template <typename S>
TotalLossT<S> total_loss(const UnitLossesT<S>& unit_losses, const std::vector<uint8_t>& selected,
                         double kappa, const TensorT<S>& global_tm, const TensorT<S>& ho_term,
                         double ho_weight, bool e2c_enabled, bool ho_enabled);

struct IterationLog {
    int64_t iteration = 0;
    double loss = 0.0;      // reported objective
    double l_tm = 0.0;      // global matching loss
    double l_hotm = 0.0;    // potential term (0 when degenerate or disabled)
    double selected_frac = 0.0;
    double kappa = 0.0;
    double alpha = 0.0;
    std::vector<double> unit_losses;   // only when cfg.log_units
    std::vector<uint8_t> selected;     // only when cfg.log_units
};

struct DistillResult {
    SyntheticDataset distilled;
    std::vector<IterationLog> log;
};

// The outer loop: sample a segment, unroll the student, update kappa and v,
// combine the losses, backpropagate to the images and alpha, apply momentum
// SGD, clamp alpha >= 1e-6. Fully deterministic per cfg.seed.
DistillResult run_distillation(const LabeledDataset& real, const std::vector<Trajectory>& pool,
                               const DistillConfig& cfg);

struct GradCheckReport {
    double max_rel_err = 0.0;
    double alpha_rel_err = 0.0;
    int checked = 0;
    double seconds = 0.0;
};

// Builds a tiny double-precision instance and compares the analytic gradient
// of the gradient-bearing objective against central finite differences, for
// every synthetic pixel and for alpha.
GradCheckReport run_hypergradient_check(double fd_step = 1e-3);

}  // namespace hotm
