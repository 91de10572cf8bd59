#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <vector>

#include "hotm/rng.hpp"
#include "hotm/tensor.hpp"

namespace hotm::testing {

using DTensor = TensorT<double>;

inline std::vector<double> random_values(Rng& rng, size_t count, double lo = -1.0,
                                         double hi = 1.0) {
    std::vector<double> v(count);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return v;
}

// Max relative error between the analytic gradient of f (a scalar function of
// the given inputs) and central finite differences, over every input element.
inline double grad_vs_fd(
    const std::function<DTensor(const std::vector<DTensor>&)>& f,
    const std::vector<Shape>& shapes, std::vector<std::vector<double>> data, double h = 1e-5) {
    std::vector<DTensor> attached;
    for (size_t i = 0; i < shapes.size(); ++i) {
        attached.push_back(DTensor::from_data(shapes[i], data[i]));
        attached.back().requires_grad();
    }
    auto analytic = grad(f(attached), attached);

    auto value_at = [&](const std::vector<std::vector<double>>& values) {
        // Leaves here too, so functions that differentiate internally (the
        // second-order checks) accept them.
        std::vector<DTensor> plain;
        for (size_t i = 0; i < shapes.size(); ++i) {
            plain.push_back(DTensor::from_data(shapes[i], values[i]));
            plain.back().requires_grad();
        }
        return f(plain).item();
    };

    double max_rel = 0.0;
    for (size_t i = 0; i < shapes.size(); ++i) {
        for (size_t j = 0; j < data[i].size(); ++j) {
            double saved = data[i][j];
            data[i][j] = saved + h;
            double up = value_at(data);
            data[i][j] = saved - h;
            double down = value_at(data);
            data[i][j] = saved;
            double fd = (up - down) / (2.0 * h);
            double an = analytic[i].data()[j];
            double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-8});
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

inline bool bits_equal(const std::vector<float>& a, const std::vector<float>& b) {
    if (a.size() != b.size()) return false;
    return std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace hotm::testing
