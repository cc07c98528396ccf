#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "layerforge/tensor.hpp"

namespace layerforge::ad {

class NonDeterministicLoss : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct NamedParam {
    std::string name;
    Tensor<double> tensor;
};

struct GradCheckEntry {
    std::string name;
    std::size_t coords = 0;
    double max_rel_error = 0.0;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::vector<GradCheckEntry> params;  // requires_grad tensors only
};

inline double relative_error(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

/// Compares tape gradients with central differences.
///
/// loss_fn(Tape<double>&) must rebuild the graph from the current parameter
/// values and return a scalar. Up to `samples` coordinates per tensor are
/// checked (all of them when the tensor is smaller). Tensors that do not
/// require grad are skipped.
template <class LossFn>
GradCheckReport grad_check(LossFn&& loss_fn, const std::vector<NamedParam>& params, double eps = 1e-5,
                           std::size_t samples = 64, std::uint64_t seed = 0) {
    for (const auto& p : params) {
        p.tensor.zero_grad();
    }
    double base = 0.0;
    {
        Tape<double> tape;
        auto loss = loss_fn(tape);
        base = loss.item();
        tape.backward(loss);
    }
    auto eval = [&] {
        Tape<double> tape(false);
        return loss_fn(tape).item();
    };
    if (eval() != base) {
        throw NonDeterministicLoss("grad_check: loss_fn returned different values for identical parameters");
    }

    GradCheckReport report;
    std::mt19937_64 rng(seed);
    for (const auto& p : params) {
        if (!p.tensor.requires_grad()) {
            continue;
        }
        const std::size_t n = p.tensor.size();
        std::vector<std::size_t> coords(n);
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (n > samples) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(samples);
            std::sort(coords.begin(), coords.end());
        }
        auto grad = p.tensor.grad();
        auto value = p.tensor.data_mut();
        GradCheckEntry entry{p.name, coords.size(), 0.0};
        for (std::size_t idx : coords) {
            const double saved = value[idx];
            value[idx] = saved + eps;
            const double up = eval();
            value[idx] = saved - eps;
            const double down = eval();
            value[idx] = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double analytic = grad.empty() ? 0.0 : grad[idx];
            const double err = relative_error(analytic, numeric);
            entry.max_rel_error = std::max(entry.max_rel_error, err);
            if (err > report.max_rel_error || report.worst_param.empty()) {
                report.max_rel_error = std::max(report.max_rel_error, err);
                report.worst_param = p.name;
                report.worst_index = idx;
                report.worst_analytic = analytic;
                report.worst_numeric = numeric;
            }
        }
        report.params.push_back(entry);
    }
    return report;
}

}  // namespace layerforge::ad
