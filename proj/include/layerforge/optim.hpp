#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "layerforge/tensor.hpp"

namespace layerforge::ad {

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

template <class T>
struct OptimizerState {
    AdamWConfig cfg;
    std::int64_t step = 0;
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;
};

template <class T>
OptimizerState<T> make_optimizer(const std::vector<Tensor<T>>& params, AdamWConfig cfg) {
    OptimizerState<T> st;
    st.cfg = cfg;
    for (const auto& p : params) {
        st.m.emplace_back(p.size(), T(0));
        st.v.emplace_back(p.size(), T(0));
    }
    return st;
}

/// One AdamW update with bias correction. Weight decay is decoupled: the
/// parameter is shrunk by (1 - lr * wd) before the moment-based step. Tensors
/// without a grad buffer are treated as having zero gradient.
template <class T>
void adamw_step(const std::vector<Tensor<T>>& params, OptimizerState<T>& st, bool check_finite = false) {
    const auto& c = st.cfg;
    if (!(c.lr > 0.0)) {
        throw std::invalid_argument("adamw_step: lr must be positive");
    }
    if (st.m.size() != params.size() || st.v.size() != params.size()) {
        throw ShapeError("adamw_step: optimizer state has " + std::to_string(st.m.size()) + " slots for " +
                         std::to_string(params.size()) + " parameters");
    }
    st.step += 1;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.step));
    const T decay = static_cast<T>(1.0 - c.lr * c.weight_decay);
    const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
    const T step_size = static_cast<T>(c.lr / bc1);
    const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
    const T eps = static_cast<T>(c.eps);

    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i].data_mut();
        auto g = params[i].grad();
        auto& m = st.m[i];
        auto& v = st.v[i];
        if (m.size() != p.size() || v.size() != p.size()) {
            throw ShapeError("adamw_step: moment shape mismatch for parameter " + std::to_string(i));
        }
        for (std::size_t j = 0; j < p.size(); ++j) {
            const T gj = g.empty() ? T(0) : g[j];
            if (check_finite && !std::isfinite(gj)) {
                throw NonFiniteError("adamw_step: non-finite gradient in parameter " + std::to_string(i));
            }
            p[j] *= decay;
            m[j] = b1 * m[j] + (T(1) - b1) * gj;
            v[j] = b2 * v[j] + (T(1) - b2) * gj * gj;
            p[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_bc2 + eps);
        }
    }
}

}  // namespace layerforge::ad
