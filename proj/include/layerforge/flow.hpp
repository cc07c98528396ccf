#pragma once

#include <cstdint>
#include <stdexcept>

#include "layerforge/codec.hpp"
#include "layerforge/image.hpp"
#include "layerforge/rng.hpp"
#include "layerforge/tensor.hpp"

namespace layerforge {

// One point on the straight noise -> data path.
struct FlowSample {
    LatentGrid z0;  // noise
    LatentGrid z1;  // target latents
    double t = 0.0;
    LatentGrid zt;        // (1 - t) z0 + t z1
    LatentGrid v_target;  // z1 - z0
};

inline LatentGrid gaussian_grid(int h_lat, int w_lat, int dim, std::uint64_t seed) {
    LatentGrid g(h_lat, w_lat, dim);
    Rng rng = make_rng(seed, {0x2015e});
    for (auto& v : g.data) {
        v = standard_normal(rng);
    }
    return g;
}

inline FlowSample make_flow_sample(LatentGrid z1, LatentGrid z0, double t) {
    if (!(t >= 0.0 && t <= 1.0)) {
        throw std::invalid_argument("make_flow_sample: t must lie in [0, 1]");
    }
    if (z0.data.size() != z1.data.size()) {
        throw std::invalid_argument("make_flow_sample: noise and target shapes differ");
    }
    FlowSample s;
    s.t = t;
    s.zt = LatentGrid(z1.h_lat, z1.w_lat, z1.dim);
    s.v_target = LatentGrid(z1.h_lat, z1.w_lat, z1.dim);
    for (std::size_t i = 0; i < z1.data.size(); ++i) {
        s.zt.data[i] = (1.0 - t) * z0.data[i] + t * z1.data[i];
        s.v_target.data[i] = z1.data[i] - z0.data[i];
    }
    s.z0 = std::move(z0);
    s.z1 = std::move(z1);
    return s;
}

inline FlowSample make_flow_sample(const Image& target, double t, std::uint64_t noise_seed, int patch = kDefaultPatch) {
    LatentGrid z1 = encode_layer(target, patch);
    LatentGrid z0 = gaussian_grid(z1.h_lat, z1.w_lat, z1.dim, noise_seed);
    return make_flow_sample(std::move(z1), std::move(z0), t);
}

// Mean squared error between a predicted velocity and z1 - z0, on the tape.
template <class T>
ad::Tensor<T> flow_loss(ad::Tape<T>& tape, const ad::Tensor<T>& pred, const ad::Tensor<T>& v_target) {
    return ad::mse(tape, pred, v_target);
}

inline double flow_loss(const LatentGrid& pred, const LatentGrid& v_target) {
    if (pred.data.size() != v_target.data.size() || pred.data.empty()) {
        throw std::invalid_argument("flow_loss: shape mismatch");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const double d = pred.data[i] - v_target.data[i];
        acc += d * d;
    }
    return acc / static_cast<double>(pred.data.size());
}

}  // namespace layerforge
