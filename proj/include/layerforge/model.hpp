#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "layerforge/canvas.hpp"
#include "layerforge/codec.hpp"
#include "layerforge/rng.hpp"
#include "layerforge/tensor.hpp"

namespace layerforge {

class ModelError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline const std::vector<std::string>& default_hue_vocab() {
    static const std::vector<std::string> v{"red", "orange", "yellow", "green", "cyan", "blue", "purple", "magenta"};
    return v;
}

inline const std::vector<std::string>& default_arrangement_vocab() {
    static const std::vector<std::string> v{"solo", "duo", "trio", "quartet"};
    return v;
}

struct ModelConfig {
    int d_model = 64;
    int n_heads = 4;
    int head_dim = 16;
    int n_blocks = 4;
    int patch = kDefaultPatch;
    std::array<int, 3> axis_dims{4, 6, 6};  // layer axis, x, y
    int max_unlocked_layers = 8;
    int lora_rank = 8;
    double lora_alpha = 8.0;
    double rope_base = 8.0;
    int positional_heads = 2;      // heads whose q/k biases start as a same-cell attention prior
    double positional_bias = 4.0;  // per-pair magnitude of that prior
    double init_std = 0.02;        // projection and MLP weights; modulation and output use 0.1 / sqrt(fan_in)
    int time_dim = 64;  // sinusoidal timestep features
    int mlp_ratio = 4;
    std::vector<std::string> hue_vocab = default_hue_vocab();
    std::vector<std::string> arrangement_vocab = default_arrangement_vocab();

    int latent_dim() const { return patch * patch * 3; }
    double lora_scaling() const { return lora_rank > 0 ? lora_alpha / lora_rank : 0.0; }

    void validate() const {
        if (d_model <= 0 || n_heads <= 0 || head_dim <= 0 || n_blocks < 0 || patch <= 0) {
            throw ModelError("model config: dimensions must be positive");
        }
        if (n_heads * head_dim != d_model) {
            throw ModelError("model config: n_heads * head_dim must equal d_model");
        }
        if (axis_dims[0] + axis_dims[1] + axis_dims[2] != head_dim) {
            throw ModelError("model config: axis_dims must sum to head_dim");
        }
        for (int a : axis_dims) {
            if (a < 0 || a % 2 != 0) {
                throw ModelError("model config: axis_dims components must be even");
            }
        }
        if (!(init_std > 0.0)) {
            throw ModelError("model config: init_std must be positive");
        }
        if (positional_heads < 0 || positional_bias < 0.0) {
            throw ModelError("model config: positional_heads and positional_bias must be non-negative");
        }
        if (lora_rank < 0) {
            throw ModelError("model config: lora_rank must be >= 0");
        }
        if (time_dim <= 0 || time_dim % 2 != 0 || mlp_ratio <= 0) {
            throw ModelError("model config: time_dim must be even and mlp_ratio positive");
        }
        if (hue_vocab.empty() || arrangement_vocab.empty()) {
            throw ModelError("model config: prompt vocabularies must be non-empty");
        }
    }

    bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"d_model", c.d_model},
                       {"n_heads", c.n_heads},
                       {"head_dim", c.head_dim},
                       {"n_blocks", c.n_blocks},
                       {"patch", c.patch},
                       {"axis_dims", c.axis_dims},
                       {"max_unlocked_layers", c.max_unlocked_layers},
                       {"lora_rank", c.lora_rank},
                       {"lora_alpha", c.lora_alpha},
                       {"rope_base", c.rope_base},
                       {"positional_heads", c.positional_heads},
                       {"positional_bias", c.positional_bias},
                       {"init_std", c.init_std},
                       {"time_dim", c.time_dim},
                       {"mlp_ratio", c.mlp_ratio},
                       {"hue_vocab", c.hue_vocab},
                       {"arrangement_vocab", c.arrangement_vocab}};
}

// Missing keys keep their defaults.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    auto get = [&](const char* k, auto& field) {
        if (j.contains(k)) {
            j.at(k).get_to(field);
        }
    };
    get("d_model", c.d_model);
    get("n_heads", c.n_heads);
    get("head_dim", c.head_dim);
    get("n_blocks", c.n_blocks);
    get("patch", c.patch);
    get("axis_dims", c.axis_dims);
    get("max_unlocked_layers", c.max_unlocked_layers);
    get("lora_rank", c.lora_rank);
    get("lora_alpha", c.lora_alpha);
    get("rope_base", c.rope_base);
    get("positional_heads", c.positional_heads);
    get("positional_bias", c.positional_bias);
    get("init_std", c.init_std);
    get("time_dim", c.time_dim);
    get("mlp_ratio", c.mlp_ratio);
    get("hue_vocab", c.hue_vocab);
    get("arrangement_vocab", c.arrangement_vocab);
}

// ---------------------------------------------------------------------------
// Rotary embedding over (layer axis, x, y)
// ---------------------------------------------------------------------------

// Angular frequency of rotary pair k within an axis slice of width `width`.
inline double rope_frequency(int k, int width, double base) {
    return std::pow(base, -2.0 * k / width);
}

// Rotation angles for one position: head_dim / 2 values, axis slices in order.
inline std::vector<double> rope_angles(const PosId& pos, const std::array<int, 3>& axis_dims, double base = 8.0) {
    std::vector<double> angles;
    const int comps[3] = {pos.layer_axis, pos.x, pos.y};
    for (int a = 0; a < 3; ++a) {
        if (axis_dims[a] % 2 != 0) {
            throw ModelError("rope: odd axis slice width " + std::to_string(axis_dims[a]));
        }
        for (int k = 0; k < axis_dims[a] / 2; ++k) {
            angles.push_back(comps[a] * rope_frequency(k, axis_dims[a], base));
        }
    }
    return angles;
}

/// Rotates one head vector: adjacent pairs (2i, 2i+1) turn by the i-th angle.
inline std::vector<double> rope3d_apply(std::vector<double> v, const PosId& pos, const std::array<int, 3>& axis_dims,
                                        double base = 8.0) {
    const auto angles = rope_angles(pos, axis_dims, base);
    if (v.size() != 2 * angles.size()) {
        throw ModelError("rope3d_apply: vector width " + std::to_string(v.size()) + " does not match axis_dims");
    }
    for (std::size_t i = 0; i < angles.size(); ++i) {
        const double c = std::cos(angles[i]), s = std::sin(angles[i]);
        const double x0 = v[2 * i], x1 = v[2 * i + 1];
        v[2 * i] = x0 * c - x1 * s;
        v[2 * i + 1] = x0 * s + x1 * c;
    }
    return v;
}

template <class T>
struct RopeTable {
    std::size_t tokens = 0;
    std::size_t pairs = 0;  // head_dim / 2
    std::vector<T> cos;
    std::vector<T> sin;
};

template <class T>
RopeTable<T> build_rope_table(const std::vector<PosId>& positions, const ModelConfig& cfg) {
    RopeTable<T> table;
    table.tokens = positions.size();
    table.pairs = static_cast<std::size_t>(cfg.head_dim / 2);
    table.cos.reserve(table.tokens * table.pairs);
    table.sin.reserve(table.tokens * table.pairs);
    for (const auto& p : positions) {
        for (double a : rope_angles(p, cfg.axis_dims, cfg.rope_base)) {
            table.cos.push_back(static_cast<T>(std::cos(a)));
            table.sin.push_back(static_cast<T>(std::sin(a)));
        }
    }
    return table;
}

// Applies the per-token rotation to every head of x [tokens, n_heads * head_dim].
template <class T>
ad::Tensor<T> rope_rows(ad::Tape<T>& tape, const ad::Tensor<T>& x, const RopeTable<T>& table) {
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    const std::size_t hd = table.pairs * 2;
    if (rows != table.tokens || hd == 0 || cols % hd != 0) {
        throw ad::ShapeError("rope_rows: table does not match " + ad::shape_str(x.shape()));
    }
    const std::size_t heads = cols / hd;
    std::vector<T> out(x.size());
    auto xv = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* c = table.cos.data() + r * table.pairs;
        const T* s = table.sin.data() + r * table.pairs;
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t base = r * cols + h * hd;
            for (std::size_t i = 0; i < table.pairs; ++i) {
                const T x0 = xv[base + 2 * i], x1 = xv[base + 2 * i + 1];
                out[base + 2 * i] = x0 * c[i] - x1 * s[i];
                out[base + 2 * i + 1] = x0 * s[i] + x1 * c[i];
            }
        }
    }
    const bool track = tape.grad_enabled() && x.requires_grad();
    ad::Tensor<T> y(x.shape(), std::move(out), track);
    if (track) {
        tape.record([x, y, table, rows, cols, heads, hd] {
            const auto& gy = y.node().grad;
            if (gy.empty()) {
                return;
            }
            auto gx = x.grad_mut();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* c = table.cos.data() + r * table.pairs;
                const T* s = table.sin.data() + r * table.pairs;
                for (std::size_t h = 0; h < heads; ++h) {
                    const std::size_t base = r * cols + h * hd;
                    for (std::size_t i = 0; i < table.pairs; ++i) {
                        const T g0 = gy[base + 2 * i], g1 = gy[base + 2 * i + 1];
                        gx[base + 2 * i] += g0 * c[i] + g1 * s[i];
                        gx[base + 2 * i + 1] += -g0 * s[i] + g1 * c[i];
                    }
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

template <class T>
struct BlockWeights {
    ad::Tensor<T> mod_w, mod_b;  // conditioning -> (shift1, scale1, shift2, scale2)
    ad::Tensor<T> wq, wk, wv, wo;
    ad::Tensor<T> bq, bk;
    ad::Tensor<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

template <class T>
struct DiTWeights {
    ModelConfig cfg;
    ad::Tensor<T> in_w, in_b;      // noisy tokens D -> d_model
    ad::Tensor<T> cond_w, cond_b;  // condition tokens D -> d_model
    ad::Tensor<T> t_w1, t_b1, t_w2, t_b2;
    ad::Tensor<T> hue_emb, arrangement_emb;
    std::vector<BlockWeights<T>> blocks;
    ad::Tensor<T> final_mod_w, final_mod_b;
    ad::Tensor<T> out_w, out_b;

    template <class F>
    void for_each(F&& fn) const {
        fn("in_w", in_w);
        fn("in_b", in_b);
        fn("cond_w", cond_w);
        fn("cond_b", cond_b);
        fn("t_w1", t_w1);
        fn("t_b1", t_b1);
        fn("t_w2", t_w2);
        fn("t_b2", t_b2);
        fn("hue_emb", hue_emb);
        fn("arrangement_emb", arrangement_emb);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const auto p = "blocks." + std::to_string(i) + ".";
            const auto& b = blocks[i];
            fn(p + "mod_w", b.mod_w);
            fn(p + "mod_b", b.mod_b);
            fn(p + "wq", b.wq);
            fn(p + "wk", b.wk);
            fn(p + "bq", b.bq);
            fn(p + "bk", b.bk);
            fn(p + "wv", b.wv);
            fn(p + "wo", b.wo);
            fn(p + "mlp_w1", b.mlp_w1);
            fn(p + "mlp_b1", b.mlp_b1);
            fn(p + "mlp_w2", b.mlp_w2);
            fn(p + "mlp_b2", b.mlp_b2);
        }
        fn("final_mod_w", final_mod_w);
        fn("final_mod_b", final_mod_b);
        fn("out_w", out_w);
        fn("out_b", out_b);
    }

    std::vector<ad::Tensor<T>> tensors() const {
        std::vector<ad::Tensor<T>> out;
        for_each([&](const std::string&, const ad::Tensor<T>& t) { out.push_back(t); });
        return out;
    }

    void set_trainable(bool on) const {
        for_each([&](const std::string&, const ad::Tensor<T>& t) { t.set_requires_grad(on); });
    }
};

namespace detail {

template <class T>
ad::Tensor<T> random_tensor(Rng& rng, ad::Shape shape, double stddev, bool trainable) {
    std::vector<T> data(ad::numel(shape));
    for (auto& v : data) {
        v = static_cast<T>(stddev * standard_normal(rng));
    }
    return ad::Tensor<T>(std::move(shape), std::move(data), trainable);
}

template <class T>
ad::Tensor<T> linear_weight(Rng& rng, std::size_t fan_in, std::size_t fan_out, double gain = 1.0) {
    return random_tensor<T>(rng, {fan_in, fan_out}, gain / std::sqrt(static_cast<double>(fan_in)), true);
}

template <class T>
ad::Tensor<T> normal_weight(Rng& rng, std::size_t fan_in, std::size_t fan_out, double stddev) {
    return random_tensor<T>(rng, {fan_in, fan_out}, stddev, true);
}

template <class T>
ad::Tensor<T> zeros(std::size_t n) {
    return ad::Tensor<T>::zeros({n}, true);
}

}  // namespace detail

/// Random initialisation; every tensor starts trainable.
template <class T>
DiTWeights<T> init_weights(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng = make_rng(seed, {0x11});
    const std::size_t d = cfg.d_model, D = cfg.latent_dim(), F = cfg.time_dim, hidden = d * cfg.mlp_ratio;
    const double sd = cfg.init_std;
    DiTWeights<T> w;
    w.cfg = cfg;
    w.in_w = detail::normal_weight<T>(rng, D, d, sd);
    w.in_b = detail::zeros<T>(d);
    w.cond_w = detail::normal_weight<T>(rng, D, d, sd);
    w.cond_b = detail::zeros<T>(d);
    w.t_w1 = detail::normal_weight<T>(rng, F, d, sd);
    w.t_b1 = detail::zeros<T>(d);
    w.t_w2 = detail::normal_weight<T>(rng, d, d, sd);
    w.t_b2 = detail::zeros<T>(d);
    w.hue_emb = detail::random_tensor<T>(rng, {cfg.hue_vocab.size(), d}, 0.5, true);
    w.arrangement_emb = detail::random_tensor<T>(rng, {cfg.arrangement_vocab.size(), d}, 0.5, true);
    for (int i = 0; i < cfg.n_blocks; ++i) {
        BlockWeights<T> b;
        b.mod_w = detail::linear_weight<T>(rng, d, 4 * d, 0.1);
        b.mod_b = detail::zeros<T>(4 * d);
        b.wq = detail::normal_weight<T>(rng, d, d, sd);
        b.wk = detail::normal_weight<T>(rng, d, d, sd);
        b.wv = detail::normal_weight<T>(rng, d, d, sd);
        b.wo = detail::normal_weight<T>(rng, d, d, sd);
        b.bq = detail::zeros<T>(d);
        b.bk = detail::zeros<T>(d);
        // Equal q/k biases on the first positional_heads heads: under the rotary
        // embedding their product is a * a * sum_i cos(f_i * delta_i), which peaks
        // at tokens sharing the query's (layer axis, x, y).
        for (int hh = 0; hh < std::min(cfg.positional_heads, cfg.n_heads); ++hh) {
            for (int p = 0; p < cfg.head_dim / 2; ++p) {
                const auto k = static_cast<std::size_t>(hh * cfg.head_dim + 2 * p);
                b.bq.data_mut()[k] = static_cast<T>(cfg.positional_bias);
                b.bk.data_mut()[k] = static_cast<T>(cfg.positional_bias);
            }
        }
        b.mlp_w1 = detail::normal_weight<T>(rng, d, hidden, sd);
        b.mlp_b1 = detail::zeros<T>(hidden);
        b.mlp_w2 = detail::normal_weight<T>(rng, hidden, d, sd);
        b.mlp_b2 = detail::zeros<T>(d);
        w.blocks.push_back(std::move(b));
    }
    w.final_mod_w = detail::linear_weight<T>(rng, d, 2 * d, 0.1);
    w.final_mod_b = detail::zeros<T>(2 * d);
    w.out_w = detail::linear_weight<T>(rng, d, D, 0.1);
    w.out_b = detail::zeros<T>(D);
    return w;
}

// ---------------------------------------------------------------------------
// LoRA
// ---------------------------------------------------------------------------

template <class T>
struct LoraAdapter {
    ad::Tensor<T> a;  // [d_in, r]
    ad::Tensor<T> b;  // [r, d_out], zero at init
    double scaling = 0.0;

    std::size_t rank() const { return a.defined() ? a.dim(1) : 0; }
};

// One adapter per attention projection (q, k, v, o) per block.
template <class T>
struct LoraSet {
    int rank = 0;
    double scaling = 0.0;
    std::vector<std::array<LoraAdapter<T>, 4>> blocks;

    template <class F>
    void for_each(F&& fn) const {
        static const char* names[4] = {"q", "k", "v", "o"};
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            for (int p = 0; p < 4; ++p) {
                const auto prefix = "lora." + std::to_string(i) + "." + names[p] + ".";
                fn(prefix + "a", blocks[i][p].a);
                fn(prefix + "b", blocks[i][p].b);
            }
        }
    }

    std::vector<ad::Tensor<T>> tensors() const {
        std::vector<ad::Tensor<T>> out;
        for_each([&](const std::string&, const ad::Tensor<T>& t) { out.push_back(t); });
        return out;
    }
};

/// Adapters for every attention projection. A ~ N(0, 1/d), B = 0. Rank 0
/// yields an empty set.
template <class T>
LoraSet<T> init_lora(const ModelConfig& cfg, int rank, std::uint64_t seed) {
    LoraSet<T> set;
    set.rank = rank;
    if (rank <= 0) {
        return set;
    }
    set.scaling = cfg.lora_alpha / rank;
    Rng rng = make_rng(seed, {0x22});
    const std::size_t d = cfg.d_model;
    for (int i = 0; i < cfg.n_blocks; ++i) {
        std::array<LoraAdapter<T>, 4> adapters;
        for (auto& ad : adapters) {
            ad.a = detail::random_tensor<T>(rng, {d, static_cast<std::size_t>(rank)}, 1.0 / std::sqrt(double(d)), true);
            ad.b = ad::Tensor<T>::zeros({static_cast<std::size_t>(rank), d}, true);
            ad.scaling = set.scaling;
        }
        set.blocks.push_back(std::move(adapters));
    }
    return set;
}

/// x W, plus scaling * (x A) B when an adapter with rank > 0 is given.
template <class T>
ad::Tensor<T> lora_linear(ad::Tape<T>& tape, const ad::Tensor<T>& x, const ad::Tensor<T>& w,
                          const LoraAdapter<T>* adapter) {
    auto y = ad::matmul(tape, x, w);
    if (adapter == nullptr || adapter->rank() == 0) {
        return y;
    }
    if (adapter->a.dim(0) != w.dim(0) || adapter->b.dim(1) != w.dim(1) || adapter->b.dim(0) != adapter->rank()) {
        throw ModelError("lora_linear: adapter shapes " + ad::shape_str(adapter->a.shape()) + " / " +
                         ad::shape_str(adapter->b.shape()) + " do not fit weight " + ad::shape_str(w.shape()));
    }
    auto delta = ad::matmul(tape, ad::matmul(tape, x, adapter->a), adapter->b);
    return ad::add(tape, y, ad::scale(tape, delta, static_cast<T>(adapter->scaling)));
}

// W + scaling * A B as a plain tensor.
template <class T>
ad::Tensor<T> merge_lora(const ad::Tensor<T>& w, const LoraAdapter<T>& adapter) {
    ad::Tape<T> tape(false);
    if (adapter.rank() == 0) {
        return w.clone();
    }
    auto delta = ad::scale(tape, ad::matmul(tape, adapter.a, adapter.b), static_cast<T>(adapter.scaling));
    auto merged = ad::add(tape, w, delta);
    return ad::Tensor<T>(merged.shape(), std::vector<T>(merged.data().begin(), merged.data().end()), false);
}

// Base weights with every adapter folded in; the result has no adapters.
template <class T>
DiTWeights<T> merge_all(const DiTWeights<T>& base, const LoraSet<T>& lora) {
    // Deep copy so the merged weights do not alias the originals.
    auto fresh = init_weights<T>(base.cfg, 0);
    auto src = base.tensors();
    auto dst = fresh.tensors();
    for (std::size_t i = 0; i < src.size(); ++i) {
        std::copy(src[i].data().begin(), src[i].data().end(), dst[i].data_mut().begin());
        dst[i].set_requires_grad(src[i].requires_grad());
    }
    for (std::size_t i = 0; i < lora.blocks.size(); ++i) {
        auto& b = fresh.blocks[i];
        ad::Tensor<T>* ws[4] = {&b.wq, &b.wk, &b.wv, &b.wo};
        for (int p = 0; p < 4; ++p) {
            auto merged = merge_lora(*ws[p], lora.blocks[i][p]);
            std::copy(merged.data().begin(), merged.data().end(), ws[p]->data_mut().begin());
        }
    }
    return fresh;
}

struct ParamCounts {
    std::size_t frozen = 0;
    std::size_t trainable = 0;
    std::size_t base = 0;
    std::size_t adapters = 0;
};

template <class T>
ParamCounts count_params(const DiTWeights<T>& weights, const LoraSet<T>& lora) {
    ParamCounts c;
    auto visit = [&](std::size_t& bucket) {
        return [&](const std::string&, const ad::Tensor<T>& t) {
            bucket += t.size();
            (t.requires_grad() ? c.trainable : c.frozen) += t.size();
        };
    };
    weights.for_each(visit(c.base));
    lora.for_each(visit(c.adapters));
    return c;
}

template <class U, class T>
DiTWeights<U> cast_weights(const DiTWeights<T>& w) {
    auto out = init_weights<U>(w.cfg, 0);
    auto src = w.tensors();
    auto dst = out.tensors();
    for (std::size_t i = 0; i < src.size(); ++i) {
        std::transform(src[i].data().begin(), src[i].data().end(), dst[i].data_mut().begin(),
                       [](T v) { return static_cast<U>(v); });
        dst[i].set_requires_grad(src[i].requires_grad());
    }
    return out;
}

template <class U, class T>
LoraSet<U> cast_lora(const LoraSet<T>& l) {
    LoraSet<U> out;
    out.rank = l.rank;
    out.scaling = l.scaling;
    for (const auto& blk : l.blocks) {
        std::array<LoraAdapter<U>, 4> adapters;
        for (int p = 0; p < 4; ++p) {
            adapters[p].a = ad::cast<U>(blk[p].a, blk[p].a.requires_grad());
            adapters[p].b = ad::cast<U>(blk[p].b, blk[p].b.requires_grad());
            adapters[p].scaling = blk[p].scaling;
        }
        out.blocks.push_back(std::move(adapters));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

inline std::size_t vocab_index(const std::vector<std::string>& vocab, const std::string& token, const char* what) {
    auto it = std::find(vocab.begin(), vocab.end(), token);
    if (it == vocab.end()) {
        throw ModelError(std::string("unknown ") + what + " token '" + token + "'");
    }
    return static_cast<std::size_t>(it - vocab.begin());
}

// Sinusoidal features of 1000 * t: first half cosines, second half sines.
template <class T>
std::vector<T> timestep_features(double t, int dim) {
    std::vector<T> out(dim);
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        out[i] = static_cast<T>(std::cos(1000.0 * t * freq));
        out[half + i] = static_cast<T>(std::sin(1000.0 * t * freq));
    }
    return out;
}

inline std::vector<PosId> noisy_positions(int h_lat, int w_lat) {
    std::vector<PosId> out;
    for (int y = 0; y < h_lat; ++y) {
        for (int x = 0; x < w_lat; ++x) {
            out.push_back({0, x, y});
        }
    }
    return out;
}

// Inputs to one forward pass. Token matrices are [count, D], row-major.
template <class T>
struct ForwardInputs {
    ad::Tensor<T> noisy;                // [n, D]
    std::vector<PosId> noisy_pos;       // n
    ad::Tensor<T> cond;                 // [m, D]; undefined or 0 rows when empty
    std::vector<PosId> cond_pos;        // m
    double t = 0.0;
    PromptAttrs prompt;
};

namespace detail {

// h * (1 + scale) + shift with scale/shift [1, d] repeated over rows via ones [rows, 1].
template <class T>
ad::Tensor<T> modulate(ad::Tape<T>& tape, const ad::Tensor<T>& h, const ad::Tensor<T>& ones,
                       const ad::Tensor<T>& shift, const ad::Tensor<T>& scale) {
    auto scaled = ad::mul(tape, h, ad::matmul(tape, ones, scale));
    return ad::add_bias(tape, ad::add(tape, h, scaled), shift);
}

}  // namespace detail

/// Velocity prediction for the noisy tokens.
///
/// Noisy and condition tokens are embedded by separate input projections,
/// concatenated, and run through joint full self-attention blocks with 3-axis
/// rotary embeddings on queries and keys. The timestep and prompt form one
/// conditioning vector that modulates every block. Only the noisy rows are
/// read out; returns [n, D].
template <class T>
ad::Tensor<T> dit_forward(ad::Tape<T>& tape, const DiTWeights<T>& w, const LoraSet<T>* lora,
                          const ForwardInputs<T>& in) {
    const auto& cfg = w.cfg;
    const std::size_t D = cfg.latent_dim(), d = cfg.d_model, hd = cfg.head_dim;
    if (in.noisy.rank() != 2 || in.noisy.dim(1) != D) {
        throw ModelError("dit_forward: noisy tokens must be [n, " + std::to_string(D) + "], got " +
                         ad::shape_str(in.noisy.shape()));
    }
    const std::size_t n = in.noisy.dim(0);
    if (in.noisy_pos.size() != n) {
        throw ModelError("dit_forward: noisy positions do not match token count");
    }
    const bool has_cond = in.cond.defined() && in.cond.size() > 0;
    const std::size_t m = has_cond ? in.cond.dim(0) : 0;
    if (has_cond && (in.cond.rank() != 2 || in.cond.dim(1) != D)) {
        throw ModelError("dit_forward: condition token dim " + std::to_string(in.cond.dim(1)) + " != " +
                         std::to_string(D));
    }
    if (in.cond_pos.size() != m) {
        throw ModelError("dit_forward: condition positions do not match token count");
    }
    for (const auto& p : in.cond_pos) {
        if (p.layer_axis < 0 || p.layer_axis > cfg.max_unlocked_layers) {
            throw ModelError("dit_forward: layer axis " + std::to_string(p.layer_axis) + " exceeds max_unlocked_layers");
        }
    }
    if (!(in.t >= 0.0 && in.t <= 1.0)) {
        throw ModelError("dit_forward: t must lie in [0, 1]");
    }
    if (lora != nullptr && !lora->blocks.empty() && lora->blocks.size() != w.blocks.size()) {
        throw ModelError("dit_forward: adapter block count does not match the model");
    }

    // Conditioning vector from timestep and prompt.
    auto tfeat = ad::Tensor<T>({1, static_cast<std::size_t>(cfg.time_dim)}, timestep_features<T>(in.t, cfg.time_dim));
    auto temb = ad::gelu(tape, ad::add_bias(tape, ad::matmul(tape, tfeat, w.t_w1), w.t_b1));
    temb = ad::add_bias(tape, ad::matmul(tape, temb, w.t_w2), w.t_b2);
    auto hue = ad::slice(tape, w.hue_emb, 0, vocab_index(cfg.hue_vocab, in.prompt.background_hue, "background_hue"), 1);
    auto arr = ad::slice(tape, w.arrangement_emb, 0,
                         vocab_index(cfg.arrangement_vocab, in.prompt.arrangement, "arrangement"), 1);
    auto cvec = ad::gelu(tape, ad::add(tape, ad::add(tape, temb, hue), arr));

    auto h = ad::add_bias(tape, ad::matmul(tape, in.noisy, w.in_w), w.in_b);
    std::vector<PosId> positions = in.noisy_pos;
    if (has_cond) {
        auto hc = ad::add_bias(tape, ad::matmul(tape, in.cond, w.cond_w), w.cond_b);
        h = ad::concat(tape, {h, hc}, 0);
        positions.insert(positions.end(), in.cond_pos.begin(), in.cond_pos.end());
    }
    const std::size_t L = n + m;
    const auto rope = build_rope_table<T>(positions, cfg);
    const ad::Tensor<T> ones({L, 1}, std::vector<T>(L, T(1)));
    const T attn_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

    for (std::size_t bi = 0; bi < w.blocks.size(); ++bi) {
        const auto& b = w.blocks[bi];
        const LoraAdapter<T>* ad_q = nullptr;
        const LoraAdapter<T>* ad_k = nullptr;
        const LoraAdapter<T>* ad_v = nullptr;
        const LoraAdapter<T>* ad_o = nullptr;
        if (lora != nullptr && !lora->blocks.empty()) {
            ad_q = &lora->blocks[bi][0];
            ad_k = &lora->blocks[bi][1];
            ad_v = &lora->blocks[bi][2];
            ad_o = &lora->blocks[bi][3];
        }
        auto mod = ad::add_bias(tape, ad::matmul(tape, cvec, b.mod_w), b.mod_b);
        auto shift1 = ad::slice(tape, mod, 1, 0, d);
        auto scale1 = ad::slice(tape, mod, 1, d, d);
        auto shift2 = ad::slice(tape, mod, 1, 2 * d, d);
        auto scale2 = ad::slice(tape, mod, 1, 3 * d, d);

        auto x = detail::modulate(tape, ad::rms_norm_rows(tape, h), ones, shift1, scale1);
        auto q = rope_rows(tape, ad::add_bias(tape, lora_linear(tape, x, b.wq, ad_q), b.bq), rope);
        auto k = rope_rows(tape, ad::add_bias(tape, lora_linear(tape, x, b.wk, ad_k), b.bk), rope);
        auto v = lora_linear(tape, x, b.wv, ad_v);
        std::vector<ad::Tensor<T>> heads;
        for (int hh = 0; hh < cfg.n_heads; ++hh) {
            auto qh = ad::slice(tape, q, 1, hh * hd, hd);
            auto kh = ad::slice(tape, k, 1, hh * hd, hd);
            auto vh = ad::slice(tape, v, 1, hh * hd, hd);
            auto scores = ad::scale(tape, ad::matmul(tape, qh, ad::transpose(tape, kh)), attn_scale);
            heads.push_back(ad::matmul(tape, ad::softmax_rows(tape, scores), vh));
        }
        auto attn = lora_linear(tape, ad::concat(tape, heads, 1), b.wo, ad_o);
        h = ad::add(tape, h, attn);

        auto x2 = detail::modulate(tape, ad::rms_norm_rows(tape, h), ones, shift2, scale2);
        auto mlp = ad::add_bias(tape, ad::matmul(tape, x2, b.mlp_w1), b.mlp_b1);
        mlp = ad::add_bias(tape, ad::matmul(tape, ad::gelu(tape, mlp), b.mlp_w2), b.mlp_b2);
        h = ad::add(tape, h, mlp);
    }

    auto hn = m > 0 ? ad::slice(tape, h, 0, 0, n) : h;
    auto fmod = ad::add_bias(tape, ad::matmul(tape, cvec, w.final_mod_w), w.final_mod_b);
    const ad::Tensor<T> ones_n({n, 1}, std::vector<T>(n, T(1)));
    auto out = detail::modulate(tape, ad::rms_norm_rows(tape, hn), ones_n, ad::slice(tape, fmod, 1, 0, d),
                                ad::slice(tape, fmod, 1, d, d));
    return ad::add_bias(tape, ad::matmul(tape, out, w.out_w), w.out_b);
}

template <class T>
ad::Tensor<T> grid_tensor(const LatentGrid& grid) {
    std::vector<T> data(grid.data.begin(), grid.data.end());
    return ad::Tensor<T>({grid.cells(), static_cast<std::size_t>(grid.dim)}, std::move(data));
}

template <class T>
ad::Tensor<T> sequence_tensor(const TokenSequence& seq) {
    std::vector<T> data(seq.values.begin(), seq.values.end());
    return ad::Tensor<T>({seq.size(), static_cast<std::size_t>(seq.dim)}, std::move(data));
}

template <class T>
ForwardInputs<T> make_inputs(const LatentGrid& z, double t, const TokenSequence& cond, const PromptAttrs& prompt) {
    ForwardInputs<T> in;
    in.noisy = grid_tensor<T>(z);
    in.noisy_pos = noisy_positions(z.h_lat, z.w_lat);
    if (cond.size() > 0) {
        if (cond.dim != z.dim) {
            throw ModelError("condition token dim " + std::to_string(cond.dim) + " != latent dim " +
                             std::to_string(z.dim));
        }
        in.cond = sequence_tensor<T>(cond);
        in.cond_pos = cond.pos;
    }
    in.t = t;
    in.prompt = prompt;
    return in;
}

/// Trained model bundle used for inference: frozen base plus optional adapters.
struct FlowModel {
    DiTWeights<float> base;
    LoraSet<float> lora;

    const ModelConfig& config() const { return base.cfg; }

    // Predicted velocity grid for z at time t. Thread-safe: reads weights only.
    LatentGrid velocity(const LatentGrid& z, double t, const TokenSequence& cond, const PromptAttrs& prompt) const {
        if (z.dim != config().latent_dim()) {
            throw ModelError("velocity: latent dim " + std::to_string(z.dim) + " does not match model dim " +
                             std::to_string(config().latent_dim()));
        }
        ad::Tape<float> tape(false);
        auto out = dit_forward(tape, base, &lora, make_inputs<float>(z, t, cond, prompt));
        LatentGrid v(z.h_lat, z.w_lat, z.dim);
        std::copy(out.data().begin(), out.data().end(), v.data.begin());
        return v;
    }
};

}  // namespace layerforge
