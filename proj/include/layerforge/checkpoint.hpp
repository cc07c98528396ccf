#pragma once

// Checkpoint container (little-endian):
//   "LCKP" | u32 version = 1 | u32 config length | config JSON (UTF-8)
//   u32 tensor count | per tensor: u16 name length, name, u8 rank, u32 dims[rank], f32 data

#include <bit>
#include <cstdint>
#include <cstring>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "layerforge/config.hpp"
#include "layerforge/model.hpp"
#include "layerforge/optim.hpp"

namespace layerforge {

inline constexpr char kCheckpointMagic[4] = {'L', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainState {
    TrainConfig config;
    DiTWeights<float> base;
    LoraSet<float> lora;
    ad::OptimizerState<float> opt;
    std::int64_t step = 0;

    // Tensors updated by the optimizer, in a fixed order.
    std::vector<ad::Tensor<float>> trainable() const {
        std::vector<ad::Tensor<float>> out;
        base.for_each([&](const std::string&, const ad::Tensor<float>& t) {
            if (t.requires_grad()) {
                out.push_back(t);
            }
        });
        lora.for_each([&](const std::string&, const ad::Tensor<float>& t) {
            if (t.requires_grad()) {
                out.push_back(t);
            }
        });
        return out;
    }

    std::vector<std::string> trainable_names() const {
        std::vector<std::string> out;
        auto collect = [&](const std::string& name, const ad::Tensor<float>& t) {
            if (t.requires_grad()) {
                out.push_back(name);
            }
        };
        base.for_each(collect);
        lora.for_each(collect);
        return out;
    }

    FlowModel model() const { return {base, lora}; }
};

namespace detail {

class ByteWriter {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out_.insert(out_.end(), b, b + n);
    }
    void u8(std::uint8_t v) { out_.push_back(v); }
    void u16(std::uint16_t v) {
        u8(static_cast<std::uint8_t>(v & 0xff));
        u8(static_cast<std::uint8_t>(v >> 8));
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) {
            u8(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
        }
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    std::vector<std::uint8_t> take() { return std::move(out_); }

private:
    std::vector<std::uint8_t> out_;
};

class ByteReader {
public:
    explicit ByteReader(const std::vector<std::uint8_t>& in) : in_(in) {}

    const std::uint8_t* take(std::size_t n) {
        if (n > in_.size() - pos_) {
            throw CheckpointError("checkpoint: truncated at byte " + std::to_string(pos_));
        }
        const auto* p = in_.data() + pos_;
        pos_ += n;
        return p;
    }
    std::uint8_t u8() { return *take(1); }
    std::uint16_t u16() {
        const auto* p = take(2);
        return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
    }
    std::uint32_t u32() {
        const auto* p = take(4);
        return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
               (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
    }
    float f32() { return std::bit_cast<float>(u32()); }
    bool done() const { return pos_ == in_.size(); }

private:
    const std::vector<std::uint8_t>& in_;
    std::size_t pos_ = 0;
};

inline void write_tensor(ByteWriter& w, const std::string& name, const ad::Shape& shape, std::span<const float> data) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u8(static_cast<std::uint8_t>(shape.size()));
    for (auto d : shape) {
        w.u32(static_cast<std::uint32_t>(d));
    }
    for (float v : data) {
        w.f32(v);
    }
}

}  // namespace detail

inline void apply_regime(TrainState& st) {
    const bool full = st.config.regime == Regime::full;
    st.base.set_trainable(full);
    st.lora.for_each([&](const std::string&, const ad::Tensor<float>& t) { t.set_requires_grad(!full); });
}

inline std::vector<std::uint8_t> save_checkpoint(const TrainState& st) {
    detail::ByteWriter w;
    w.bytes(kCheckpointMagic, 4);
    w.u32(kCheckpointVersion);
    nlohmann::json cfg = {{"train", train_config_json(st.config)},
                          {"step", st.step},
                          {"opt_step", st.opt.step},
                          {"lora_rank", st.lora.rank}};
    const std::string text = cfg.dump();
    w.u32(static_cast<std::uint32_t>(text.size()));
    w.bytes(text.data(), text.size());

    const auto names = st.trainable_names();
    std::uint32_t count = 0;
    st.base.for_each([&](const std::string&, const ad::Tensor<float>&) { ++count; });
    st.lora.for_each([&](const std::string&, const ad::Tensor<float>&) { ++count; });
    count += static_cast<std::uint32_t>(2 * st.opt.m.size());
    w.u32(count);
    auto emit = [&](const std::string& name, const ad::Tensor<float>& t) {
        detail::write_tensor(w, name, t.shape(), t.data());
    };
    st.base.for_each(emit);
    st.lora.for_each(emit);
    const auto params = st.trainable();
    for (std::size_t i = 0; i < st.opt.m.size(); ++i) {
        detail::write_tensor(w, "opt.m." + names.at(i), params.at(i).shape(), st.opt.m[i]);
        detail::write_tensor(w, "opt.v." + names.at(i), params.at(i).shape(), st.opt.v[i]);
    }
    return w.take();
}

/// Restores a training state. When `expected` is given, tensor shapes are
/// checked against that model config rather than the stored one, and the
/// first mismatch is reported by tensor name.
inline TrainState load_checkpoint(const std::vector<std::uint8_t>& bytes, const ModelConfig* expected = nullptr) {
    detail::ByteReader r(bytes);
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
        throw CheckpointError("checkpoint: bad magic (not an LCKP file)");
    }
    r.take(4);
    const auto version = r.u32();
    if (version != kCheckpointVersion) {
        throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
    }
    const auto cfg_len = r.u32();
    const auto* cfg_bytes = r.take(cfg_len);
    nlohmann::json cfg;
    try {
        cfg = nlohmann::json::parse(cfg_bytes, cfg_bytes + cfg_len);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint: unreadable config: ") + e.what());
    }

    TrainState st;
    st.config = train_config_from_json(cfg.at("train"));
    st.step = cfg.at("step").get<std::int64_t>();
    const ModelConfig& shape_cfg = expected ? *expected : st.config.model;
    shape_cfg.validate();
    st.base = init_weights<float>(shape_cfg, 0);
    st.lora = init_lora<float>(shape_cfg, cfg.at("lora_rank").get<int>(), 0);
    if (expected) {
        st.config.model = *expected;
    }
    apply_regime(st);

    std::map<std::string, ad::Tensor<float>> slots;
    auto collect = [&](const std::string& name, const ad::Tensor<float>& t) { slots[name] = t; };
    st.base.for_each(collect);
    st.lora.for_each(collect);
    const auto names = st.trainable_names();
    const auto params = st.trainable();
    st.opt.cfg = {st.config.lr, 0.9, 0.999, 1e-8, st.config.weight_decay};
    st.opt.step = cfg.at("opt_step").get<std::int64_t>();
    std::map<std::string, std::vector<float>*> moments;
    st.opt.m.resize(params.size());
    st.opt.v.resize(params.size());
    std::map<std::string, ad::Shape> moment_shapes;
    for (std::size_t i = 0; i < params.size(); ++i) {
        moments["opt.m." + names[i]] = &st.opt.m[i];
        moments["opt.v." + names[i]] = &st.opt.v[i];
        moment_shapes["opt.m." + names[i]] = params[i].shape();
        moment_shapes["opt.v." + names[i]] = params[i].shape();
    }

    const auto count = r.u32();
    std::size_t seen_params = 0, seen_moments = 0;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = r.u16();
        const auto* name_ptr = r.take(name_len);
        const std::string name(reinterpret_cast<const char*>(name_ptr), name_len);
        const auto rank = r.u8();
        ad::Shape shape(rank);
        for (auto& d : shape) {
            d = r.u32();
        }
        const auto n = ad::numel(shape);
        if (auto it = slots.find(name); it != slots.end()) {
            if (it->second.shape() != shape) {
                throw CheckpointError("checkpoint: shape mismatch for tensor '" + name + "': stored " +
                                      ad::shape_str(shape) + ", model expects " + ad::shape_str(it->second.shape()));
            }
            auto dst = it->second.data_mut();
            for (std::size_t k = 0; k < n; ++k) {
                dst[k] = r.f32();
            }
            ++seen_params;
        } else if (auto mt = moments.find(name); mt != moments.end()) {
            if (moment_shapes[name] != shape) {
                throw CheckpointError("checkpoint: shape mismatch for tensor '" + name + "': stored " +
                                      ad::shape_str(shape) + ", model expects " + ad::shape_str(moment_shapes[name]));
            }
            mt->second->resize(n);
            for (std::size_t k = 0; k < n; ++k) {
                (*mt->second)[k] = r.f32();
            }
            ++seen_moments;
        } else {
            throw CheckpointError("checkpoint: unexpected tensor '" + name + "'");
        }
    }
    if (seen_params != slots.size()) {
        throw CheckpointError("checkpoint: " + std::to_string(slots.size() - seen_params) + " model tensors missing");
    }
    if (seen_moments != moments.size()) {
        throw CheckpointError("checkpoint: optimizer state incomplete");
    }
    if (!r.done()) {
        throw CheckpointError("checkpoint: trailing bytes after tensor table");
    }
    return st;
}

}  // namespace layerforge
