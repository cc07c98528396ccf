#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "layerforge/checkpoint.hpp"
#include "layerforge/codec.hpp"
#include "layerforge/config.hpp"
#include "layerforge/flow.hpp"
#include "layerforge/gradcheck.hpp"
#include "layerforge/model.hpp"
#include "layerforge/optim.hpp"
#include "layerforge/scene.hpp"

namespace layerforge {

class TrainingDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct BatchItem {
    TrainingExample example;
    TokenSequence cond;
    FlowSample flow;
};

enum class BatchStream : std::uint64_t { main = 0xba7c, pretrain = 0x9e7a };

/// Deterministic batch for (seed, stream, step): lock-aware samples from
/// random scenes, augmented, with t ~ U(0, 1) and seeded noise. With
/// `conditional` false the condition sequence is left empty.
inline std::vector<BatchItem> build_batch(const std::vector<Scene>& scenes, const TrainConfig& cfg, std::int64_t step,
                                          bool conditional = true, BatchStream stream = BatchStream::main) {
    if (scenes.empty()) {
        throw std::invalid_argument("build_batch: no scenes");
    }
    Rng rng = make_rng(cfg.seed, {static_cast<std::uint64_t>(stream), static_cast<std::uint64_t>(step)});
    const int patch = cfg.model.patch;
    std::vector<BatchItem> batch;
    batch.reserve(static_cast<std::size_t>(cfg.batch));
    for (int b = 0; b < cfg.batch; ++b) {
        const auto& scene = scenes[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(scenes.size()) - 1))];
        BatchItem item;
        item.example = augment_example(sample_example(scene, cfg.p_lock, rng), cfg.augment, rng);
        item.cond.dim = cfg.model.latent_dim();
        if (conditional) {
            item.cond = build_condition_sequence(item.example.canvas, patch);
        }
        const double t = uniform(rng, 0.0, 1.0);
        const std::uint64_t noise_seed = rng();
        item.flow = make_flow_sample(item.example.target, t, noise_seed, patch);
        batch.push_back(std::move(item));
    }
    return batch;
}

template <class T>
ad::Tensor<T> item_loss(ad::Tape<T>& tape, const DiTWeights<T>& base, const LoraSet<T>* lora, const BatchItem& item) {
    auto inputs = make_inputs<T>(item.flow.zt, item.flow.t, item.cond, item.example.prompt);
    auto pred = dit_forward(tape, base, lora, inputs);
    return flow_loss(tape, pred, grid_tensor<T>(item.flow.v_target));
}

inline double locked_fraction(const std::vector<BatchItem>& batch) {
    std::size_t locked = 0, total = 0;
    for (const auto& item : batch) {
        for (const auto& l : item.example.canvas.layers) {
            locked += l.locked ? 1 : 0;
            ++total;
        }
    }
    return total ? static_cast<double>(locked) / static_cast<double>(total) : 0.0;
}

// Mean batch loss without touching gradients.
inline double batch_loss(const TrainState& st, const std::vector<BatchItem>& batch) {
    double total = 0.0;
    for (const auto& item : batch) {
        ad::Tape<float> tape(false);
        total += item_loss(tape, st.base, &st.lora, item).item();
    }
    return total / static_cast<double>(batch.size());
}

// Matrices N(0, 1 / fan_in), vectors N(0, 0.1^2).
inline void randomize_probe_point(const DiTWeights<double>& w, std::uint64_t seed) {
    Rng probe = make_rng(seed, {0x9b});
    w.for_each([&](const std::string&, const ad::Tensor<double>& t) {
        const double sd = t.rank() == 2 ? 1.0 / std::sqrt(static_cast<double>(t.dim(0))) : 0.1;
        for (auto& v : t.data_mut()) {
            v = sd * standard_normal(probe);
        }
    });
}

/// Finite-difference check of the full flow loss in double precision: base
/// weights and rank-r adapters (with non-zero B) all trainable, one
/// conditional example drawn from the configured scene generator. The check
/// runs at a random probe point rather than the training init: matrices are
/// N(0, 1 / fan_in) and vectors N(0, 0.1^2), so every sampled gradient sits
/// well above the finite-difference noise floor.
inline ad::GradCheckReport model_grad_check(const TrainConfig& cfg, std::size_t samples = 16, double eps = 1e-4) {
    cfg.validate();
    TrainConfig one = cfg;
    one.batch = 1;
    const auto scenes = gen_scenes(cfg.seed, 1, cfg.scene, cfg.model);
    const auto batch = build_batch(scenes, one, 0);
    auto base = init_weights<double>(cfg.model, cfg.seed);
    randomize_probe_point(base, cfg.seed);
    base.set_trainable(true);
    const int rank = std::max(1, cfg.model.lora_rank);
    auto lora = init_lora<double>(cfg.model, rank, cfg.seed);
    Rng rng = make_rng(cfg.seed, {0x9c});
    lora.for_each([&](const std::string&, const ad::Tensor<double>& t) {
        for (auto& v : t.data_mut()) {
            if (v == 0.0) {
                v = 0.1 * standard_normal(rng);
            }
        }
        t.set_requires_grad(true);
    });
    std::vector<ad::NamedParam> params;
    base.for_each([&](const std::string& n, const ad::Tensor<double>& t) { params.push_back({n, t}); });
    lora.for_each([&](const std::string& n, const ad::Tensor<double>& t) { params.push_back({n, t}); });
    return ad::grad_check([&](ad::Tape<double>& tape) { return item_loss(tape, base, &lora, batch.front()); }, params,
                          eps, samples, cfg.seed);
}

struct StepLog {
    std::int64_t step = 0;  // 1-based index of the completed optimizer step
    double loss = 0.0;
    double locked_fraction = 0.0;
    double wallclock_ms = 0.0;
};

/// Forward, backward and one AdamW update on `batch`. Returns the mean loss
/// measured before the update.
inline double train_step(TrainState& st, const std::vector<BatchItem>& batch, bool check_finite = false) {
    const auto params = st.trainable();
    for (const auto& p : params) {
        p.zero_grad();
    }
    double total = 0.0;
    std::vector<double> losses;
    const float inv_b = 1.0f / static_cast<float>(batch.size());
    for (const auto& item : batch) {
        ad::Tape<float> tape;
        tape.set_check_finite(check_finite);
        auto loss = item_loss(tape, st.base, &st.lora, item);
        losses.push_back(loss.item());
        total += loss.item();
        tape.backward(loss, inv_b);
    }
    const double mean = total / static_cast<double>(batch.size());
    if (!std::isfinite(mean)) {
        std::string detail;
        for (std::size_t i = 0; i < batch.size(); ++i) {
            detail += " [item " + std::to_string(i) + " t=" + std::to_string(batch[i].flow.t) +
                      " loss=" + std::to_string(losses[i]) + "]";
        }
        throw TrainingDiverged("non-finite loss at step " + std::to_string(st.step + 1) + ":" + detail);
    }
    if (!params.empty()) {
        ad::adamw_step(params, st.opt, check_finite);
    }
    ++st.step;
    return mean;
}

inline std::vector<Scene> training_scenes(const TrainConfig& cfg) {
    if (!cfg.data_dir.empty()) {
        auto scenes = load_scenes(cfg.data_dir);
        if (scenes.empty()) {
            throw std::runtime_error("no scenes found under " + cfg.data_dir);
        }
        return scenes;
    }
    return gen_scenes(cfg.seed, cfg.num_scenes, cfg.scene, cfg.model);
}

inline ad::AdamWConfig adamw_config(const TrainConfig& cfg) {
    ad::AdamWConfig c;
    c.lr = cfg.lr;
    c.weight_decay = cfg.weight_decay;
    return c;
}

/// Fresh state: random base; for freeze+lora the base is either loaded from
/// init_checkpoint or pretrained unconditionally, then frozen, and rank-r
/// adapters are attached.
inline TrainState init_train_state(const TrainConfig& cfg, const std::vector<Scene>& scenes) {
    TrainState st;
    st.config = cfg;
    st.base = init_weights<float>(cfg.model, cfg.seed);
    if (cfg.regime == Regime::freeze_lora) {
        if (!cfg.init_checkpoint.empty()) {
            auto pre = load_checkpoint(read_file(cfg.init_checkpoint), &cfg.model);
            st.base = pre.base;
        } else if (cfg.pretrain_steps > 0) {
            TrainState pre;
            pre.config = cfg;
            pre.config.regime = Regime::full;
            pre.base = st.base;
            pre.lora = init_lora<float>(cfg.model, 0, cfg.seed);
            apply_regime(pre);
            pre.opt = ad::make_optimizer(pre.trainable(), adamw_config(cfg));
            for (int s = 0; s < cfg.pretrain_steps; ++s) {
                train_step(pre, build_batch(scenes, cfg, s, false, BatchStream::pretrain));
            }
            st.base = pre.base;
        }
        st.lora = init_lora<float>(cfg.model, cfg.model.lora_rank, cfg.seed);
    } else {
        st.lora = init_lora<float>(cfg.model, 0, cfg.seed);
    }
    apply_regime(st);
    st.opt = ad::make_optimizer(st.trainable(), adamw_config(cfg));
    return st;
}

struct TrainResult {
    TrainState state;
    std::vector<StepLog> log;
};

inline void write_checkpoint_file(const std::filesystem::path& path, const TrainState& st) {
    write_file(path.string(), save_checkpoint(st));
}

/// Runs the training loop up to cfg.steps. When `out_dir` is non-empty,
/// writes metrics.csv, periodic ckpt_<step>.lckp files and final.lckp there.
inline TrainResult train(const TrainConfig& cfg, const std::filesystem::path& out_dir = {},
                         const std::function<void(const StepLog&)>& on_step = {}) {
    cfg.validate();
    const auto scenes = training_scenes(cfg);
    TrainResult result;
    if (!cfg.resume_from.empty()) {
        result.state = load_checkpoint(read_file(cfg.resume_from), &cfg.model);
        const std::int64_t step = result.state.step;
        auto opt = std::move(result.state.opt);
        result.state.config = cfg;
        apply_regime(result.state);
        result.state.opt = std::move(opt);
        result.state.opt.cfg = adamw_config(cfg);
        result.state.step = step;
    } else {
        result.state = init_train_state(cfg, scenes);
    }
    TrainState& st = result.state;

    std::ofstream metrics;
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        metrics.open(out_dir / "metrics.csv");
        metrics << "step,loss,locked_fraction,wallclock_ms\n";
    }
    const auto start = std::chrono::steady_clock::now();
    while (st.step < cfg.steps) {
        const auto batch = build_batch(scenes, cfg, st.step);
        double loss = 0.0;
        try {
            loss = train_step(st, batch);
        } catch (const TrainingDiverged& e) {
            if (!out_dir.empty()) {
                nlohmann::json dump = {{"error", e.what()}, {"step", st.step + 1}};
                write_file((out_dir / "nan_dump.json").string(), dump.dump(2));
                write_checkpoint_file(out_dir / "nan_state.lckp", st);
            }
            throw;
        }
        StepLog entry{st.step, loss, locked_fraction(batch),
                      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count()};
        result.log.push_back(entry);
        if (metrics.is_open()) {
            metrics << entry.step << ',' << entry.loss << ',' << entry.locked_fraction << ','
                    << static_cast<long long>(entry.wallclock_ms) << '\n';
        }
        if (on_step) {
            on_step(entry);
        }
        if (!out_dir.empty() && cfg.checkpoint_interval > 0 && st.step % cfg.checkpoint_interval == 0 &&
            st.step < cfg.steps) {
            write_checkpoint_file(out_dir / ("ckpt_" + std::to_string(st.step) + ".lckp"), st);
        }
    }
    if (!out_dir.empty()) {
        write_checkpoint_file(out_dir / "final.lckp", st);
    }
    return result;
}

}  // namespace layerforge
