#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "layerforge/model.hpp"
#include "layerforge/scene.hpp"

namespace layerforge {

enum class Regime { full, freeze_lora };

inline const char* to_string(Regime r) { return r == Regime::full ? "full" : "freeze+lora"; }

inline Regime regime_from_string(const std::string& s) {
    if (s == "full") {
        return Regime::full;
    }
    if (s == "freeze+lora" || s == "freeze_lora") {
        return Regime::freeze_lora;
    }
    throw std::invalid_argument("unknown regime '" + s + "'");
}

struct TrainConfig {
    ModelConfig model;
    SceneConfig scene;
    AugmentConfig augment;
    double lr = 1e-4;
    double weight_decay = 0.01;
    int batch = 8;
    int steps = 2000;
    int num_scenes = 16;
    double p_lock = 0.5;
    std::uint64_t seed = 0;
    Regime regime = Regime::full;
    int pretrain_steps = 500;       // unconditional steps before freezing, freeze+lora without init_checkpoint
    int eval_interval = 100;        // loss summary printed every N steps
    int checkpoint_interval = 500;  // 0 disables intermediate checkpoints

    // Runtime-only; not written into checkpoints.
    std::string data_dir;         // load scenes from a gen-data dump instead of generating them
    std::string init_checkpoint;  // pretrained base for freeze+lora
    std::string resume_from;

    void validate() const {
        model.validate();
        if (!(lr > 0.0)) {
            throw std::invalid_argument("train config: lr must be positive");
        }
        if (batch < 1) {
            throw std::invalid_argument("train config: batch must be >= 1");
        }
        if (steps < 0 || num_scenes < 1) {
            throw std::invalid_argument("train config: steps must be >= 0 and num_scenes >= 1");
        }
        if (!(p_lock >= 0.0 && p_lock <= 1.0)) {
            throw std::invalid_argument("train config: p_lock must lie in [0, 1]");
        }
        if (augment.scale < 0 || augment.shift < 0 || augment.color < 0 || augment.background_drop < 0 ||
            augment.background_drop > 1) {
            throw std::invalid_argument("train config: augmentation magnitudes must be non-negative");
        }
        if (scene.width % model.patch != 0 || scene.height % model.patch != 0) {
            throw std::invalid_argument("train config: canvas size must be divisible by the patch size");
        }
    }
};

inline nlohmann::json train_config_json(const TrainConfig& c) {
    return {{"model", c.model},
            {"scene",
             {{"width", c.scene.width},
              {"height", c.scene.height},
              {"renderings", c.scene.renderings},
              {"max_identities", c.scene.max_identities},
              {"base_radius_frac", c.scene.base_radius_frac},
              {"position_jitter", c.scene.position_jitter},
              {"scale_min", c.scene.scale_min},
              {"scale_max", c.scene.scale_max},
              {"rotation_deg", c.scene.rotation_deg}}},
            {"augment",
             {{"scale", c.augment.scale},
              {"shift", c.augment.shift},
              {"color", c.augment.color},
              {"background_drop", c.augment.background_drop},
              {"geometric_on_locked", c.augment.geometric_on_locked}}},
            {"lr", c.lr},
            {"weight_decay", c.weight_decay},
            {"batch", c.batch},
            {"steps", c.steps},
            {"num_scenes", c.num_scenes},
            {"p_lock", c.p_lock},
            {"seed", c.seed},
            {"regime", to_string(c.regime)},
            {"pretrain_steps", c.pretrain_steps},
            {"eval_interval", c.eval_interval},
            {"checkpoint_interval", c.checkpoint_interval}};
}

// Missing keys keep their defaults, so a config file may list only overrides.
inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    auto get = [](const nlohmann::json& obj, const char* k, auto& field) {
        if (obj.contains(k)) {
            obj.at(k).get_to(field);
        }
    };
    if (j.contains("model")) {
        c.model = j.at("model").get<ModelConfig>();
    }
    if (j.contains("scene")) {
        const auto& s = j.at("scene");
        get(s, "width", c.scene.width);
        get(s, "height", c.scene.height);
        get(s, "renderings", c.scene.renderings);
        get(s, "max_identities", c.scene.max_identities);
        get(s, "base_radius_frac", c.scene.base_radius_frac);
        get(s, "position_jitter", c.scene.position_jitter);
        get(s, "scale_min", c.scene.scale_min);
        get(s, "scale_max", c.scene.scale_max);
        get(s, "rotation_deg", c.scene.rotation_deg);
    }
    if (j.contains("augment")) {
        const auto& a = j.at("augment");
        get(a, "scale", c.augment.scale);
        get(a, "shift", c.augment.shift);
        get(a, "color", c.augment.color);
        get(a, "background_drop", c.augment.background_drop);
        get(a, "geometric_on_locked", c.augment.geometric_on_locked);
    }
    get(j, "lr", c.lr);
    get(j, "weight_decay", c.weight_decay);
    get(j, "batch", c.batch);
    get(j, "steps", c.steps);
    get(j, "num_scenes", c.num_scenes);
    get(j, "p_lock", c.p_lock);
    get(j, "seed", c.seed);
    if (j.contains("regime")) {
        c.regime = regime_from_string(j.at("regime").get<std::string>());
    }
    get(j, "pretrain_steps", c.pretrain_steps);
    get(j, "eval_interval", c.eval_interval);
    get(j, "checkpoint_interval", c.checkpoint_interval);
    get(j, "data_dir", c.data_dir);
    get(j, "init_checkpoint", c.init_checkpoint);
    get(j, "resume_from", c.resume_from);
    return c;
}

}  // namespace layerforge
