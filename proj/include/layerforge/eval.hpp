#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "layerforge/image.hpp"
#include "layerforge/rng.hpp"
#include "layerforge/sampler.hpp"
#include "layerforge/scene.hpp"

namespace layerforge {

inline constexpr double kPsnrCap = 99.0;
inline constexpr std::uint8_t kRegionAlpha = 128;
inline constexpr double kHueMinSaturation = 0.25;
inline constexpr double kHueMinValue = 0.2;
inline constexpr double kHueMinCoverage = 0.25;  // saturated share of the region needed for a defined hue

// Pixels where target layer `index` is the topmost layer with alpha >= 128.
inline std::vector<bool> visible_region(const TrainingExample& ex, std::size_t index) {
    const Image& own = ex.target_layers.at(index);
    std::vector<bool> mask(static_cast<std::size_t>(own.width) * own.height, false);
    const int z = ex.canvas.layers.at(index).z_order;
    for (int y = 0; y < own.height; ++y) {
        for (int x = 0; x < own.width; ++x) {
            if (own.at(x, y)[3] < kRegionAlpha) {
                continue;
            }
            bool covered = false;
            for (std::size_t j = 0; j < ex.target_layers.size() && !covered; ++j) {
                covered = ex.canvas.layers[j].z_order > z && ex.target_layers[j].at(x, y)[3] >= kRegionAlpha;
            }
            mask[static_cast<std::size_t>(y) * own.width + x] = !covered;
        }
    }
    return mask;
}

inline std::size_t region_size(const std::vector<bool>& mask) {
    std::size_t n = 0;
    for (bool b : mask) {
        n += b ? 1 : 0;
    }
    return n;
}

/// RGB PSNR over the masked pixels; capped at kPsnrCap, nullopt for an empty mask.
inline std::optional<double> region_psnr(const Image& a, const Image& b, const std::vector<bool>& mask) {
    if (a.width != b.width || a.height != b.height) {
        throw std::invalid_argument("region_psnr: image sizes differ");
    }
    double se = 0.0;
    std::size_t n = 0;
    for (int y = 0; y < a.height; ++y) {
        for (int x = 0; x < a.width; ++x) {
            if (!mask[static_cast<std::size_t>(y) * a.width + x]) {
                continue;
            }
            for (int c = 0; c < 3; ++c) {
                const double d = static_cast<double>(a.at(x, y)[c]) - b.at(x, y)[c];
                se += d * d;
            }
            n += 3;
        }
    }
    if (n == 0) {
        return std::nullopt;
    }
    const double mse = se / static_cast<double>(n);
    if (mse == 0.0) {
        return kPsnrCap;
    }
    return std::min(kPsnrCap, 10.0 * std::log10(255.0 * 255.0 / mse));
}

/// Dominant hue (degrees) of the saturated pixels in the region: peak of a
/// smoothed 1-degree histogram, refined by the circular mean within 15 degrees
/// of the peak. nullopt when too few pixels carry a hue.
inline std::optional<double> region_hue_mode(const Image& img, const std::vector<bool>& mask) {
    std::vector<double> hues;
    std::size_t total = 0;
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            if (!mask[static_cast<std::size_t>(y) * img.width + x]) {
                continue;
            }
            ++total;
            const std::uint8_t* p = img.at(x, y);
            const Hsv hsv = rgb_to_hsv(p[0], p[1], p[2]);
            if (hsv.s >= kHueMinSaturation && hsv.v >= kHueMinValue) {
                hues.push_back(hsv.h);
            }
        }
    }
    if (hues.empty() || static_cast<double>(hues.size()) < kHueMinCoverage * static_cast<double>(total)) {
        return std::nullopt;
    }
    std::array<int, 360> hist{};
    for (double h : hues) {
        ++hist[static_cast<std::size_t>(std::floor(h)) % 360];
    }
    int best = 0, best_count = -1;
    for (int b = 0; b < 360; ++b) {
        int s = 0;
        for (int k = -3; k <= 3; ++k) {
            s += hist[static_cast<std::size_t>((b + k + 360) % 360)];
        }
        if (s > best_count) {
            best_count = s;
            best = b;
        }
    }
    const double peak = best + 0.5;
    double sx = 0.0, sy = 0.0;
    for (double h : hues) {
        if (hue_distance(h, peak) <= 15.0) {
            sx += std::cos(h * M_PI / 180.0);
            sy += std::sin(h * M_PI / 180.0);
        }
    }
    return std::fmod(std::atan2(sy, sx) * 180.0 / M_PI + 360.0, 360.0);
}

struct LayerEval {
    std::string id;
    bool locked = false;
    bool subject = false;
    std::size_t region_pixels = 0;
    std::optional<double> psnr;       // dB, capped at kPsnrCap
    std::optional<double> hue_error;  // degrees in [0, 180]
    std::string note;                 // why a metric is missing
};

inline std::vector<LayerEval> eval_locked_fidelity(const Image& output, const TrainingExample& ex) {
    if (output.width != ex.target.width || output.height != ex.target.height) {
        throw std::invalid_argument("eval_locked_fidelity: output and target dimensions differ");
    }
    std::vector<LayerEval> out;
    for (std::size_t i = 0; i < ex.canvas.layers.size(); ++i) {
        LayerEval e;
        e.id = ex.canvas.layers[i].id;
        e.locked = ex.canvas.layers[i].locked;
        e.subject = ex.reference_hue.at(i).has_value();
        const auto mask = visible_region(ex, i);
        e.region_pixels = region_size(mask);
        e.psnr = region_psnr(output, ex.target, mask);
        if (!e.psnr) {
            e.note = "empty opaque region";
        }
        out.push_back(std::move(e));
    }
    return out;
}

inline std::vector<LayerEval> eval_identity(const Image& output, const TrainingExample& ex) {
    if (output.width != ex.target.width || output.height != ex.target.height) {
        throw std::invalid_argument("eval_identity: output and target dimensions differ");
    }
    std::vector<LayerEval> out;
    for (std::size_t i = 0; i < ex.canvas.layers.size(); ++i) {
        if (!ex.reference_hue.at(i)) {
            continue;
        }
        LayerEval e;
        e.id = ex.canvas.layers[i].id;
        e.locked = ex.canvas.layers[i].locked;
        e.subject = true;
        const auto mask = visible_region(ex, i);
        e.region_pixels = region_size(mask);
        if (e.region_pixels == 0) {
            e.note = "empty opaque region";
        } else if (const auto mode = region_hue_mode(output, mask)) {
            e.hue_error = hue_distance(*mode, *ex.reference_hue[i]);
        } else {
            e.note = "undefined saturation";
        }
        out.push_back(std::move(e));
    }
    return out;
}

struct EvalReport {
    std::vector<LayerEval> layers;  // fidelity and hue merged per canvas layer

    // Means over subject layers with a defined value.
    std::optional<double> mean_locked_psnr() const { return mean(true, &LayerEval::psnr); }
    std::optional<double> mean_unlocked_psnr() const { return mean(false, &LayerEval::psnr); }
    std::optional<double> mean_hue_error() const {
        double s = 0.0;
        int n = 0;
        for (const auto& l : layers) {
            if (l.subject && l.hue_error) {
                s += *l.hue_error;
                ++n;
            }
        }
        return n ? std::optional<double>(s / n) : std::nullopt;
    }

private:
    std::optional<double> mean(bool locked, std::optional<double> LayerEval::*field) const {
        double s = 0.0;
        int n = 0;
        for (const auto& l : layers) {
            if (l.subject && l.locked == locked && (l.*field)) {
                s += *(l.*field);
                ++n;
            }
        }
        return n ? std::optional<double>(s / n) : std::nullopt;
    }
};

inline EvalReport evaluate_output(const Image& output, const TrainingExample& ex) {
    EvalReport r;
    r.layers = eval_locked_fidelity(output, ex);
    const auto hues = eval_identity(output, ex);
    for (auto& l : r.layers) {
        for (const auto& h : hues) {
            if (h.id == l.id) {
                l.hue_error = h.hue_error;
                if (!h.hue_error && l.note.empty()) {
                    l.note = h.note;
                }
            }
        }
    }
    return r;
}

inline EvalReport merge_reports(const std::vector<EvalReport>& reports) {
    EvalReport all;
    for (const auto& r : reports) {
        all.layers.insert(all.layers.end(), r.layers.begin(), r.layers.end());
    }
    return all;
}

inline nlohmann::json optional_json(const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json layer_eval_json(const LayerEval& l) {
    nlohmann::json j = {{"id", l.id},
                        {"locked", l.locked},
                        {"subject", l.subject},
                        {"region_pixels", l.region_pixels},
                        {"psnr_db", optional_json(l.psnr)},
                        {"hue_error_deg", optional_json(l.hue_error)}};
    if (!l.note.empty()) {
        j["note"] = l.note;
    }
    return j;
}

inline nlohmann::json report_json(const EvalReport& r) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : r.layers) {
        layers.push_back(layer_eval_json(l));
    }
    return {{"layers", layers},
            {"aggregate",
             {{"mean_locked_psnr_db", optional_json(r.mean_locked_psnr())},
              {"mean_unlocked_psnr_db", optional_json(r.mean_unlocked_psnr())},
              {"mean_hue_error_deg", optional_json(r.mean_hue_error())}}}};
}

// ---------------------------------------------------------------------------
// Probe canvases
// ---------------------------------------------------------------------------

// Example built from scene renderings with an explicit lock pattern; unlocked
// layers come from `source` (a rendering other than the target).
inline TrainingExample make_probe(const Scene& scene, int target, int source, const std::vector<bool>& locked) {
    const Rendering& tr = scene.renderings.at(static_cast<std::size_t>(target));
    TrainingExample ex;
    ex.target_index = target;
    ex.target = tr.composed;
    ex.prompt = scene.prompt;
    ex.canvas.width = scene.width;
    ex.canvas.height = scene.height;
    ex.canvas.prompt = scene.prompt;
    for (std::size_t slot = 0; slot < tr.layers.size(); ++slot) {
        const int from = locked.at(slot) ? target : source;
        Layer layer = scene.renderings.at(static_cast<std::size_t>(from)).layers[slot];
        layer.locked = locked[slot];
        ex.canvas.layers.push_back(std::move(layer));
        ex.provenance.push_back({static_cast<int>(slot), from, locked[slot]});
        ex.target_layers.push_back(tr.layers[slot].rgba);
        ex.reference_hue.push_back(slot == 0 ? std::nullopt
                                             : std::optional<double>(scene.identities[slot - 1].hue));
    }
    return ex;
}

/// Canvases from scenes with at least two subjects: background and every
/// subject locked except one, which comes unlocked from another rendering.
inline std::vector<TrainingExample> mixed_lock_probes(const std::vector<Scene>& scenes, int count, std::uint64_t seed) {
    std::vector<const Scene*> eligible;
    for (const auto& s : scenes) {
        if (s.identities.size() >= 2 && s.renderings.size() >= 2) {
            eligible.push_back(&s);
        }
    }
    if (eligible.empty()) {
        throw std::invalid_argument("mixed_lock_probes: no scene with two or more subjects");
    }
    std::vector<TrainingExample> out;
    for (int i = 0; i < count; ++i) {
        const Scene& s = *eligible[static_cast<std::size_t>(i) % eligible.size()];
        Rng rng = make_rng(seed, {0xe7a1, static_cast<std::uint64_t>(i)});
        const int m = static_cast<int>(s.renderings.size());
        const int target = uniform_int(rng, 0, m - 1);
        int source = uniform_int(rng, 0, m - 2);
        source += source >= target ? 1 : 0;
        std::vector<bool> locked(s.identities.size() + 1, true);
        locked[1 + static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(s.identities.size()) - 1))] = false;
        out.push_back(make_probe(s, target, source, locked));
    }
    return out;
}

// Every layer locked and taken from the target rendering.
inline std::vector<TrainingExample> all_locked_probes(const std::vector<Scene>& scenes, int count, std::uint64_t seed) {
    if (scenes.empty()) {
        throw std::invalid_argument("all_locked_probes: no scenes");
    }
    std::vector<TrainingExample> out;
    for (int i = 0; i < count; ++i) {
        const Scene& s = scenes[static_cast<std::size_t>(i) % scenes.size()];
        Rng rng = make_rng(seed, {0xa11c, static_cast<std::uint64_t>(i)});
        const int target = uniform_int(rng, 0, static_cast<int>(s.renderings.size()) - 1);
        out.push_back(make_probe(s, target, target, std::vector<bool>(s.identities.size() + 1, true)));
    }
    return out;
}

/// Samples each probe (seed = base seed + index) and evaluates the output.
inline EvalReport evaluate_model(const FlowModel& model, const std::vector<TrainingExample>& probes,
                                 SampleConfig cfg) {
    std::vector<EvalReport> reports;
    const std::uint64_t base = cfg.seed;
    for (std::size_t i = 0; i < probes.size(); ++i) {
        cfg.seed = base + i;
        reports.push_back(evaluate_output(euler_sample(model, probes[i].canvas, cfg), probes[i]));
    }
    return merge_reports(reports);
}

}  // namespace layerforge
