#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "layerforge/canvas.hpp"
#include "layerforge/image.hpp"
#include "layerforge/model.hpp"
#include "layerforge/rng.hpp"

namespace layerforge {

enum class GlyphShape { circle, square, triangle, cross };
enum class GlyphPattern { solid, striped };

inline const char* to_string(GlyphShape s) {
    switch (s) {
        case GlyphShape::circle: return "circle";
        case GlyphShape::square: return "square";
        case GlyphShape::triangle: return "triangle";
        case GlyphShape::cross: return "cross";
    }
    return "circle";
}

inline const char* to_string(GlyphPattern p) { return p == GlyphPattern::solid ? "solid" : "striped"; }

inline GlyphShape shape_from_string(const std::string& s) {
    for (auto v : {GlyphShape::circle, GlyphShape::square, GlyphShape::triangle, GlyphShape::cross}) {
        if (s == to_string(v)) {
            return v;
        }
    }
    throw std::invalid_argument("unknown shape '" + s + "'");
}

inline GlyphPattern pattern_from_string(const std::string& s) {
    if (s == "solid") {
        return GlyphPattern::solid;
    }
    if (s == "striped") {
        return GlyphPattern::striped;
    }
    throw std::invalid_argument("unknown pattern '" + s + "'");
}

struct Identity {
    GlyphShape shape = GlyphShape::circle;
    double hue = 0.0;  // degrees [0, 360)
    GlyphPattern pattern = GlyphPattern::solid;

    bool operator==(const Identity&) const = default;
};

struct Pose {
    double cx = 0.0;
    double cy = 0.0;
    double scale = 1.0;
    double rotation_deg = 0.0;

    bool operator==(const Pose&) const = default;
};

// One image of the scene. layers[0] is the background (z_order 0), layers[i + 1]
// is identity i (z_order i + 1).
struct Rendering {
    std::vector<Layer> layers;
    std::vector<Pose> poses;  // per identity
    double light_angle_deg = 0.0;
    Image composed;  // RGB

    bool operator==(const Rendering&) const = default;
};

struct Scene {
    int scene_id = 0;
    int width = 32;
    int height = 32;
    std::vector<Identity> identities;
    double background_hue = 0.0;
    PromptAttrs prompt;
    std::vector<Rendering> renderings;

    bool operator==(const Scene&) const = default;
};

struct SceneConfig {
    int width = 32;
    int height = 32;
    int renderings = 3;
    int max_identities = 4;
    double base_radius_frac = 0.2;  // glyph radius at scale 1, fraction of min(width, height)
    double position_jitter = 0.25;  // fraction of canvas size
    double scale_min = 0.7;
    double scale_max = 1.3;
    double rotation_deg = 30.0;
};

// ---------------------------------------------------------------------------
// Colour helpers
// ---------------------------------------------------------------------------

struct Rgb {
    std::uint8_t r = 0, g = 0, b = 0;
};

inline Rgb hsv_to_rgb(double h, double s, double v) {
    h = std::fmod(std::fmod(h, 360.0) + 360.0, 360.0);
    const double c = v * s;
    const double hp = h / 60.0;
    const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1) {
        r = c, g = x;
    } else if (hp < 2) {
        r = x, g = c;
    } else if (hp < 3) {
        g = c, b = x;
    } else if (hp < 4) {
        g = x, b = c;
    } else if (hp < 5) {
        r = x, b = c;
    } else {
        r = c, b = x;
    }
    const double m = v - c;
    auto q = [](double u) { return static_cast<std::uint8_t>(std::clamp(std::floor(u * 255.0 + 0.5), 0.0, 255.0)); };
    return {q(r + m), q(g + m), q(b + m)};
}

struct Hsv {
    double h = 0.0;  // degrees
    double s = 0.0;
    double v = 0.0;
};

inline Hsv rgb_to_hsv(std::uint8_t r8, std::uint8_t g8, std::uint8_t b8) {
    const double r = r8 / 255.0, g = g8 / 255.0, b = b8 / 255.0;
    const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
    const double d = mx - mn;
    Hsv out;
    out.v = mx;
    out.s = mx > 0 ? d / mx : 0.0;
    if (d <= 0) {
        return out;
    }
    double h;
    if (mx == r) {
        h = std::fmod((g - b) / d, 6.0);
    } else if (mx == g) {
        h = (b - r) / d + 2.0;
    } else {
        h = (r - g) / d + 4.0;
    }
    out.h = std::fmod(h * 60.0 + 360.0, 360.0);
    return out;
}

// Circular distance in degrees, in [0, 180].
inline double hue_distance(double a, double b) {
    double d = std::fmod(std::abs(a - b), 360.0);
    return d > 180.0 ? 360.0 - d : d;
}

// Hue assigned to the i-th background token.
inline double background_token_hue(const ModelConfig& cfg, std::size_t index) {
    return 360.0 * static_cast<double>(index) / static_cast<double>(cfg.hue_vocab.size());
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

// Membership test in the glyph's unit frame (radius 1).
inline bool glyph_contains(GlyphShape shape, double u, double v) {
    switch (shape) {
        case GlyphShape::circle:
            return u * u + v * v <= 1.0;
        case GlyphShape::square:
            return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
        case GlyphShape::triangle: {
            // apex (0, -1), base corners (+-0.95, 0.75)
            if (v > 0.75) {
                return false;
            }
            const double half_width = 0.95 * (v + 1.0) / 1.75;
            return v >= -1.0 && std::abs(u) <= half_width;
        }
        case GlyphShape::cross:
            return (std::abs(u) <= 0.32 && std::abs(v) <= 0.95) || (std::abs(v) <= 0.32 && std::abs(u) <= 0.95);
    }
    return false;
}

inline Image render_glyph(const Identity& id, const Pose& pose, double base_radius, int width, int height) {
    Image out = make_rgba(width, height);
    const double radius = base_radius * pose.scale;
    const double th = pose.rotation_deg * M_PI / 180.0;
    const double c = std::cos(th), s = std::sin(th);
    const Rgb bright = hsv_to_rgb(id.hue, 0.85, 0.95);
    const Rgb dark = hsv_to_rgb(id.hue, 0.85, 0.55);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const double px = (x + 0.5 - pose.cx) / radius;
            const double py = (y + 0.5 - pose.cy) / radius;
            const double u = c * px + s * py;
            const double v = -s * px + c * py;
            if (!glyph_contains(id.shape, u, v)) {
                continue;
            }
            const bool stripe = id.pattern == GlyphPattern::striped &&
                                static_cast<int>(std::floor((u + 1.0) * 2.5)) % 2 == 1;
            const Rgb col = stripe ? dark : bright;
            std::uint8_t* p = out.at(x, y);
            p[0] = col.r;
            p[1] = col.g;
            p[2] = col.b;
            p[3] = 255;
        }
    }
    return out;
}

// Full-canvas background: constant hue, brightness ramp along the light direction.
inline Image render_background(double hue, double light_angle_deg, int width, int height) {
    Image out = make_rgba(width, height);
    const double th = light_angle_deg * M_PI / 180.0;
    const double dx = std::cos(th), dy = std::sin(th);
    const double half = 0.5 * std::max(width, height);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const double t = ((x + 0.5 - 0.5 * width) * dx + (y + 0.5 - 0.5 * height) * dy) / half;
            const Rgb col = hsv_to_rgb(hue, 0.45, std::clamp(0.55 + 0.15 * t, 0.0, 1.0));
            std::uint8_t* p = out.at(x, y);
            p[0] = col.r;
            p[1] = col.g;
            p[2] = col.b;
            p[3] = 255;
        }
    }
    return out;
}

struct OpaqueBox {
    int x0 = 0, y0 = 0, x1 = -1, y1 = -1;  // inclusive
    std::size_t count = 0;

    bool empty() const { return count == 0; }
    int width() const { return empty() ? 0 : x1 - x0 + 1; }
    int height() const { return empty() ? 0 : y1 - y0 + 1; }
};

inline OpaqueBox opaque_box(const Image& rgba) {
    OpaqueBox box{rgba.width, rgba.height, -1, -1, 0};
    for (int y = 0; y < rgba.height; ++y) {
        for (int x = 0; x < rgba.width; ++x) {
            if (rgba.at(x, y)[3] > 0) {
                box.x0 = std::min(box.x0, x);
                box.y0 = std::min(box.y0, y);
                box.x1 = std::max(box.x1, x);
                box.y1 = std::max(box.y1, y);
                ++box.count;
            }
        }
    }
    if (box.count == 0) {
        box = OpaqueBox{};
    }
    return box;
}

inline std::string subject_layer_id(std::size_t i) { return "subject_" + std::to_string(i); }
inline constexpr const char* kBackgroundId = "background";

/// Deterministic scene from a seed: 1-4 identities, `renderings` images with
/// jittered poses, a background whose hue matches the prompt token.
inline Scene gen_scene(std::uint64_t seed, const SceneConfig& cfg = {}, const ModelConfig& model = {}) {
    if (cfg.renderings < 2) {
        throw std::invalid_argument("gen_scene: at least two renderings are required");
    }
    Rng rng = make_rng(seed, {0x5ce1e});
    Scene scene;
    scene.width = cfg.width;
    scene.height = cfg.height;
    const int n_ids = uniform_int(rng, 1, std::clamp(cfg.max_identities, 1, static_cast<int>(model.arrangement_vocab.size())));
    for (int i = 0; i < n_ids; ++i) {
        Identity id;
        id.shape = static_cast<GlyphShape>(uniform_int(rng, 0, 3));
        id.hue = uniform(rng, 0.0, 360.0);
        id.pattern = bernoulli(rng, 0.5) ? GlyphPattern::striped : GlyphPattern::solid;
        scene.identities.push_back(id);
    }
    const auto hue_index = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(model.hue_vocab.size()) - 1));
    scene.background_hue = background_token_hue(model, hue_index);
    scene.prompt = {model.hue_vocab[hue_index], model.arrangement_vocab[static_cast<std::size_t>(n_ids - 1)]};

    const double base_radius = cfg.base_radius_frac * std::min(cfg.width, cfg.height);
    for (int r = 0; r < cfg.renderings; ++r) {
        Rendering rendering;
        // Light direction differs per rendering so unlocked backgrounds never copy the target.
        for (int attempt = 0;; ++attempt) {
            rendering.light_angle_deg = uniform(rng, 0.0, 360.0);
            Layer bg{kBackgroundId, render_background(scene.background_hue, rendering.light_angle_deg, cfg.width, cfg.height),
                     false, 0, std::nullopt};
            bool dup = false;
            for (const auto& prev : scene.renderings) {
                dup = dup || prev.layers[0].rgba == bg.rgba;
            }
            if (!dup || attempt > 64) {
                rendering.layers.push_back(std::move(bg));
                break;
            }
        }
        for (int i = 0; i < n_ids; ++i) {
            const double slot_x = cfg.width * (i + 0.5) / n_ids;
            const double slot_y = cfg.height * 0.5;
            Pose pose;
            Image glyph;
            for (int attempt = 0;; ++attempt) {
                pose.cx = std::clamp(slot_x + uniform(rng, -cfg.position_jitter, cfg.position_jitter) * cfg.width,
                                     0.15 * cfg.width, 0.85 * cfg.width);
                pose.cy = std::clamp(slot_y + uniform(rng, -cfg.position_jitter, cfg.position_jitter) * cfg.height,
                                     0.15 * cfg.height, 0.85 * cfg.height);
                pose.scale = uniform(rng, cfg.scale_min, cfg.scale_max);
                pose.rotation_deg = uniform(rng, -cfg.rotation_deg, cfg.rotation_deg);
                glyph = render_glyph(scene.identities[i], pose, base_radius, cfg.width, cfg.height);
                const auto box = opaque_box(glyph);
                bool ok = box.width() >= 4 && box.height() >= 4 && box.count >= 16;
                for (const auto& prev : scene.renderings) {
                    ok = ok && !(prev.layers[i + 1].rgba == glyph);
                }
                if (ok || attempt > 64) {
                    break;
                }
            }
            rendering.poses.push_back(pose);
            rendering.layers.push_back({subject_layer_id(i), std::move(glyph), false, i + 1, std::nullopt});
        }
        LayeredCanvas full{cfg.width, cfg.height, rendering.layers, scene.prompt};
        rendering.composed = compose_collage(full);
        scene.renderings.push_back(std::move(rendering));
    }
    return scene;
}

inline std::vector<Scene> gen_scenes(std::uint64_t seed, int count, const SceneConfig& cfg = {},
                                     const ModelConfig& model = {}) {
    std::vector<Scene> out;
    for (int i = 0; i < count; ++i) {
        Rng r = make_rng(seed, {0x5eed, static_cast<std::uint64_t>(i)});
        Scene s = gen_scene(r(), cfg, model);
        s.scene_id = i;
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Locking-aware sampling
// ---------------------------------------------------------------------------

struct LayerProvenance {
    int slot = 0;       // 0 = background, i + 1 = identity i
    int rendering = 0;  // source rendering index
    bool locked = false;
};

struct TrainingExample {
    LayeredCanvas canvas;
    Image target;  // RGB
    PromptAttrs prompt;
    int target_index = 0;
    std::vector<LayerProvenance> provenance;   // aligned with canvas.layers
    std::vector<Image> target_layers;          // target rendering's layer per canvas layer
    std::vector<std::optional<double>> reference_hue;  // identity hue; background has none
};

/// Picks a target rendering uniformly; each layer is locked with probability
/// p_lock and then copied from the target, otherwise copied from a uniformly
/// chosen other rendering.
inline TrainingExample sample_example(const Scene& scene, double p_lock, Rng& rng) {
    const int m = static_cast<int>(scene.renderings.size());
    if (m < 2) {
        throw std::invalid_argument("sample_example: scene needs at least two renderings");
    }
    if (!(p_lock >= 0.0 && p_lock <= 1.0)) {
        throw std::invalid_argument("sample_example: p_lock must lie in [0, 1]");
    }
    TrainingExample ex;
    ex.target_index = uniform_int(rng, 0, m - 1);
    const Rendering& target = scene.renderings[ex.target_index];
    ex.target = target.composed;
    ex.prompt = scene.prompt;
    ex.canvas.width = scene.width;
    ex.canvas.height = scene.height;
    ex.canvas.prompt = scene.prompt;
    for (std::size_t slot = 0; slot < target.layers.size(); ++slot) {
        const bool locked = bernoulli(rng, p_lock);
        int source = ex.target_index;
        if (!locked) {
            source = uniform_int(rng, 0, m - 2);
            if (source >= ex.target_index) {
                ++source;
            }
        }
        Layer layer = scene.renderings[source].layers[slot];
        layer.locked = locked;
        ex.canvas.layers.push_back(std::move(layer));
        ex.provenance.push_back({static_cast<int>(slot), source, locked});
        ex.target_layers.push_back(target.layers[slot].rgba);
        ex.reference_hue.push_back(slot == 0 ? std::nullopt : std::optional<double>(scene.identities[slot - 1].hue));
    }
    return ex;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentConfig {
    double scale = 0.1;            // unlocked scale in [1 - scale, 1 + scale]
    int shift = 2;                 // unlocked shift in [-shift, shift] pixels per axis
    double color = 0.05;           // per-channel gain in [1 - color, 1 + color]
    double background_drop = 0.2;  // probability of leaving the background off the canvas
    bool geometric_on_locked = false;

    bool is_zero() const { return scale == 0.0 && shift == 0 && color == 0.0 && background_drop == 0.0; }
};

// Scales about the opaque bounding-box centre, then translates by (dx, dy).
// Nearest neighbour; pixels falling outside the canvas are clipped.
inline Image apply_geometry(const Image& rgba, double scale, int dx, int dy) {
    const auto box = opaque_box(rgba);
    if (box.empty() || (scale == 1.0 && dx == 0 && dy == 0)) {
        return rgba;
    }
    const double cx = 0.5 * (box.x0 + box.x1 + 1);
    const double cy = 0.5 * (box.y0 + box.y1 + 1);
    Image out = make_rgba(rgba.width, rgba.height);
    for (int y = 0; y < rgba.height; ++y) {
        const double sy = std::floor((y + 0.5 - dy - cy) / scale + cy);
        if (sy < 0 || sy >= rgba.height) {
            continue;
        }
        for (int x = 0; x < rgba.width; ++x) {
            const double sx = std::floor((x + 0.5 - dx - cx) / scale + cx);
            if (sx < 0 || sx >= rgba.width) {
                continue;
            }
            std::copy_n(rgba.at(static_cast<int>(sx), static_cast<int>(sy)), 4, out.at(x, y));
        }
    }
    return out;
}

inline Image apply_color_gain(const Image& rgba, const std::array<double, 3>& gain) {
    Image out = rgba;
    for (int y = 0; y < out.height; ++y) {
        for (int x = 0; x < out.width; ++x) {
            std::uint8_t* p = out.at(x, y);
            if (p[3] == 0) {
                continue;
            }
            for (int c = 0; c < 3; ++c) {
                p[c] = static_cast<std::uint8_t>(std::clamp(std::floor(p[c] * gain[c] + 0.5), 0.0, 255.0));
            }
        }
    }
    return out;
}

/// Colour gain on every layer; scale and shift only on unlocked layers unless
/// geometric_on_locked is set, so locked layers stay pixel-aligned with the target.
inline Layer augment_layer(Layer layer, bool locked, const AugmentConfig& cfg, Rng& rng) {
    if (cfg.color > 0.0) {
        std::array<double, 3> gain{};
        for (auto& g : gain) {
            g = uniform(rng, 1.0 - cfg.color, 1.0 + cfg.color);
        }
        layer.rgba = apply_color_gain(layer.rgba, gain);
    }
    if (!locked || cfg.geometric_on_locked) {
        const double s = cfg.scale > 0.0 ? uniform(rng, 1.0 - cfg.scale, 1.0 + cfg.scale) : 1.0;
        const int dx = cfg.shift > 0 ? uniform_int(rng, -cfg.shift, cfg.shift) : 0;
        const int dy = cfg.shift > 0 ? uniform_int(rng, -cfg.shift, cfg.shift) : 0;
        layer.rgba = apply_geometry(layer.rgba, s, dx, dy);
    }
    layer.placed.reset();
    return layer;
}

// Optional background drop, then per-layer augmentation. The target is untouched.
inline TrainingExample augment_example(TrainingExample ex, const AugmentConfig& cfg, Rng& rng) {
    if (cfg.background_drop > 0.0 && ex.canvas.layers.size() > 1 && !ex.provenance.empty() &&
        ex.provenance[0].slot == 0 && bernoulli(rng, cfg.background_drop)) {
        ex.canvas.layers.erase(ex.canvas.layers.begin());
        ex.provenance.erase(ex.provenance.begin());
        ex.target_layers.erase(ex.target_layers.begin());
        ex.reference_hue.erase(ex.reference_hue.begin());
    }
    for (auto& layer : ex.canvas.layers) {
        const bool locked = layer.locked;
        layer = augment_layer(std::move(layer), locked, cfg, rng);
    }
    return ex;
}

// ---------------------------------------------------------------------------
// Dataset dump / load
// ---------------------------------------------------------------------------

inline nlohmann::json scene_json(const Scene& scene) {
    nlohmann::json ids = nlohmann::json::array();
    for (const auto& id : scene.identities) {
        ids.push_back({{"shape", to_string(id.shape)}, {"hue", id.hue}, {"pattern", to_string(id.pattern)}});
    }
    nlohmann::json renders = nlohmann::json::array();
    for (const auto& r : scene.renderings) {
        nlohmann::json poses = nlohmann::json::array();
        for (const auto& p : r.poses) {
            poses.push_back({{"cx", p.cx}, {"cy", p.cy}, {"scale", p.scale}, {"rotation_deg", p.rotation_deg}});
        }
        renders.push_back({{"light_angle_deg", r.light_angle_deg}, {"poses", poses}});
    }
    return {{"scene_id", scene.scene_id},
            {"width", scene.width},
            {"height", scene.height},
            {"background_hue", scene.background_hue},
            {"prompt", {{"background_hue", scene.prompt.background_hue}, {"arrangement", scene.prompt.arrangement}}},
            {"identities", ids},
            {"renderings", renders}};
}

inline std::string scene_dir_name(int id) { return "scene_" + std::to_string(id); }

// Writes scene_<id>/rendering_<k>/layer_<n>.png plus scene_<id>/scene.json.
inline void save_scene(const Scene& scene, const std::filesystem::path& root) {
    const auto dir = root / scene_dir_name(scene.scene_id);
    std::filesystem::create_directories(dir);
    for (std::size_t k = 0; k < scene.renderings.size(); ++k) {
        const auto rdir = dir / ("rendering_" + std::to_string(k));
        std::filesystem::create_directories(rdir);
        const auto& layers = scene.renderings[k].layers;
        for (std::size_t n = 0; n < layers.size(); ++n) {
            save_png((rdir / ("layer_" + std::to_string(n) + ".png")).string(), layers[n].rgba);
        }
    }
    write_file((dir / "scene.json").string(), scene_json(scene).dump(2));
}

inline Scene load_scene(const std::filesystem::path& dir) {
    const auto text = read_file((dir / "scene.json").string());
    const auto doc = nlohmann::json::parse(text.begin(), text.end());
    Scene scene;
    scene.scene_id = doc.at("scene_id").get<int>();
    scene.width = doc.at("width").get<int>();
    scene.height = doc.at("height").get<int>();
    scene.background_hue = doc.at("background_hue").get<double>();
    scene.prompt = {doc.at("prompt").at("background_hue").get<std::string>(),
                    doc.at("prompt").at("arrangement").get<std::string>()};
    for (const auto& id : doc.at("identities")) {
        scene.identities.push_back({shape_from_string(id.at("shape").get<std::string>()), id.at("hue").get<double>(),
                                    pattern_from_string(id.at("pattern").get<std::string>())});
    }
    const auto& renders = doc.at("renderings");
    for (std::size_t k = 0; k < renders.size(); ++k) {
        Rendering r;
        r.light_angle_deg = renders[k].at("light_angle_deg").get<double>();
        for (const auto& p : renders[k].at("poses")) {
            r.poses.push_back({p.at("cx").get<double>(), p.at("cy").get<double>(), p.at("scale").get<double>(),
                               p.at("rotation_deg").get<double>()});
        }
        const auto rdir = dir / ("rendering_" + std::to_string(k));
        for (std::size_t n = 0; n <= scene.identities.size(); ++n) {
            Image img = load_png((rdir / ("layer_" + std::to_string(n) + ".png")).string(), 4);
            r.layers.push_back({n == 0 ? std::string(kBackgroundId) : subject_layer_id(n - 1), std::move(img), false,
                                static_cast<int>(n), std::nullopt});
        }
        r.composed = compose_collage(LayeredCanvas{scene.width, scene.height, r.layers, scene.prompt});
        scene.renderings.push_back(std::move(r));
    }
    return scene;
}

// Loads every scene_<id> directory under root, ordered by id.
inline std::vector<Scene> load_scenes(const std::filesystem::path& root) {
    std::vector<Scene> out;
    for (const auto& entry : std::filesystem::directory_iterator(root)) {
        if (entry.is_directory() && entry.path().filename().string().rfind("scene_", 0) == 0 &&
            std::filesystem::exists(entry.path() / "scene.json")) {
            out.push_back(load_scene(entry.path()));
        }
    }
    std::sort(out.begin(), out.end(), [](const Scene& a, const Scene& b) { return a.scene_id < b.scene_id; });
    return out;
}

}  // namespace layerforge
