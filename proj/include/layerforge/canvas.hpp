#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "layerforge/image.hpp"

namespace layerforge {

inline constexpr int kDefaultPatch = 4;

struct Placement {
    int offset_x = 0;
    int offset_y = 0;
    double scale = 1.0;

    bool operator==(const Placement&) const = default;
};

// Origin of a layer that was placed from a smaller source image. Kept so a
// manifest written from this canvas reproduces the placement form.
struct PlacedSource {
    Image source;
    Placement placement;

    bool operator==(const PlacedSource&) const = default;
};

struct PromptAttrs {
    std::string background_hue;
    std::string arrangement;

    bool operator==(const PromptAttrs&) const = default;
};

struct Layer {
    std::string id;
    Image rgba;  // full-canvas RGBA; alpha 0 means absent
    bool locked = false;
    int z_order = 0;
    std::optional<PlacedSource> placed;

    bool operator==(const Layer&) const = default;
};

struct LayeredCanvas {
    int width = 0;
    int height = 0;
    std::vector<Layer> layers;
    PromptAttrs prompt;

    bool operator==(const LayeredCanvas&) const = default;
};

class CanvasError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Places `source` on a width x height transparent canvas.
///
/// Destination pixel (X, Y) samples source pixel
/// (floor((X - offset_x + 0.5) / scale), floor((Y - offset_y + 0.5) / scale)),
/// i.e. nearest neighbour on pixel centres. Anything mapped outside the
/// source stays fully transparent. RGB sources are treated as opaque.
inline Image rasterize_layer(const Image& source, const Placement& placement, int width, int height) {
    if (!(placement.scale > 0.0) || !std::isfinite(placement.scale)) {
        throw CanvasError("rasterize_layer: scale must be positive");
    }
    if (width <= 0 || height <= 0) {
        throw CanvasError("rasterize_layer: zero-area canvas");
    }
    if (source.channels != 3 && source.channels != 4) {
        throw CanvasError("rasterize_layer: source must be RGB or RGBA");
    }
    Image out = make_rgba(width, height);
    for (int y = 0; y < height; ++y) {
        const double sy = std::floor((y - placement.offset_y + 0.5) / placement.scale);
        if (sy < 0 || sy >= source.height) {
            continue;
        }
        for (int x = 0; x < width; ++x) {
            const double sx = std::floor((x - placement.offset_x + 0.5) / placement.scale);
            if (sx < 0 || sx >= source.width) {
                continue;
            }
            const std::uint8_t* src = source.at(static_cast<int>(sx), static_cast<int>(sy));
            std::uint8_t* dst = out.at(x, y);
            dst[0] = src[0];
            dst[1] = src[1];
            dst[2] = src[2];
            dst[3] = source.channels == 4 ? src[3] : 255;
        }
    }
    return out;
}

// round(v / 255) with halves rounding up, for non-negative v.
inline std::uint8_t div255_round(std::uint32_t v) {
    return static_cast<std::uint8_t>((2 * v + 255) / 510);
}

inline std::uint8_t blend_channel(std::uint8_t top, std::uint8_t bottom, std::uint8_t alpha) {
    return div255_round(static_cast<std::uint32_t>(top) * alpha +
                        static_cast<std::uint32_t>(bottom) * (255u - alpha));
}

/// Flattens the canvas: alpha-over in ascending z_order onto opaque black.
inline Image compose_collage(const LayeredCanvas& canvas) {
    if (canvas.width <= 0 || canvas.height <= 0) {
        throw CanvasError("compose_collage: zero-area canvas");
    }
    std::vector<const Layer*> order;
    order.reserve(canvas.layers.size());
    for (const auto& layer : canvas.layers) {
        if (layer.rgba.width != canvas.width || layer.rgba.height != canvas.height ||
            layer.rgba.channels != 4) {
            throw CanvasError("compose_collage: layer '" + layer.id + "' does not match canvas dimensions");
        }
        order.push_back(&layer);
    }
    std::stable_sort(order.begin(), order.end(),
                     [](const Layer* a, const Layer* b) { return a->z_order < b->z_order; });

    Image out = make_rgb(canvas.width, canvas.height);
    for (const Layer* layer : order) {
        for (int y = 0; y < canvas.height; ++y) {
            for (int x = 0; x < canvas.width; ++x) {
                const std::uint8_t* src = layer->rgba.at(x, y);
                const std::uint8_t a = src[3];
                if (a == 0) {
                    continue;
                }
                std::uint8_t* dst = out.at(x, y);
                for (int c = 0; c < 3; ++c) {
                    dst[c] = blend_channel(src[c], dst[c], a);
                }
            }
        }
    }
    return out;
}

enum class ViolationKind {
    no_layers,
    zero_area,
    non_divisible,
    dimension_mismatch,
    duplicate_z_order,
};

inline const char* to_string(ViolationKind kind) {
    switch (kind) {
        case ViolationKind::no_layers: return "no_layers";
        case ViolationKind::zero_area: return "zero_area";
        case ViolationKind::non_divisible: return "non_divisible";
        case ViolationKind::dimension_mismatch: return "dimension_mismatch";
        case ViolationKind::duplicate_z_order: return "duplicate_z_order";
    }
    return "unknown";
}

struct Violation {
    ViolationKind kind;
    std::vector<std::string> layer_ids;
    std::string message;
};

inline std::vector<Violation> validate_canvas(const LayeredCanvas& canvas, int patch = kDefaultPatch) {
    std::vector<Violation> out;
    if (canvas.layers.empty()) {
        out.push_back({ViolationKind::no_layers, {}, "canvas has no layers"});
    }
    if (canvas.width <= 0 || canvas.height <= 0) {
        out.push_back({ViolationKind::zero_area, {},
                       "canvas is " + std::to_string(canvas.width) + "x" + std::to_string(canvas.height)});
    } else if (patch > 0 && (canvas.width % patch != 0 || canvas.height % patch != 0)) {
        out.push_back({ViolationKind::non_divisible, {},
                       "canvas " + std::to_string(canvas.width) + "x" + std::to_string(canvas.height) +
                           " is not divisible by patch size " + std::to_string(patch)});
    }
    for (const auto& layer : canvas.layers) {
        if (layer.rgba.width != canvas.width || layer.rgba.height != canvas.height ||
            layer.rgba.channels != 4) {
            out.push_back({ViolationKind::dimension_mismatch, {layer.id},
                           "layer '" + layer.id + "' is " + std::to_string(layer.rgba.width) + "x" +
                               std::to_string(layer.rgba.height) + "x" + std::to_string(layer.rgba.channels) +
                               ", canvas is " + std::to_string(canvas.width) + "x" +
                               std::to_string(canvas.height) + "x4"});
        }
    }
    std::map<int, std::vector<std::string>> by_z;
    for (const auto& layer : canvas.layers) {
        by_z[layer.z_order].push_back(layer.id);
    }
    for (const auto& [z, ids] : by_z) {
        if (ids.size() > 1) {
            std::string names;
            for (const auto& id : ids) {
                names += (names.empty() ? "'" : ", '") + id + "'";
            }
            out.push_back({ViolationKind::duplicate_z_order, ids,
                           "z_order " + std::to_string(z) + " shared by layers " + names});
        }
    }
    return out;
}

// Layers sorted by ascending z_order (stable for equal keys).
inline std::vector<const Layer*> layers_by_z(const LayeredCanvas& canvas) {
    std::vector<const Layer*> order;
    for (const auto& l : canvas.layers) {
        order.push_back(&l);
    }
    std::stable_sort(order.begin(), order.end(),
                     [](const Layer* a, const Layer* b) { return a->z_order < b->z_order; });
    return order;
}

}  // namespace layerforge
