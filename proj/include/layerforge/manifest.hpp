#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "layerforge/canvas.hpp"
#include "layerforge/image.hpp"

namespace layerforge {

inline constexpr const char* kManifestVersion = "1";

class ManifestError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline nlohmann::json manifest_json(const LayeredCanvas& canvas) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& layer : canvas.layers) {
        nlohmann::json entry = {
            {"id", layer.id},
            {"z_order", layer.z_order},
            {"locked", layer.locked},
        };
        if (layer.placed) {
            entry["source_png"] = png_base64(layer.placed->source);
            entry["placement"] = {
                {"offset_x", layer.placed->placement.offset_x},
                {"offset_y", layer.placed->placement.offset_y},
                {"scale", layer.placed->placement.scale},
            };
        } else {
            entry["png"] = png_base64(layer.rgba);
        }
        layers.push_back(std::move(entry));
    }
    return {
        {"version", kManifestVersion},
        {"width", canvas.width},
        {"height", canvas.height},
        {"prompt", {{"background_hue", canvas.prompt.background_hue}, {"arrangement", canvas.prompt.arrangement}}},
        {"layers", std::move(layers)},
    };
}

// Compact JSON with keys in alphabetical order.
inline std::string serialize_manifest(const LayeredCanvas& canvas) { return manifest_json(canvas).dump(); }

namespace detail {

template <class T>
T required(const nlohmann::json& obj, const char* key, const std::string& where) {
    auto it = obj.find(key);
    if (it == obj.end()) {
        throw ManifestError(where + ": missing field '" + key + "'");
    }
    try {
        return it->get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ManifestError(where + ": field '" + key + "' has the wrong type");
    }
}

}  // namespace detail

inline LayeredCanvas parse_manifest(const nlohmann::json& doc) {
    if (!doc.is_object()) {
        throw ManifestError("manifest: top level must be an object");
    }
    auto version = detail::required<std::string>(doc, "version", "manifest");
    if (version != kManifestVersion) {
        throw ManifestError("manifest: unknown version '" + version + "'");
    }
    LayeredCanvas canvas;
    canvas.width = detail::required<int>(doc, "width", "manifest");
    canvas.height = detail::required<int>(doc, "height", "manifest");
    auto prompt = detail::required<nlohmann::json>(doc, "prompt", "manifest");
    if (!prompt.is_object()) {
        throw ManifestError("manifest: 'prompt' must be an object");
    }
    canvas.prompt.background_hue = detail::required<std::string>(prompt, "background_hue", "prompt");
    canvas.prompt.arrangement = detail::required<std::string>(prompt, "arrangement", "prompt");

    auto layers = detail::required<nlohmann::json>(doc, "layers", "manifest");
    if (!layers.is_array()) {
        throw ManifestError("manifest: 'layers' must be an array");
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& entry = layers[i];
        if (!entry.is_object()) {
            throw ManifestError("layer #" + std::to_string(i) + ": must be an object");
        }
        Layer layer;
        layer.id = detail::required<std::string>(entry, "id", "layer #" + std::to_string(i));
        const std::string where = "layer '" + layer.id + "'";
        layer.z_order = detail::required<int>(entry, "z_order", where);
        layer.locked = detail::required<bool>(entry, "locked", where);

        const bool has_png = entry.contains("png");
        const bool has_source = entry.contains("source_png");
        if (has_png == has_source) {
            throw ManifestError(where + ": exactly one of 'png' or 'source_png' is required");
        }
        try {
            if (has_png) {
                layer.rgba = image_from_png_base64(detail::required<std::string>(entry, "png", where), 4);
            } else {
                auto placement = detail::required<nlohmann::json>(entry, "placement", where);
                PlacedSource placed;
                placed.source = image_from_png_base64(detail::required<std::string>(entry, "source_png", where), 4);
                placed.placement.offset_x = detail::required<int>(placement, "offset_x", where + " placement");
                placed.placement.offset_y = detail::required<int>(placement, "offset_y", where + " placement");
                placed.placement.scale = detail::required<double>(placement, "scale", where + " placement");
                layer.rgba = rasterize_layer(placed.source, placed.placement, canvas.width, canvas.height);
                layer.placed = std::move(placed);
            }
        } catch (const ImageCodecError& e) {
            throw ManifestError(where + ": undecodable image payload (" + e.what() + ")");
        } catch (const CanvasError& e) {
            throw ManifestError(where + ": " + e.what());
        }
        canvas.layers.push_back(std::move(layer));
    }
    return canvas;
}

inline LayeredCanvas parse_manifest(std::string_view text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ManifestError(std::string("manifest: malformed JSON: ") + e.what());
    }
    return parse_manifest(doc);
}

inline LayeredCanvas parse_manifest(const std::string& text) { return parse_manifest(std::string_view(text)); }

}  // namespace layerforge
