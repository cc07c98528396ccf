#pragma once

#include <cmath>
#include <cstdio>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "layerforge/canvas.hpp"
#include "layerforge/image.hpp"

namespace layerforge {

class CodecError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Latent of a layer: one D = patch*patch*3 vector per latent cell.
struct LatentGrid {
    int h_lat = 0;
    int w_lat = 0;
    int dim = 0;
    std::vector<double> data;  // (y, x, d) row-major

    LatentGrid() = default;
    LatentGrid(int h, int w, int d)
        : h_lat(h), w_lat(w), dim(d), data(static_cast<std::size_t>(h) * w * d, 0.0) {}

    std::size_t cells() const { return static_cast<std::size_t>(h_lat) * w_lat; }
    std::span<double> cell(int x, int y) {
        return {data.data() + (static_cast<std::size_t>(y) * w_lat + x) * dim, static_cast<std::size_t>(dim)};
    }
    std::span<const double> cell(int x, int y) const {
        return {data.data() + (static_cast<std::size_t>(y) * w_lat + x) * dim, static_cast<std::size_t>(dim)};
    }

    bool operator==(const LatentGrid&) const = default;
};

// Downsampled presence mask, values in [0, 1].
struct AlphaLatentMask {
    int h_lat = 0;
    int w_lat = 0;
    std::vector<double> values;

    double at(int x, int y) const { return values[static_cast<std::size_t>(y) * w_lat + x]; }
};

// 3-component positional id: (layer axis, x, y).
struct PosId {
    int layer_axis = 0;
    int x = 0;
    int y = 0;

    bool operator==(const PosId&) const = default;
};

struct PrunedEntry {
    std::vector<double> latent;
    int x = 0;
    int y = 0;
};

struct PositionedToken {
    std::vector<double> latent;
    PosId pos;
};

// Condition payload. values holds size() * dim reals, token-major.
struct TokenSequence {
    int dim = 0;
    std::vector<double> values;
    std::vector<PosId> pos;
    std::vector<std::string> provenance;  // source layer id per token

    std::size_t size() const { return pos.size(); }
    std::span<const double> token(std::size_t i) const {
        return {values.data() + i * dim, static_cast<std::size_t>(dim)};
    }
};

inline void check_divisible(int width, int height, int patch, const char* what) {
    if (patch <= 0 || width <= 0 || height <= 0 || width % patch != 0 || height % patch != 0) {
        throw CodecError(std::string(what) + ": " + std::to_string(width) + "x" + std::to_string(height) +
                         " is not divisible by patch " + std::to_string(patch));
    }
}

/// Space-to-depth patch encoding. Cell (x, y) holds the raster-order pixels of
/// patch (x, y), each as three channels mapped to [-1, 1] by v / 127.5 - 1.
/// Accepts RGB or RGBA input; alpha is ignored.
inline LatentGrid encode_layer(const Image& img, int patch = kDefaultPatch) {
    check_divisible(img.width, img.height, patch, "encode_layer");
    LatentGrid grid(img.height / patch, img.width / patch, patch * patch * 3);
    for (int cy = 0; cy < grid.h_lat; ++cy) {
        for (int cx = 0; cx < grid.w_lat; ++cx) {
            auto cell = grid.cell(cx, cy);
            std::size_t k = 0;
            for (int py = 0; py < patch; ++py) {
                for (int px = 0; px < patch; ++px) {
                    const std::uint8_t* p = img.at(cx * patch + px, cy * patch + py);
                    for (int c = 0; c < 3; ++c) {
                        cell[k++] = p[c] / 127.5 - 1.0;
                    }
                }
            }
        }
    }
    return grid;
}

// (v + 1) * 127.5, clamped to [0, 255], rounded half-up; a zero latent decodes to 128.
inline std::uint8_t denormalize_channel(double v) {
    double u = (v + 1.0) * 127.5;
    if (!(u > 0.0)) {
        return 0;
    }
    if (u >= 255.0) {
        return 255;
    }
    return static_cast<std::uint8_t>(std::floor(u + 0.5));
}

inline Image decode_latents(const LatentGrid& grid, int patch = kDefaultPatch) {
    if (patch <= 0 || grid.dim != patch * patch * 3 || grid.h_lat <= 0 || grid.w_lat <= 0 ||
        grid.data.size() != grid.cells() * grid.dim) {
        throw CodecError("decode_latents: grid shape does not match patch size " + std::to_string(patch));
    }
    Image img = make_rgb(grid.w_lat * patch, grid.h_lat * patch);
    for (int cy = 0; cy < grid.h_lat; ++cy) {
        for (int cx = 0; cx < grid.w_lat; ++cx) {
            auto cell = grid.cell(cx, cy);
            std::size_t k = 0;
            for (int py = 0; py < patch; ++py) {
                for (int px = 0; px < patch; ++px) {
                    std::uint8_t* p = img.at(cx * patch + px, cy * patch + py);
                    for (int c = 0; c < 3; ++c) {
                        p[c] = denormalize_channel(cell[k++]);
                    }
                }
            }
        }
    }
    return img;
}

/// Nearest-neighbour alpha downsample: cell (x, y) reads the pixel nearest its
/// centre, row floor((y + 0.5) * patch), column floor((x + 0.5) * patch).
inline AlphaLatentMask downsample_alpha(const Image& rgba, int patch = kDefaultPatch) {
    if (rgba.channels != 4) {
        throw CodecError("downsample_alpha: image has no alpha channel");
    }
    check_divisible(rgba.width, rgba.height, patch, "downsample_alpha");
    AlphaLatentMask mask;
    mask.h_lat = rgba.height / patch;
    mask.w_lat = rgba.width / patch;
    mask.values.resize(static_cast<std::size_t>(mask.h_lat) * mask.w_lat);
    for (int y = 0; y < mask.h_lat; ++y) {
        const int src_r = static_cast<int>(std::floor((y + 0.5) * patch));
        for (int x = 0; x < mask.w_lat; ++x) {
            const int src_c = static_cast<int>(std::floor((x + 0.5) * patch));
            mask.values[static_cast<std::size_t>(y) * mask.w_lat + x] = rgba.at(src_c, src_r)[3] / 255.0;
        }
    }
    return mask;
}

inline constexpr double kPruneThreshold = 0.5;

// Keeps cells whose mask value exceeds 0.5, in row-major scan order.
inline std::vector<PrunedEntry> prune_tokens(const LatentGrid& grid, const AlphaLatentMask& mask) {
    if (grid.h_lat != mask.h_lat || grid.w_lat != mask.w_lat ||
        mask.values.size() != grid.cells()) {
        throw CodecError("prune_tokens: grid and mask shapes differ");
    }
    std::vector<PrunedEntry> out;
    for (int y = 0; y < grid.h_lat; ++y) {
        for (int x = 0; x < grid.w_lat; ++x) {
            if (mask.at(x, y) > kPruneThreshold) {
                auto cell = grid.cell(x, y);
                out.push_back({std::vector<double>(cell.begin(), cell.end()), x, y});
            }
        }
    }
    return out;
}

/// Locked layers share the noisy grid's layer axis 0; the j-th unlocked layer
/// (j >= 1) gets layer axis j.
inline std::vector<PositionedToken> assign_pos_ids(std::vector<PrunedEntry> entries, bool locked,
                                                   int unlocked_index = 0) {
    if (!locked && unlocked_index < 1) {
        throw CodecError("assign_pos_ids: unlocked layers need an index >= 1");
    }
    const int axis = locked ? 0 : unlocked_index;
    std::vector<PositionedToken> out;
    out.reserve(entries.size());
    for (auto& e : entries) {
        out.push_back({std::move(e.latent), PosId{axis, e.x, e.y}});
    }
    return out;
}

struct LayerTokenCount {
    std::string id;
    bool locked = false;
    int layer_axis = 0;
    std::size_t tokens = 0;
};

// Per-layer token statistics from build_condition_sequence, in z_order.
struct ConditionSummary {
    std::vector<LayerTokenCount> layers;
    std::size_t total = 0;
};

/// Encodes, prunes and position-tags every layer in ascending z_order and
/// concatenates the results. Unlocked layers are numbered 1, 2, ... in z_order;
/// a fully transparent unlocked layer still consumes its index.
inline TokenSequence build_condition_sequence(const LayeredCanvas& canvas, int patch = kDefaultPatch,
                                              ConditionSummary* summary = nullptr) {
    TokenSequence seq;
    seq.dim = patch * patch * 3;
    int next_unlocked = 1;
    for (const Layer* layer : layers_by_z(canvas)) {
        if (layer->rgba.width != canvas.width || layer->rgba.height != canvas.height) {
            throw CodecError("build_condition_sequence: layer '" + layer->id + "' does not match the canvas");
        }
        const int index = layer->locked ? 0 : next_unlocked++;
        auto tokens = assign_pos_ids(prune_tokens(encode_layer(layer->rgba, patch), downsample_alpha(layer->rgba, patch)),
                                     layer->locked, index);
        if (summary) {
            summary->layers.push_back({layer->id, layer->locked, index, tokens.size()});
            summary->total += tokens.size();
        }
        for (auto& t : tokens) {
            seq.values.insert(seq.values.end(), t.latent.begin(), t.latent.end());
            seq.pos.push_back(t.pos);
            seq.provenance.push_back(layer->id);
        }
    }
    return seq;
}

// Debug dump: one token per line, "layer_axis x y v0 v1 ...", 9 significant digits.
inline std::string dump_tokens(const TokenSequence& seq) {
    std::string out;
    char buf[32];
    for (std::size_t i = 0; i < seq.size(); ++i) {
        out += std::to_string(seq.pos[i].layer_axis) + " " + std::to_string(seq.pos[i].x) + " " +
               std::to_string(seq.pos[i].y);
        for (double v : seq.token(i)) {
            std::snprintf(buf, sizeof(buf), " %.9g", v);
            out += buf;
        }
        out += '\n';
    }
    return out;
}

}  // namespace layerforge
