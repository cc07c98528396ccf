#pragma once

#include <string>

#include "layerforge/canvas.hpp"
#include "layerforge/image.hpp"
#include "layerforge/rng.hpp"

namespace lftest {

using namespace layerforge;

// Random RGBA layer: a filled rectangle with random colour; alpha is either
// opaque or drawn from a random level, so partial transparency is exercised.
inline Image random_layer(Rng& rng, int w, int h, bool partial_alpha = true) {
    Image img = make_rgba(w, h);
    const int x0 = uniform_int(rng, 0, w - 1), y0 = uniform_int(rng, 0, h - 1);
    const int x1 = uniform_int(rng, x0, w - 1), y1 = uniform_int(rng, y0, h - 1);
    const std::uint8_t r = uniform_int(rng, 0, 255), g = uniform_int(rng, 0, 255), b = uniform_int(rng, 0, 255);
    const std::uint8_t a = partial_alpha && bernoulli(rng, 0.5) ? uniform_int(rng, 0, 255) : 255;
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            std::uint8_t* p = img.at(x, y);
            p[0] = r;
            p[1] = g;
            p[2] = b;
            p[3] = a;
        }
    }
    return img;
}

inline LayeredCanvas random_canvas(Rng& rng, int w, int h, int max_layers = 5, double p_lock = 0.5) {
    LayeredCanvas c;
    c.width = w;
    c.height = h;
    c.prompt = {"blue", "duo"};
    const int n = uniform_int(rng, 1, max_layers);
    for (int i = 0; i < n; ++i) {
        Layer l;
        l.id = "layer_" + std::to_string(i);
        l.rgba = random_layer(rng, w, h);
        l.locked = bernoulli(rng, p_lock);
        l.z_order = i;
        c.layers.push_back(std::move(l));
    }
    // Shuffle storage order; z_order stays authoritative.
    std::shuffle(c.layers.begin(), c.layers.end(), rng);
    return c;
}

}  // namespace lftest
