#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "layerforge/scene.hpp"

using namespace layerforge;

namespace {

AugmentConfig no_augment() {
    AugmentConfig a;
    a.scale = 0.0;
    a.shift = 0;
    a.color = 0.0;
    a.background_drop = 0.0;
    return a;
}

}  // namespace

TEST(Colour, HsvRoundTripAndHueDistance) {
    for (double h = 0; h < 360; h += 7.5) {
        const Rgb c = hsv_to_rgb(h, 0.85, 0.95);
        const Hsv back = rgb_to_hsv(c.r, c.g, c.b);
        EXPECT_LT(hue_distance(back.h, h), 1.0) << h;
    }
    EXPECT_DOUBLE_EQ(hue_distance(350, 10), 20);
    EXPECT_DOUBLE_EQ(hue_distance(10, 350), 20);
    EXPECT_DOUBLE_EQ(hue_distance(0, 180), 180);
    EXPECT_DOUBLE_EQ(hue_distance(720, 0), 0);
}

TEST(Scene, DeterministicPerSeed) {
    EXPECT_EQ(gen_scene(5), gen_scene(5));
    EXPECT_FALSE(gen_scene(5) == gen_scene(6));
    EXPECT_EQ(gen_scenes(3, 4), gen_scenes(3, 4));
}

TEST(Scene, StructureAndPrompt) {
    const ModelConfig model;
    for (const auto& s : gen_scenes(11, 24)) {
        ASSERT_GE(s.identities.size(), 1u);
        ASSERT_LE(s.identities.size(), 4u);
        EXPECT_EQ(s.renderings.size(), 3u);
        EXPECT_EQ(s.prompt.arrangement, model.arrangement_vocab[s.identities.size() - 1]);
        const auto hi = vocab_index(model.hue_vocab, s.prompt.background_hue, "hue");
        EXPECT_DOUBLE_EQ(s.background_hue, background_token_hue(model, hi));
        for (const auto& r : s.renderings) {
            ASSERT_EQ(r.layers.size(), s.identities.size() + 1);
            EXPECT_EQ(r.layers[0].id, kBackgroundId);
            for (std::size_t i = 0; i < r.layers.size(); ++i) {
                EXPECT_EQ(r.layers[i].z_order, static_cast<int>(i));
                EXPECT_EQ(r.layers[i].rgba.width, 32);
            }
            EXPECT_EQ(r.composed, compose_collage({32, 32, r.layers, s.prompt}));
        }
    }
}

TEST(Scene, SubjectsAreNonDegenerateAndKeepIdentityHue) {
    for (const auto& s : gen_scenes(12, 24)) {
        for (const auto& r : s.renderings) {
            for (std::size_t i = 0; i < s.identities.size(); ++i) {
                const auto& img = r.layers[i + 1].rgba;
                const auto box = opaque_box(img);
                EXPECT_GE(box.width(), 4);
                EXPECT_GE(box.height(), 4);
                EXPECT_GE(box.count, 16u);
                for (int y = 0; y < img.height; ++y)
                    for (int x = 0; x < img.width; ++x) {
                        const auto* p = img.at(x, y);
                        if (p[3] == 0) continue;
                        EXPECT_EQ(p[3], 255);
                        EXPECT_LT(hue_distance(rgb_to_hsv(p[0], p[1], p[2]).h, s.identities[i].hue), 1.5);
                    }
            }
        }
    }
}

TEST(Scene, RenderingsDifferPerLayer) {
    for (const auto& s : gen_scenes(13, 16)) {
        for (std::size_t a = 0; a < s.renderings.size(); ++a)
            for (std::size_t b = a + 1; b < s.renderings.size(); ++b)
                for (std::size_t l = 0; l < s.renderings[a].layers.size(); ++l)
                    EXPECT_FALSE(s.renderings[a].layers[l].rgba == s.renderings[b].layers[l].rgba);
    }
}

TEST(Sampler, FullLockWithoutAugmentationReproducesTarget) {
    const auto scenes = gen_scenes(14, 8);
    Rng rng = make_rng(14);
    for (int i = 0; i < 40; ++i) {
        const auto& s = scenes[static_cast<std::size_t>(i) % scenes.size()];
        auto ex = augment_example(sample_example(s, 1.0, rng), no_augment(), rng);
        EXPECT_EQ(compose_collage(ex.canvas), ex.target);
        for (std::size_t l = 0; l < ex.canvas.layers.size(); ++l) {
            EXPECT_TRUE(ex.canvas.layers[l].locked);
            EXPECT_EQ(ex.canvas.layers[l].rgba, ex.target_layers[l]);
        }
    }
}

TEST(Sampler, NoLockNeverCopiesTargetLayers) {
    const auto scenes = gen_scenes(15, 8);
    Rng rng = make_rng(15);
    for (int i = 0; i < 40; ++i) {
        auto ex = sample_example(scenes[static_cast<std::size_t>(i) % scenes.size()], 0.0, rng);
        for (std::size_t l = 0; l < ex.canvas.layers.size(); ++l) {
            EXPECT_FALSE(ex.canvas.layers[l].locked);
            EXPECT_NE(ex.provenance[l].rendering, ex.target_index);
            EXPECT_FALSE(ex.canvas.layers[l].rgba == ex.target_layers[l]);
        }
    }
}

TEST(Sampler, LockRateFollowsBinomial) {
    const auto scenes = gen_scenes(16, 8);
    Rng rng = make_rng(16);
    const double p = 0.3;
    std::size_t locked = 0, total = 0;
    for (int i = 0; i < 2000; ++i) {
        auto ex = sample_example(scenes[static_cast<std::size_t>(i) % scenes.size()], p, rng);
        for (const auto& l : ex.canvas.layers) {
            locked += l.locked ? 1 : 0;
            ++total;
        }
    }
    const double sigma = std::sqrt(p * (1 - p) / static_cast<double>(total));
    EXPECT_NEAR(static_cast<double>(locked) / static_cast<double>(total), p, 4 * sigma);
}

TEST(Sampler, RejectsBadArguments) {
    auto s = gen_scene(1);
    Rng rng = make_rng(0);
    EXPECT_THROW(sample_example(s, 1.5, rng), std::invalid_argument);
    s.renderings.resize(1);
    EXPECT_THROW(sample_example(s, 0.5, rng), std::invalid_argument);
}

TEST(Augment, ShiftMovesBoundingBoxExactly) {
    const auto s = gen_scene(17);
    const Image& img = s.renderings[0].layers[1].rgba;
    const auto box = opaque_box(img);
    for (int dx = -2; dx <= 2; ++dx)
        for (int dy = -2; dy <= 2; ++dy) {
            const auto moved = opaque_box(apply_geometry(img, 1.0, dx, dy));
            if (box.x0 + dx < 0 || box.y0 + dy < 0 || box.x1 + dx > 31 || box.y1 + dy > 31) continue;
            EXPECT_EQ(moved.x0, box.x0 + dx);
            EXPECT_EQ(moved.y0, box.y0 + dy);
            EXPECT_EQ(moved.count, box.count);
        }
    EXPECT_EQ(apply_geometry(img, 1.0, 0, 0), img);
}

TEST(Augment, ScaleKeepsBoxCentre) {
    const auto s = gen_scene(18);
    const Image& img = s.renderings[0].layers[1].rgba;
    const auto box = opaque_box(img);
    const auto big = opaque_box(apply_geometry(img, 1.1, 0, 0));
    EXPECT_NEAR(0.5 * (big.x0 + big.x1), 0.5 * (box.x0 + box.x1), 1.0);
    EXPECT_NEAR(0.5 * (big.y0 + big.y1), 0.5 * (box.y0 + box.y1), 1.0);
    EXPECT_GE(big.count, box.count);
}

TEST(Augment, LockedLayersStayAlignedByDefault) {
    const auto scenes = gen_scenes(19, 8);
    Rng rng = make_rng(19);
    AugmentConfig cfg;
    cfg.color = 0.0;
    cfg.background_drop = 0.0;
    for (int i = 0; i < 30; ++i) {
        auto ex = augment_example(sample_example(scenes[static_cast<std::size_t>(i) % 8], 0.5, rng), cfg, rng);
        for (std::size_t l = 0; l < ex.canvas.layers.size(); ++l)
            if (ex.canvas.layers[l].locked) EXPECT_EQ(ex.canvas.layers[l].rgba, ex.target_layers[l]);
    }
}

TEST(Augment, ColourGainKeepsAlphaAndHue) {
    const auto s = gen_scene(20);
    const Image& img = s.renderings[0].layers[1].rgba;
    const auto out = apply_color_gain(img, {1.05, 1.05, 1.05});
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) EXPECT_EQ(out.at(x, y)[3], img.at(x, y)[3]);
}

TEST(Augment, BackgroundDropRate) {
    const auto scenes = gen_scenes(21, 4);
    Rng rng = make_rng(21);
    AugmentConfig cfg = no_augment();
    cfg.background_drop = 0.25;
    int dropped = 0;
    const int n = 1000;
    for (int i = 0; i < n; ++i) {
        auto ex = augment_example(sample_example(scenes[static_cast<std::size_t>(i) % 4], 0.5, rng), cfg, rng);
        dropped += ex.canvas.layers.front().id != kBackgroundId ? 1 : 0;
        EXPECT_EQ(ex.canvas.layers.size(), ex.target_layers.size());
    }
    EXPECT_NEAR(dropped / double(n), 0.25, 4 * std::sqrt(0.25 * 0.75 / n));
}

TEST(Dataset, SaveLoadRoundTrip) {
    const auto dir = std::filesystem::temp_directory_path() / "layerforge_scene_rt";
    std::filesystem::remove_all(dir);
    const auto scenes = gen_scenes(22, 3);
    for (const auto& s : scenes) save_scene(s, dir);
    EXPECT_EQ(load_scenes(dir), scenes);
    std::filesystem::remove_all(dir);
}
