#include <gtest/gtest.h>

#include <set>

#include "layerforge/codec.hpp"
#include "support.hpp"

using namespace layerforge;

TEST(Codec, EncodeDecodeIsLossless) {
    Rng rng = make_rng(11);
    Image img = make_rgb(16, 8);
    for (auto& v : img.pixels) v = static_cast<std::uint8_t>(uniform_int(rng, 0, 255));
    const auto grid = encode_layer(img, 4);
    EXPECT_EQ(grid.h_lat, 2);
    EXPECT_EQ(grid.w_lat, 4);
    EXPECT_EQ(grid.dim, 48);
    EXPECT_EQ(decode_latents(grid, 4), img);
    for (double v : grid.data) {
        EXPECT_GE(v, -1.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(Codec, CellLayoutIsRasterOrderWithinPatch) {
    Image img = make_rgba(8, 8);
    img.at(5, 6)[1] = 255;  // cell (1, 1), pixel (1, 2) in patch, channel g
    const auto grid = encode_layer(img, 4);
    const auto cell = grid.cell(1, 1);
    const std::size_t k = (2 * 4 + 1) * 3 + 1;
    EXPECT_DOUBLE_EQ(cell[k], 1.0);
    EXPECT_DOUBLE_EQ(cell[k - 1], -1.0);
}

TEST(Codec, DenormalizeClampsAndCentres) {
    EXPECT_EQ(denormalize_channel(0.0), 128);
    EXPECT_EQ(denormalize_channel(-5.0), 0);
    EXPECT_EQ(denormalize_channel(7.0), 255);
    LatentGrid zero(1, 1, 12);
    const auto img = decode_latents(zero, 2);
    for (auto v : img.pixels) EXPECT_EQ(v, 128);
}

TEST(Codec, NonDivisibleSizesThrow) {
    EXPECT_THROW(encode_layer(make_rgba(10, 8), 4), CodecError);
    EXPECT_THROW(downsample_alpha(make_rgba(8, 6), 4), CodecError);
    EXPECT_THROW(downsample_alpha(make_rgb(8, 8), 4), CodecError);
}

TEST(Codec, AlphaDownsampleReadsCellCentrePixel) {
    Rng rng = make_rng(12);
    Image img = make_rgba(12, 8);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 12; ++x) img.at(x, y)[3] = static_cast<std::uint8_t>(uniform_int(rng, 0, 255));
    const auto m = downsample_alpha(img, 4);
    for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 3; ++x) EXPECT_DOUBLE_EQ(m.at(x, y), img.at(4 * x + 2, 4 * y + 2)[3] / 255.0);
}

TEST(Prune, CountMatchesBruteForceAndThresholdIsStrict) {
    Rng rng = make_rng(13);
    for (int trial = 0; trial < 200; ++trial) {
        LatentGrid grid(8, 8, 3);
        AlphaLatentMask mask{8, 8, std::vector<double>(64)};
        std::size_t expected = 0;
        for (auto& v : mask.values) {
            v = uniform_int(rng, 0, 255) / 255.0;
            expected += v > 0.5 ? 1 : 0;
        }
        EXPECT_EQ(prune_tokens(grid, mask).size(), expected);
    }
    AlphaLatentMask edge{1, 2, {0.5, 128 / 255.0}};
    const auto kept = prune_tokens(LatentGrid(1, 2, 3), edge);
    ASSERT_EQ(kept.size(), 1u);
    EXPECT_EQ(kept[0].x, 1);
}

TEST(Prune, ShapeMismatchThrows) {
    EXPECT_THROW(prune_tokens(LatentGrid(2, 2, 3), AlphaLatentMask{2, 3, std::vector<double>(6)}), CodecError);
}

TEST(PosIds, LockedZeroUnlockedIndexed) {
    std::vector<PrunedEntry> e{{{0.0}, 3, 4}};
    EXPECT_EQ(assign_pos_ids(e, true).at(0).pos, (PosId{0, 3, 4}));
    EXPECT_EQ(assign_pos_ids(e, false, 2).at(0).pos, (PosId{2, 3, 4}));
    EXPECT_THROW(assign_pos_ids(e, false, 0), CodecError);
}

TEST(Condition, TransparentUnlockedLayerStillConsumesIndex) {
    Image opaque = make_rgba(8, 8);
    for (std::size_t i = 3; i < opaque.pixels.size(); i += 4) opaque.pixels[i] = 255;
    LayeredCanvas c{8, 8, {}, {}};
    c.layers.push_back({"ghost", make_rgba(8, 8), false, 0, {}});
    c.layers.push_back({"bg", opaque, true, 1, {}});
    c.layers.push_back({"subj", opaque, false, 2, {}});
    ConditionSummary s;
    const auto seq = build_condition_sequence(c, 4, &s);
    ASSERT_EQ(s.layers.size(), 3u);
    EXPECT_EQ(s.layers[0].layer_axis, 1);
    EXPECT_EQ(s.layers[0].tokens, 0u);
    EXPECT_EQ(s.layers[1].layer_axis, 0);
    EXPECT_EQ(s.layers[2].layer_axis, 2);
    EXPECT_EQ(s.total, 8u);
    EXPECT_EQ(seq.size(), 8u);
    EXPECT_EQ(seq.values.size(), 8u * 48);
    for (std::size_t i = 0; i < seq.size(); ++i) {
        EXPECT_EQ(seq.pos[i].layer_axis, seq.provenance[i] == "bg" ? 0 : 2);
    }
}

TEST(Condition, SummaryAgreesWithPerLayerRecount) {
    Rng rng = make_rng(14);
    for (int trial = 0; trial < 50; ++trial) {
        const auto c = lftest::random_canvas(rng, 16, 16, 6);
        ConditionSummary s;
        const auto seq = build_condition_sequence(c, 4, &s);
        std::size_t sum = 0;
        for (const auto& l : s.layers) {
            const auto* layer = &*std::find_if(c.layers.begin(), c.layers.end(),
                                               [&](const Layer& x) { return x.id == l.id; });
            std::size_t count = 0;
            for (int y = 0; y < 4; ++y)
                for (int x = 0; x < 4; ++x) count += layer->rgba.at(4 * x + 2, 4 * y + 2)[3] > 127 ? 1 : 0;
            EXPECT_EQ(l.tokens, count);
            sum += l.tokens;
        }
        EXPECT_EQ(sum, s.total);
        EXPECT_EQ(seq.size(), s.total);
    }
}

TEST(Condition, DumpHasOneLinePerToken) {
    Rng rng = make_rng(15);
    const auto seq = build_condition_sequence(lftest::random_canvas(rng, 8, 8), 4);
    const auto text = dump_tokens(seq);
    EXPECT_EQ(static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')), seq.size());
}
