#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "layerforge/checkpoint.hpp"
#include "layerforge/gradcheck.hpp"
#include "layerforge/model.hpp"
#include "layerforge/train.hpp"
#include "support.hpp"

using namespace layerforge;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.d_model = 32;
    c.n_heads = 2;
    c.head_dim = 16;
    c.n_blocks = 2;
    c.time_dim = 16;
    c.lora_rank = 4;
    return c;
}

template <class T>
ForwardInputs<T> random_inputs(const ModelConfig& cfg, Rng& rng, int canvas = 16, int locked_share = 2) {
    auto c = lftest::random_canvas(rng, canvas, canvas, 4, locked_share / 4.0);
    LatentGrid z(canvas / cfg.patch, canvas / cfg.patch, cfg.latent_dim());
    for (auto& v : z.data) v = standard_normal(rng);
    return make_inputs<T>(z, uniform(rng, 0.0, 1.0), build_condition_sequence(c, cfg.patch), c.prompt);
}

void randomize_b(LoraSet<double>& lora, Rng& rng) {
    for (auto& blk : lora.blocks)
        for (auto& a : blk)
            for (auto& v : a.b.data_mut()) v = 0.2 * standard_normal(rng);
}

}  // namespace

TEST(ModelConfig, RejectsInconsistentShapes) {
    ModelConfig c;
    c.head_dim = 8;
    EXPECT_THROW(c.validate(), ModelError);
    c = ModelConfig{};
    c.axis_dims = {4, 5, 7};
    EXPECT_THROW(c.validate(), ModelError);
    EXPECT_NO_THROW(ModelConfig{}.validate());
}

TEST(ModelConfig, JsonRoundTrip) {
    auto c = small_config();
    c.hue_vocab = {"a", "b"};
    nlohmann::json j = c;
    EXPECT_EQ(j.get<ModelConfig>(), c);
}

TEST(Params, CountMatchesClosedForm) {
    for (const auto& cfg : {ModelConfig{}, small_config()}) {
        const std::size_t d = cfg.d_model, D = cfg.latent_dim(), F = cfg.time_dim, h = d * cfg.mlp_ratio;
        const std::size_t V = cfg.hue_vocab.size() + cfg.arrangement_vocab.size();
        const std::size_t per_block = (d * 4 * d + 4 * d) + 4 * d * d + 2 * d + (d * h + h) + (h * d + d);
        const std::size_t expected = 2 * (D * d + d) + (F * d + d) + (d * d + d) + V * d +
                                     cfg.n_blocks * per_block + (d * 2 * d + 2 * d) + (d * D + D);
        const auto w = init_weights<float>(cfg, 0);
        const auto lora = init_lora<float>(cfg, cfg.lora_rank, 0);
        const auto counts = count_params(w, lora);
        EXPECT_EQ(counts.base, expected);
        EXPECT_EQ(counts.adapters, static_cast<std::size_t>(cfg.n_blocks) * 4 * 2 * d * cfg.lora_rank);
    }
}

TEST(Rope, RotationPreservesNorm) {
    Rng rng = make_rng(31);
    std::vector<double> v(16);
    for (auto& x : v) x = standard_normal(rng);
    const auto r = rope3d_apply(v, {3, 5, 7}, {4, 6, 6});
    double a = 0, b = 0;
    for (std::size_t i = 0; i < 16; ++i) {
        a += v[i] * v[i];
        b += r[i] * r[i];
    }
    EXPECT_NEAR(a, b, 1e-12);
    EXPECT_EQ(rope3d_apply(v, {0, 0, 0}, {4, 6, 6}), v);
}

TEST(Rope, DotProductDependsOnlyOnOffset) {
    Rng rng = make_rng(32);
    std::vector<double> q(16), k(16);
    for (auto& x : q) x = standard_normal(rng);
    for (auto& x : k) x = standard_normal(rng);
    auto dot = [&](PosId a, PosId b) {
        const auto qa = rope3d_apply(q, a, {4, 6, 6}), kb = rope3d_apply(k, b, {4, 6, 6});
        double s = 0;
        for (std::size_t i = 0; i < 16; ++i) s += qa[i] * kb[i];
        return s;
    };
    EXPECT_NEAR(dot({1, 2, 3}, {0, 1, 1}), dot({3, 5, 9}, {2, 4, 7}), 1e-10);
    EXPECT_GT(std::abs(dot({1, 2, 3}, {0, 1, 1}) - dot({0, 2, 3}, {0, 1, 1})), 1e-6);
}

TEST(Rope, FrequenciesAndSliceLayout) {
    EXPECT_DOUBLE_EQ(rope_frequency(0, 6, 10000.0), 1.0);
    EXPECT_NEAR(rope_frequency(1, 6, 10000.0), std::pow(10000.0, -1.0 / 3.0), 1e-15);
    const auto a = rope_angles({2, 3, 4}, {4, 6, 6});
    ASSERT_EQ(a.size(), 8u);
    EXPECT_DOUBLE_EQ(a[0], 2.0);
    EXPECT_DOUBLE_EQ(a[2], 3.0);
    EXPECT_DOUBLE_EQ(a[5], 4.0);
}

TEST(Rope, RowsOpMatchesScalarReferenceAndGradient) {
    auto cfg = small_config();
    Rng rng = make_rng(33);
    std::vector<PosId> pos{{0, 1, 2}, {2, 0, 3}, {1, 3, 3}};
    std::vector<double> data(3 * 32);
    for (auto& x : data) x = standard_normal(rng);
    ad::Tensor<double> x({3, 32}, data, true);
    const auto table = build_rope_table<double>(pos, cfg);
    ad::Tape<double> tape(false);
    auto y = rope_rows(tape, x, table);
    for (std::size_t r = 0; r < 3; ++r) {
        for (int h = 0; h < 2; ++h) {
            std::vector<double> head(data.begin() + r * 32 + h * 16, data.begin() + r * 32 + h * 16 + 16);
            const auto ref = rope3d_apply(head, pos[r], cfg.axis_dims);
            for (int i = 0; i < 16; ++i) EXPECT_NEAR(y.data()[r * 32 + h * 16 + i], ref[i], 1e-12);
        }
    }
    auto target = ad::Tensor<double>::zeros({3, 32});
    const auto rep = ad::grad_check(
        [&](ad::Tape<double>& t) { return ad::mse(t, ad::mul(t, rope_rows(t, x, table), x), target); },
        {{"x", x}}, 1e-6, 96);
    EXPECT_LT(rep.max_rel_error, 1e-4);
}

TEST(Rope, PositionalPriorPeaksAtSameCell) {
    const ModelConfig cfg;
    const auto w = init_weights<double>(cfg, 3);
    const auto& b = w.blocks.at(0);
    for (int h = 0; h < cfg.n_heads; ++h) {
        const auto off = static_cast<std::size_t>(h * cfg.head_dim);
        std::vector<double> qb(b.bq.data().begin() + off, b.bq.data().begin() + off + cfg.head_dim);
        std::vector<double> kb(b.bk.data().begin() + off, b.bk.data().begin() + off + cfg.head_dim);
        EXPECT_EQ(qb, kb);
        const double norm = std::inner_product(qb.begin(), qb.end(), qb.begin(), 0.0);
        if (h >= cfg.positional_heads) {
            EXPECT_EQ(norm, 0.0);
            continue;
        }
        const PosId q{0, 3, 5};
        const auto rq = rope3d_apply(qb, q, cfg.axis_dims, cfg.rope_base);
        const auto at = [&](const PosId& p) {
            const auto rk = rope3d_apply(kb, p, cfg.axis_dims, cfg.rope_base);
            return std::inner_product(rq.begin(), rq.end(), rk.begin(), 0.0);
        };
        const double peak = at(q);
        EXPECT_NEAR(peak, norm, 1e-9);
        for (int l = 0; l <= cfg.max_unlocked_layers; ++l)
            for (int y = 0; y < 8; ++y)
                for (int x = 0; x < 8; ++x) {
                    const PosId k{l, x, y};
                    if (k == q) continue;
                    EXPECT_LT(at(k), peak - 1.0) << l << "," << x << "," << y;
                }
    }
}

TEST(Forward, OutputShapeAndUnknownPromptToken) {
    auto cfg = small_config();
    Rng rng = make_rng(34);
    const auto w = init_weights<float>(cfg, 1);
    auto in = random_inputs<float>(cfg, rng);
    ad::Tape<float> tape(false);
    auto out = dit_forward(tape, w, static_cast<const LoraSet<float>*>(nullptr), in);
    EXPECT_EQ(out.shape(), (ad::Shape{16, 48}));
    in.prompt.background_hue = "chartreuse";
    EXPECT_THROW(dit_forward(tape, w, static_cast<const LoraSet<float>*>(nullptr), in), ModelError);
}

TEST(Forward, CondTokenPermutationInvariance) {
    auto cfg = small_config();
    Rng rng = make_rng(35);
    const auto w = init_weights<double>(cfg, 2);
    auto in = random_inputs<double>(cfg, rng);
    ASSERT_GT(in.cond.dim(0), 1u);
    ad::Tape<double> tape(false);
    const auto a = dit_forward(tape, w, static_cast<const LoraSet<double>*>(nullptr), in);
    // Reverse the condition rows together with their positions.
    const std::size_t m = in.cond.dim(0), D = in.cond.dim(1);
    std::vector<double> rev(m * D);
    for (std::size_t r = 0; r < m; ++r)
        std::copy_n(in.cond.data().begin() + (m - 1 - r) * D, D, rev.begin() + r * D);
    in.cond = ad::Tensor<double>({m, D}, rev);
    std::reverse(in.cond_pos.begin(), in.cond_pos.end());
    const auto b = dit_forward(tape, w, static_cast<const LoraSet<double>*>(nullptr), in);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-10);
}

TEST(Forward, ConditionTokensInfluenceOutput) {
    auto cfg = small_config();
    Rng rng = make_rng(36);
    const auto w = init_weights<double>(cfg, 3);
    auto in = random_inputs<double>(cfg, rng);
    ad::Tape<double> tape(false);
    const auto a = dit_forward(tape, w, static_cast<const LoraSet<double>*>(nullptr), in);
    in.cond = ad::Tensor<double>();
    in.cond_pos.clear();
    const auto b = dit_forward(tape, w, static_cast<const LoraSet<double>*>(nullptr), in);
    double diff = 0;
    for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a.data()[i] - b.data()[i]));
    EXPECT_GT(diff, 1e-6);
}

TEST(Forward, GradientsMatchFiniteDifferences) {
    auto cfg = small_config();
    Rng rng = make_rng(37);
    auto w = init_weights<double>(cfg, 4);
    randomize_probe_point(w, 4);
    auto lora = init_lora<double>(cfg, 3, 4);
    randomize_b(lora, rng);
    auto in = random_inputs<double>(cfg, rng, 16, 0);  // unlocked layers: distinct layer axes
    std::vector<double> tgt(in.noisy.size());
    for (auto& v : tgt) v = standard_normal(rng);
    ad::Tensor<double> target(in.noisy.shape(), tgt);
    std::vector<ad::NamedParam> params;
    w.for_each([&](const std::string& n, const ad::Tensor<double>& t) { params.push_back({n, t}); });
    lora.for_each([&](const std::string& n, const ad::Tensor<double>& t) { params.push_back({n, t}); });
    const auto rep = ad::grad_check(
        [&](ad::Tape<double>& t) { return ad::mse(t, dit_forward(t, w, &lora, in), target); }, params, 1e-4, 8);
    EXPECT_LT(rep.max_rel_error, 1e-4) << rep.worst_param << "[" << rep.worst_index << "] " << rep.worst_analytic << " vs " << rep.worst_numeric;
}

TEST(Lora, ZeroInitLeavesOutputBitIdentical) {
    auto cfg = small_config();
    Rng rng = make_rng(38);
    const auto w = init_weights<float>(cfg, 5);
    const auto lora = init_lora<float>(cfg, 8, 6);
    const auto in = random_inputs<float>(cfg, rng);
    ad::Tape<float> tape(false);
    const auto a = dit_forward(tape, w, static_cast<const LoraSet<float>*>(nullptr), in);
    const auto b = dit_forward(tape, w, &lora, in);
    EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST(Lora, MergedForwardMatchesAdapterForward) {
    auto cfg = small_config();
    Rng rng = make_rng(39);
    const auto w = init_weights<float>(cfg, 7);
    auto lora = init_lora<float>(cfg, 4, 8);
    for (auto& blk : lora.blocks)
        for (auto& a : blk)
            for (auto& v : a.b.data_mut()) v = static_cast<float>(0.05 * standard_normal(rng));
    const auto merged = merge_all(w, lora);
    const auto in = random_inputs<float>(cfg, rng);
    ad::Tape<float> tape(false);
    const auto a = dit_forward(tape, w, &lora, in);
    const auto b = dit_forward(tape, merged, static_cast<const LoraSet<float>*>(nullptr), in);
    double diff = 0, base_diff = 0;
    const auto c = dit_forward(tape, w, static_cast<const LoraSet<float>*>(nullptr), in);
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff = std::max(diff, static_cast<double>(std::abs(a.data()[i] - b.data()[i])));
        base_diff = std::max(base_diff, static_cast<double>(std::abs(a.data()[i] - c.data()[i])));
    }
    EXPECT_LT(diff, 1e-5);
    EXPECT_GT(base_diff, 1e-3);  // the adapters do change the output
}

TEST(Lora, RankZeroIsEmptyAndMismatchedShapesThrow) {
    auto cfg = small_config();
    EXPECT_TRUE(init_lora<float>(cfg, 0, 0).blocks.empty());
    ad::Tape<float> tape(false);
    auto lora = init_lora<float>(cfg, 2, 0);
    auto x = ad::Tensor<float>::zeros({3, 32});
    auto wrong = ad::Tensor<float>::zeros({32, 16});
    EXPECT_THROW(lora_linear(tape, x, wrong, &lora.blocks[0][0]), ModelError);
}

TEST(Checkpoint, RoundTripPreservesEverything) {
    TrainState st;
    st.config.model = small_config();
    st.config.regime = Regime::freeze_lora;
    st.base = init_weights<float>(st.config.model, 1);
    st.lora = init_lora<float>(st.config.model, 4, 2);
    apply_regime(st);
    st.opt = ad::make_optimizer(st.trainable(), {});
    st.opt.step = 7;
    st.opt.m[0][3] = 0.25f;
    st.step = 7;
    const auto bytes = save_checkpoint(st);
    const auto back = load_checkpoint(bytes);
    EXPECT_EQ(back.step, 7);
    EXPECT_EQ(back.opt.step, 7);
    EXPECT_EQ(back.opt.m, st.opt.m);
    EXPECT_EQ(back.config.model, st.config.model);
    EXPECT_EQ(save_checkpoint(back), bytes);
    EXPECT_FALSE(back.base.in_w.requires_grad());
    EXPECT_TRUE(back.lora.blocks[0][0].a.requires_grad());
}

TEST(Checkpoint, CorruptionIsReported) {
    TrainState st;
    st.config.model = small_config();
    st.base = init_weights<float>(st.config.model, 1);
    st.lora = init_lora<float>(st.config.model, 0, 0);
    apply_regime(st);
    st.opt = ad::make_optimizer(st.trainable(), {});
    auto bytes = save_checkpoint(st);

    auto bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(load_checkpoint(bad), CheckpointError);

    bad = bytes;
    bad.resize(bytes.size() - 9);
    EXPECT_THROW(load_checkpoint(bad), CheckpointError);

    bad = bytes;
    bad.push_back(0);
    EXPECT_THROW(load_checkpoint(bad), CheckpointError);

    auto other = small_config();
    other.d_model = 48;
    other.head_dim = 24;
    other.axis_dims = {8, 8, 8};
    try {
        load_checkpoint(bytes, &other);
        FAIL();
    } catch (const CheckpointError& e) {
        EXPECT_NE(std::string(e.what()).find("shape mismatch for tensor 'in_w'"), std::string::npos) << e.what();
    }
}
