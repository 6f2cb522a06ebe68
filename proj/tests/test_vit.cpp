#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "support/fd_check.hpp"
#include "vitdrive/rng.hpp"
#include "vitdrive/vit.hpp"

using namespace vitdrive;

namespace {

ViTConfig tiny_config() {
    ViTConfig cfg;
    cfg.image_h = 16;
    cfg.image_w = 16;
    cfg.channels = 3;
    cfg.patch_size = 8;
    cfg.embed_dim = 16;
    cfg.num_layers = 2;
    cfg.num_heads = 2;
    cfg.mlp_hidden_dim = 32;
    cfg.head_hidden_dim = 8;
    cfg.num_actions = 2;
    return cfg;
}

template <typename S>
std::vector<S> random_image(const ViTConfig& cfg, Rng& rng) {
    std::vector<S> img(static_cast<size_t>(cfg.image_h) * cfg.image_w * cfg.channels);
    for (auto& v : img) v = static_cast<S>(rng.uniform01());
    return img;
}

}  // namespace

TEST_CASE("patchify shapes follow N = HW/P^2") {
    ViTConfig cfg;  // 80x80x3 default
    cfg.patch_size = 8;
    Rng rng(1);
    auto img = random_image<float>(cfg, rng);
    auto patches = patchify(img, cfg);
    CHECK(patches.dim(0) == 100);
    CHECK(patches.dim(1) == 192);

    cfg.patch_size = 10;
    auto patches10 = patchify(img, cfg);
    CHECK(patches10.dim(0) == 64);
    CHECK(patches10.dim(1) == 300);
}

TEST_CASE("patchify round-trip is lossless") {
    ViTConfig cfg = tiny_config();
    Rng rng(2);
    auto img = random_image<float>(cfg, rng);
    auto back = unpatchify(patchify(img, cfg), cfg);
    REQUIRE(back.size() == img.size());
    for (size_t i = 0; i < img.size(); ++i) CHECK(back[i] == img[i]);
}

TEST_CASE("non-divisible patch size is a config error") {
    ViTConfig cfg;
    cfg.image_h = 80;
    cfg.image_w = 80;
    cfg.patch_size = 7;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("embed places the action token at row 0") {
    ViTConfig cfg = tiny_config();
    auto params = EncoderParamsT<double>::init(cfg, 3);
    Rng rng(4);
    auto img = random_image<double>(cfg, rng);
    auto patches = patchify(img, cfg);

    SECTION("zero pos and action token give zero row 0") {
        for (auto& v : params.pos_embed.values()) v = 0;
        for (auto& v : params.action_token.values()) v = 0;
        auto z0 = embed<double>(nullptr, patches, params);
        CHECK(z0.dim(0) == cfg.seq_len());
        for (int j = 0; j < cfg.embed_dim; ++j) CHECK(z0.at(0, j) == 0.0);
    }

    SECTION("identity projection passes patches through") {
        ViTConfig sq = tiny_config();
        sq.embed_dim = sq.patch_dim();  // square toy case
        sq.num_heads = 2;
        auto p = EncoderParamsT<double>::init(sq, 5);
        for (auto& v : p.patch_proj.values()) v = 0;
        for (int i = 0; i < sq.patch_dim(); ++i) p.patch_proj.at(i, i) = 1.0;
        auto patches_sq = patchify(img, sq);
        auto z0 = embed<double>(nullptr, patches_sq, p);
        for (int i = 1; i < sq.seq_len(); ++i)
            for (int j = 0; j < sq.embed_dim; ++j)
                CHECK(z0.at(i, j) ==
                      Catch::Approx(patches_sq.at(i - 1, j) + p.pos_embed.at(i, j)).margin(1e-12));
    }

    SECTION("paper-scale sequence length is 101") {
        ViTConfig paper;
        paper.patch_size = 8;
        CHECK(paper.seq_len() == 101);
    }
}

TEST_CASE("encoder is identity for empty or zero-weight stacks") {
    ViTConfig cfg = tiny_config();
    Rng rng(6);
    auto img = random_image<double>(cfg, rng);

    SECTION("L = 0") {
        ViTConfig c0 = cfg;
        c0.num_layers = 0;
        auto params = EncoderParamsT<double>::init(c0, 7);
        auto z0 = embed<double>(nullptr, patchify(img, c0), params);
        auto z = encoder_forward<double>(nullptr, z0, params, c0);
        for (size_t i = 0; i < z.values().size(); ++i) CHECK(z.values()[i] == z0.values()[i]);
    }

    SECTION("all-zero weights leave only residual paths") {
        auto params = EncoderParamsT<double>::init(cfg, 8);
        for (auto& l : params.layers) {
            for (auto& v : l.qkv.values()) v = 0;
            for (auto& v : l.proj.values()) v = 0;
            for (auto& v : l.mlp_w1.values()) v = 0;
            for (auto& v : l.mlp_w2.values()) v = 0;
        }
        auto z0 = embed<double>(nullptr, patchify(img, cfg), params);
        auto z = encoder_forward<double>(nullptr, z0, params, cfg);
        for (size_t i = 0; i < z.values().size(); ++i)
            CHECK(z.values()[i] == Catch::Approx(z0.values()[i]).margin(1e-12));
    }
}

TEST_CASE("attention rows are stochastic at every layer and head") {
    ViTConfig cfg = tiny_config();
    auto params = EncoderParamsT<double>::init(cfg, 9);
    Rng rng(10);
    auto img = random_image<double>(cfg, rng);
    AttentionRecordT<double> rec;
    (void)q_values<double>(nullptr, patchify(img, cfg), params, cfg, &rec);
    REQUIRE(rec.captured());
    REQUIRE(rec.attn.size() == 2);
    const int t = cfg.seq_len();
    for (const auto& layer : rec.attn) {
        REQUIRE(layer.size() == 2);
        for (const auto& head : layer)
            for (int i = 0; i < t; ++i) {
                double s = 0;
                for (int j = 0; j < t; ++j) s += head[static_cast<size_t>(i) * t + j];
                CHECK(s == Catch::Approx(1.0).margin(1e-5));
            }
    }
}

TEST_CASE("patch permutation with zero position embeddings leaves the action output unchanged") {
    ViTConfig cfg = tiny_config();
    auto params = EncoderParamsT<double>::init(cfg, 12);
    for (auto& v : params.pos_embed.values()) v = 0;
    Rng rng(13);
    auto img = random_image<double>(cfg, rng);
    auto patches = patchify(img, cfg);

    // Reversed patch order.
    const int n = cfg.num_patches(), pd = cfg.patch_dim();
    auto permuted = TensorT<double>::zeros({n, pd});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < pd; ++j) permuted.at(i, j) = patches.at(n - 1 - i, j);

    auto q1 = q_values<double>(nullptr, patches, params, cfg);
    auto q2 = q_values<double>(nullptr, permuted, params, cfg);
    for (int a = 0; a < cfg.num_actions; ++a)
        CHECK(q1.values()[a] == Catch::Approx(q2.values()[a]).margin(1e-5));
}

TEST_CASE("q_values pipeline contracts") {
    ViTConfig cfg = tiny_config();
    auto params = EncoderParamsT<float>::init(cfg, 14);
    Rng rng(15);
    BEVFrame frame;
    frame.width = cfg.image_w;
    frame.height = cfg.image_h;
    frame.channels = 3;
    frame.pixels.resize(static_cast<size_t>(16) * 16 * 3);
    for (auto& p : frame.pixels) p = static_cast<uint8_t>(rng.uniform_int(256));

    SECTION("output length equals num_actions") {
        auto q = q_values<float>(nullptr, frame, params, cfg);
        CHECK(q.numel() == 2);
    }

    SECTION("same frame and params give bitwise-identical Q") {
        auto q1 = q_values<float>(nullptr, frame, params, cfg);
        auto q2 = q_values<float>(nullptr, frame, params, cfg);
        CHECK(q1.values()[0] == q2.values()[0]);
        CHECK(q1.values()[1] == q2.values()[1]);
    }

    SECTION("zero head weights pin Q to the output bias") {
        for (auto& v : params.head_w2.values()) v = 0;
        params.head_b2.values()[0] = -1.5f;
        params.head_b2.values()[1] = 2.5f;
        auto q = q_values<float>(nullptr, frame, params, cfg);
        CHECK(q.values()[0] == -1.5f);
        CHECK(q.values()[1] == 2.5f);
    }

    SECTION("argmax is invariant to a common bias shift") {
        auto q1 = q_values<float>(nullptr, frame, params, cfg);
        params.head_b2.values()[0] += 3.25f;
        params.head_b2.values()[1] += 3.25f;
        auto q2 = q_values<float>(nullptr, frame, params, cfg);
        const int arg1 = q1.values()[0] >= q1.values()[1] ? 0 : 1;
        const int arg2 = q2.values()[0] >= q2.values()[1] ? 0 : 1;
        CHECK(arg1 == arg2);
    }
}

TEST_CASE("action_attention drops self-entry and renormalizes") {
    ViTConfig cfg = tiny_config();
    const int n = cfg.num_patches();
    AttentionRecordT<float> rec;
    rec.seq_len = cfg.seq_len();
    rec.attn.resize(1);

    SECTION("uniform attention gives 1/N entries") {
        std::vector<float> uniform(static_cast<size_t>(rec.seq_len) * rec.seq_len,
                                   1.0f / rec.seq_len);
        rec.attn[0] = {uniform, uniform};
        auto a = action_attention(rec, 0);
        REQUIRE(a.numel() == n);
        float sum = 0;
        for (float v : a.values()) {
            CHECK(v == Catch::Approx(1.0f / n).margin(1e-6));
            sum += v;
        }
        CHECK(sum == Catch::Approx(1.0).margin(1e-6));
    }

    SECTION("missing capture is a contract error") {
        AttentionRecordT<float> empty;
        CHECK_THROWS_AS(action_attention(empty, 0), std::logic_error);
    }

    SECTION("paper config yields length 100") {
        ViTConfig paper;
        paper.patch_size = 8;
        AttentionRecordT<float> r2;
        r2.seq_len = paper.seq_len();
        std::vector<float> uniform(static_cast<size_t>(r2.seq_len) * r2.seq_len,
                                   1.0f / r2.seq_len);
        r2.attn = {{uniform}};
        CHECK(action_attention(r2, 0).numel() == 100);
    }
}

TEST_CASE("parameter count formula matches enumeration") {
    for (uint64_t seed = 0; const ViTConfig& cfg :
         {tiny_config(), ViTConfig{},
          ViTConfig{.image_h = 80, .image_w = 80, .channels = 3, .patch_size = 4,
                    .embed_dim = 48, .num_layers = 3, .num_heads = 6, .mlp_hidden_dim = 96,
                    .num_actions = 2, .head_hidden_dim = 64}}) {
        auto params = EncoderParamsT<float>::init(cfg, seed++);
        CHECK(params.parameter_count() == parameter_count(cfg));
    }
}

TEST_CASE("sequence length law for all paper patch sizes") {
    for (int p : {2, 4, 5, 8, 10}) {
        ViTConfig cfg;
        cfg.patch_size = p;
        cfg.validate();
        CHECK(cfg.seq_len() == 6400 / (p * p) + 1);
        auto params = EncoderParamsT<float>::init(cfg, 100 + p);
        CHECK(params.pos_embed.dim(0) == cfg.seq_len());
    }
}

TEST_CASE("tiny ViT end-to-end gradients match finite differences") {
    ViTConfig cfg = tiny_config();
    auto params = EncoderParamsT<double>::init(cfg, 21);
    Rng rng(22);
    auto img = random_image<double>(cfg, rng);
    auto patches = patchify(img, cfg);
    auto w = TensorT<double>::zeros({1, cfg.num_actions});
    for (auto& v : w.values()) v = rng.uniform(-1, 1);

    TapeT<double> tape;
    auto loss = sum_all(&tape, mul(&tape, q_values(&tape, patches, params, cfg), w));
    tape.backward(loss);

    auto loss_fn = [&]() {
        return sum_all<double>(nullptr,
                               mul<double>(nullptr, q_values<double>(nullptr, patches, params, cfg),
                                           w))
            .item();
    };

    testsup::GradCheckResult res;
    params.for_each([&](const std::string& name, TensorT<double>& t) {
        auto fd = testsup::fd_grad(t, loss_fn, 1e-5);
        for (size_t i = 0; i < fd.size(); ++i)
            testsup::track_worst(res, name, i, t.grad_view()[i], fd[i], 1e-7);
    });
    INFO("worst " << res.worst_param << "[" << res.worst_index << "] analytic "
                  << res.analytic_at_worst << " fd " << res.fd_at_worst);
    CHECK(res.max_rel < 1e-4);
}
