#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "vitdrive/bev.hpp"
#include "vitdrive/rng.hpp"
#include "vitdrive/tensor.hpp"

namespace vitdrive {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Vision Transformer geometry. The encoder consumes N = H*W/P^2 flattened
// patches plus one learnable action token whose output row feeds the Q head.
struct ViTConfig {
    int image_h = 80;
    int image_w = 80;
    int channels = 3;
    int patch_size = 8;
    int embed_dim = 64;
    int num_layers = 4;
    int num_heads = 4;
    int mlp_hidden_dim = 128;
    int num_actions = 2;
    int head_hidden_dim = 64;

    int num_patches() const { return (image_h / patch_size) * (image_w / patch_size); }
    int seq_len() const { return num_patches() + 1; }
    int patch_dim() const { return patch_size * patch_size * channels; }
    int head_dim() const { return embed_dim / num_heads; }
    int grid_h() const { return image_h / patch_size; }
    int grid_w() const { return image_w / patch_size; }

    void validate() const {
        if (image_h <= 0 || image_w <= 0 || channels <= 0 || patch_size <= 0)
            throw ConfigError("vit config: image and patch extents must be positive");
        if (image_h % patch_size != 0 || image_w % patch_size != 0)
            throw ConfigError("vit config: image " + std::to_string(image_h) + "x" +
                              std::to_string(image_w) + " not divisible by patch size " +
                              std::to_string(patch_size));
        if (embed_dim <= 0 || num_heads <= 0 || embed_dim % num_heads != 0)
            throw ConfigError("vit config: embed_dim " + std::to_string(embed_dim) +
                              " must be a positive multiple of num_heads " +
                              std::to_string(num_heads));
        if (num_layers < 0 || mlp_hidden_dim <= 0 || num_actions <= 0 || head_hidden_dim <= 0)
            throw ConfigError("vit config: layer/head sizes must be positive");
    }

    std::string canonical_string() const {
        return "vit;h=" + std::to_string(image_h) + ";w=" + std::to_string(image_w) +
               ";c=" + std::to_string(channels) + ";p=" + std::to_string(patch_size) +
               ";d=" + std::to_string(embed_dim) + ";l=" + std::to_string(num_layers) +
               ";k=" + std::to_string(num_heads) + ";mlp=" + std::to_string(mlp_hidden_dim) +
               ";a=" + std::to_string(num_actions) + ";hh=" + std::to_string(head_hidden_dim);
    }

    // FNV-1a over the canonical string; checkpoints refuse to load under a
    // different fingerprint.
    uint64_t fingerprint() const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (char c : canonical_string()) {
            h ^= static_cast<uint8_t>(c);
            h *= 0x100000001b3ULL;
        }
        return h;
    }

    bool operator==(const ViTConfig&) const = default;
};

template <typename S>
struct EncoderLayerT {
    TensorT<S> ln1_gain, ln1_bias;
    TensorT<S> qkv;   // [D x 3D] fused; blocks [Q | K | V], head h at cols h*Dh..(h+1)*Dh
    TensorT<S> proj;  // [D x D]
    TensorT<S> ln2_gain, ln2_bias;
    TensorT<S> mlp_w1;  // [D x M]
    TensorT<S> mlp_b1;  // [M]
    TensorT<S> mlp_w2;  // [M x D]
    TensorT<S> mlp_b2;  // [D]
};

template <typename S>
struct EncoderParamsT {
    TensorT<S> patch_proj;    // [P^2*C x D]
    TensorT<S> pos_embed;     // [(N+1) x D]
    TensorT<S> action_token;  // [1 x D]
    std::vector<EncoderLayerT<S>> layers;
    TensorT<S> final_ln_gain, final_ln_bias;
    TensorT<S> head_w1;  // [D x HH]
    TensorT<S> head_b1;  // [HH]
    TensorT<S> head_w2;  // [HH x A]
    TensorT<S> head_b2;  // [A]

    // Truncated-normal (std 0.02) projections and embeddings, zero biases and
    // action token, identity layernorm affines.
    static EncoderParamsT init(const ViTConfig& cfg, uint64_t seed) {
        cfg.validate();
        Rng rng(mix_seed(seed, 0x7a11));
        const int d = cfg.embed_dim;
        EncoderParamsT p;
        p.patch_proj = trunc_normal(rng, {cfg.patch_dim(), d});
        p.pos_embed = trunc_normal(rng, {cfg.seq_len(), d});
        p.action_token = TensorT<S>::zeros({1, d});
        p.layers.resize(static_cast<size_t>(cfg.num_layers));
        for (auto& l : p.layers) {
            l.ln1_gain = TensorT<S>::filled({d}, S(1));
            l.ln1_bias = TensorT<S>::zeros({d});
            l.qkv = trunc_normal(rng, {d, 3 * d});
            l.proj = trunc_normal(rng, {d, d});
            l.ln2_gain = TensorT<S>::filled({d}, S(1));
            l.ln2_bias = TensorT<S>::zeros({d});
            l.mlp_w1 = trunc_normal(rng, {d, cfg.mlp_hidden_dim});
            l.mlp_b1 = TensorT<S>::zeros({cfg.mlp_hidden_dim});
            l.mlp_w2 = trunc_normal(rng, {cfg.mlp_hidden_dim, d});
            l.mlp_b2 = TensorT<S>::zeros({d});
        }
        p.final_ln_gain = TensorT<S>::filled({d}, S(1));
        p.final_ln_bias = TensorT<S>::zeros({d});
        p.head_w1 = trunc_normal(rng, {d, cfg.head_hidden_dim});
        p.head_b1 = TensorT<S>::zeros({cfg.head_hidden_dim});
        p.head_w2 = trunc_normal(rng, {cfg.head_hidden_dim, cfg.num_actions});
        p.head_b2 = TensorT<S>::zeros({cfg.num_actions});
        p.for_each([](const std::string&, TensorT<S>& t) { t.set_requires_grad(true); });
        return p;
    }

    void for_each(const std::function<void(const std::string&, TensorT<S>&)>& fn) {
        fn("embed.patch_proj", patch_proj);
        fn("embed.pos", pos_embed);
        fn("embed.action_token", action_token);
        for (size_t i = 0; i < layers.size(); ++i) {
            const std::string pre = "layer" + std::to_string(i) + ".";
            auto& l = layers[i];
            fn(pre + "ln1.gain", l.ln1_gain);
            fn(pre + "ln1.bias", l.ln1_bias);
            fn(pre + "qkv", l.qkv);
            fn(pre + "proj", l.proj);
            fn(pre + "ln2.gain", l.ln2_gain);
            fn(pre + "ln2.bias", l.ln2_bias);
            fn(pre + "mlp.w1", l.mlp_w1);
            fn(pre + "mlp.b1", l.mlp_b1);
            fn(pre + "mlp.w2", l.mlp_w2);
            fn(pre + "mlp.b2", l.mlp_b2);
        }
        fn("final_ln.gain", final_ln_gain);
        fn("final_ln.bias", final_ln_bias);
        fn("head.w1", head_w1);
        fn("head.b1", head_b1);
        fn("head.w2", head_w2);
        fn("head.b2", head_b2);
    }

    int64_t parameter_count() {
        int64_t n = 0;
        for_each([&n](const std::string&, TensorT<S>& t) { n += t.numel(); });
        return n;
    }

    EncoderParamsT clone() {
        EncoderParamsT c;
        c.patch_proj = patch_proj.clone();
        c.pos_embed = pos_embed.clone();
        c.action_token = action_token.clone();
        c.layers.resize(layers.size());
        for (size_t i = 0; i < layers.size(); ++i) {
            auto& a = layers[i];
            auto& b = c.layers[i];
            b.ln1_gain = a.ln1_gain.clone();
            b.ln1_bias = a.ln1_bias.clone();
            b.qkv = a.qkv.clone();
            b.proj = a.proj.clone();
            b.ln2_gain = a.ln2_gain.clone();
            b.ln2_bias = a.ln2_bias.clone();
            b.mlp_w1 = a.mlp_w1.clone();
            b.mlp_b1 = a.mlp_b1.clone();
            b.mlp_w2 = a.mlp_w2.clone();
            b.mlp_b2 = a.mlp_b2.clone();
        }
        c.final_ln_gain = final_ln_gain.clone();
        c.final_ln_bias = final_ln_bias.clone();
        c.head_w1 = head_w1.clone();
        c.head_b1 = head_b1.clone();
        c.head_w2 = head_w2.clone();
        c.head_b2 = head_b2.clone();
        return c;
    }

    void copy_values_from(EncoderParamsT& o) {
        std::vector<TensorT<S>*> dst;
        for_each([&dst](const std::string&, TensorT<S>& t) { dst.push_back(&t); });
        std::vector<TensorT<S>*> src;
        o.for_each([&src](const std::string&, TensorT<S>& t) { src.push_back(&t); });
        if (dst.size() != src.size())
            throw std::logic_error("copy_values_from: parameter sets differ");
        for (size_t i = 0; i < dst.size(); ++i) dst[i]->copy_values_from(*src[i]);
    }

private:
    static TensorT<S> trunc_normal(Rng& rng, std::vector<int> shape) {
        auto t = TensorT<S>::zeros(std::move(shape));
        for (auto& v : t.values()) v = static_cast<S>(rng.truncated_normal(0.02));
        return t;
    }
};

// Closed-form parameter count; verified against enumeration in tests.
inline int64_t parameter_count(const ViTConfig& cfg) {
    const int64_t d = cfg.embed_dim, m = cfg.mlp_hidden_dim;
    const int64_t per_layer = 2 * d +            // ln1
                              d * 3 * d +        // qkv
                              d * d +            // proj
                              2 * d +            // ln2
                              d * m + m +        // mlp in
                              m * d + d;         // mlp out
    return static_cast<int64_t>(cfg.patch_dim()) * d +       // patch projection
           static_cast<int64_t>(cfg.seq_len()) * d +         // position embeddings
           d +                                               // action token
           cfg.num_layers * per_layer +                      //
           2 * d +                                           // final ln
           d * cfg.head_hidden_dim + cfg.head_hidden_dim +   // head hidden
           static_cast<int64_t>(cfg.head_hidden_dim) * cfg.num_actions + cfg.num_actions;
}

// Per-layer, per-head attention matrices, captured on request. Rows are
// (N+1)-long probability vectors including the action token at index 0.
template <typename S>
struct AttentionRecordT {
    int seq_len = 0;
    // attn[layer][head] is a row-major seq_len x seq_len matrix.
    std::vector<std::vector<std::vector<S>>> attn;

    bool captured() const { return !attn.empty(); }
};

using AttentionRecord = AttentionRecordT<float>;

// ---------------------------------------------------------------------------
// Patchify: image -> N x (P^2*C), row i the row-major flattening of patch i,
// patches ordered row-major over the grid. Lossless.
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> patchify(const std::vector<S>& image_hwc, const ViTConfig& cfg) {
    cfg.validate();
    const int h = cfg.image_h, w = cfg.image_w, c = cfg.channels, p = cfg.patch_size;
    if (static_cast<int64_t>(image_hwc.size()) != static_cast<int64_t>(h) * w * c)
        throw std::invalid_argument("patchify: image buffer does not match config dims");
    auto out = TensorT<S>::zeros({cfg.num_patches(), cfg.patch_dim()});
    auto ov = out.values();
    const int gw = cfg.grid_w();
    for (int gy = 0; gy < cfg.grid_h(); ++gy)
        for (int gx = 0; gx < gw; ++gx) {
            S* row = ov.data() + static_cast<size_t>(gy * gw + gx) * cfg.patch_dim();
            for (int py = 0; py < p; ++py)
                for (int px = 0; px < p; ++px)
                    for (int ch = 0; ch < c; ++ch)
                        *row++ = image_hwc[((static_cast<size_t>(gy * p + py) * w) +
                                            (gx * p + px)) * c + ch];
        }
    return out;
}

template <typename S>
std::vector<S> unpatchify(const TensorT<S>& patches, const ViTConfig& cfg) {
    if (patches.ndim() != 2 || patches.dim(0) != cfg.num_patches() ||
        patches.dim(1) != cfg.patch_dim())
        throw std::invalid_argument("unpatchify: tensor " + patches.shape_string() +
                                    " does not match config grid");
    const int h = cfg.image_h, w = cfg.image_w, c = cfg.channels, p = cfg.patch_size;
    std::vector<S> image(static_cast<size_t>(h) * w * c);
    auto pv = patches.values();
    const int gw = cfg.grid_w();
    for (int gy = 0; gy < cfg.grid_h(); ++gy)
        for (int gx = 0; gx < gw; ++gx) {
            const S* row = pv.data() + static_cast<size_t>(gy * gw + gx) * cfg.patch_dim();
            for (int py = 0; py < p; ++py)
                for (int px = 0; px < p; ++px)
                    for (int ch = 0; ch < c; ++ch)
                        image[((static_cast<size_t>(gy * p + py) * w) + (gx * p + px)) * c + ch] =
                            *row++;
        }
    return image;
}

// 8-bit frame -> [0,1] floats at the network boundary.
template <typename S = float>
std::vector<S> frame_to_floats(const BEVFrame& frame) {
    std::vector<S> v(frame.pixels.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<S>(frame.pixels[i]) / S(255);
    return v;
}

template <typename S = float>
TensorT<S> patchify(const BEVFrame& frame, const ViTConfig& cfg) {
    if (frame.height != cfg.image_h || frame.width != cfg.image_w ||
        frame.channels != cfg.channels)
        throw std::invalid_argument("patchify: frame dims do not match config");
    return patchify(frame_to_floats<S>(frame), cfg);
}

// ---------------------------------------------------------------------------
// z0 = [x_action; x_p^1 E; ...; x_p^N E] + E_pos
// ---------------------------------------------------------------------------
template <typename S>
TensorT<S> embed(TapeT<S>* tape, const TensorT<S>& patches, const EncoderParamsT<S>& params) {
    auto projected = matmul(tape, patches, params.patch_proj);
    auto seq = concat_rows(tape, {params.action_token, projected});
    return add(tape, seq, params.pos_embed);
}

// ---------------------------------------------------------------------------
// L pre-norm blocks: z' = MSA(LN(z)) + z ; z = MLP(LN(z')) + z'.
// Attention uses softmax(Q K^T / sqrt(Dh)) per head.
// ---------------------------------------------------------------------------
template <typename S>
TensorT<S> encoder_forward(TapeT<S>* tape, const TensorT<S>& z0, const EncoderParamsT<S>& params,
                           const ViTConfig& cfg, AttentionRecordT<S>* capture = nullptr) {
    const int d = cfg.embed_dim, k = cfg.num_heads;
    const S inv_sqrt_dh = S(1) / std::sqrt(static_cast<S>(cfg.head_dim()));
    if (z0.ndim() != 2 || z0.dim(1) != d)
        throw std::invalid_argument("encoder_forward: expected [T x D] input, got " +
                                    z0.shape_string());
    if (capture) {
        capture->seq_len = z0.dim(0);
        capture->attn.assign(params.layers.size(), {});
    }
    TensorT<S> z = z0;
    for (size_t li = 0; li < params.layers.size(); ++li) {
        const auto& l = params.layers[li];
        auto h = layernorm(tape, z, l.ln1_gain, l.ln1_bias);
        auto qkv = matmul(tape, h, l.qkv);
        auto heads = multihead_attention(tape, qkv, k, inv_sqrt_dh,
                                         capture ? &capture->attn[li] : nullptr);
        auto msa = matmul(tape, heads, l.proj);
        z = add(tape, z, msa);
        auto h2 = layernorm(tape, z, l.ln2_gain, l.ln2_bias);
        auto mid = gelu(tape, add_bias(tape, matmul(tape, h2, l.mlp_w1), l.mlp_b1));
        auto mlp_out = add_bias(tape, matmul(tape, mid, l.mlp_w2), l.mlp_b2);
        z = add(tape, z, mlp_out);
    }
    return z;
}

// Full pipeline on pre-patchified input: embed -> encoder -> final layernorm
// on the action-token row -> two-layer head with GELU between.
template <typename S>
TensorT<S> q_values(TapeT<S>* tape, const TensorT<S>& patches, const EncoderParamsT<S>& params,
                    const ViTConfig& cfg, AttentionRecordT<S>* capture = nullptr) {
    auto z = encoder_forward(tape, embed(tape, patches, params), params, cfg, capture);
    // Layernorm is per-row, so normalizing just the action-token row equals
    // row 0 of normalizing the full sequence.
    auto tok = layernorm(tape, slice_rows(tape, z, 0, 1), params.final_ln_gain,
                         params.final_ln_bias);
    auto hidden = gelu(tape, add_bias(tape, matmul(tape, tok, params.head_w1), params.head_b1));
    return add_bias(tape, matmul(tape, hidden, params.head_w2), params.head_b2);
}

template <typename S>
TensorT<S> q_values(TapeT<S>* tape, const BEVFrame& frame, const EncoderParamsT<S>& params,
                    const ViTConfig& cfg, AttentionRecordT<S>* capture = nullptr) {
    return q_values(tape, patchify<S>(frame, cfg), params, cfg, capture);
}

// Q-network face of the ViT: what the DQN trainer drives. Also the unit the
// checkpoint format serializes.
template <typename S>
struct VitQModelT {
    ViTConfig cfg;
    EncoderParamsT<S> params;

    static VitQModelT init(const ViTConfig& cfg, uint64_t seed) {
        return {cfg, EncoderParamsT<S>::init(cfg, seed)};
    }

    TensorT<S> q_forward(TapeT<S>* tape, const BEVFrame& frame,
                         AttentionRecordT<S>* capture = nullptr) {
        return q_values(tape, frame, params, cfg, capture);
    }

    int num_actions() const { return cfg.num_actions; }

    void for_each_param(const std::function<void(const std::string&, TensorT<S>&)>& fn) {
        params.for_each(fn);
    }

    VitQModelT clone() { return {cfg, params.clone()}; }

    void copy_params_from(VitQModelT& o) { params.copy_values_from(o.params); }
};

using VitQModel = VitQModelT<float>;

// Action-token attention over patches for one layer: row 0 averaged over
// heads, self-entry dropped, renormalized to sum to 1. Length N.
template <typename S>
TensorT<S> action_attention(const AttentionRecordT<S>& record, int layer) {
    if (!record.captured())
        throw std::logic_error("action_attention: attention was not captured");
    if (layer < 0 || layer >= static_cast<int>(record.attn.size()))
        throw std::logic_error("action_attention: layer " + std::to_string(layer) +
                               " out of range");
    const int t = record.seq_len;
    const auto& heads = record.attn[static_cast<size_t>(layer)];
    std::vector<S> row(static_cast<size_t>(t), S(0));
    for (const auto& a : heads)
        for (int j = 0; j < t; ++j) row[static_cast<size_t>(j)] += a[static_cast<size_t>(j)];
    // Drop the action token's self-attention and renormalize over patches.
    std::vector<S> patch_attn(row.begin() + 1, row.end());
    S sum = S(0);
    for (S v : patch_attn) sum += v;
    for (S& v : patch_attn) v /= sum;
    return TensorT<S>::from_data({t - 1}, std::move(patch_attn));
}

}  // namespace vitdrive
