#pragma once

// Small vision transformer backbone. One weight set serves both crop sizes:
// positional embeddings are stored at global resolution and bilinearly
// resampled for any other token grid.

#include <array>
#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "mugs/params.hpp"
#include "mugs/rng.hpp"
#include "mugs/tensor.hpp"

namespace mugs {

struct ViTConfig {
    int64_t image_size_global = 32;
    int64_t image_size_local = 16;
    int64_t patch_size = 4;
    int64_t embed_dim = 64;
    int64_t depth = 4;
    int64_t num_heads = 4;
    float mlp_ratio = 4.0f;
    float drop_path_rate = 0.1f;

    void validate() const {
        if (patch_size < 1 || image_size_global % patch_size != 0 || image_size_local % patch_size != 0)
            throw ConfigError("ViTConfig: crop sizes " + std::to_string(image_size_global) + "/" +
                              std::to_string(image_size_local) + " must be divisible by patch size " +
                              std::to_string(patch_size));
        if (embed_dim < 1 || num_heads < 1 || embed_dim % num_heads != 0)
            throw ConfigError("ViTConfig: embed_dim " + std::to_string(embed_dim) +
                              " must be divisible by num_heads " + std::to_string(num_heads));
        if (depth < 0) throw ConfigError("ViTConfig: depth must be >= 0");
        if (drop_path_rate < 0.0f || drop_path_rate >= 1.0f)
            throw ConfigError("ViTConfig: drop_path_rate must be in [0, 1)");
    }

    int64_t grid_global() const { return image_size_global / patch_size; }
    int64_t grid_local() const { return image_size_local / patch_size; }
    int64_t patches_global() const { return grid_global() * grid_global(); }
    int64_t patches_local() const { return grid_local() * grid_local(); }
    int64_t patch_dim() const { return patch_size * patch_size * 3; }
};

struct BackboneOutput {
    Tensor class_token;   // [b x d]
    Tensor patch_tokens;  // [b x P x d]
};

// images [b x H x W x 3] -> [b x P x (patch^2 * 3)], patches in row-major
// patch order, pixels flattened row-major with channel innermost.
inline Tensor patchify(const Tensor& images, int64_t patch) {
    detail::check(images.ndim() == 4 && images.dim(3) == 3,
                  "patchify: expected [b x H x W x 3], got " + shape_str(images.shape()));
    const int64_t b = images.dim(0), H = images.dim(1), W = images.dim(2);
    detail::check(patch >= 1 && H % patch == 0 && W % patch == 0,
                  "patchify: image " + std::to_string(H) + "x" + std::to_string(W) +
                      " not divisible by patch size " + std::to_string(patch));
    const int64_t gh = H / patch, gw = W / patch, P = gh * gw, pd = patch * patch * 3;
    const int64_t row_bytes = patch * 3;
    std::vector<float> out(static_cast<size_t>(b * P * pd));
    const float* src = images.data().data();
    for (int64_t i = 0; i < b; ++i)
        for (int64_t pr = 0; pr < gh; ++pr)
            for (int64_t pc = 0; pc < gw; ++pc) {
                float* dst = out.data() + ((i * P + pr * gw + pc) * pd);
                for (int64_t r = 0; r < patch; ++r)
                    std::memcpy(dst + r * row_bytes,
                                src + ((i * H + pr * patch + r) * W + pc * patch) * 3,
                                static_cast<size_t>(row_bytes) * sizeof(float));
            }
    auto in = images.node();
    return detail::make_op({b, P, pd}, std::move(out), {images},
                           [in, b, H, W, gh, gw, P, pd, patch, row_bytes](detail::Node& self) {
        in->ensure_grad();
        for (int64_t i = 0; i < b; ++i)
            for (int64_t pr = 0; pr < gh; ++pr)
                for (int64_t pc = 0; pc < gw; ++pc) {
                    const float* g = self.grad.data() + ((i * P + pr * gw + pc) * pd);
                    for (int64_t r = 0; r < patch; ++r) {
                        float* dst = in->grad.data() + ((i * H + pr * patch + r) * W + pc * patch) * 3;
                        for (int64_t j = 0; j < row_bytes; ++j) dst[j] += g[r * row_bytes + j];
                    }
                }
    });
}

namespace detail {

// Sampling plan for one bilinear resize of a square grid (align_corners=false
// convention; reduces to the identity when sizes match).
struct BilinearPlan {
    struct Tap {
        int64_t src;
        float w;
    };
    std::vector<std::array<Tap, 4>> taps;  // one entry per destination cell
};

inline BilinearPlan bilinear_plan(int64_t src_side, int64_t dst_side) {
    BilinearPlan plan;
    plan.taps.resize(static_cast<size_t>(dst_side * dst_side));
    const float scale = static_cast<float>(src_side) / static_cast<float>(dst_side);
    auto axis = [&](int64_t i, int64_t& lo, int64_t& hi, float& frac) {
        float x = (static_cast<float>(i) + 0.5f) * scale - 0.5f;
        x = std::max(0.0f, std::min(x, static_cast<float>(src_side - 1)));
        lo = static_cast<int64_t>(std::floor(x));
        hi = std::min(lo + 1, src_side - 1);
        frac = x - static_cast<float>(lo);
    };
    for (int64_t r = 0; r < dst_side; ++r) {
        int64_t r0, r1;
        float fr;
        axis(r, r0, r1, fr);
        for (int64_t c = 0; c < dst_side; ++c) {
            int64_t c0, c1;
            float fc;
            axis(c, c0, c1, fc);
            auto& t = plan.taps[static_cast<size_t>(r * dst_side + c)];
            t[0] = {r0 * src_side + c0, (1 - fr) * (1 - fc)};
            t[1] = {r0 * src_side + c1, (1 - fr) * fc};
            t[2] = {r1 * src_side + c0, fr * (1 - fc)};
            t[3] = {r1 * src_side + c1, fr * fc};
        }
    }
    return plan;
}

}  // namespace detail

// pos [(1+P0) x d] -> [(1+target_P) x d]; class row copied exactly, grid rows
// bilinearly resampled. Differentiable so locals can train the embeddings.
inline Tensor interpolate_pos_embed(const Tensor& pos, int64_t target_P) {
    detail::check(pos.ndim() == 2 && pos.dim(0) >= 2,
                  "interpolate_pos_embed: expected [(1+P0) x d], got " + shape_str(pos.shape()));
    const int64_t P0 = pos.dim(0) - 1, d = pos.dim(1);
    const auto side0 = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(P0))));
    const auto side1 = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(target_P))));
    detail::check(side0 * side0 == P0 && side1 * side1 == target_P && target_P >= 1,
                  "interpolate_pos_embed: token counts " + std::to_string(P0) + " and " +
                      std::to_string(target_P) + " must be perfect squares");
    if (target_P == P0) return reshape(pos, {1 + P0, d});

    auto plan = std::make_shared<detail::BilinearPlan>(detail::bilinear_plan(side0, side1));
    std::vector<float> out(static_cast<size_t>((1 + target_P) * d));
    const float* src = pos.data().data();
    std::memcpy(out.data(), src, static_cast<size_t>(d) * sizeof(float));
    for (int64_t i = 0; i < target_P; ++i) {
        float* dst = out.data() + (1 + i) * d;
        for (const auto& tap : plan->taps[static_cast<size_t>(i)]) {
            const float* row = src + (1 + tap.src) * d;
            for (int64_t j = 0; j < d; ++j) dst[j] += tap.w * row[j];
        }
    }
    auto pn = pos.node();
    return detail::make_op({1 + target_P, d}, std::move(out), {pos},
                           [pn, plan, target_P, d](detail::Node& self) {
        pn->ensure_grad();
        for (int64_t j = 0; j < d; ++j) pn->grad[j] += self.grad[j];
        for (int64_t i = 0; i < target_P; ++i) {
            const float* g = self.grad.data() + (1 + i) * d;
            for (const auto& tap : plan->taps[static_cast<size_t>(i)])
                for (int64_t j = 0; j < d; ++j) pn->grad[(1 + tap.src) * d + j] += tap.w * g[j];
        }
    });
}

// Pre-norm transformer block, reused by the backbone and the local-group
// aggregators. Drop-path weights are per-example multipliers on each residual
// branch; pass empty vectors to disable (eval mode).
struct TransformerBlock {
    int64_t dim = 0;
    int64_t heads = 0;
    Tensor ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b;
    Tensor ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;

    TransformerBlock() = default;

    TransformerBlock(int64_t d, int64_t num_heads, float mlp_ratio, Rng& rng, bool trainable)
        : dim(d), heads(num_heads) {
        const auto hidden = static_cast<int64_t>(std::lround(static_cast<double>(d) * mlp_ratio));
        ln1_g = const_param({d}, 1.0f, trainable);
        ln1_b = const_param({d}, 0.0f, trainable);
        qkv_w = trunc_normal_param({d, 3 * d}, 0.02f, rng, trainable);
        qkv_b = const_param({3 * d}, 0.0f, trainable);
        proj_w = trunc_normal_param({d, d}, 0.02f, rng, trainable);
        proj_b = const_param({d}, 0.0f, trainable);
        ln2_g = const_param({d}, 1.0f, trainable);
        ln2_b = const_param({d}, 0.0f, trainable);
        fc1_w = trunc_normal_param({d, hidden}, 0.02f, rng, trainable);
        fc1_b = const_param({hidden}, 0.0f, trainable);
        fc2_w = trunc_normal_param({hidden, d}, 0.02f, rng, trainable);
        fc2_b = const_param({d}, 0.0f, trainable);
    }

    Tensor forward(const Tensor& x, const std::vector<float>& drop_attn,
                   const std::vector<float>& drop_mlp) const {
        const int64_t B = x.dim(0), T = x.dim(1), dh = dim / heads;
        Tensor h = layer_norm(x, ln1_g, ln1_b);
        Tensor qkv = reshape(linear(h, qkv_w, qkv_b), {B * T, 3 * dim});
        Tensor q = split_heads(reshape(slice_cols(qkv, 0, dim), {B, T, dim}), heads);
        Tensor k = split_heads(reshape(slice_cols(qkv, dim, dim), {B, T, dim}), heads);
        Tensor v = split_heads(reshape(slice_cols(qkv, 2 * dim, dim), {B, T, dim}), heads);
        Tensor scores = mul_scalar(bmm_nt(q, k), 1.0f / std::sqrt(static_cast<float>(dh)));
        Tensor mixed = merge_heads(bmm(softmax_rows(scores), v), heads);
        Tensor attn_out = linear(mixed, proj_w, proj_b);
        if (!drop_attn.empty()) attn_out = scale_examples(attn_out, drop_attn);
        Tensor x1 = add(x, attn_out);

        Tensor m = layer_norm(x1, ln2_g, ln2_b);
        m = linear(gelu(linear(m, fc1_w, fc1_b)), fc2_w, fc2_b);
        if (!drop_mlp.empty()) m = scale_examples(m, drop_mlp);
        return add(x1, m);
    }

    void collect(ParamStore& ps, const std::string& prefix) const {
        ps.add(prefix + ".ln1.g", ln1_g);
        ps.add(prefix + ".ln1.b", ln1_b);
        ps.add(prefix + ".qkv.w", qkv_w);
        ps.add(prefix + ".qkv.b", qkv_b);
        ps.add(prefix + ".proj.w", proj_w);
        ps.add(prefix + ".proj.b", proj_b);
        ps.add(prefix + ".ln2.g", ln2_g);
        ps.add(prefix + ".ln2.b", ln2_b);
        ps.add(prefix + ".fc1.w", fc1_w);
        ps.add(prefix + ".fc1.b", fc1_b);
        ps.add(prefix + ".fc2.w", fc2_w);
        ps.add(prefix + ".fc2.b", fc2_b);
    }
};

// Per-sample stochastic depth: keep with probability 1-rate and scale kept
// samples by 1/(1-rate) so the expectation is unchanged.
inline std::vector<float> drop_path_weights(int64_t batch, float rate, Rng& rng) {
    std::vector<float> w(static_cast<size_t>(batch), 1.0f);
    if (rate <= 0.0f) return w;
    const float keep_scale = 1.0f / (1.0f - rate);
    for (auto& v : w) v = rng.bernoulli(rate) ? 0.0f : keep_scale;
    return w;
}

class Backbone {
public:
    Backbone() = default;

    Backbone(ViTConfig cfg, Rng& rng, bool trainable) : cfg_(cfg) {
        cfg_.validate();
        const int64_t d = cfg_.embed_dim;
        patch_w_ = trunc_normal_param({cfg_.patch_dim(), d}, 0.02f, rng, trainable);
        patch_b_ = const_param({d}, 0.0f, trainable);
        cls_ = trunc_normal_param({d}, 0.02f, rng, trainable);
        pos_ = trunc_normal_param({1 + cfg_.patches_global(), d}, 0.02f, rng, trainable);
        for (int64_t i = 0; i < cfg_.depth; ++i)
            blocks_.emplace_back(d, cfg_.num_heads, cfg_.mlp_ratio, rng, trainable);
        ln_g_ = const_param({d}, 1.0f, trainable);
        ln_b_ = const_param({d}, 0.0f, trainable);
    }

    // drop_rng == nullptr selects eval mode (no stochastic depth).
    BackboneOutput forward(const Tensor& images, Rng* drop_rng = nullptr) const {
        detail::check(images.ndim() == 4 && images.dim(3) == 3,
                      "Backbone::forward: expected [b x S x S x 3], got " + shape_str(images.shape()));
        const int64_t S = images.dim(1);
        detail::check(images.dim(2) == S &&
                          (S == cfg_.image_size_global || S == cfg_.image_size_local),
                      "Backbone::forward: unknown crop size " + std::to_string(S) + "x" +
                          std::to_string(images.dim(2)) + ", expected " +
                          std::to_string(cfg_.image_size_global) + " or " +
                          std::to_string(cfg_.image_size_local));
        const int64_t b = images.dim(0);
        const int64_t P = (S / cfg_.patch_size) * (S / cfg_.patch_size);

        Tensor tok = linear(patchify(images, cfg_.patch_size), patch_w_, patch_b_);
        Tensor seq = prepend_class_token(cls_, tok);
        seq = add_tokens_broadcast(seq, interpolate_pos_embed(pos_, P));
        for (size_t i = 0; i < blocks_.size(); ++i) {
            const float rate = block_drop_rate(static_cast<int64_t>(i));
            std::vector<float> w_attn, w_mlp;
            if (drop_rng != nullptr && rate > 0.0f) {
                w_attn = drop_path_weights(b, rate, *drop_rng);
                w_mlp = drop_path_weights(b, rate, *drop_rng);
            }
            seq = blocks_[i].forward(seq, w_attn, w_mlp);
        }
        seq = layer_norm(seq, ln_g_, ln_b_);
        return {select_token(seq, 0), slice_tokens(seq, 1, P)};
    }

    // Stochastic depth rate grows linearly over the blocks up to the
    // configured maximum, the usual small-ViT schedule.
    float block_drop_rate(int64_t i) const {
        if (cfg_.depth <= 1) return cfg_.depth == 1 ? cfg_.drop_path_rate : 0.0f;
        return cfg_.drop_path_rate * static_cast<float>(i) / static_cast<float>(cfg_.depth - 1);
    }

    void collect(ParamStore& ps, const std::string& prefix) const {
        ps.add(prefix + ".patch_embed.w", patch_w_);
        ps.add(prefix + ".patch_embed.b", patch_b_);
        ps.add(prefix + ".cls", cls_);
        ps.add(prefix + ".pos", pos_);
        for (size_t i = 0; i < blocks_.size(); ++i)
            blocks_[i].collect(ps, prefix + ".block" + std::to_string(i));
        ps.add(prefix + ".ln.g", ln_g_);
        ps.add(prefix + ".ln.b", ln_b_);
    }

    const ViTConfig& config() const { return cfg_; }
    const Tensor& class_token_param() const { return cls_; }
    const Tensor& pos_param() const { return pos_; }
    const Tensor& final_ln_gamma() const { return ln_g_; }
    const Tensor& final_ln_beta() const { return ln_b_; }

private:
    ViTConfig cfg_;
    Tensor patch_w_, patch_b_, cls_, pos_;
    std::vector<TransformerBlock> blocks_;
    Tensor ln_g_, ln_b_;
};

}  // namespace mugs
