#pragma once

// Projection heads, prediction heads, and the local-group aggregation
// transformers. All heads are plain MLPs with GELU between layers and no
// activation after the last layer. The aggregator is a 2-layer pre-norm
// transformer with no patch embedding, no positional embeddings (neighbor
// order must not leak in), and no final norm, so a depth-0 build is the
// identity on the class slot.

#include <string>
#include <vector>

#include "mugs/params.hpp"
#include "mugs/rng.hpp"
#include "mugs/tensor.hpp"
#include "mugs/vit.hpp"

namespace mugs {

struct MlpHeadConfig {
    int64_t in_dim = 64;
    int64_t hidden_dim = 256;
    int64_t out_dim = 64;
    int64_t num_layers = 3;

    void validate() const {
        if (num_layers != 2 && num_layers != 3)
            throw ConfigError("MlpHeadConfig: num_layers must be 2 or 3, got " +
                              std::to_string(num_layers));
        if (in_dim < 1 || hidden_dim < 1 || out_dim < 1)
            throw ConfigError("MlpHeadConfig: dimensions must be positive");
    }
};

class MlpHead {
public:
    MlpHead() = default;

    MlpHead(MlpHeadConfig cfg, Rng& rng, bool trainable) : cfg_(cfg) {
        cfg_.validate();
        for (int64_t i = 0; i < cfg_.num_layers; ++i) {
            const int64_t in = (i == 0) ? cfg_.in_dim : cfg_.hidden_dim;
            const int64_t out = (i == cfg_.num_layers - 1) ? cfg_.out_dim : cfg_.hidden_dim;
            ws_.push_back(trunc_normal_param({in, out}, 0.02f, rng, trainable));
            bs_.push_back(const_param({out}, 0.0f, trainable));
        }
    }

    Tensor forward(const Tensor& x) const {
        detail::check(x.ndim() == 2 && x.dim(1) == cfg_.in_dim,
                      "MlpHead::forward: expected [b x " + std::to_string(cfg_.in_dim) + "], got " +
                          shape_str(x.shape()));
        Tensor h = x;
        for (size_t i = 0; i < ws_.size(); ++i) {
            h = linear(h, ws_[i], bs_[i]);
            if (i + 1 < ws_.size()) h = gelu(h);
        }
        return h;
    }

    void collect(ParamStore& ps, const std::string& prefix) const {
        for (size_t i = 0; i < ws_.size(); ++i) {
            ps.add(prefix + ".fc" + std::to_string(i) + ".w", ws_[i]);
            ps.add(prefix + ".fc" + std::to_string(i) + ".b", bs_[i]);
        }
    }

    const MlpHeadConfig& config() const { return cfg_; }

private:
    MlpHeadConfig cfg_;
    std::vector<Tensor> ws_, bs_;
};

class Aggregator {
public:
    Aggregator() = default;

    Aggregator(int64_t embed_dim, int64_t num_heads, int64_t k, Rng& rng, bool trainable,
               int64_t depth = 2, float mlp_ratio = 4.0f)
        : dim_(embed_dim), k_(k) {
        if (embed_dim < 1 || num_heads < 1 || embed_dim % num_heads != 0)
            throw ConfigError("Aggregator: embed_dim " + std::to_string(embed_dim) +
                              " must be divisible by num_heads " + std::to_string(num_heads));
        if (k < 1) throw ConfigError("Aggregator: k must be >= 1");
        for (int64_t i = 0; i < depth; ++i)
            blocks_.emplace_back(embed_dim, num_heads, mlp_ratio, rng, trainable);
    }

    // avg_token [b x d] fills the class slot; neighbors [b x k x d] fill the
    // token slots. Returns the transformed class slot (the local-group
    // feature).
    Tensor forward(const Tensor& avg_token, const Tensor& neighbors) const {
        detail::check(avg_token.ndim() == 2 && avg_token.dim(1) == dim_,
                      "Aggregator::forward: expected avg token [b x " + std::to_string(dim_) +
                          "], got " + shape_str(avg_token.shape()));
        detail::check(neighbors.ndim() == 3 && neighbors.dim(0) == avg_token.dim(0) &&
                          neighbors.dim(2) == dim_,
                      "Aggregator::forward: expected neighbors [b x k x " + std::to_string(dim_) +
                          "], got " + shape_str(neighbors.shape()));
        detail::check(neighbors.dim(1) == k_,
                      "Aggregator::forward: expected exactly " + std::to_string(k_) +
                          " neighbors per example, got " + std::to_string(neighbors.dim(1)));
        const int64_t b = avg_token.dim(0);
        Tensor seq = concat_tokens(reshape(avg_token, {b, 1, dim_}), neighbors);
        for (const auto& blk : blocks_) seq = blk.forward(seq, {}, {});
        return select_token(seq, 0);
    }

    void collect(ParamStore& ps, const std::string& prefix) const {
        for (size_t i = 0; i < blocks_.size(); ++i)
            blocks_[i].collect(ps, prefix + ".block" + std::to_string(i));
    }

    int64_t k() const { return k_; }
    int64_t dim() const { return dim_; }

private:
    int64_t dim_ = 0;
    int64_t k_ = 0;
    std::vector<TransformerBlock> blocks_;
};

}  // namespace mugs
