#pragma once

// The three granular supervisions and the overall objective.
//
// Instance discrimination: InfoNCE between the teacher projection of one
// global crop and the student prediction of another crop, negatives drawn
// from the FIFO buffer B_in. Local-group discrimination: the same InfoNCE
// form over aggregated local-group features with negatives from B'_lg. Group
// discrimination: soft cross-entropy between a centered, sharpened teacher
// prototype assignment and the student assignment.
//
// Teacher quantities are always gradient-detached; buffers only ever hold
// detached copies, so no gradient can reach them.

#include <string>

#include "mugs/buffers.hpp"
#include "mugs/heads.hpp"
#include "mugs/params.hpp"
#include "mugs/rng.hpp"
#include "mugs/tensor.hpp"

namespace mugs {

struct SupervisionConfig {
    float tau_in = 0.2f;        // instance InfoNCE temperature
    float tau_lg = 0.2f;        // local-group InfoNCE temperature
    float tau_g_start = 0.04f;  // teacher group temperature, warmup start
    float tau_g_end = 0.07f;    // teacher group temperature after warmup
    float tau_g_prime = 0.1f;   // student group temperature
    float rho = 0.9f;           // center EMA momentum
    float lambda_in = 1.0f / 3.0f;
    float lambda_lg = 1.0f / 3.0f;
    float lambda_g = 1.0f / 3.0f;
    int64_t k = 8;
    int64_t num_prototypes = 1024;
    int64_t buffer_capacity = 4096;
    // Open question in the method: Eq. 4 as written uses raw dot products,
    // which is what runs by default; this flag switches to the normalized
    // variant for experimentation.
    bool normalize_group_logits = false;

    void validate() const {
        if (tau_in <= 0 || tau_lg <= 0 || tau_g_start <= 0 || tau_g_end <= 0 || tau_g_prime <= 0)
            throw ConfigError("SupervisionConfig: all temperatures must be positive");
        if (rho < 0 || rho > 1) throw ConfigError("SupervisionConfig: rho must be in [0, 1]");
        if (lambda_in < 0 || lambda_lg < 0 || lambda_g < 0)
            throw ConfigError("SupervisionConfig: loss weights must be nonnegative");
        if (k < 1) throw ConfigError("SupervisionConfig: k must be >= 1");
        if (num_prototypes < 1) throw ConfigError("SupervisionConfig: need at least one prototype");
        if (buffer_capacity < 1) throw ConfigError("SupervisionConfig: buffer capacity must be >= 1");
    }
};

// Prototypes, center, and the three FIFO buffers. Single writer: the trainer.
struct SupervisionState {
    SupervisionConfig cfg;
    Tensor prototypes;  // [m x d_out], learnable alongside the student
    Tensor center;      // [d_out] EMA of teacher group-head outputs, not optimized
    FifoBuffer b_in;      // teacher instance projections z1, d_out
    FifoBuffer b_lg;      // average patch tokens y-bar, backbone dim
    FifoBuffer b_lg_neg;  // teacher local-group projections, d_out

    SupervisionState() = default;

    SupervisionState(SupervisionConfig c, int64_t backbone_dim, int64_t d_out, Rng& rng,
                     bool trainable = true)
        : cfg(c),
          b_in(c.buffer_capacity, d_out),
          b_lg(c.buffer_capacity, backbone_dim),
          b_lg_neg(c.buffer_capacity, d_out) {
        cfg.validate();
        // plain normal init, std 0.02
        std::vector<float> proto(static_cast<size_t>(c.num_prototypes * d_out));
        for (auto& v : proto) v = static_cast<float>(rng.normal(0.0, 0.02));
        prototypes = Tensor::from_data({c.num_prototypes, d_out}, std::move(proto), trainable);
        center = Tensor::zeros({d_out}, false);
    }

    void collect(ParamStore& ps, const std::string& prefix) const {
        ps.add(prefix + ".prototypes", prototypes);
    }
};

// ---------------------------------------------------------------------------
// InfoNCE (Eq. 1 / Eq. 3 form)
// ---------------------------------------------------------------------------

// -log( e^{cos(z1,z2)/tau} / (e^{cos(z1,z2)/tau} + sum_z e^{cos(z2,z)/tau}) ),
// averaged over the batch. The negative terms compare against z2. Accepts
// [d] or [b x d] inputs; `negatives` may be undefined (no negative terms).
inline Tensor infonce(const Tensor& z1, const Tensor& z2, const Tensor& negatives, float tau) {
    if (tau <= 0.0f) throw ConfigError("infonce: temperature must be positive");
    Tensor a = z1.ndim() == 1 ? reshape(z1, {1, z1.dim(0)}) : z1;
    Tensor b = z2.ndim() == 1 ? reshape(z2, {1, z2.dim(0)}) : z2;
    detail::check(a.ndim() == 2 && a.shape() == b.shape(),
                  "infonce: z1 " + shape_str(z1.shape()) + " and z2 " + shape_str(z2.shape()) +
                      " must match");
    const int64_t bsz = a.dim(0);
    Tensor an = l2_normalize_rows(a);
    Tensor bn = l2_normalize_rows(b);
    Tensor pos = mul_scalar(rowwise_dot(an, bn), 1.0f / tau);  // [b]
    Tensor logits = reshape(pos, {bsz, 1});
    if (negatives.defined() && negatives.numel() > 0) {
        detail::check(negatives.ndim() == 2 && negatives.dim(1) == a.dim(1),
                      "infonce: negatives " + shape_str(negatives.shape()) +
                          " incompatible with features " + shape_str(a.shape()));
        Tensor neg_sims = mul_scalar(matmul_nt(bn, l2_normalize_rows(negatives)), 1.0f / tau);
        logits = concat_cols(logits, neg_sims);
    }
    return mean_all(sub(logsumexp_rows(logits), pos));
}

// ---------------------------------------------------------------------------
// instance discrimination (Eq. 1)
// ---------------------------------------------------------------------------

// z1 = h_in^t(y1c) (stop-gradient), z2 = p_in(h_in^s(y2c)); negatives are the
// current snapshot of B_in. An empty buffer degrades to the zero-negative
// InfoNCE (warm-up).
inline Tensor instance_loss(const MlpHead& h_in_t, const MlpHead& h_in_s, const MlpHead& p_in,
                            const Tensor& y1c, const Tensor& y2c, const FifoBuffer& b_in,
                            float tau) {
    Tensor z1 = h_in_t.forward(y1c).detach();
    Tensor z2 = p_in.forward(h_in_s.forward(y2c));
    Tensor negatives = b_in.fill() > 0 ? b_in.snapshot() : Tensor();
    return infonce(z1, z2, negatives, tau);
}

// ---------------------------------------------------------------------------
// local-group discrimination (Eqs. 2-3)
// ---------------------------------------------------------------------------

// Eq. 2: average the patch tokens, fetch top-k neighbors from B_lg, and
// aggregate. Neighbors are detached; gradient flows through the average
// token and the aggregator only.
inline Tensor local_group_features(const Tensor& patch_tokens, const FifoBuffer& b_lg, int64_t k,
                                   const Aggregator& agg) {
    detail::check(patch_tokens.ndim() == 3,
                  "local_group_features: expected [b x P x d], got " + shape_str(patch_tokens.shape()));
    const int64_t b = patch_tokens.dim(0), d = patch_tokens.dim(2);
    Tensor avg = mean_tokens(patch_tokens);  // [b x d]
    std::vector<float> neighbors(static_cast<size_t>(b * k * d));
    for (int64_t i = 0; i < b; ++i) {
        std::vector<float> q(avg.data().begin() + i * d, avg.data().begin() + (i + 1) * d);
        Tensor nb = b_lg.topk_neighbors(Tensor::from_data({d}, std::move(q)), k);
        std::memcpy(neighbors.data() + i * k * d, nb.data().data(),
                    static_cast<size_t>(k * d) * sizeof(float));
    }
    return agg.forward(avg, Tensor::from_data({b, k, d}, std::move(neighbors), false));
}

// Eq. 3: same InfoNCE form over aggregated features; negatives from B'_lg.
inline Tensor local_group_loss(const MlpHead& h_lg_t, const MlpHead& h_lg_s, const MlpHead& p_lg,
                               const Tensor& yhat1, const Tensor& yhat2, const FifoBuffer& b_neg,
                               float tau) {
    Tensor z1 = h_lg_t.forward(yhat1).detach();
    Tensor z2 = p_lg.forward(h_lg_s.forward(yhat2));
    Tensor negatives = b_neg.fill() > 0 ? b_neg.snapshot() : Tensor();
    return infonce(z1, z2, negatives, tau);
}

// ---------------------------------------------------------------------------
// group discrimination (Eqs. 4-5)
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor group_logits(const Tensor& h, const Tensor& prototypes, float tau, bool normalize) {
    Tensor feats = normalize ? l2_normalize_rows(h) : h;
    Tensor protos = normalize ? l2_normalize_rows(prototypes) : prototypes;
    return mul_scalar(matmul_nt(feats, protos), 1.0f / tau);
}

}  // namespace detail

// Eq. 4 left: p^t = softmax((h_g^t(y1c) - center) . C / tau_g), detached.
inline Tensor teacher_assignment(const MlpHead& h_g_t, const Tensor& y1c, const Tensor& prototypes,
                                 const Tensor& center, float tau_g, bool normalize = false) {
    if (tau_g <= 0.0f) throw ConfigError("teacher_assignment: temperature must be positive");
    Tensor h = h_g_t.forward(y1c).detach();
    Tensor centered = add_rowvec(h, mul_scalar(center, -1.0f));
    return softmax_rows(detail::group_logits(centered, prototypes.detach(), tau_g, normalize))
        .detach();
}

// Teacher group-head outputs before centering; feeds update_center.
inline Tensor teacher_group_features(const MlpHead& h_g_t, const Tensor& y1c) {
    return h_g_t.forward(y1c).detach();
}

// Eq. 4 right: p^s = softmax(h_g^s(y2c) . C / tau'_g); gradient reaches the
// student head and the prototypes.
inline Tensor student_assignment(const MlpHead& h_g_s, const Tensor& y2c, const Tensor& prototypes,
                                 float tau_g_prime, bool normalize = false) {
    if (tau_g_prime <= 0.0f) throw ConfigError("student_assignment: temperature must be positive");
    return softmax_rows(detail::group_logits(h_g_s.forward(y2c), prototypes, tau_g_prime, normalize));
}

// Eq. 5: soft cross-entropy -sum_i p^t_i log p^s_i, averaged over the batch.
inline Tensor group_loss(const Tensor& p_t, const Tensor& p_s) {
    detail::check(p_t.shape() == p_s.shape() && p_t.ndim() == 2,
                  "group_loss: assignments " + shape_str(p_t.shape()) + " vs " +
                      shape_str(p_s.shape()) + " must be matching [b x m]");
    return mean_all(neg(sum_rows(mul(p_t, log_clamped(p_s)))));
}

// EMA center update: center <- rho * center + (1 - rho) * batch mean of the
// pre-centering teacher head outputs.
inline void update_center(const Tensor& center, const Tensor& batch_ht, float rho) {
    detail::check(batch_ht.ndim() == 2 && batch_ht.dim(0) >= 1 && batch_ht.dim(1) == center.dim(0),
                  "update_center: batch " + shape_str(batch_ht.shape()) +
                      " incompatible with center " + shape_str(center.shape()));
    const int64_t b = batch_ht.dim(0), d = center.dim(0);
    auto& c = center.raw_data();
    for (int64_t j = 0; j < d; ++j) {
        float mean = 0.0f;
        for (int64_t i = 0; i < b; ++i) mean += batch_ht.data()[i * d + j];
        mean /= static_cast<float>(b);
        c[static_cast<size_t>(j)] = rho * c[static_cast<size_t>(j)] + (1.0f - rho) * mean;
    }
}

// Eq. 6: weighted sum of the three supervisions.
inline Tensor total_loss(const Tensor& l_in, const Tensor& l_lg, const Tensor& l_g,
                         float lambda_in, float lambda_lg, float lambda_g) {
    return add(add(mul_scalar(l_in, lambda_in), mul_scalar(l_lg, lambda_lg)),
               mul_scalar(l_g, lambda_g));
}

}  // namespace mugs
