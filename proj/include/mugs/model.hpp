#pragma once

// Full network assembly and the student/teacher pair.
//
// One Network = shared ViT backbone + local-group aggregator + the three
// projection heads (instance, local-group, group). The student additionally
// owns two prediction heads (instance and local-group branches); the group
// branch has no predictor — its student output meets the prototypes directly.
// The teacher is a gradient-free copy of the EMA-tracked subset, initialized
// equal to the student and thereafter updated only by ema_update_teacher.

#include <string>

#include "mugs/heads.hpp"
#include "mugs/optim.hpp"
#include "mugs/params.hpp"
#include "mugs/rng.hpp"
#include "mugs/tensor.hpp"
#include "mugs/vit.hpp"

namespace mugs {

struct NetworkConfig {
    ViTConfig vit;
    int64_t head_hidden_dim = 256;
    int64_t head_out_dim = 64;
    int64_t pred_hidden_dim = 256;
    int64_t agg_depth = 2;
    int64_t k = 8;  // local-group neighbor count

    void validate() const {
        vit.validate();
        if (head_hidden_dim < 1 || head_out_dim < 1 || pred_hidden_dim < 1)
            throw ConfigError("NetworkConfig: head dimensions must be positive");
        if (agg_depth < 0) throw ConfigError("NetworkConfig: agg_depth must be nonnegative");
        if (k < 1) throw ConfigError("NetworkConfig: k must be >= 1");
    }

    MlpHeadConfig projection_cfg() const {
        MlpHeadConfig c;
        c.in_dim = vit.embed_dim;
        c.hidden_dim = head_hidden_dim;
        c.out_dim = head_out_dim;
        c.num_layers = 3;
        return c;
    }

    MlpHeadConfig prediction_cfg() const {
        MlpHeadConfig c;
        c.in_dim = head_out_dim;
        c.hidden_dim = pred_hidden_dim;
        c.out_dim = head_out_dim;
        c.num_layers = 2;
        return c;
    }
};

// The EMA-tracked subset: backbone, aggregator, three projection heads.
// Construction consumes the RNG in this fixed order.
class Network {
public:
    Network() = default;

    Network(const NetworkConfig& cfg, Rng& rng, bool trainable) {
        cfg.validate();
        backbone = Backbone(cfg.vit, rng, trainable);
        agg = Aggregator(cfg.vit.embed_dim, cfg.vit.num_heads, cfg.k, rng, trainable,
                         cfg.agg_depth);
        h_in = MlpHead(cfg.projection_cfg(), rng, trainable);
        h_lg = MlpHead(cfg.projection_cfg(), rng, trainable);
        h_g = MlpHead(cfg.projection_cfg(), rng, trainable);
    }

    void collect(ParamStore& ps, const std::string& prefix) const {
        backbone.collect(ps, prefix + ".backbone");
        agg.collect(ps, prefix + ".agg");
        h_in.collect(ps, prefix + ".h_in");
        h_lg.collect(ps, prefix + ".h_lg");
        h_g.collect(ps, prefix + ".h_g");
    }

    Backbone backbone;
    Aggregator agg;
    MlpHead h_in, h_lg, h_g;
};

class ModelPair {
public:
    ModelPair() = default;

    ModelPair(const NetworkConfig& cfg, Rng& rng) : cfg_(cfg) {
        student_ = Network(cfg, rng, /*trainable=*/true);
        teacher_ = Network(cfg, rng, /*trainable=*/false);
        p_in_ = MlpHead(cfg.prediction_cfg(), rng, /*trainable=*/true);
        p_lg_ = MlpHead(cfg.prediction_cfg(), rng, /*trainable=*/true);
        copy_student_to_teacher();
    }

    Network& student() { return student_; }
    const Network& student() const { return student_; }
    Network& teacher() { return teacher_; }
    const Network& teacher() const { return teacher_; }
    MlpHead& p_in() { return p_in_; }
    const MlpHead& p_in() const { return p_in_; }
    MlpHead& p_lg() { return p_lg_; }
    const MlpHead& p_lg() const { return p_lg_; }
    const NetworkConfig& config() const { return cfg_; }

    // everything AdamW touches except the prototypes (those live in
    // SupervisionState and are appended by the trainer)
    ParamStore student_params() const {
        ParamStore ps;
        student_.collect(ps, "student");
        p_in_.collect(ps, "student.p_in");
        p_lg_.collect(ps, "student.p_lg");
        return ps;
    }

    ParamStore teacher_params() const {
        ParamStore ps;
        teacher_.collect(ps, "teacher");
        return ps;
    }

    // index-aligned stores with identical names for the EMA update
    ParamStore ema_tracked_student() const {
        ParamStore ps;
        student_.collect(ps, "net");
        return ps;
    }

    ParamStore ema_tracked_teacher() const {
        ParamStore ps;
        teacher_.collect(ps, "net");
        return ps;
    }

    void apply_ema(float m_ema) {
        ParamStore t = ema_tracked_teacher();
        ema_update_teacher(t, ema_tracked_student(), m_ema);
    }

    void copy_student_to_teacher() { apply_ema(0.0f); }

private:
    NetworkConfig cfg_;
    Network student_, teacher_;
    MlpHead p_in_, p_lg_;
};

}  // namespace mugs
