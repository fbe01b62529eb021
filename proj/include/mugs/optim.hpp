#pragma once

// Optimization machinery: cosine/linear schedules, global-norm gradient
// clipping, AdamW with decoupled weight decay and a per-parameter learning
// rate scale, and the EMA teacher update.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mugs/params.hpp"
#include "mugs/tensor.hpp"

namespace mugs {

// value of a half-cosine ramp from `start` (step 0) to `end` (step == total)
inline float cosine_value(int64_t step, int64_t total, float start, float end) {
    if (total <= 0) throw Error("cosine_value: total must be positive, got " + std::to_string(total));
    if (step < 0 || step > total)
        throw Error("cosine_value: step " + std::to_string(step) + " outside [0, " +
                    std::to_string(total) + "]");
    constexpr double kPi = 3.14159265358979323846;
    const double phase = std::cos(kPi * static_cast<double>(step) / static_cast<double>(total));
    return static_cast<float>(end + 0.5 * (static_cast<double>(start) - end) * (1.0 + phase));
}

// group-assignment temperature: linear warm-up, then flat
inline float temperature_tau_g(int64_t epoch, int64_t warmup_epochs_tau, float tau_start = 0.04f,
                               float tau_end = 0.07f) {
    if (epoch < 0) throw Error("temperature_tau_g: epoch must be nonnegative");
    if (warmup_epochs_tau <= 0 || epoch >= warmup_epochs_tau) return tau_end;
    return tau_start + (tau_end - tau_start) * static_cast<float>(epoch) /
                           static_cast<float>(warmup_epochs_tau);
}

// global L2 norm across every gradient in the store (absent grads count as 0)
inline float grad_global_norm(const ParamStore& params) {
    double sq = 0.0;
    for (const auto& [name, t] : params) {
        if (!t.has_grad()) continue;
        for (float g : t.grad()) sq += static_cast<double>(g) * g;
    }
    return static_cast<float>(std::sqrt(sq));
}

// scales all gradients so the global norm is at most max_norm; returns the factor
inline float clip_gradients(ParamStore& params, float max_norm) {
    if (!(max_norm > 0.0f)) throw Error("clip_gradients: max_norm must be positive");
    const float norm = grad_global_norm(params);
    if (norm <= max_norm) return 1.0f;
    const float factor = max_norm / norm;
    for (auto& [name, t] : params) {
        if (!t.has_grad()) continue;
        for (float& g : t.raw_grad()) g *= factor;
    }
    return factor;
}

struct AdamWConfig {
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.1f;
    // parameters whose name contains this substring get lr * lr_scale
    std::string scaled_group_substring = "patch_embed";
    float lr_scale = 0.2f;
};

// AdamW over a fixed parameter set. Decoupled decay runs first
// (theta -= lr*wd*theta), then the bias-corrected Adam update with eps added
// outside the square root: theta -= lr * m_hat / (sqrt(v_hat) + eps).
class AdamW {
public:
    struct Slot {
        std::string name;
        Tensor param;
        std::vector<float> exp_avg;     // first moment
        std::vector<float> exp_avg_sq;  // second moment
        float lr_scale = 1.0f;
    };

    AdamW() = default;

    AdamW(const ParamStore& params, AdamWConfig cfg = {}) : cfg_(cfg) {
        for (const auto& [name, t] : params) {
            Slot s;
            s.name = name;
            s.param = t;
            s.exp_avg.assign(t.data().size(), 0.0f);
            s.exp_avg_sq.assign(t.data().size(), 0.0f);
            if (!cfg_.scaled_group_substring.empty() &&
                name.find(cfg_.scaled_group_substring) != std::string::npos)
                s.lr_scale = cfg_.lr_scale;
            slots_.push_back(std::move(s));
        }
    }

    void step(float lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), t_);
        const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), t_);
        for (auto& s : slots_) {
            if (!s.param.has_grad()) continue;  // no gradient this step: frozen or unused
            const std::vector<float>& g = s.param.grad();
            std::vector<float>& w = s.param.raw_data();
            const float eff_lr = lr * s.lr_scale;
            for (size_t i = 0; i < w.size(); ++i) {
                if (!std::isfinite(g[i]))
                    throw Error("adamw_step: non-finite gradient in parameter '" + s.name + "'");
                w[i] -= eff_lr * cfg_.weight_decay * w[i];
                s.exp_avg[i] = cfg_.beta1 * s.exp_avg[i] + (1.0f - cfg_.beta1) * g[i];
                s.exp_avg_sq[i] = cfg_.beta2 * s.exp_avg_sq[i] + (1.0f - cfg_.beta2) * g[i] * g[i];
                const double m_hat = s.exp_avg[i] / bc1;
                const double v_hat = s.exp_avg_sq[i] / bc2;
                w[i] -= static_cast<float>(eff_lr * m_hat / (std::sqrt(v_hat) + cfg_.eps));
            }
        }
    }

    int64_t step_count() const { return t_; }
    void set_step_count(int64_t t) { t_ = t; }
    const std::vector<Slot>& slots() const { return slots_; }
    std::vector<Slot>& slots() { return slots_; }
    const AdamWConfig& config() const { return cfg_; }

private:
    AdamWConfig cfg_;
    std::vector<Slot> slots_;
    int64_t t_ = 0;
};

// theta_t <- m*theta_t + (1-m)*theta_s for every tracked tensor, matched by name
inline void ema_update_teacher(ParamStore& teacher, const ParamStore& student, float m_ema) {
    if (!(m_ema >= 0.0f && m_ema <= 1.0f))
        throw Error("ema_update_teacher: momentum must lie in [0,1]");
    if (teacher.size() != student.size())
        throw Error("ema_update_teacher: parameter count mismatch, teacher " +
                    std::to_string(teacher.size()) + " vs student " +
                    std::to_string(student.size()));
    for (size_t idx = 0; idx < teacher.size(); ++idx) {
        auto& [t_name, t] = teacher.entry(idx);
        const auto& [s_name, s] = student.entry(idx);
        if (t.shape() != s.shape())
            throw Error("ema_update_teacher: shape mismatch for '" + t_name + "' (" +
                        shape_str(t.shape()) + " vs " + shape_str(s.shape()) + ")");
        std::vector<float>& tw = t.raw_data();
        const std::vector<float>& sw = s.data();
        for (size_t i = 0; i < tw.size(); ++i) tw[i] = m_ema * tw[i] + (1.0f - m_ema) * sw[i];
    }
}

}  // namespace mugs
