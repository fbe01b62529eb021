#pragma once

// Flat, versioned JSON run configuration. Unknown keys are hard errors so a
// typo can never silently fall back to a default. Defaults are the
// desk-scale training recipe.

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "mugs/augment.hpp"
#include "mugs/losses.hpp"
#include "mugs/model.hpp"
#include "mugs/tensor.hpp"
#include "mugs/vit.hpp"

namespace mugs {

constexpr int64_t kConfigVersion = 1;

struct TrainConfig {
    int64_t config_version = kConfigVersion;

    // run
    int64_t epochs = 50;
    int64_t batch_size = 32;
    uint64_t seed = 1;
    std::string dataset_dir = "data/synth";
    std::string out_dir = "runs/pretrain";
    int64_t checkpoint_every_epochs = 10;

    // optimization
    float base_lr = 2.5e-5f;
    float final_lr = 1e-6f;
    float warmup_start_lr = 1e-6f;
    int64_t warmup_epochs = 2;
    float weight_decay = 0.1f;
    float patch_embed_lr_scale = 0.2f;
    float clip_norm = 3.0f;
    float ema_momentum_start = 0.996f;
    float ema_momentum_end = 1.0f;

    // model
    int64_t image_size_global = 32;
    int64_t image_size_local = 16;
    int64_t patch_size = 4;
    int64_t embed_dim = 64;
    int64_t depth = 4;
    int64_t num_heads = 4;
    float mlp_ratio = 4.0f;
    float drop_path_rate = 0.1f;
    int64_t head_hidden_dim = 256;
    int64_t head_out_dim = 64;
    int64_t pred_hidden_dim = 256;
    int64_t agg_depth = 2;

    // supervision
    float tau_in = 0.2f;
    float tau_lg = 0.2f;
    float tau_g_start = 0.04f;
    float tau_g_end = 0.07f;
    int64_t tau_g_warmup_epochs = 15;
    float tau_g_prime = 0.1f;
    float rho = 0.9f;
    float lambda_in = 1.0f / 3.0f;
    float lambda_lg = 1.0f / 3.0f;
    float lambda_g = 1.0f / 3.0f;
    int64_t k = 8;
    int64_t num_prototypes = 1024;
    int64_t buffer_capacity = 4096;
    bool normalize_group_logits = false;

    // crops
    int64_t local_crops = 4;  // V
    float global_scale_lo = 0.25f;
    float global_scale_hi = 1.0f;
    float local_scale_lo = 0.05f;
    float local_scale_hi = 0.25f;

    void validate() const {
        if (config_version != kConfigVersion)
            throw ConfigError("config: unsupported config_version " +
                              std::to_string(config_version) + ", expected " +
                              std::to_string(kConfigVersion));
        if (epochs < 1) throw ConfigError("config: epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
        if (!(base_lr >= final_lr && final_lr >= 0.0f))
            throw ConfigError("config: need base_lr >= final_lr >= 0");
        if (warmup_epochs < 0 || warmup_epochs >= epochs)
            throw ConfigError("config: warmup_epochs must lie in [0, epochs)");
        if (clip_norm <= 0.0f) throw ConfigError("config: clip_norm must be positive");
        if (ema_momentum_start < 0.0f || ema_momentum_end > 1.0f ||
            ema_momentum_start > ema_momentum_end)
            throw ConfigError("config: ema momentum schedule must satisfy 0 <= start <= end <= 1");
        if (local_crops < 0) throw ConfigError("config: local_crops must be >= 0");
        if (tau_g_warmup_epochs < 0) throw ConfigError("config: tau_g_warmup_epochs must be >= 0");
        if (checkpoint_every_epochs < 1)
            throw ConfigError("config: checkpoint_every_epochs must be >= 1");
        if (!(global_scale_lo > 0 && global_scale_lo <= global_scale_hi && global_scale_hi <= 1))
            throw ConfigError("config: global crop scale range must satisfy 0 < lo <= hi <= 1");
        if (!(local_scale_lo > 0 && local_scale_lo <= local_scale_hi && local_scale_hi <= 1))
            throw ConfigError("config: local crop scale range must satisfy 0 < lo <= hi <= 1");
        vit_config().validate();
        network_config().validate();
        supervision_config().validate();
    }

    ViTConfig vit_config() const {
        ViTConfig v;
        v.image_size_global = image_size_global;
        v.image_size_local = image_size_local;
        v.patch_size = patch_size;
        v.embed_dim = embed_dim;
        v.depth = depth;
        v.num_heads = num_heads;
        v.mlp_ratio = mlp_ratio;
        v.drop_path_rate = drop_path_rate;
        return v;
    }

    NetworkConfig network_config() const {
        NetworkConfig n;
        n.vit = vit_config();
        n.head_hidden_dim = head_hidden_dim;
        n.head_out_dim = head_out_dim;
        n.pred_hidden_dim = pred_hidden_dim;
        n.agg_depth = agg_depth;
        n.k = k;
        return n;
    }

    SupervisionConfig supervision_config() const {
        SupervisionConfig s;
        s.tau_in = tau_in;
        s.tau_lg = tau_lg;
        s.tau_g_start = tau_g_start;
        s.tau_g_end = tau_g_end;
        s.tau_g_prime = tau_g_prime;
        s.rho = rho;
        s.lambda_in = lambda_in;
        s.lambda_lg = lambda_lg;
        s.lambda_g = lambda_g;
        s.k = k;
        s.num_prototypes = num_prototypes;
        s.buffer_capacity = buffer_capacity;
        s.normalize_group_logits = normalize_group_logits;
        return s;
    }

    AugmentPolicy teacher_policy() const {
        return weak_policy(image_size_global, global_scale_lo, global_scale_hi);
    }

    AugmentPolicy student_policy() const {
        return strong_policy(image_size_local, local_scale_lo, local_scale_hi);
    }

    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
    static TrainConfig from_file(const std::string& path);
};

namespace detail {

// single field table so serialization, parsing, and the unknown-key check
// can never drift apart
template <typename Visitor>
void visit_config_fields(TrainConfig& c, Visitor&& v) {
    v("config_version", c.config_version);
    v("epochs", c.epochs);
    v("batch_size", c.batch_size);
    v("seed", c.seed);
    v("dataset_dir", c.dataset_dir);
    v("out_dir", c.out_dir);
    v("checkpoint_every_epochs", c.checkpoint_every_epochs);
    v("base_lr", c.base_lr);
    v("final_lr", c.final_lr);
    v("warmup_start_lr", c.warmup_start_lr);
    v("warmup_epochs", c.warmup_epochs);
    v("weight_decay", c.weight_decay);
    v("patch_embed_lr_scale", c.patch_embed_lr_scale);
    v("clip_norm", c.clip_norm);
    v("ema_momentum_start", c.ema_momentum_start);
    v("ema_momentum_end", c.ema_momentum_end);
    v("image_size_global", c.image_size_global);
    v("image_size_local", c.image_size_local);
    v("patch_size", c.patch_size);
    v("embed_dim", c.embed_dim);
    v("depth", c.depth);
    v("num_heads", c.num_heads);
    v("mlp_ratio", c.mlp_ratio);
    v("drop_path_rate", c.drop_path_rate);
    v("head_hidden_dim", c.head_hidden_dim);
    v("head_out_dim", c.head_out_dim);
    v("pred_hidden_dim", c.pred_hidden_dim);
    v("agg_depth", c.agg_depth);
    v("tau_in", c.tau_in);
    v("tau_lg", c.tau_lg);
    v("tau_g_start", c.tau_g_start);
    v("tau_g_end", c.tau_g_end);
    v("tau_g_warmup_epochs", c.tau_g_warmup_epochs);
    v("tau_g_prime", c.tau_g_prime);
    v("rho", c.rho);
    v("lambda_in", c.lambda_in);
    v("lambda_lg", c.lambda_lg);
    v("lambda_g", c.lambda_g);
    v("k", c.k);
    v("num_prototypes", c.num_prototypes);
    v("buffer_capacity", c.buffer_capacity);
    v("normalize_group_logits", c.normalize_group_logits);
    v("local_crops", c.local_crops);
    v("global_scale_lo", c.global_scale_lo);
    v("global_scale_hi", c.global_scale_hi);
    v("local_scale_lo", c.local_scale_lo);
    v("local_scale_hi", c.local_scale_hi);
}

}  // namespace detail

inline nlohmann::json TrainConfig::to_json() const {
    nlohmann::json j;
    detail::visit_config_fields(const_cast<TrainConfig&>(*this),
                                [&](const char* key, auto& field) { j[key] = field; });
    return j;
}

inline TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config: expected a JSON object");
    TrainConfig c;
    std::set<std::string> known;
    detail::visit_config_fields(c, [&](const char* key, auto& field) {
        known.insert(key);
        if (!j.contains(key)) return;
        try {
            field = j.at(key).get<std::decay_t<decltype(field)>>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("config: bad value for key '") + key + "': " + e.what());
        }
    });
    for (const auto& [key, value] : j.items())
        if (known.find(key) == known.end())
            throw ConfigError("config: unknown key '" + key + "'");
    c.validate();
    return c;
}

inline TrainConfig TrainConfig::from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config: " + path + " is not valid JSON: " + e.what());
    }
    return from_json(j);
}

}  // namespace mugs
