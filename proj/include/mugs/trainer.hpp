#pragma once

// Pretraining orchestration: multi-crop batch assembly, the 2(V+1)-term loss,
// the ordered update sequence, metrics, and checkpoint plumbing.
//
// Per-step effect order is fixed: (1) forward, (2) backward, (3) clip,
// (4) AdamW on student + prototypes, (5) EMA teacher update, (6) center
// update, (7) buffer pushes. Losses therefore always compare against the
// buffer contents from *before* this step's enqueue.
//
// Every random stream (augmentation, drop-path, epoch shuffling) is derived
// statelessly from (seed, step/epoch, slot), so a resumed run replays the
// exact byte sequence of an uninterrupted one.

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "mugs/augment.hpp"
#include "mugs/checkpoint.hpp"
#include "mugs/config.hpp"
#include "mugs/dataset.hpp"
#include "mugs/losses.hpp"
#include "mugs/model.hpp"
#include "mugs/optim.hpp"
#include "mugs/rng.hpp"
#include "mugs/tensor.hpp"

namespace mugs {

namespace detail {
// stream tags for stateless seed derivation
constexpr uint64_t kSeedInit = 0x696e6974;     // model init
constexpr uint64_t kSeedProto = 0x70726f74;    // prototype init
constexpr uint64_t kSeedAugment = 0x61756721;  // per-sample crops
constexpr uint64_t kSeedDrop = 0x64726f70;     // per-step drop-path
constexpr uint64_t kSeedShuffle = 0x73687566;  // per-epoch batch order
}  // namespace detail

struct StepMetrics {
    int64_t step = 0;
    int64_t epoch = 0;
    float loss_total = 0.0f;
    float loss_instance = 0.0f;
    float loss_local_group = 0.0f;
    float loss_group = 0.0f;
    float lr = 0.0f;
    float tau_g = 0.0f;
    float ema_momentum = 0.0f;
    float grad_norm = 0.0f;
    bool local_group_active = false;
};

class MetricsWriter {
public:
    MetricsWriter() = default;

    explicit MetricsWriter(const std::string& path, bool append = false) : path_(path) {
        const bool write_header = !append || !std::filesystem::exists(path);
        os_.open(path, append ? std::ios::app : std::ios::trunc);
        if (!os_) throw Error("metrics: cannot open for writing: " + path);
        if (write_header)
            os_ << "step,epoch,loss_total,loss_instance,loss_local_group,loss_group,lr,tau_g,"
                   "ema_momentum,grad_norm\n";
    }

    void write(const StepMetrics& m) {
        char buf[512];
        std::snprintf(buf, sizeof(buf),
                      "%" PRId64 ",%" PRId64 ",%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", m.step,
                      m.epoch, static_cast<double>(m.loss_total),
                      static_cast<double>(m.loss_instance),
                      static_cast<double>(m.loss_local_group), static_cast<double>(m.loss_group),
                      static_cast<double>(m.lr), static_cast<double>(m.tau_g),
                      static_cast<double>(m.ema_momentum), static_cast<double>(m.grad_norm));
        os_ << buf;
        if (!os_) throw Error("metrics: write failed: " + path_);
    }

    void flush() { os_.flush(); }

private:
    std::string path_;
    std::ofstream os_;
};

class Trainer {
public:
    explicit Trainer(const TrainConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        Rng init_rng(derive_seed(cfg_.seed, {detail::kSeedInit}));
        pair_ = ModelPair(cfg_.network_config(), init_rng);
        Rng proto_rng(derive_seed(cfg_.seed, {detail::kSeedProto}));
        state_ = SupervisionState(cfg_.supervision_config(), cfg_.embed_dim, cfg_.head_out_dim,
                                  proto_rng, /*trainable=*/true);
        opt_params_ = pair_.student_params();
        state_.collect(opt_params_, "state");
        AdamWConfig ac;
        ac.weight_decay = cfg_.weight_decay;
        ac.lr_scale = cfg_.patch_embed_lr_scale;
        opt_ = AdamW(opt_params_, ac);
    }

    void attach_dataset(Dataset ds) {
        if (ds.count < cfg_.batch_size)
            throw Error("trainer: dataset has " + std::to_string(ds.count) +
                        " images, need at least one batch of " + std::to_string(cfg_.batch_size));
        dataset_ = std::move(ds);
        stats_ = compute_dataset_stats(dataset_);
    }

    void load_dataset_from_config() { attach_dataset(load_dataset(cfg_.dataset_dir)); }

    int64_t steps_per_epoch() const {
        if (dataset_.count == 0) throw Error("trainer: no dataset attached");
        return dataset_.count / cfg_.batch_size;
    }
    int64_t total_steps() const { return steps_per_epoch() * cfg_.epochs; }
    int64_t step() const { return step_; }

    float lr_at(int64_t s) const {
        const int64_t warmup = cfg_.warmup_epochs * steps_per_epoch();
        if (warmup > 0 && s < warmup)
            return cfg_.warmup_start_lr + (cfg_.base_lr - cfg_.warmup_start_lr) *
                                              static_cast<float>(s) / static_cast<float>(warmup);
        const int64_t decay_total = total_steps() - warmup;
        if (decay_total <= 0) return cfg_.base_lr;
        return cosine_value(std::min(s - warmup, decay_total), decay_total, cfg_.base_lr,
                            cfg_.final_lr);
    }

    float ema_at(int64_t s) const {
        const int64_t total = std::max<int64_t>(total_steps(), 1);
        return cosine_value(std::min(s, total), total, cfg_.ema_momentum_start,
                            cfg_.ema_momentum_end);
    }

    float tau_g_at(int64_t epoch) const {
        return temperature_tau_g(epoch, cfg_.tau_g_warmup_epochs, cfg_.tau_g_start,
                                 cfg_.tau_g_end);
    }

    ModelPair& pair() { return pair_; }
    const ModelPair& pair() const { return pair_; }
    SupervisionState& state() { return state_; }
    const SupervisionState& state() const { return state_; }
    ParamStore& optimized_params() { return opt_params_; }
    AdamW& optimizer() { return opt_; }
    const Dataset& dataset() const { return dataset_; }
    const NormalizeStats& stats() const { return stats_; }
    const TrainConfig& config() const { return cfg_; }

    // assembles one image's multi-crop set with its stateless per-sample seed
    CropSet crops_for(int64_t step_idx, int64_t slot, int64_t dataset_index) const {
        Rng rng(derive_seed(cfg_.seed, {detail::kSeedAugment, static_cast<uint64_t>(step_idx),
                                        static_cast<uint64_t>(slot)}));
        return multi_crop(dataset_.view(dataset_index), rng, cfg_.teacher_policy(),
                          cfg_.student_policy(), cfg_.local_crops, stats_);
    }

    StepMetrics train_step(const std::vector<int64_t>& batch_indices) {
        const int64_t b = static_cast<int64_t>(batch_indices.size());
        if (b < 1) throw Error("train_step: empty batch");
        const int64_t V = cfg_.local_crops;
        const int64_t epoch = step_ / steps_per_epoch();
        const float lr = lr_at(step_);
        const float m_ema = ema_at(step_);
        const float tau_g_now = tau_g_at(epoch);

        // ---- (1) forward: crops, teacher on globals, student on everything
        std::vector<Tensor> crops = assemble_crops(batch_indices);  // [0,1]=globals, rest locals

        const Network& t_net = pair_.teacher();
        const Network& s_net = pair_.student();
        const bool warm = state_.b_lg.fill() >= cfg_.k;  // local-group neighbors available
        const bool in_on = cfg_.lambda_in > 0.0f;
        const bool lg_on = cfg_.lambda_lg > 0.0f && warm;
        const bool g_on = cfg_.lambda_g > 0.0f;

        BackboneOutput t_out[2] = {t_net.backbone.forward(crops[0]),
                                   t_net.backbone.forward(crops[1])};
        Tensor z_t[2], yhat_t[2], zlg_t[2], hg_t[2], p_t[2];
        for (int g = 0; g < 2; ++g) {
            z_t[g] = t_net.h_in.forward(t_out[g].class_token).detach();
            if (warm) {
                // teacher local-group maintenance runs whenever neighbors
                // exist, independent of lambda_lg: B'_lg must keep filling
                yhat_t[g] = local_group_features(t_out[g].patch_tokens, state_.b_lg, cfg_.k,
                                                 t_net.agg);
                zlg_t[g] = t_net.h_lg.forward(yhat_t[g]).detach();
            }
            hg_t[g] = teacher_group_features(t_net.h_g, t_out[g].class_token);
            if (g_on)
                p_t[g] = teacher_assignment(t_net.h_g, t_out[g].class_token, state_.prototypes,
                                            state_.center, tau_g_now);
        }

        Rng drop_rng(derive_seed(cfg_.seed, {detail::kSeedDrop, static_cast<uint64_t>(step_)}));
        const int64_t n_crops = 2 + V;
        std::vector<Tensor> zin_s(n_crops), zlg_s(n_crops), p_s(n_crops);
        Tensor avg_s_g2;
        for (int64_t c = 0; c < n_crops; ++c) {
            BackboneOutput out = s_net.backbone.forward(crops[static_cast<size_t>(c)], &drop_rng);
            if (in_on)
                zin_s[static_cast<size_t>(c)] =
                    pair_.p_in().forward(s_net.h_in.forward(out.class_token));
            if (lg_on)
                zlg_s[static_cast<size_t>(c)] = pair_.p_lg().forward(s_net.h_lg.forward(
                    local_group_features(out.patch_tokens, state_.b_lg, cfg_.k, s_net.agg)));
            if (g_on)
                p_s[static_cast<size_t>(c)] = student_assignment(
                    s_net.h_g, out.class_token, state_.prototypes, cfg_.tau_g_prime);
            if (c == 1) avg_s_g2 = mean_tokens(out.patch_tokens).detach();
        }

        // ---- loss terms: every (teacher global g, student crop c != g) pair
        Tensor neg_in = state_.b_in.fill() > 0 ? state_.b_in.snapshot() : Tensor();
        Tensor neg_lg = state_.b_lg_neg.fill() > 0 ? state_.b_lg_neg.snapshot() : Tensor();
        Tensor sum_in, sum_lg, sum_g;
        int64_t n_terms = 0;
        auto accumulate = [](Tensor& acc, const Tensor& term) {
            acc = acc.defined() ? add(acc, term) : term;
        };
        for (int g = 0; g < 2; ++g)
            for (int64_t c = 0; c < n_crops; ++c) {
                if (c == g) continue;
                ++n_terms;
                if (in_on)
                    accumulate(sum_in, infonce(z_t[g], zin_s[static_cast<size_t>(c)], neg_in,
                                               cfg_.tau_in));
                if (lg_on)
                    accumulate(sum_lg, infonce(zlg_t[g], zlg_s[static_cast<size_t>(c)], neg_lg,
                                               cfg_.tau_lg));
                if (g_on) accumulate(sum_g, group_loss(p_t[g], p_s[static_cast<size_t>(c)]));
            }
        const float inv_terms = 1.0f / static_cast<float>(n_terms);
        Tensor l_in = in_on ? mul_scalar(sum_in, inv_terms) : Tensor::scalar(0.0f);
        Tensor l_lg = lg_on ? mul_scalar(sum_lg, inv_terms) : Tensor::scalar(0.0f);
        Tensor l_g = g_on ? mul_scalar(sum_g, inv_terms) : Tensor::scalar(0.0f);
        Tensor total = total_loss(l_in, l_lg, l_g, cfg_.lambda_in, cfg_.lambda_lg, cfg_.lambda_g);

        if (!std::isfinite(total.item()) || !std::isfinite(l_in.item()) ||
            !std::isfinite(l_lg.item()) || !std::isfinite(l_g.item()))
            throw Error("train_step: non-finite loss at step " + std::to_string(step_) +
                        " (instance " + std::to_string(l_in.item()) + ", local-group " +
                        std::to_string(l_lg.item()) + ", group " + std::to_string(l_g.item()) +
                        ")");

        // ---- (2) backward
        for (auto& [name, t] : opt_params_) t.zero_grad();
        total.backward();

        // ---- (3) clip  (4) AdamW  (5) EMA teacher  (6) center  (7) buffers
        const float gnorm = grad_global_norm(opt_params_);
        clip_gradients(opt_params_, cfg_.clip_norm);
        opt_.step(lr);
        pair_.apply_ema(m_ema);
        update_center(state_.center, concat_rows(hg_t[0], hg_t[1]), cfg_.rho);
        state_.b_in.push_batch(z_t[0]);
        state_.b_lg.push_batch(mean_tokens(t_out[0].patch_tokens).detach());
        state_.b_lg.push_batch(avg_s_g2);
        if (warm) state_.b_lg_neg.push_batch(zlg_t[0]);

        StepMetrics m;
        m.step = step_;
        m.epoch = epoch;
        m.loss_total = total.item();
        m.loss_instance = l_in.item();
        m.loss_local_group = l_lg.item();
        m.loss_group = l_g.item();
        m.lr = lr;
        m.tau_g = tau_g_now;
        m.ema_momentum = m_ema;
        m.grad_norm = gnorm;
        m.local_group_active = lg_on;
        ++step_;
        return m;
    }

    // batch order for one epoch under the stateless shuffle stream
    std::vector<int64_t> epoch_order(int64_t epoch) const {
        std::vector<int64_t> order(static_cast<size_t>(dataset_.count));
        std::iota(order.begin(), order.end(), 0);
        Rng rng(derive_seed(cfg_.seed, {detail::kSeedShuffle, static_cast<uint64_t>(epoch)}));
        rng.shuffle(order);
        return order;
    }

    // full pretraining loop; resumes from the current step
    void run(MetricsWriter* metrics) {
        if (dataset_.count == 0) load_dataset_from_config();
        const int64_t spe = steps_per_epoch();
        if (spe < 1) throw Error("trainer: batch_size exceeds dataset size");
        std::filesystem::create_directories(cfg_.out_dir);
        for (int64_t epoch = step_ / spe; epoch < cfg_.epochs; ++epoch) {
            const std::vector<int64_t> order = epoch_order(epoch);
            for (int64_t s = step_ % spe; s < spe; ++s) {
                std::vector<int64_t> batch(order.begin() + s * cfg_.batch_size,
                                           order.begin() + (s + 1) * cfg_.batch_size);
                StepMetrics m = train_step(batch);
                if (metrics) metrics->write(m);
            }
            if (metrics) metrics->flush();
            if ((epoch + 1) % cfg_.checkpoint_every_epochs == 0 || epoch + 1 == cfg_.epochs)
                save_checkpoint(to_checkpoint(), cfg_.out_dir + "/checkpoint_last.mgck");
        }
    }

    CheckpointData to_checkpoint() const {
        CheckpointData ckpt;
        ckpt.config = cfg_;
        ckpt.step = step_;
        ckpt.epoch = dataset_.count > 0 ? step_ / steps_per_epoch() : 0;
        ckpt.adamw_step_count = opt_.step_count();
        for (const auto& [name, t] : opt_params_) ckpt.add(name, t);
        for (const auto& [name, t] : pair_.teacher_params()) ckpt.add(name, t);
        ckpt.add("state.center", state_.center);
        add_buffer(ckpt, "buffer.b_in", state_.b_in);
        add_buffer(ckpt, "buffer.b_lg", state_.b_lg);
        add_buffer(ckpt, "buffer.b_lg_neg", state_.b_lg_neg);
        for (const auto& slot : opt_.slots()) {
            ckpt.add("adamw.m." + slot.name, slot.param.shape(), slot.exp_avg);
            ckpt.add("adamw.v." + slot.name, slot.param.shape(), slot.exp_avg_sq);
        }
        return ckpt;
    }

    void restore(const CheckpointData& ckpt) {
        for (const auto& [name, t] : opt_params_) ckpt.apply_to(name, t);
        ParamStore teacher = pair_.teacher_params();
        for (const auto& [name, t] : teacher) ckpt.apply_to(name, t);
        ckpt.apply_to("state.center", state_.center);
        restore_buffer(ckpt, "buffer.b_in", state_.b_in);
        restore_buffer(ckpt, "buffer.b_lg", state_.b_lg);
        restore_buffer(ckpt, "buffer.b_lg_neg", state_.b_lg_neg);
        for (auto& slot : opt_.slots()) {
            slot.exp_avg = ckpt.values("adamw.m." + slot.name);
            slot.exp_avg_sq = ckpt.values("adamw.v." + slot.name);
        }
        opt_.set_step_count(ckpt.adamw_step_count);
        step_ = ckpt.step;
    }

    // constructs a trainer purely from a checkpoint (self-describing load)
    static Trainer from_checkpoint(const CheckpointData& ckpt) {
        Trainer t(ckpt.config);
        t.restore(ckpt);
        return t;
    }

private:
    std::vector<Tensor> assemble_crops(const std::vector<int64_t>& batch_indices) const {
        const int64_t b = static_cast<int64_t>(batch_indices.size());
        const int64_t V = cfg_.local_crops;
        std::vector<std::vector<Tensor>> per_crop(static_cast<size_t>(2 + V));
        for (int64_t slot = 0; slot < b; ++slot) {
            CropSet cs = crops_for(step_, slot, batch_indices[static_cast<size_t>(slot)]);
            per_crop[0].push_back(cs.globals[0]);
            per_crop[1].push_back(cs.globals[1]);
            for (int64_t j = 0; j < V; ++j)
                per_crop[static_cast<size_t>(2 + j)].push_back(cs.locals[static_cast<size_t>(j)]);
        }
        std::vector<Tensor> out;
        out.reserve(per_crop.size());
        for (const auto& list : per_crop) out.push_back(stack_images(list));
        return out;
    }

    static void add_buffer(CheckpointData& ckpt, const std::string& name, const FifoBuffer& buf) {
        ckpt.add(name, {buf.fill(), buf.dim()}, buf.rows_oldest_first());
    }

    static void restore_buffer(const CheckpointData& ckpt, const std::string& name,
                               FifoBuffer& buf) {
        const Shape& s = ckpt.shape(name);
        if (s.size() != 2 || s[1] != buf.dim())
            throw Error("checkpoint: buffer '" + name + "' has shape " + shape_str(s) +
                        ", expected [fill x " + std::to_string(buf.dim()) + "]");
        buf.restore(ckpt.values(name), s[0]);
    }

    TrainConfig cfg_;
    ModelPair pair_;
    SupervisionState state_;
    ParamStore opt_params_;
    AdamW opt_;
    Dataset dataset_;
    NormalizeStats stats_;
    int64_t step_ = 0;
};

}  // namespace mugs
