#pragma once

// Cross-module verification harness: a finite-difference gradient audit, the
// per-equation value oracles, and structural parity checks (FIFO replay,
// top-k retrieval, multi-crop loss enumeration, EMA contraction, seed
// replay). Every oracle here is straight-line code computing in double
// precision from raw values, sharing no helpers with the engine, so a defect
// cannot hide in common code. Results are collected into a machine-readable
// report for CI.

#include <cmath>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mugs/trainer.hpp"

namespace mugs {

struct AuditCase {
    std::string name;
    bool passed = false;
    double max_error = 0.0;
    double tolerance = 0.0;
    std::string detail;
};

struct AuditReport {
    uint64_t seed = 0;
    std::vector<AuditCase> cases;

    bool all_passed() const {
        for (const auto& c : cases)
            if (!c.passed) return false;
        return true;
    }

    void add(std::string name, double max_error, double tolerance, std::string detail) {
        cases.push_back(
            {std::move(name), max_error <= tolerance, max_error, tolerance, std::move(detail)});
    }

    void merge(const AuditReport& other) {
        cases.insert(cases.end(), other.cases.begin(), other.cases.end());
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["seed"] = seed;
        j["all_passed"] = all_passed();
        j["cases"] = nlohmann::json::array();
        for (const auto& c : cases)
            j["cases"].push_back({{"name", c.name},
                                  {"passed", c.passed},
                                  {"max_error", c.max_error},
                                  {"tolerance", c.tolerance},
                                  {"detail", c.detail}});
        return j;
    }
};

namespace audit_detail {

inline Tensor randn(Rng& rng, Shape shape, double stddev = 1.0, bool requires_grad = true) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    std::vector<float> v(static_cast<size_t>(n));
    for (auto& x : v) x = static_cast<float>(rng.normal(0.0f, static_cast<float>(stddev)));
    return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

// central-difference check of d(probe . f(inputs)) / d(inputs); the probe
// makes the output scalar without favoring any component
inline double fd_max_rel(std::vector<Tensor> inputs,
                         const std::function<Tensor(const std::vector<Tensor>&)>& f, Rng& rng,
                         float h = 1e-3f) {
    Tensor out0 = f(inputs);
    std::vector<float> probe(static_cast<size_t>(out0.numel()));
    for (auto& v : probe) v = static_cast<float>(rng.normal(0.0, 1.0));
    auto scalar_of = [&](const Tensor& t) {
        double s = 0.0;
        const auto& d = t.data();
        for (size_t i = 0; i < d.size(); ++i) s += static_cast<double>(d[i]) * probe[i];
        return s;
    };
    Tensor probe_t = Tensor::from_data(out0.shape(), std::vector<float>(probe), false);
    for (const Tensor& t : inputs)
        if (t.requires_grad()) t.zero_grad();
    sum_all(mul(f(inputs), probe_t)).backward();

    double worst = 0.0;
    for (const Tensor& t : inputs) {
        if (!t.requires_grad()) continue;
        const std::vector<float> analytic = t.grad();
        auto& data = t.raw_data();
        for (size_t i = 0; i < data.size(); ++i) {
            const float orig = data[i];
            data[i] = orig + h;
            const double fp = scalar_of(f(inputs));
            data[i] = orig - h;
            const double fm = scalar_of(f(inputs));
            data[i] = orig;
            const double fd = (fp - fm) / (2.0 * static_cast<double>(h));
            const double an = static_cast<double>(analytic[i]);
            worst = std::max(worst,
                             std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)}));
        }
    }
    return worst;
}

// ---------------------------------------------------------------------------
// standalone double-precision oracles
// ---------------------------------------------------------------------------

inline std::vector<double> d_softmax(const std::vector<double>& logits) {
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double sum = 0.0;
    std::vector<double> out(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - mx);
        sum += out[i];
    }
    for (auto& v : out) v /= sum;
    return out;
}

inline std::vector<double> d_row(const Tensor& t, int64_t row) {
    const int64_t d = t.dim(t.ndim() - 1);
    std::vector<double> out(static_cast<size_t>(d));
    for (int64_t j = 0; j < d; ++j) out[static_cast<size_t>(j)] = t.data()[row * d + j];
    return out;
}

inline double d_cos(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Eq. 1/3 form: mean_i [ logsumexp(pos_i, negs_i) - pos_i ]
inline double d_infonce(const Tensor& z1, const Tensor& z2, const Tensor& negatives, double tau) {
    const int64_t b = z1.ndim() == 1 ? 1 : z1.dim(0);
    double total = 0.0;
    for (int64_t i = 0; i < b; ++i) {
        const std::vector<double> r1 = z1.ndim() == 1 ? d_row(z1, 0) : d_row(z1, i);
        const std::vector<double> r2 = z2.ndim() == 1 ? d_row(z2, 0) : d_row(z2, i);
        std::vector<double> logits = {d_cos(r1, r2) / tau};
        if (negatives.defined() && negatives.numel() > 0)
            for (int64_t n = 0; n < negatives.dim(0); ++n)
                logits.push_back(d_cos(r2, d_row(negatives, n)) / tau);
        double mx = logits[0];
        for (double v : logits) mx = std::max(mx, v);
        double lse = 0.0;
        for (double v : logits) lse += std::exp(v - mx);
        total += (mx + std::log(lse)) - logits[0];
    }
    return total / static_cast<double>(b);
}

// straight-line MLP replay from a collected ParamStore ("fc<i>.w"/"fc<i>.b")
inline std::vector<double> d_mlp_row(const ParamStore& ps, const std::string& prefix,
                                     std::vector<double> h) {
    for (int64_t layer = 0;; ++layer) {
        Tensor w, b;
        bool found = false;
        for (const auto& [name, t] : ps) {
            if (name == prefix + ".fc" + std::to_string(layer) + ".w") w = t, found = true;
            if (name == prefix + ".fc" + std::to_string(layer) + ".b") b = t;
        }
        if (!found) return h;
        const int64_t in = w.dim(0), out = w.dim(1);
        std::vector<double> next(static_cast<size_t>(out));
        for (int64_t o = 0; o < out; ++o) {
            double acc = b.data()[static_cast<size_t>(o)];
            for (int64_t i = 0; i < in; ++i)
                acc += h[static_cast<size_t>(i)] * static_cast<double>(w.data()[i * out + o]);
            next[static_cast<size_t>(o)] = acc;
        }
        // GELU between layers only: peek whether another layer follows
        bool more = false;
        for (const auto& [name, t] : ps)
            more = more || name == prefix + ".fc" + std::to_string(layer + 1) + ".w";
        if (more)
            for (auto& v : next) v = v * 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
        h = std::move(next);
    }
}

}  // namespace audit_detail

// ---------------------------------------------------------------------------
// gradient audit
// ---------------------------------------------------------------------------

inline AuditReport run_gradient_audit(uint64_t seed) {
    using audit_detail::fd_max_rel;
    using audit_detail::randn;
    AuditReport report;
    report.seed = seed;
    Rng rng(derive_seed(seed, {0x67726164u}));
    constexpr double kOpTol = 1e-2;

    auto op = [&](const std::string& name, std::vector<Tensor> inputs,
                  std::function<Tensor(const std::vector<Tensor>&)> f) {
        report.add("grad/op/" + name, fd_max_rel(std::move(inputs), f, rng), kOpTol,
                   "central differences, h=1e-3, probe-weighted scalar");
    };

    op("add", {randn(rng, {3, 4}), randn(rng, {3, 4})},
       [](const std::vector<Tensor>& x) { return add(x[0], x[1]); });
    op("sub", {randn(rng, {3, 4}), randn(rng, {3, 4})},
       [](const std::vector<Tensor>& x) { return sub(x[0], x[1]); });
    op("mul", {randn(rng, {3, 4}), randn(rng, {3, 4})},
       [](const std::vector<Tensor>& x) { return mul(x[0], x[1]); });
    op("mul_scalar", {randn(rng, {3, 4})},
       [](const std::vector<Tensor>& x) { return mul_scalar(x[0], 1.7f); });
    op("add_scalar", {randn(rng, {3, 4})},
       [](const std::vector<Tensor>& x) { return add_scalar(x[0], -0.6f); });
    op("neg", {randn(rng, {3, 4})}, [](const std::vector<Tensor>& x) { return neg(x[0]); });
    op("exp_t", {randn(rng, {3, 4}, 0.5)},
       [](const std::vector<Tensor>& x) { return exp_t(x[0]); });
    {
        // keep inputs clear of the clamp knee
        Tensor pos = randn(rng, {3, 4}, 0.3);
        for (auto& v : pos.raw_data()) v = 0.2f + std::abs(v);
        op("log_clamped", {pos}, [](const std::vector<Tensor>& x) { return log_clamped(x[0]); });
    }
    op("gelu", {randn(rng, {3, 4})}, [](const std::vector<Tensor>& x) { return gelu(x[0]); });
    op("matmul", {randn(rng, {3, 4}), randn(rng, {4, 5})},
       [](const std::vector<Tensor>& x) { return matmul(x[0], x[1]); });
    op("matmul_nt", {randn(rng, {3, 4}), randn(rng, {5, 4})},
       [](const std::vector<Tensor>& x) { return matmul_nt(x[0], x[1]); });
    op("bmm", {randn(rng, {2, 3, 4}), randn(rng, {2, 4, 5})},
       [](const std::vector<Tensor>& x) { return bmm(x[0], x[1]); });
    op("bmm_nt", {randn(rng, {2, 3, 4}), randn(rng, {2, 5, 4})},
       [](const std::vector<Tensor>& x) { return bmm_nt(x[0], x[1]); });
    op("reshape", {randn(rng, {3, 4})},
       [](const std::vector<Tensor>& x) { return reshape(x[0], {2, 6}); });
    op("slice_rows", {randn(rng, {4, 5})},
       [](const std::vector<Tensor>& x) { return slice_rows(x[0], 1, 2); });
    op("slice_cols", {randn(rng, {3, 6})},
       [](const std::vector<Tensor>& x) { return slice_cols(x[0], 2, 3); });
    op("concat_cols", {randn(rng, {3, 2}), randn(rng, {3, 4})},
       [](const std::vector<Tensor>& x) { return concat_cols(x[0], x[1]); });
    op("concat_rows", {randn(rng, {2, 4}), randn(rng, {3, 4})},
       [](const std::vector<Tensor>& x) { return concat_rows(x[0], x[1]); });
    op("split_heads", {randn(rng, {2, 3, 4})},
       [](const std::vector<Tensor>& x) { return split_heads(x[0], 2); });
    op("merge_heads", {randn(rng, {4, 3, 2})},
       [](const std::vector<Tensor>& x) { return merge_heads(x[0], 2); });
    op("select_token", {randn(rng, {2, 3, 4})},
       [](const std::vector<Tensor>& x) { return select_token(x[0], 1); });
    op("slice_tokens", {randn(rng, {2, 4, 3})},
       [](const std::vector<Tensor>& x) { return slice_tokens(x[0], 1, 2); });
    op("concat_tokens", {randn(rng, {2, 2, 3}), randn(rng, {2, 3, 3})},
       [](const std::vector<Tensor>& x) { return concat_tokens(x[0], x[1]); });
    op("prepend_class_token", {randn(rng, {3}), randn(rng, {2, 4, 3})},
       [](const std::vector<Tensor>& x) { return prepend_class_token(x[0], x[1]); });
    op("add_tokens_broadcast", {randn(rng, {2, 3, 4}), randn(rng, {3, 4})},
       [](const std::vector<Tensor>& x) { return add_tokens_broadcast(x[0], x[1]); });
    op("add_rowvec", {randn(rng, {3, 4}), randn(rng, {4})},
       [](const std::vector<Tensor>& x) { return add_rowvec(x[0], x[1]); });
    op("scale_examples", {randn(rng, {3, 2, 4})}, [](const std::vector<Tensor>& x) {
        return scale_examples(x[0], {0.5f, 1.0f, 2.0f});
    });
    op("softmax_rows", {randn(rng, {3, 5})},
       [](const std::vector<Tensor>& x) { return softmax_rows(x[0]); });
    op("logsumexp_rows", {randn(rng, {3, 5})},
       [](const std::vector<Tensor>& x) { return logsumexp_rows(x[0]); });
    op("layer_norm", {randn(rng, {3, 4}), randn(rng, {4}), randn(rng, {4})},
       [](const std::vector<Tensor>& x) { return layer_norm(x[0], x[1], x[2]); });
    op("l2_normalize_rows", {randn(rng, {3, 4})},
       [](const std::vector<Tensor>& x) { return l2_normalize_rows(x[0]); });
    op("rowwise_dot", {randn(rng, {3, 4}), randn(rng, {3, 4})},
       [](const std::vector<Tensor>& x) { return rowwise_dot(x[0], x[1]); });
    op("sum_rows", {randn(rng, {3, 4})},
       [](const std::vector<Tensor>& x) { return sum_rows(x[0]); });
    op("mean_rows", {randn(rng, {3, 4})},
       [](const std::vector<Tensor>& x) { return mean_rows(x[0]); });
    op("mean_tokens", {randn(rng, {2, 3, 4})},
       [](const std::vector<Tensor>& x) { return mean_tokens(x[0]); });
    op("sum_all", {randn(rng, {3, 4})}, [](const std::vector<Tensor>& x) { return sum_all(x[0]); });
    op("mean_all", {randn(rng, {3, 4})},
       [](const std::vector<Tensor>& x) { return mean_all(x[0]); });
    op("linear_2d", {randn(rng, {3, 4}), randn(rng, {4, 5}), randn(rng, {5})},
       [](const std::vector<Tensor>& x) { return linear(x[0], x[1], x[2]); });
    op("linear_3d", {randn(rng, {2, 3, 4}), randn(rng, {4, 5}), randn(rng, {5})},
       [](const std::vector<Tensor>& x) { return linear(x[0], x[1], x[2]); });

    // --- end-to-end total loss on the d=8, depth-1, m=4, k=2 micro-instance
    NetworkConfig nc;
    nc.vit.image_size_global = 8;
    nc.vit.image_size_local = 8;
    nc.vit.patch_size = 4;
    nc.vit.embed_dim = 8;
    nc.vit.depth = 1;
    nc.vit.num_heads = 2;
    nc.vit.mlp_ratio = 2.0f;
    nc.vit.drop_path_rate = 0.0f;
    nc.head_hidden_dim = 8;
    nc.head_out_dim = 8;
    nc.pred_hidden_dim = 8;
    nc.agg_depth = 1;
    nc.k = 2;
    SupervisionConfig sc;
    sc.k = 2;
    sc.num_prototypes = 4;
    sc.buffer_capacity = 8;
    Rng model_rng(derive_seed(seed, {0x6d6f646cu}));
    ModelPair pair(nc, model_rng);
    SupervisionState st(sc, nc.vit.embed_dim, nc.head_out_dim, model_rng);
    st.b_in.push_batch(randn(model_rng, {4, 8}, 1.0, false));
    st.b_lg.push_batch(randn(model_rng, {4, 8}, 1.0, false));
    st.b_lg_neg.push_batch(randn(model_rng, {4, 8}, 1.0, false));
    std::vector<Tensor> crops = {randn(model_rng, {2, 8, 8, 3}, 1.0, false),
                                 randn(model_rng, {2, 8, 8, 3}, 1.0, false),
                                 randn(model_rng, {2, 8, 8, 3}, 1.0, false)};  // 2 globals + V=1

    // teacher targets are constants of the student objective (stop-gradient);
    // freeze them outside the FD loop so finite differences probe exactly the
    // function whose gradient the optimizer consumes
    const Network& tn = pair.teacher();
    Tensor z_t[2], zlg_t[2], p_t[2];
    for (int g = 0; g < 2; ++g) {
        BackboneOutput out = tn.backbone.forward(crops[static_cast<size_t>(g)]);
        z_t[g] = tn.h_in.forward(out.class_token).detach();
        zlg_t[g] =
            tn.h_lg.forward(local_group_features(out.patch_tokens, st.b_lg, sc.k, tn.agg))
                .detach();
        p_t[g] =
            teacher_assignment(tn.h_g, out.class_token, st.prototypes, st.center, 0.04f).detach();
    }

    Tensor neg_in = st.b_in.snapshot();
    Tensor neg_lg = st.b_lg_neg.snapshot();
    auto total = [&]() {
        const Network& sn = pair.student();
        Tensor sum_loss;
        int terms = 0;
        for (int g = 0; g < 2; ++g)
            for (size_t c = 0; c < crops.size(); ++c) {
                if (static_cast<int>(c) == g) continue;
                ++terms;
                BackboneOutput out = sn.backbone.forward(crops[c]);
                Tensor zin = pair.p_in().forward(sn.h_in.forward(out.class_token));
                Tensor zlg = pair.p_lg().forward(
                    sn.h_lg.forward(local_group_features(out.patch_tokens, st.b_lg, sc.k, sn.agg)));
                Tensor ps = student_assignment(sn.h_g, out.class_token, st.prototypes, 0.1f);
                Tensor term = total_loss(infonce(z_t[g], zin, neg_in, 0.2f),
                                         infonce(zlg_t[g], zlg, neg_lg, 0.2f),
                                         group_loss(p_t[g], ps), 1.0f / 3, 1.0f / 3, 1.0f / 3);
                sum_loss = sum_loss.defined() ? add(sum_loss, term) : term;
            }
        return mul_scalar(sum_loss, 1.0f / static_cast<float>(terms));
    };

    ParamStore student = pair.student_params();
    st.collect(student, "state");
    for (const auto& [name, t] : student) t.zero_grad();
    Tensor loss = total();
    loss.backward();

    // 20 sampled parameters, finite differences on the full loss. A ladder of
    // step sizes handles the curvature spread: steep directions (the
    // normalization singularity) need a small h, flat ones a large h to stay
    // above float evaluation noise. A wrong analytic gradient disagrees at
    // every step size.
    Rng pick(derive_seed(seed, {0x7069636bu}));
    double worst = 0.0;
    for (int s = 0; s < 20; ++s) {
        auto& [name, t] =
            student.entry(static_cast<size_t>(pick.next_below(static_cast<uint64_t>(student.size()))));
        const std::vector<float>& g = t.grad();
        // probe the largest-gradient element of this tensor: the most
        // informative coordinate, and the least FD-noise-dominated
        size_t idx = 0;
        for (size_t i = 0; i < g.size(); ++i)
            if (std::abs(g[i]) > std::abs(g[idx])) idx = i;
        const double an = g[idx];
        auto& data = t.raw_data();
        const float orig = data[idx];
        double best = 1.0;
        for (float h : {5e-3f, 1e-3f, 2e-4f, 4e-5f, 8e-6f}) {
            data[idx] = orig + h;
            const double fp = total().item();
            data[idx] = orig - h;
            const double fm = total().item();
            data[idx] = orig;
            const double fd = (fp - fm) / (2.0 * static_cast<double>(h));
            best = std::min(best,
                            std::abs(fd - an) / std::max({1e-2, std::abs(fd), std::abs(an)}));
        }
        worst = std::max(worst, best);
    }
    report.add("grad/end_to_end_total_loss", worst, 5e-2,
               "20 sampled student/prototype params, micro-instance d=8 depth-1 m=4 k=2");

    const double teacher_norm = grad_global_norm(pair.teacher_params());
    report.add("grad/teacher_stop_gradient", teacher_norm, 0.0,
               "teacher parameter gradient norm after end-to-end backward");

    double buffer_grad = 0.0;
    for (const Tensor& snap : {neg_in, neg_lg}) {
        if (!snap.has_grad()) continue;
        for (float g : snap.grad())
            buffer_grad = std::max(buffer_grad, static_cast<double>(std::abs(g)));
    }
    report.add("grad/buffer_stop_gradient", buffer_grad, 0.0,
               "buffer snapshot gradients after end-to-end backward");
    return report;
}

// ---------------------------------------------------------------------------
// equation oracles
// ---------------------------------------------------------------------------

inline AuditReport run_equation_oracles(uint64_t seed) {
    using namespace audit_detail;
    AuditReport report;
    report.seed = seed;
    constexpr double kTol = 1e-5;
    constexpr int kTrials = 100;

    // Eq. 1 (and the Eq. 3 InfoNCE form): engine vs scalar recomputation
    for (const auto& [tag, word] :
         {std::pair<const char*, uint64_t>{"eq1_instance_infonce", 0x657131u},
          std::pair<const char*, uint64_t>{"eq3_local_group_infonce", 0x657133u}}) {
        double worst = 0.0;
        for (int trial = 0; trial < kTrials; ++trial) {
            Rng rng(derive_seed(seed, {word, static_cast<uint64_t>(trial)}));
            const int64_t b = 1 + static_cast<int64_t>(rng.next_below(4));
            const int64_t d = 2 + static_cast<int64_t>(rng.next_below(7));
            const int64_t n = static_cast<int64_t>(rng.next_below(7));
            const float tau = rng.uniform(0.05f, 0.5f);
            Tensor z1 = randn(rng, {b, d}, 1.0, false);
            Tensor z2 = randn(rng, {b, d}, 1.0, false);
            Tensor negs = n > 0 ? randn(rng, {n, d}, 1.0, false) : Tensor();
            const double engine = infonce(z1, z2, negs, tau).item();
            worst = std::max(worst, std::abs(engine - d_infonce(z1, z2, negs, tau)));
        }
        report.add(std::string("eq/") + tag, worst, kTol,
                   std::to_string(kTrials) + " random instances, scalar double recomputation");
    }

    // Eq. 2: mean + brute-force top-k + aggregator input assembly
    {
        double worst = 0.0;
        for (int trial = 0; trial < kTrials; ++trial) {
            Rng rng(derive_seed(seed, {0x657132u, static_cast<uint64_t>(trial)}));
            const int64_t d = 4, k = 2, P = 1 + static_cast<int64_t>(rng.next_below(5));
            const int64_t rows = k + static_cast<int64_t>(rng.next_below(5));
            Aggregator agg(d, 2, k, rng, false, 1);
            FifoBuffer buf(8, d);
            Tensor stored = randn(rng, {rows, d}, 1.0, false);
            buf.push_batch(stored);
            Tensor patches = randn(rng, {1, P, d}, 1.0, false);

            Tensor engine = local_group_features(patches, buf, k, agg);

            // oracle: double mean, brute-force top-k by cosine over the rows
            std::vector<double> q(static_cast<size_t>(d), 0.0);
            for (int64_t p = 0; p < P; ++p)
                for (int64_t c = 0; c < d; ++c)
                    q[static_cast<size_t>(c)] += patches.data()[p * d + c];
            for (auto& v : q) v /= static_cast<double>(P);
            std::vector<std::pair<double, int64_t>> scored;
            for (int64_t r = 0; r < rows; ++r)
                scored.push_back({d_cos(q, d_row(stored, r)), r});
            std::stable_sort(scored.begin(), scored.end(),
                             [](const auto& a, const auto& b) { return a.first > b.first; });
            std::vector<float> qf(static_cast<size_t>(d));
            std::vector<float> nb(static_cast<size_t>(k * d));
            for (int64_t c = 0; c < d; ++c) qf[static_cast<size_t>(c)] = static_cast<float>(q[static_cast<size_t>(c)]);
            for (int64_t t = 0; t < k; ++t)
                for (int64_t c = 0; c < d; ++c)
                    nb[static_cast<size_t>(t * d + c)] =
                        stored.data()[scored[static_cast<size_t>(t)].second * d + c];
            Tensor oracle = agg.forward(Tensor::from_data({1, d}, std::move(qf), false),
                                        Tensor::from_data({1, k, d}, std::move(nb), false));
            for (int64_t i = 0; i < engine.numel(); ++i)
                worst = std::max(worst, std::abs(static_cast<double>(engine.data()[i]) -
                                                 oracle.data()[i]));
        }
        report.add("eq/eq2_local_group_features", worst, kTol,
                   "double-precision mean + brute-force top-k, shared aggregator weights");
    }

    // Eq. 4: teacher (centered, sharpened) and student assignments
    {
        double worst = 0.0;
        for (int trial = 0; trial < kTrials; ++trial) {
            Rng rng(derive_seed(seed, {0x657134u, static_cast<uint64_t>(trial)}));
            const int64_t d_in = 3 + static_cast<int64_t>(rng.next_below(4));
            const int64_t d_out = 2 + static_cast<int64_t>(rng.next_below(4));
            const int64_t m = 2 + static_cast<int64_t>(rng.next_below(5));
            const int64_t b = 1 + static_cast<int64_t>(rng.next_below(3));
            MlpHeadConfig hc;
            hc.in_dim = d_in;
            hc.hidden_dim = 5;
            hc.out_dim = d_out;
            hc.num_layers = 3;
            MlpHead head(hc, rng, false);
            Tensor y = randn(rng, {b, d_in}, 1.0, false);
            Tensor protos = randn(rng, {m, d_out}, 1.0, false);
            Tensor center = randn(rng, {d_out}, 1.0, false);
            const float tau_g = rng.uniform(0.03f, 0.2f);
            const float tau_gp = rng.uniform(0.05f, 0.3f);

            Tensor pt = teacher_assignment(head, y, protos, center, tau_g);
            Tensor ps = student_assignment(head, y, protos, tau_gp);

            ParamStore hp;
            head.collect(hp, "h");
            for (int64_t i = 0; i < b; ++i) {
                std::vector<double> h = d_mlp_row(hp, "h", d_row(y, i));
                std::vector<double> logits_t(static_cast<size_t>(m)), logits_s(logits_t);
                for (int64_t p = 0; p < m; ++p) {
                    double dot_t = 0, dot_s = 0;
                    for (int64_t c = 0; c < d_out; ++c) {
                        const double proto = protos.data()[p * d_out + c];
                        dot_t += (h[static_cast<size_t>(c)] -
                                  static_cast<double>(center.data()[static_cast<size_t>(c)])) *
                                 proto;
                        dot_s += h[static_cast<size_t>(c)] * proto;
                    }
                    logits_t[static_cast<size_t>(p)] = dot_t / tau_g;
                    logits_s[static_cast<size_t>(p)] = dot_s / tau_gp;
                }
                const std::vector<double> ot = d_softmax(logits_t);
                const std::vector<double> os = d_softmax(logits_s);
                for (int64_t p = 0; p < m; ++p) {
                    worst = std::max(worst, std::abs(static_cast<double>(pt.data()[i * m + p]) -
                                                     ot[static_cast<size_t>(p)]));
                    worst = std::max(worst, std::abs(static_cast<double>(ps.data()[i * m + p]) -
                                                     os[static_cast<size_t>(p)]));
                }
            }
        }
        report.add("eq/eq4_assignments", worst, kTol,
                   "centered+sharpened teacher and student softmax vs double MLP replay");
    }

    // Eq. 5: soft cross-entropy
    {
        double worst = 0.0;
        for (int trial = 0; trial < kTrials; ++trial) {
            Rng rng(derive_seed(seed, {0x657135u, static_cast<uint64_t>(trial)}));
            const int64_t b = 1 + static_cast<int64_t>(rng.next_below(4));
            const int64_t m = 2 + static_cast<int64_t>(rng.next_below(6));
            auto dist = [&](bool grad) {
                std::vector<float> rows(static_cast<size_t>(b * m));
                for (int64_t i = 0; i < b; ++i) {
                    std::vector<double> logits(static_cast<size_t>(m));
                    for (auto& v : logits) v = rng.normal(0.0, 1.0);
                    const std::vector<double> p = d_softmax(logits);
                    for (int64_t j = 0; j < m; ++j)
                        rows[static_cast<size_t>(i * m + j)] =
                            static_cast<float>(p[static_cast<size_t>(j)]);
                }
                return Tensor::from_data({b, m}, std::move(rows), grad);
            };
            Tensor pt = dist(false), ps = dist(false);
            const double engine = group_loss(pt, ps).item();
            double oracle = 0.0;
            for (int64_t i = 0; i < b; ++i)
                for (int64_t j = 0; j < m; ++j)
                    oracle -= static_cast<double>(pt.data()[i * m + j]) *
                              std::log(static_cast<double>(ps.data()[i * m + j]));
            oracle /= static_cast<double>(b);
            worst = std::max(worst, std::abs(engine - oracle));
        }
        report.add("eq/eq5_soft_cross_entropy", worst, kTol,
                   "double-precision -sum p_t log p_s against engine group_loss");
    }

    // Eq. 6: weighted combination
    {
        double worst = 0.0;
        for (int trial = 0; trial < kTrials; ++trial) {
            Rng rng(derive_seed(seed, {0x657136u, static_cast<uint64_t>(trial)}));
            const float a = rng.uniform(0.0f, 3.0f), b = rng.uniform(0.0f, 3.0f),
                        c = rng.uniform(0.0f, 3.0f);
            const float la = rng.uniform(0.0f, 1.0f), lb = rng.uniform(0.0f, 1.0f),
                        lc = rng.uniform(0.0f, 1.0f);
            const double engine = total_loss(Tensor::scalar(a), Tensor::scalar(b),
                                             Tensor::scalar(c), la, lb, lc)
                                      .item();
            const double oracle = static_cast<double>(la) * a + static_cast<double>(lb) * b +
                                  static_cast<double>(lc) * c;
            worst = std::max(worst, std::abs(engine - oracle));
        }
        report.add("eq/eq6_weighted_total", worst, kTol, "double-precision weighted sum");
    }

    return report;
}

// ---------------------------------------------------------------------------
// structure oracles
// ---------------------------------------------------------------------------

namespace audit_detail {

inline TrainConfig micro_train_config(int64_t local_crops) {
    TrainConfig c;
    c.epochs = 4;
    c.batch_size = 2;
    c.seed = 17;
    c.warmup_epochs = 1;
    c.base_lr = 1e-3f;
    c.final_lr = 1e-4f;
    c.image_size_global = 8;
    c.image_size_local = 8;
    c.patch_size = 4;
    c.embed_dim = 8;
    c.depth = 1;
    c.num_heads = 2;
    c.mlp_ratio = 2.0f;
    c.drop_path_rate = 0.0f;
    c.head_hidden_dim = 8;
    c.head_out_dim = 8;
    c.pred_hidden_dim = 8;
    c.agg_depth = 1;
    c.k = 2;
    c.num_prototypes = 4;
    c.buffer_capacity = 16;
    c.local_crops = local_crops;
    c.tau_g_warmup_epochs = 1;
    return c;
}

// from-scratch recomputation of one training step's loss components,
// enumerating every (teacher global, other crop) pair out of public pieces
struct EnumeratedLoss {
    int64_t terms = 0;
    double loss_instance = 0.0;
    double loss_local_group = 0.0;
    double loss_group = 0.0;
    double loss_total = 0.0;
};

inline EnumeratedLoss enumerate_step_loss(Trainer& t, int64_t step_idx,
                                          const std::vector<int64_t>& batch) {
    const TrainConfig& c = t.config();
    const int64_t V = c.local_crops, n_crops = 2 + V;
    std::vector<std::vector<Tensor>> per_crop(static_cast<size_t>(n_crops));
    for (size_t slot = 0; slot < batch.size(); ++slot) {
        CropSet cs = t.crops_for(step_idx, static_cast<int64_t>(slot), batch[slot]);
        per_crop[0].push_back(cs.globals[0]);
        per_crop[1].push_back(cs.globals[1]);
        for (int64_t j = 0; j < V; ++j)
            per_crop[static_cast<size_t>(2 + j)].push_back(cs.locals[static_cast<size_t>(j)]);
    }
    std::vector<Tensor> crops;
    for (auto& list : per_crop) crops.push_back(stack_images(list));

    const Network& tn = t.pair().teacher();
    const Network& sn = t.pair().student();
    SupervisionState& st = t.state();
    const bool warm = st.b_lg.fill() >= c.k;
    const float tau_g_now = t.tau_g_at(step_idx / t.steps_per_epoch());

    Tensor z_t[2], zlg_t[2], p_t[2];
    for (int g = 0; g < 2; ++g) {
        BackboneOutput out = tn.backbone.forward(crops[static_cast<size_t>(g)]);
        z_t[g] = tn.h_in.forward(out.class_token).detach();
        if (warm)
            zlg_t[g] =
                tn.h_lg.forward(local_group_features(out.patch_tokens, st.b_lg, c.k, tn.agg))
                    .detach();
        p_t[g] = teacher_assignment(tn.h_g, out.class_token, st.prototypes, st.center, tau_g_now);
    }
    Tensor neg_in = st.b_in.fill() > 0 ? st.b_in.snapshot() : Tensor();
    Tensor neg_lg = st.b_lg_neg.fill() > 0 ? st.b_lg_neg.snapshot() : Tensor();

    EnumeratedLoss out;
    float sum_in = 0.0f, sum_lg = 0.0f, sum_g = 0.0f;
    for (int g = 0; g < 2; ++g)
        for (int64_t cc = 0; cc < n_crops; ++cc) {
            if (cc == g) continue;
            ++out.terms;
            BackboneOutput so = sn.backbone.forward(crops[static_cast<size_t>(cc)]);
            sum_in += infonce(z_t[g], t.pair().p_in().forward(sn.h_in.forward(so.class_token)),
                              neg_in, c.tau_in)
                          .item();
            if (warm)
                sum_lg +=
                    infonce(zlg_t[g],
                            t.pair().p_lg().forward(sn.h_lg.forward(
                                local_group_features(so.patch_tokens, st.b_lg, c.k, sn.agg))),
                            neg_lg, c.tau_lg)
                        .item();
            sum_g += group_loss(p_t[g], student_assignment(sn.h_g, so.class_token, st.prototypes,
                                                           c.tau_g_prime))
                         .item();
        }
    const float inv = 1.0f / static_cast<float>(out.terms);
    out.loss_instance = sum_in * inv;
    out.loss_local_group = warm ? sum_lg * inv : 0.0;
    out.loss_group = sum_g * inv;
    out.loss_total = c.lambda_in * out.loss_instance + c.lambda_lg * out.loss_local_group +
                     c.lambda_g * out.loss_group;
    return out;
}

}  // namespace audit_detail

inline AuditReport run_structure_oracles(uint64_t seed) {
    using namespace audit_detail;
    AuditReport report;
    report.seed = seed;

    // FIFO replay parity against a plain deque
    {
        Rng rng(derive_seed(seed, {0x6669666fu}));
        const int64_t cap = 8, d = 4;
        FifoBuffer buf(cap, d);
        std::deque<std::vector<float>> oracle;
        double worst = 0.0;
        for (int push = 0; push < 200; ++push) {
            const int64_t n = 1 + static_cast<int64_t>(rng.next_below(3));
            Tensor batch = randn(rng, {n, d}, 1.0, false);
            buf.push_batch(batch);
            for (int64_t i = 0; i < n; ++i) {
                oracle.push_back(std::vector<float>(batch.data().begin() + i * d,
                                                    batch.data().begin() + (i + 1) * d));
                if (static_cast<int64_t>(oracle.size()) > cap) oracle.pop_front();
            }
            std::vector<float> expect;
            for (const auto& row : oracle) expect.insert(expect.end(), row.begin(), row.end());
            const std::vector<float> got = buf.rows_oldest_first();
            if (got != expect) worst = 1.0;
        }
        report.add("structure/fifo_replay", worst, 0.0,
                   "200 random pushes vs a plain bounded deque, exact row parity");
    }

    // top-k retrieval parity on 1,000 random queries
    {
        Rng rng(derive_seed(seed, {0x746f706bu}));
        const int64_t d = 8, k = 5, rows = 64;
        FifoBuffer buf(rows, d);
        Tensor stored = randn(rng, {rows, d}, 1.0, false);
        buf.push_batch(stored);
        double worst = 0.0;
        for (int q = 0; q < 1000; ++q) {
            Tensor query = randn(rng, {d}, 1.0, false);
            Tensor engine = buf.topk_neighbors(query, k);
            const std::vector<double> qd = d_row(query, 0);
            std::vector<double> cos_all(static_cast<size_t>(rows));
            for (int64_t r = 0; r < rows; ++r)
                cos_all[static_cast<size_t>(r)] = d_cos(qd, d_row(stored, r));
            std::vector<double> top(cos_all);
            std::sort(top.begin(), top.end(), std::greater<double>());
            // compare the sorted similarity values of the selected neighbors;
            // value-level parity is robust to ties between distinct rows
            std::vector<double> got(static_cast<size_t>(k));
            for (int64_t t = 0; t < k; ++t)
                got[static_cast<size_t>(t)] = d_cos(qd, d_row(engine, t));
            std::sort(got.begin(), got.end(), std::greater<double>());
            for (int64_t t = 0; t < k; ++t)
                worst = std::max(worst, std::abs(got[static_cast<size_t>(t)] -
                                                 top[static_cast<size_t>(t)]));
        }
        report.add("structure/topk_parity", worst, 1e-6,
                   "1,000 random queries vs brute-force cosine ranking");
    }

    // multi-crop enumeration parity: 2(V+1) terms (symmetric two-global loss
    // at V=0, 22 terms at V=10)
    for (int64_t V : {int64_t{0}, int64_t{2}, int64_t{10}}) {
        TrainConfig cfg = micro_train_config(V);
        Trainer t(cfg);
        t.attach_dataset(synth_hierarchical_dataset(29, 2, 2, 2, 1, 8));
        t.train_step({0, 1});  // prime the buffers
        EnumeratedLoss oracle = enumerate_step_loss(t, 1, {2, 3});
        StepMetrics m = t.train_step({2, 3});
        double worst = std::abs(m.loss_total - oracle.loss_total);
        worst = std::max(worst, std::abs(m.loss_instance - oracle.loss_instance));
        worst = std::max(worst, std::abs(m.loss_local_group - oracle.loss_local_group));
        worst = std::max(worst, std::abs(m.loss_group - oracle.loss_group));
        if (oracle.terms != 2 * (V + 1)) worst = 1.0;
        report.add("structure/multicrop_terms_V" + std::to_string(V), worst, 1e-5,
                   std::to_string(2 * (V + 1)) + "-term from-scratch enumeration parity");
    }

    // EMA contraction law: |t_n - s| = m^n |t_0 - s|
    {
        Rng rng(derive_seed(seed, {0x656d61u}));
        TrainConfig cfg = micro_train_config(1);
        ModelPair pair(cfg.network_config(), rng);
        // push the student away from the teacher
        for (auto& [name, t] : pair.ema_tracked_student())
            for (auto& v : t.raw_data()) v += static_cast<float>(rng.normal(0.0, 0.1));
        ParamStore t0 = pair.ema_tracked_teacher();
        std::vector<std::vector<float>> t0_vals;
        for (const auto& [name, t] : t0) t0_vals.push_back(t.data());
        const float m_ema = 0.9f;
        const int n = 5;
        for (int i = 0; i < n; ++i) pair.apply_ema(m_ema);
        const double factor = std::pow(static_cast<double>(m_ema), n);
        double worst = 0.0;
        ParamStore tn = pair.ema_tracked_teacher();
        ParamStore snp = pair.ema_tracked_student();
        for (size_t i = 0; i < tn.size(); ++i) {
            const auto& tv = tn.entry(i).second.data();
            const auto& sv = snp.entry(i).second.data();
            for (size_t j = 0; j < tv.size(); ++j) {
                const double expect = sv[j] + factor * (static_cast<double>(t0_vals[i][j]) - sv[j]);
                worst = std::max(worst, std::abs(static_cast<double>(tv[j]) - expect) /
                                            std::max(1.0, std::abs(expect)));
            }
        }
        report.add("structure/ema_contraction", worst, 1e-4,
                   "5 EMA applications vs the closed-form geometric law, m=0.9");
    }

    // center update unrolled: c_n = rho^n c_0 + (1-rho) sum_i rho^{n-1-i} mean_i
    {
        Rng rng(derive_seed(seed, {0x636e7472u}));
        const int64_t d = 6, b = 3, n = 8;
        const float rho = 0.9f;
        Tensor center = randn(rng, {d}, 1.0, false);
        std::vector<double> expect(static_cast<size_t>(d));
        for (int64_t j = 0; j < d; ++j)
            expect[static_cast<size_t>(j)] =
                std::pow(rho, n) * static_cast<double>(center.data()[static_cast<size_t>(j)]);
        for (int64_t i = 0; i < n; ++i) {
            Tensor batch = randn(rng, {b, d}, 1.0, false);
            for (int64_t j = 0; j < d; ++j) {
                double mean = 0.0;
                for (int64_t r = 0; r < b; ++r) mean += batch.data()[r * d + j];
                expect[static_cast<size_t>(j)] += (1.0 - rho) *
                                                  std::pow(rho, n - 1 - i) *
                                                  (mean / static_cast<double>(b));
            }
            update_center(center, batch, rho);
        }
        double worst = 0.0;
        for (int64_t j = 0; j < d; ++j)
            worst = std::max(worst, std::abs(static_cast<double>(center.data()[j]) -
                                             expect[static_cast<size_t>(j)]));
        report.add("structure/center_unrolled", worst, 1e-6,
                   "8 center updates vs the unrolled geometric closed form, rho=0.9");
    }

    // identical-seed replay: 10 steps, bitwise parity
    {
        TrainConfig cfg = micro_train_config(1);
        Trainer a(cfg), b(cfg);
        Dataset ds = synth_hierarchical_dataset(31, 2, 2, 2, 1, 8);
        a.attach_dataset(ds);
        b.attach_dataset(ds);
        double worst = 0.0;
        for (int s = 0; s < 10; ++s) {
            const std::vector<int64_t> batch = {(s * 2) % 8, (s * 2 + 1) % 8};
            StepMetrics ma = a.train_step(batch);
            StepMetrics mb = b.train_step(batch);
            if (ma.loss_total != mb.loss_total || ma.grad_norm != mb.grad_norm) worst = 1.0;
        }
        ParamStore pa = a.optimized_params(), pb = b.optimized_params();
        for (size_t i = 0; i < pa.size(); ++i)
            if (pa.entry(i).second.data() != pb.entry(i).second.data()) worst = 1.0;
        report.add("structure/seed_replay_bitwise", worst, 0.0,
                   "two trainers, same seed, 10 steps: metrics and parameters bitwise equal");
    }

    return report;
}

inline AuditReport run_full_audit(uint64_t seed) {
    AuditReport report;
    report.seed = seed;
    report.merge(run_gradient_audit(seed));
    report.merge(run_equation_oracles(seed));
    report.merge(run_structure_oracles(seed));
    return report;
}

}  // namespace mugs
