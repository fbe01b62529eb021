#include "mugs/optim.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "fd_check.hpp"
#include "mugs/rng.hpp"

using mugs::AdamW;
using mugs::AdamWConfig;
using mugs::ParamStore;
using mugs::Rng;
using mugs::Tensor;

namespace {

// deposit an exact gradient on a leaf through the public autodiff path
void set_grad(const Tensor& param, const std::vector<float>& g) {
    param.zero_grad();
    Tensor c = Tensor::from_data(param.shape(), g);
    mugs::sum_all(mugs::mul(param, c)).backward();
}

// independent double-precision AdamW, transcribed from the definition
struct OracleAdamW {
    std::vector<double> m, v;
    int t = 0;
    void step(std::vector<double>& w, const std::vector<double>& g, double lr, double wd,
              double b1 = 0.9, double b2 = 0.999, double eps = 1e-8) {
        if (m.empty()) {
            m.assign(w.size(), 0.0);
            v.assign(w.size(), 0.0);
        }
        ++t;
        for (size_t i = 0; i < w.size(); ++i) {
            w[i] -= lr * wd * w[i];
            m[i] = b1 * m[i] + (1 - b1) * g[i];
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
            const double mh = m[i] / (1 - std::pow(b1, t));
            const double vh = v[i] / (1 - std::pow(b2, t));
            w[i] -= lr * mh / (std::sqrt(vh) + eps);
        }
    }
};

}  // namespace

// ---------------------------------------------------------------------------
// schedules
// ---------------------------------------------------------------------------

TEST(CosineValue, EndpointsAreExact) {
    EXPECT_FLOAT_EQ(mugs::cosine_value(0, 100, 0.996f, 1.0f), 0.996f);
    EXPECT_FLOAT_EQ(mugs::cosine_value(100, 100, 0.996f, 1.0f), 1.0f);
}

TEST(CosineValue, MidpointIsMean) {
    EXPECT_NEAR(mugs::cosine_value(50, 100, 2.5e-5f, 1e-6f), 0.5f * (2.5e-5f + 1e-6f), 1e-12f);
}

TEST(CosineValue, MonotoneDecreasingForDecaySchedule) {
    float prev = mugs::cosine_value(0, 64, 1.0f, 0.0f);
    for (int s = 1; s <= 64; ++s) {
        float cur = mugs::cosine_value(s, 64, 1.0f, 0.0f);
        EXPECT_LE(cur, prev + 1e-7f);
        prev = cur;
    }
}

TEST(CosineValue, ZeroTotalAndOutOfRangeStepThrow) {
    EXPECT_THROW(mugs::cosine_value(0, 0, 1.0f, 0.0f), mugs::Error);
    EXPECT_THROW(mugs::cosine_value(-1, 10, 1.0f, 0.0f), mugs::Error);
    EXPECT_THROW(mugs::cosine_value(11, 10, 1.0f, 0.0f), mugs::Error);
}

TEST(TemperatureTauG, WarmupEndpointsAndMidpoint) {
    EXPECT_FLOAT_EQ(mugs::temperature_tau_g(0, 10), 0.04f);
    EXPECT_FLOAT_EQ(mugs::temperature_tau_g(10, 10), 0.07f);
    EXPECT_FLOAT_EQ(mugs::temperature_tau_g(25, 10), 0.07f);
    EXPECT_NEAR(mugs::temperature_tau_g(5, 10), 0.055f, 1e-7f);
}

TEST(TemperatureTauG, ZeroWarmupIsAlwaysFinalValue) {
    EXPECT_FLOAT_EQ(mugs::temperature_tau_g(0, 0), 0.07f);
}

// ---------------------------------------------------------------------------
// clipping
// ---------------------------------------------------------------------------

TEST(ClipGradients, BelowThresholdUntouched) {
    ParamStore ps;
    Tensor p = Tensor::from_data({2}, {1, 2}, true);
    ps.add("p", p);
    set_grad(p, {0.6f, 0.8f});  // norm 1.0
    EXPECT_FLOAT_EQ(mugs::clip_gradients(ps, 3.0f), 1.0f);
    EXPECT_FLOAT_EQ(p.grad()[0], 0.6f);
    EXPECT_FLOAT_EQ(p.grad()[1], 0.8f);
}

TEST(ClipGradients, NormTenClippedToThree) {
    ParamStore ps;
    Tensor p = Tensor::from_data({2}, {0, 0}, true);
    ps.add("p", p);
    set_grad(p, {6, 8});  // norm 10
    EXPECT_NEAR(mugs::clip_gradients(ps, 3.0f), 0.3f, 1e-7f);
    EXPECT_NEAR(p.grad()[0], 1.8f, 1e-6f);
    EXPECT_NEAR(p.grad()[1], 2.4f, 1e-6f);
}

TEST(ClipGradients, ZeroGradientsGiveFactorOne) {
    ParamStore ps;
    Tensor p = Tensor::from_data({3}, {1, 2, 3}, true);
    ps.add("p", p);
    set_grad(p, {0, 0, 0});
    EXPECT_FLOAT_EQ(mugs::clip_gradients(ps, 3.0f), 1.0f);
}

TEST(ClipGradients, NeverIncreasesGlobalNorm) {
    Rng rng(31);
    for (int trial = 0; trial < 30; ++trial) {
        ParamStore ps;
        Tensor a = Tensor::from_data({4}, mugs_test::random_data(4, rng, -1, 1), true);
        Tensor b = Tensor::from_data({2, 3}, mugs_test::random_data(6, rng, -1, 1), true);
        ps.add("a", a);
        ps.add("b", b);
        set_grad(a, mugs_test::random_data(4, rng, -5, 5));
        set_grad(b, mugs_test::random_data(6, rng, -5, 5));
        const float before = mugs::grad_global_norm(ps);
        const float max_norm = 0.1f + 4.0f * static_cast<float>(rng.next_double());
        mugs::clip_gradients(ps, max_norm);
        const float after = mugs::grad_global_norm(ps);
        EXPECT_LE(after, before + 1e-5f);
        EXPECT_LE(after, max_norm * (1 + 1e-5f));
        if (before <= max_norm) EXPECT_FLOAT_EQ(after, before);
    }
}

TEST(ClipGradients, SpansMultipleTensors) {
    ParamStore ps;
    Tensor a = Tensor::from_data({1}, {0}, true);
    Tensor b = Tensor::from_data({1}, {0}, true);
    ps.add("a", a);
    ps.add("b", b);
    set_grad(a, {3});
    set_grad(b, {4});  // joint norm 5
    EXPECT_NEAR(mugs::clip_gradients(ps, 1.0f), 0.2f, 1e-7f);
    EXPECT_NEAR(a.grad()[0], 0.6f, 1e-6f);
    EXPECT_NEAR(b.grad()[0], 0.8f, 1e-6f);
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

TEST(AdamWStep, ZeroGradNoDecayLeavesParamsUnchanged) {
    ParamStore ps;
    Tensor p = Tensor::from_data({3}, {1, -2, 3}, true);
    ps.add("p", p);
    AdamWConfig cfg;
    cfg.weight_decay = 0.0f;
    AdamW opt(ps, cfg);
    set_grad(p, {0, 0, 0});
    opt.step(0.1f);
    EXPECT_EQ(p.data(), (std::vector<float>{1, -2, 3}));
}

TEST(AdamWStep, FirstStepClosedForm) {
    ParamStore ps;
    Tensor p = Tensor::from_data({2}, {0.5f, -0.5f}, true);
    ps.add("p", p);
    AdamWConfig cfg;
    cfg.weight_decay = 0.0f;
    AdamW opt(ps, cfg);
    const float g0 = 0.37f, g1 = -2.0f, lr = 0.01f;
    set_grad(p, {g0, g1});
    opt.step(lr);
    EXPECT_NEAR(p.data()[0], 0.5f - lr * g0 / (std::abs(g0) + 1e-8f), 1e-7f);
    EXPECT_NEAR(p.data()[1], -0.5f - lr * g1 / (std::abs(g1) + 1e-8f), 1e-7f);
}

TEST(AdamWStep, PureDecayWithZeroGrad) {
    ParamStore ps;
    Tensor p = Tensor::from_data({2}, {2.0f, -4.0f}, true);
    ps.add("p", p);
    AdamWConfig cfg;
    cfg.weight_decay = 0.1f;
    AdamW opt(ps, cfg);
    set_grad(p, {0, 0});
    opt.step(0.5f);
    const float f = 1.0f - 0.5f * 0.1f;
    EXPECT_NEAR(p.data()[0], 2.0f * f, 1e-6f);
    EXPECT_NEAR(p.data()[1], -4.0f * f, 1e-6f);
}

TEST(AdamWStep, NanGradientAbortsNamingParameter) {
    ParamStore ps;
    Tensor ok = Tensor::from_data({1}, {1}, true);
    Tensor bad = Tensor::from_data({1}, {1}, true);
    ps.add("fine", ok);
    ps.add("backbone.block0.attn.w", bad);
    AdamW opt(ps);
    set_grad(ok, {0.5f});
    set_grad(bad, {std::numeric_limits<float>::quiet_NaN()});
    try {
        opt.step(0.1f);
        FAIL() << "expected abort on NaN gradient";
    } catch (const mugs::Error& e) {
        EXPECT_NE(std::string(e.what()).find("backbone.block0.attn.w"), std::string::npos);
    }
}

TEST(AdamWStep, PatchEmbedGroupUsesScaledLr) {
    ParamStore ps;
    Tensor pe = Tensor::from_data({1}, {1.0f}, true);
    Tensor other = Tensor::from_data({1}, {1.0f}, true);
    ps.add("backbone.patch_embed.w", pe);
    ps.add("backbone.block0.mlp.w", other);
    AdamWConfig cfg;
    cfg.weight_decay = 0.5f;
    AdamW opt(ps, cfg);
    set_grad(pe, {0});
    set_grad(other, {0});
    opt.step(0.1f);  // pure decay exposes the per-group lr
    EXPECT_NEAR(pe.data()[0], 1.0f - 0.2f * 0.1f * 0.5f, 1e-7f);
    EXPECT_NEAR(other.data()[0], 1.0f - 0.1f * 0.5f, 1e-7f);
}

TEST(AdamWStep, SkipsParametersWithoutGradients) {
    ParamStore ps;
    Tensor used = Tensor::from_data({1}, {1.0f}, true);
    Tensor unused = Tensor::from_data({1}, {1.0f}, true);
    ps.add("used", used);
    ps.add("unused", unused);
    AdamW opt(ps);
    set_grad(used, {1.0f});
    unused.zero_grad();
    opt.step(0.1f);
    EXPECT_FLOAT_EQ(unused.data()[0], 1.0f);
    EXPECT_NE(used.data()[0], 1.0f);
}

TEST(AdamWStep, MultiStepMatchesDoubleOracle) {
    Rng rng(32);
    ParamStore ps;
    Tensor p = Tensor::from_data({5}, mugs_test::random_data(5, rng, -1, 1), true);
    ps.add("w", p);
    std::vector<double> w(p.data().begin(), p.data().end());
    AdamWConfig cfg;
    cfg.weight_decay = 0.1f;
    AdamW opt(ps, cfg);
    OracleAdamW oracle;
    const double lr = 0.02;
    for (int s = 0; s < 12; ++s) {
        std::vector<float> g = mugs_test::random_data(5, rng, -2, 2);
        set_grad(p, g);
        opt.step(static_cast<float>(lr));
        std::vector<double> gd(g.begin(), g.end());
        oracle.step(w, gd, lr, 0.1);
        for (size_t i = 0; i < w.size(); ++i) EXPECT_NEAR(p.data()[i], w[i], 5e-5) << "step " << s;
    }
}

// ---------------------------------------------------------------------------
// EMA teacher update
// ---------------------------------------------------------------------------

namespace {
std::pair<ParamStore, ParamStore> make_pair_stores(Rng& rng) {
    ParamStore t, s;
    t.add("a", Tensor::from_data({2, 2}, mugs_test::random_data(4, rng, -1, 1)));
    t.add("b", Tensor::from_data({3}, mugs_test::random_data(3, rng, -1, 1)));
    s.add("a", Tensor::from_data({2, 2}, mugs_test::random_data(4, rng, -1, 1), true));
    s.add("b", Tensor::from_data({3}, mugs_test::random_data(3, rng, -1, 1), true));
    return {t, s};
}
}  // namespace

TEST(EmaUpdateTeacher, MomentumOneLeavesTeacherUnchanged) {
    Rng rng(33);
    auto [t, s] = make_pair_stores(rng);
    std::vector<float> before = t.at("a").data();
    mugs::ema_update_teacher(t, s, 1.0f);
    EXPECT_EQ(t.at("a").data(), before);
}

TEST(EmaUpdateTeacher, MomentumZeroCopiesStudent) {
    Rng rng(34);
    auto [t, s] = make_pair_stores(rng);
    mugs::ema_update_teacher(t, s, 0.0f);
    EXPECT_EQ(t.at("a").data(), s.at("a").data());
    EXPECT_EQ(t.at("b").data(), s.at("b").data());
}

TEST(EmaUpdateTeacher, ScalarEmaValue) {
    ParamStore t, s;
    t.add("w", Tensor::from_data({1}, {1.0f}));
    s.add("w", Tensor::from_data({1}, {0.0f}));
    mugs::ema_update_teacher(t, s, 0.996f);
    EXPECT_FLOAT_EQ(t.at("w").data()[0], 0.996f);
}

TEST(EmaUpdateTeacher, FrozenStudentContractsGeometrically) {
    ParamStore t, s;
    t.add("w", Tensor::from_data({1}, {1.0f}));
    s.add("w", Tensor::from_data({1}, {0.25f}));
    const float m = 0.9f;
    const int n = 7;
    for (int i = 0; i < n; ++i) mugs::ema_update_teacher(t, s, m);
    const float expect = 0.25f + std::pow(m, n) * (1.0f - 0.25f);
    EXPECT_NEAR(t.at("w").data()[0], expect, 1e-5f);
}

TEST(EmaUpdateTeacher, ShapeMismatchThrows) {
    ParamStore t, s;
    t.add("w", Tensor::zeros({2}));
    s.add("w", Tensor::zeros({3}));
    EXPECT_THROW(mugs::ema_update_teacher(t, s, 0.5f), mugs::Error);
}

TEST(EmaUpdateTeacher, CountMismatchThrows) {
    ParamStore t, s;
    t.add("w", Tensor::zeros({2}));
    s.add("w", Tensor::zeros({2}));
    s.add("x", Tensor::zeros({2}));
    EXPECT_THROW(mugs::ema_update_teacher(t, s, 0.5f), mugs::Error);
}

TEST(EmaUpdateTeacher, OutOfRangeMomentumThrows) {
    ParamStore t, s;
    t.add("w", Tensor::zeros({2}));
    s.add("w", Tensor::zeros({2}));
    EXPECT_THROW(mugs::ema_update_teacher(t, s, -0.1f), mugs::Error);
    EXPECT_THROW(mugs::ema_update_teacher(t, s, 1.1f), mugs::Error);
}
