#include "mugs/heads.hpp"

#include <gtest/gtest.h>

#include "fd_check.hpp"
#include "param_fd.hpp"
#include "mugs/params.hpp"
#include "mugs/rng.hpp"

using mugs::Aggregator;
using mugs::MlpHead;
using mugs::MlpHeadConfig;
using mugs::Rng;
using mugs::Tensor;

namespace {

MlpHeadConfig head_cfg(int64_t in, int64_t hidden, int64_t out, int64_t layers) {
    MlpHeadConfig c;
    c.in_dim = in;
    c.hidden_dim = hidden;
    c.out_dim = out;
    c.num_layers = layers;
    return c;
}

void zero_all_params(auto& module) {
    mugs::ParamStore ps;
    module.collect(ps, "m");
    for (auto& [name, t] : ps)
        for (auto& v : t.raw_data()) v = 0.0f;
}

}  // namespace

// ---------------------------------------------------------------------------
// projection / prediction heads
// ---------------------------------------------------------------------------

TEST(ProjectionHead, ZeroWeightsGiveZeroOutput) {
    Rng rng(1);
    MlpHead head(head_cfg(4, 8, 2, 3), rng, false);
    zero_all_params(head);
    Tensor out = head.forward(Tensor::from_data({2, 4}, {1, -2, 3, 0.5f, 0, 4, -1, 2}));
    for (float v : out.data()) EXPECT_FLOAT_EQ(v, 0.0f);
}

TEST(ProjectionHead, BatchIndependence) {
    Rng rng(2);
    MlpHead head(head_cfg(6, 16, 3, 3), rng, false);
    Rng drng(3);
    Tensor batch = Tensor::from_data({4, 6}, mugs_test::random_data(24, drng, -1.0f, 1.0f));
    Tensor joint = head.forward(batch);
    for (int64_t b = 0; b < 4; ++b) {
        std::vector<float> row(batch.data().begin() + b * 6, batch.data().begin() + (b + 1) * 6);
        Tensor single = head.forward(Tensor::from_data({1, 6}, row));
        for (int64_t j = 0; j < 3; ++j)
            EXPECT_NEAR(single.data()[j], joint.data()[b * 3 + j], 1e-6f);
    }
}

TEST(ProjectionHead, ThreeLayerMatchesComposedOracle) {
    Rng rng(4);
    MlpHead head(head_cfg(4, 8, 2, 3), rng, false);
    mugs::ParamStore ps;
    head.collect(ps, "h");
    Rng drng(5);
    Tensor x = Tensor::from_data({3, 4}, mugs_test::random_data(12, drng, -1.0f, 1.0f));
    Tensor expect = mugs::linear(
        mugs::gelu(mugs::linear(
            mugs::gelu(mugs::linear(x, ps.at("h.fc0.w"), ps.at("h.fc0.b"))),
            ps.at("h.fc1.w"), ps.at("h.fc1.b"))),
        ps.at("h.fc2.w"), ps.at("h.fc2.b"));
    Tensor got = head.forward(x);
    ASSERT_EQ(got.shape(), expect.shape());
    for (size_t i = 0; i < got.data().size(); ++i) EXPECT_FLOAT_EQ(got.data()[i], expect.data()[i]);
}

TEST(PredictionHead, ConstructedIdentityReproducesInput) {
    // fc0 = I with bias +20 pushes every activation deep into the linear
    // region of gelu; fc1 = I with bias -20 undoes the shift.
    Rng rng(6);
    MlpHead head(head_cfg(3, 3, 3, 2), rng, false);
    mugs::ParamStore ps;
    head.collect(ps, "h");
    for (auto& [name, t] : ps)
        for (auto& v : t.raw_data()) v = 0.0f;
    for (int64_t i = 0; i < 3; ++i) {
        ps.at("h.fc0.w").raw_data()[i * 3 + i] = 1.0f;
        ps.at("h.fc1.w").raw_data()[i * 3 + i] = 1.0f;
        ps.at("h.fc0.b").raw_data()[static_cast<size_t>(i)] = 20.0f;
        ps.at("h.fc1.b").raw_data()[static_cast<size_t>(i)] = -20.0f;
    }
    Tensor x = Tensor::from_data({2, 3}, {0.5f, -1.25f, 2.0f, -0.75f, 0.0f, 1.5f});
    Tensor out = head.forward(x);
    for (size_t i = 0; i < x.data().size(); ++i) EXPECT_NEAR(out.data()[i], x.data()[i], 1e-4f);
}

TEST(PredictionHead, ZeroInputZeroBiasGivesZero) {
    Rng rng(7);
    MlpHead head(head_cfg(5, 9, 5, 2), rng, false);
    mugs::ParamStore ps;
    head.collect(ps, "h");
    for (auto& v : ps.at("h.fc0.b").raw_data()) v = 0.0f;
    for (auto& v : ps.at("h.fc1.b").raw_data()) v = 0.0f;
    Tensor out = head.forward(Tensor::zeros({2, 5}));
    for (float v : out.data()) EXPECT_FLOAT_EQ(v, 0.0f);
}

TEST(PredictionHead, TwoLayerMatchesComposedOracle) {
    Rng rng(8);
    MlpHead head(head_cfg(6, 12, 6, 2), rng, false);
    mugs::ParamStore ps;
    head.collect(ps, "h");
    Rng drng(9);
    Tensor x = Tensor::from_data({2, 6}, mugs_test::random_data(12, drng, -1.0f, 1.0f));
    Tensor expect = mugs::linear(mugs::gelu(mugs::linear(x, ps.at("h.fc0.w"), ps.at("h.fc0.b"))),
                                 ps.at("h.fc1.w"), ps.at("h.fc1.b"));
    Tensor got = head.forward(x);
    for (size_t i = 0; i < got.data().size(); ++i) EXPECT_FLOAT_EQ(got.data()[i], expect.data()[i]);
}

TEST(MlpHead, RejectsBadLayerCount) {
    Rng rng(10);
    EXPECT_THROW(MlpHead(head_cfg(4, 8, 2, 1), rng, false), mugs::ConfigError);
    EXPECT_THROW(MlpHead(head_cfg(4, 8, 2, 4), rng, false), mugs::ConfigError);
}

TEST(MlpHead, WeightGradientsPassFiniteDifference) {
    Rng rng(11);
    MlpHead head(head_cfg(4, 6, 3, 3), rng, true);
    Rng drng(12);
    Tensor x = Tensor::from_data({2, 4}, mugs_test::random_data(8, drng, -1.0f, 1.0f));
    mugs::ParamStore ps;
    head.collect(ps, "h");
    std::vector<Tensor> params;
    for (auto& [name, t] : ps) params.push_back(t);
    mugs_test::fd_check_params(params, [&]() {
        Tensor y = head.forward(x);
        return mugs::mean_all(mugs::mul(y, y));
    });
}

// ---------------------------------------------------------------------------
// aggregator
// ---------------------------------------------------------------------------

TEST(Aggregator, NineTokenShapeContract) {
    // k = 8 neighbors plus the class slot: total input token number of 9.
    Rng rng(13);
    Aggregator agg(16, 4, 8, rng, false);
    Rng drng(14);
    Tensor avg = Tensor::from_data({3, 16}, mugs_test::random_data(48, drng, -1.0f, 1.0f));
    Tensor nb = Tensor::from_data({3, 8, 16}, mugs_test::random_data(384, drng, -1.0f, 1.0f));
    Tensor out = agg.forward(avg, nb);
    EXPECT_EQ(out.shape(), (mugs::Shape{3, 16}));
}

TEST(Aggregator, NeighborPermutationInvariance) {
    Rng rng(15);
    Aggregator agg(8, 2, 4, rng, false);
    Rng drng(16);
    Tensor avg = Tensor::from_data({2, 8}, mugs_test::random_data(16, drng, -1.0f, 1.0f));
    std::vector<float> nb = mugs_test::random_data(2 * 4 * 8, drng, -1.0f, 1.0f);
    Tensor out1 = agg.forward(avg, Tensor::from_data({2, 4, 8}, nb));

    // reverse the neighbor slots of every example
    std::vector<float> perm(nb.size());
    for (int64_t b = 0; b < 2; ++b)
        for (int64_t t = 0; t < 4; ++t)
            std::copy(nb.begin() + (b * 4 + t) * 8, nb.begin() + (b * 4 + t + 1) * 8,
                      perm.begin() + (b * 4 + (3 - t)) * 8);
    Tensor out2 = agg.forward(avg, Tensor::from_data({2, 4, 8}, perm));
    for (size_t i = 0; i < out1.data().size(); ++i)
        EXPECT_NEAR(out1.data()[i], out2.data()[i], 1e-5f);
}

TEST(Aggregator, DepthZeroIsIdentityOnClassSlot) {
    Rng rng(17);
    Aggregator agg(8, 2, 4, rng, false, /*depth=*/0);
    Rng drng(18);
    Tensor avg = Tensor::from_data({2, 8}, mugs_test::random_data(16, drng, -1.0f, 1.0f));
    Tensor nb = Tensor::from_data({2, 4, 8}, mugs_test::random_data(64, drng, -1.0f, 1.0f));
    Tensor out = agg.forward(avg, nb);
    EXPECT_EQ(out.data(), avg.data());
}

TEST(Aggregator, WrongNeighborCountThrows) {
    Rng rng(19);
    Aggregator agg(8, 2, 4, rng, false);
    Tensor avg = Tensor::zeros({2, 8});
    EXPECT_THROW(agg.forward(avg, Tensor::zeros({2, 3, 8})), mugs::Error);
}

TEST(Aggregator, InputGradientsPassFiniteDifference) {
    Rng rng(20);
    Aggregator agg(8, 2, 3, rng, false);
    mugs_test::fd_check({{2, 8}, {2, 3, 8}}, [&](const std::vector<Tensor>& in) {
        Tensor y = agg.forward(in[0], in[1]);
        return mugs::mean_all(mugs::mul(y, y));
    }, 21);
}

TEST(Aggregator, BatchIndependence) {
    Rng rng(22);
    Aggregator agg(8, 2, 4, rng, false);
    Rng drng(23);
    Tensor avg = Tensor::from_data({3, 8}, mugs_test::random_data(24, drng, -1.0f, 1.0f));
    Tensor nb = Tensor::from_data({3, 4, 8}, mugs_test::random_data(96, drng, -1.0f, 1.0f));
    Tensor joint = agg.forward(avg, nb);
    for (int64_t b = 0; b < 3; ++b) {
        std::vector<float> arow(avg.data().begin() + b * 8, avg.data().begin() + (b + 1) * 8);
        std::vector<float> nrow(nb.data().begin() + b * 32, nb.data().begin() + (b + 1) * 32);
        Tensor single = agg.forward(Tensor::from_data({1, 8}, arow), Tensor::from_data({1, 4, 8}, nrow));
        for (int64_t j = 0; j < 8; ++j)
            EXPECT_NEAR(single.data()[j], joint.data()[b * 8 + j], 1e-6f);
    }
}
