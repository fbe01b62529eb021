#pragma once

// Central finite-difference gradient audit shared by the test suites.
//
// A candidate function maps a fixed list of input tensors to a scalar loss.
// fd_check builds tracked leaves from random data, runs backward once, then
// perturbs every input element by +/-h and compares the analytic gradient
// against (f(x+h) - f(x-h)) / 2h under a combined absolute + relative bound.

#include <gtest/gtest.h>

#include <functional>
#include <vector>

#include "mugs/rng.hpp"
#include "mugs/tensor.hpp"

namespace mugs_test {

using LossFn = std::function<mugs::Tensor(const std::vector<mugs::Tensor>&)>;

struct FdOptions {
    float h = 1e-3f;
    float rel_tol = 1e-2f;
    float abs_tol = 1e-3f;
    float lo = -1.0f;  // sampling range for random inputs
    float hi = 1.0f;
};

inline std::vector<float> random_data(int64_t n, mugs::Rng& rng, float lo, float hi) {
    std::vector<float> d(static_cast<size_t>(n));
    for (auto& v : d) v = static_cast<float>(rng.uniform(lo, hi));
    return d;
}

inline void fd_check(const std::vector<mugs::Shape>& shapes, const LossFn& fn, uint64_t seed,
                     FdOptions opt = {}) {
    mugs::Rng rng(seed);
    std::vector<std::vector<float>> base;
    std::vector<mugs::Tensor> inputs;
    for (const auto& s : shapes) {
        base.push_back(random_data(mugs::shape_numel(s), rng, opt.lo, opt.hi));
        inputs.push_back(mugs::Tensor::from_data(s, base.back(), true));
    }

    mugs::Tensor loss = fn(inputs);
    ASSERT_EQ(loss.numel(), 1) << "fd_check requires a scalar loss";
    loss.backward();

    auto eval_at = [&](size_t which, size_t elem, float delta) {
        std::vector<mugs::Tensor> probe;
        for (size_t i = 0; i < shapes.size(); ++i) {
            std::vector<float> d = base[i];
            if (i == which) d[elem] += delta;
            probe.push_back(mugs::Tensor::from_data(shapes[i], std::move(d), false));
        }
        return fn(probe).item();
    };

    for (size_t i = 0; i < shapes.size(); ++i) {
        ASSERT_TRUE(inputs[i].has_grad()) << "input " << i << " received no gradient";
        const auto& g = inputs[i].grad();
        for (size_t e = 0; e < base[i].size(); ++e) {
            const float fp = eval_at(i, e, opt.h);
            const float fm = eval_at(i, e, -opt.h);
            const float fd = (fp - fm) / (2.0f * opt.h);
            const float diff = std::abs(fd - g[e]);
            const float bound = opt.abs_tol + opt.rel_tol * std::abs(fd);
            ASSERT_LE(diff, bound) << "input " << i << " element " << e << ": analytic " << g[e]
                                   << " vs finite-difference " << fd;
        }
    }
}

}  // namespace mugs_test
