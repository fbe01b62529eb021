#pragma once

// Finite-difference audit over module parameters (leaves owned by a model
// rather than passed as function inputs). The loss closure must rebuild the
// forward pass from the current parameter values on every call and must be
// deterministic (eval mode).

#include <gtest/gtest.h>

#include <functional>
#include <vector>

#include "mugs/tensor.hpp"

namespace mugs_test {

inline void fd_check_params(std::vector<mugs::Tensor> params,
                            const std::function<mugs::Tensor()>& loss_fn, float h = 1e-3f,
                            float rel_tol = 1e-2f, float abs_tol = 1e-3f) {
    for (auto& p : params) p.zero_grad();
    mugs::Tensor loss = loss_fn();
    ASSERT_EQ(loss.numel(), 1);
    loss.backward();

    for (size_t pi = 0; pi < params.size(); ++pi) {
        ASSERT_TRUE(params[pi].has_grad()) << "parameter " << pi << " received no gradient";
        const std::vector<float> analytic = params[pi].grad();
        auto& vals = params[pi].raw_data();
        for (size_t e = 0; e < vals.size(); ++e) {
            const float orig = vals[e];
            vals[e] = orig + h;
            const float fp = loss_fn().item();
            vals[e] = orig - h;
            const float fm = loss_fn().item();
            vals[e] = orig;
            const float fd = (fp - fm) / (2.0f * h);
            const float diff = std::abs(fd - analytic[e]);
            const float bound = abs_tol + rel_tol * std::abs(fd);
            ASSERT_LE(diff, bound) << "parameter " << pi << " element " << e << ": analytic "
                                   << analytic[e] << " vs finite-difference " << fd;
        }
    }
}

}  // namespace mugs_test
