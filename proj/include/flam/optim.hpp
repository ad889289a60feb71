#pragma once

#include <cstdint>
#include <vector>

#include "flam/tensor.hpp"

namespace flam::ag {

// Adam moments for a fixed parameter list. Moment buffers are laid out in
// the same order as the parameter vector passed to make_adam; adam_step must
// be called with that same vector.
struct OptimizerState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

OptimizerState make_adam(const std::vector<Tensor>& params, double lr = 1e-3,
                         double beta1 = 0.9, double beta2 = 0.999,
                         double eps = 1e-8);

// Bias-corrected update in place from each parameter's accumulated grad.
// An unallocated grad buffer counts as zero gradient.
void adam_step(OptimizerState& state, std::vector<Tensor>& params);

void zero_grads(std::vector<Tensor>& params);

}  // namespace flam::ag
