#include "flam/optim.hpp"

#include <cmath>
#include <string>

#include "flam/error.hpp"

namespace flam::ag {

OptimizerState make_adam(const std::vector<Tensor>& params, double lr,
                         double beta1, double beta2, double eps) {
    OptimizerState state;
    state.lr = lr;
    state.beta1 = beta1;
    state.beta2 = beta2;
    state.eps = eps;
    state.m.reserve(params.size());
    state.v.reserve(params.size());
    for (const Tensor& p : params) {
        state.m.emplace_back(p.size(), 0.0);
        state.v.emplace_back(p.size(), 0.0);
    }
    return state;
}

void adam_step(OptimizerState& state, std::vector<Tensor>& params) {
    if (params.size() != state.m.size()) {
        throw ContractError("adam_step: " + std::to_string(params.size()) +
                            " params vs " + std::to_string(state.m.size()) +
                            " moment slots");
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& t = params[p];
        std::vector<double>& m = state.m[p];
        std::vector<double>& v = state.v[p];
        if (t.size() != m.size()) {
            throw ContractError("adam_step: param " + std::to_string(p) +
                                " size " + std::to_string(t.size()) +
                                " vs moment size " + std::to_string(m.size()));
        }
        if (!t.has_grad()) continue;  // zero gradient and zero moments: no-op
        const std::vector<double>& g = t.grad();
        for (std::size_t i = 0; i < m.size(); ++i) {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            t.data()[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

void zero_grads(std::vector<Tensor>& params) {
    for (Tensor& p : params) p.zero_grad();
}

}  // namespace flam::ag
