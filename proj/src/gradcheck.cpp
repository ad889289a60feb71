#include "flam/gradcheck.hpp"

#include <cmath>
#include <cstdlib>

#include "flam/error.hpp"

namespace flam::ag {

double fd_check(const std::function<Tensor(const Tensor&)>& fn,
                const Tensor& point, double h) {
    if (!(h > 0.0)) throw ContractError("fd_check: h must be positive");

    Tensor x(point.shape(), point.data(), /*requires_grad=*/true);
    {
        Tape tape;
        Tensor loss = fn(x);
        if (!loss.is_scalar()) {
            throw ContractError("fd_check: fn must return a scalar, got " +
                                shape_str(loss));
        }
        tape.backward(loss);
    }
    const std::vector<double> analytic = x.grad();

    Tensor probe(point.shape(), point.data());
    NoGradGuard ng;
    double worst = 0.0;
    for (std::size_t i = 0; i < probe.size(); ++i) {
        const double orig = probe.data()[i];
        probe.data()[i] = orig + h;
        const double fp = fn(probe).item();
        probe.data()[i] = orig - h;
        const double fm = fn(probe).item();
        probe.data()[i] = orig;
        const double numeric = (fp - fm) / (2.0 * h);
        const double err =
            std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + 1e-8);
        if (err > worst) worst = err;
    }
    return worst;
}

}  // namespace flam::ag
