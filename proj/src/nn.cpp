#include "flam/nn.hpp"

#include <cmath>

#include "flam/error.hpp"

namespace flam::nn {

Affine make_affine(Rng& rng, std::size_t in, std::size_t out) {
    Affine layer;
    layer.w = ag::Tensor({in, out}, /*requires_grad=*/true);
    const double stddev = std::sqrt(2.0 / static_cast<double>(in));
    for (double& v : layer.w.data()) v = stddev * rng.normal();
    layer.b = ag::Tensor({out}, /*requires_grad=*/true);
    return layer;
}

ag::Tensor apply(const Affine& layer, const ag::Tensor& x) {
    return ag::add(ag::matmul(x, layer.w), layer.b);
}

Mlp make_mlp(Rng& rng, const std::vector<std::size_t>& widths, double leak,
             bool activate_output, bool normalize_output) {
    if (widths.size() < 2) {
        throw ContractError("make_mlp: need at least {in, out} widths");
    }
    Mlp mlp;
    mlp.leak = leak;
    mlp.activate_output = activate_output;
    mlp.normalize_output = normalize_output;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        mlp.layers.push_back(make_affine(rng, widths[i], widths[i + 1]));
    }
    return mlp;
}

ag::Tensor forward(const Mlp& mlp, const ag::Tensor& x) {
    ag::Tensor h = x;
    for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
        h = apply(mlp.layers[i], h);
        if (i + 1 < mlp.layers.size() || mlp.activate_output) {
            h = ag::leaky_relu(h, mlp.leak);
        }
    }
    if (mlp.normalize_output) h = ag::l2_normalize(h);
    return h;
}

std::size_t input_dim(const Mlp& mlp) {
    return mlp.layers.front().w.shape()[0];
}

std::size_t output_dim(const Mlp& mlp) {
    return mlp.layers.back().w.shape()[1];
}

std::vector<ag::Tensor> parameters(const Mlp& mlp) {
    std::vector<ag::Tensor> out;
    for (const Affine& l : mlp.layers) {
        out.push_back(l.w);
        out.push_back(l.b);
    }
    return out;
}

void set_trainable(Mlp& mlp, bool trainable) {
    for (Affine& l : mlp.layers) {
        l.w.set_requires_grad(trainable);
        l.b.set_requires_grad(trainable);
    }
}

}  // namespace flam::nn
