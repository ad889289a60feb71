#pragma once

#include <cstddef>
#include <vector>

#include "flam/rng.hpp"
#include "flam/tensor.hpp"

namespace flam::nn {

struct Affine {
    ag::Tensor w;  // in x out
    ag::Tensor b;  // out
};

// Kaiming-style init for leaky_relu nets: w ~ N(0, 2/in), b = 0.
Affine make_affine(Rng& rng, std::size_t in, std::size_t out);

ag::Tensor apply(const Affine& layer, const ag::Tensor& x);

struct Mlp {
    std::vector<Affine> layers;
    double leak = 0.2;
    bool activate_output = false;   // leaky_relu after the last layer too
    bool normalize_output = false;  // unit-normalize rows of the output
};

// widths = {in, hidden..., out}; needs at least one layer.
Mlp make_mlp(Rng& rng, const std::vector<std::size_t>& widths, double leak = 0.2,
             bool activate_output = false, bool normalize_output = false);

ag::Tensor forward(const Mlp& mlp, const ag::Tensor& x);

std::size_t input_dim(const Mlp& mlp);
std::size_t output_dim(const Mlp& mlp);

// Shared handles to the weight tensors, in serialization order.
std::vector<ag::Tensor> parameters(const Mlp& mlp);

void set_trainable(Mlp& mlp, bool trainable);

}  // namespace flam::nn
