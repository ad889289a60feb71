#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace flam::ag {

// Dense row-major tensor of doubles. Rank 0 (scalar), 1 (vector) and
// 2 (matrix) are the only ranks the ops below need. Gradients are
// accumulated in-place on the shared storage, so copies of a Tensor handle
// refer to the same data and grad.
struct TensorData {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
};

class Tensor {
public:
    Tensor() = default;
    Tensor(std::vector<std::size_t> shape, bool requires_grad = false);
    Tensor(std::vector<std::size_t> shape, std::vector<double> values,
           bool requires_grad = false);

    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor vector(std::vector<double> values, bool requires_grad = false);
    static Tensor matrix(std::size_t rows, std::size_t cols,
                         std::vector<double> values, bool requires_grad = false);
    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(impl_); }
    const std::vector<std::size_t>& shape() const { return impl_->shape; }
    std::size_t size() const { return impl_->data.size(); }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t rows() const;
    std::size_t cols() const;
    bool is_scalar() const { return size() == 1 && rank() <= 1; }

    std::vector<double>& data() { return impl_->data; }
    const std::vector<double>& data() const { return impl_->data; }
    double item() const;

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }

    // Gradient buffer; allocated zero-filled on demand.
    std::vector<double>& grad();
    const std::vector<double>& grad() const { return impl_->grad; }
    bool has_grad() const { return !impl_->grad.empty(); }
    void zero_grad();

    // Value snapshot with no graph link and requires_grad=false.
    Tensor detach() const;
    Tensor clone() const;

    std::shared_ptr<TensorData> impl() const { return impl_; }

private:
    std::shared_ptr<TensorData> impl_;
};

std::string shape_str(const Tensor& t);

// One recorded operation. Backward closures accumulate into the grad
// buffers of the node's inputs.
struct Node {
    const char* op;
    std::function<void()> backward;
};

// Gradient tape. Construction makes it the active tape for the current
// thread (define-by-run, rebuilt per batch); destruction restores the
// previous one. Ops record a node whenever a tape is active and any input
// requires grad.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Reverse-mode sweep from a scalar loss: seeds d(loss)/d(loss) = 1 and
    // visits the recorded nodes once, in reverse construction order.
    void backward(const Tensor& loss);

    std::size_t node_count() const { return nodes_.size(); }

    static Tape* active();
    static void record(const char* op, std::function<void()> backward);

private:
    std::vector<Node> nodes_;
    Tape* prev_ = nullptr;
};

// Suspends recording for its lifetime; used for frozen-teacher forwards
// and plain inference inside a training step.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    Tape* saved_;
};

// ---------------------------------------------------------------------------
// Ops. All are differentiable and recorded on the active tape.
// ---------------------------------------------------------------------------

// C = A @ B for 2-D tensors; inner dimensions must agree.
Tensor matmul(const Tensor& a, const Tensor& b);
// C = A @ B^T for (m x n) and (p x n); avoids materializing transposes.
Tensor matmul_nt(const Tensor& a, const Tensor& b);

// Elementwise add; b may also be a 1-D bias of length cols(a) broadcast
// over the rows of a 2-D a.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise, same shape
Tensor scale(const Tensor& a, double c);
Tensor add_const(const Tensor& a, double c);

// Concatenate along the last axis (1-D vectors, or 2-D with equal rows).
Tensor concat(const std::vector<Tensor>& parts);
// Inverse of concat: split along the last axis into the given widths.
std::vector<Tensor> split(const Tensor& t, const std::vector<std::size_t>& widths);

// Row gather: out[i, :] = m[indices[i], :]; gradient scatter-adds back.
Tensor gather_rows(const Tensor& m, const std::vector<std::size_t>& indices);

Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double alpha = 0.2);
Tensor sigmoid(const Tensor& a);
Tensor log(const Tensor& a);         // domain error on non-positive input
Tensor log_sigmoid(const Tensor& a); // numerically stable log(sigmoid(a))

Tensor mean(const Tensor& a);  // over all elements -> scalar
Tensor sum(const Tensor& a);   // over all elements -> scalar

// Euclidean norm over all elements -> scalar.
Tensor l2_norm(const Tensor& a);
// Unit-normalize: each row of a 2-D tensor, or the whole 1-D vector.
// Norms get +1e-12 before dividing.
Tensor l2_normalize(const Tensor& a);

// Cosine similarity: two equal-length 1-D vectors -> scalar, or two 2-D
// tensors of equal shape -> per-row 1-D result. Norms get +1e-12.
Tensor cosine_sim(const Tensor& a, const Tensor& b);

// Elementwise (a - b)^2.
Tensor squared_diff(const Tensor& a, const Tensor& b);

// Mean softmax cross-entropy of 2-D logits against per-row class targets.
// Gradient is (softmax - onehot) / rows.
Tensor softmax_cross_entropy(const Tensor& logits,
                             const std::vector<std::size_t>& targets);

}  // namespace flam::ag
