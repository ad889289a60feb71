#include "flam/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "flam/error.hpp"

namespace flam::ag {

namespace {

thread_local Tape* g_active_tape = nullptr;

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<>());
}

[[noreturn]] void shape_error(const char* op, const Tensor& a) {
    throw ContractError(std::string(op) + ": bad shape " + shape_str(a));
}

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
    throw ContractError(std::string(op) + ": shape mismatch " + shape_str(a) +
                        " vs " + shape_str(b));
}

using Data = std::shared_ptr<TensorData>;

double* grad_buf(const Data& d) {
    if (d->grad.empty()) d->grad.assign(d->data.size(), 0.0);
    return d->grad.data();
}

bool wants_grad(const Tensor& t) { return t.requires_grad(); }

// out = A(m x p) @ B(p x n)
void mm_nn(const double* a, const double* b, double* c, std::size_t m,
           std::size_t p, std::size_t n) {
    std::fill(c, c + m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        const double* arow = a + i * p;
        for (std::size_t k = 0; k < p; ++k) {
            const double av = arow[k];
            const double* brow = b + k * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// out += A(m x n) @ B(p x n)^T  -> (m x p)
void mm_nt_acc(const double* a, const double* b, double* c, std::size_t m,
               std::size_t n, std::size_t p) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * n;
        double* crow = c + i * p;
        for (std::size_t k = 0; k < p; ++k) {
            const double* brow = b + k * n;
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += arow[j] * brow[j];
            crow[k] += s;
        }
    }
}

// out += A(m x p)^T @ B(m x n) -> (p x n)
void mm_tn_acc(const double* a, const double* b, double* c, std::size_t m,
               std::size_t p, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * p;
        const double* brow = b + i * n;
        for (std::size_t k = 0; k < p; ++k) {
            const double av = arow[k];
            double* crow = c + k * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

constexpr double kNormEps = 1e-12;

}  // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor::Tensor(std::vector<std::size_t> shape, bool requires_grad)
    : impl_(std::make_shared<TensorData>()) {
    impl_->shape = std::move(shape);
    impl_->data.assign(shape_product(impl_->shape), 0.0);
    impl_->requires_grad = requires_grad;
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values,
               bool requires_grad)
    : impl_(std::make_shared<TensorData>()) {
    impl_->shape = std::move(shape);
    if (values.size() != shape_product(impl_->shape)) {
        throw ContractError("Tensor: data length does not match shape");
    }
    impl_->data = std::move(values);
    impl_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return Tensor({}, {v}, requires_grad);
}

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values), requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::vector<double> values, bool requires_grad) {
    return Tensor({rows, cols}, std::move(values), requires_grad);
}

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
    return Tensor(std::move(shape), requires_grad);
}

std::size_t Tensor::rows() const {
    return rank() == 2 ? impl_->shape[0] : 1;
}

std::size_t Tensor::cols() const {
    if (rank() == 2) return impl_->shape[1];
    if (rank() == 1) return impl_->shape[0];
    return 1;
}

double Tensor::item() const {
    if (size() != 1) throw ContractError("item: tensor is not a scalar");
    return impl_->data[0];
}

std::vector<double>& Tensor::grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
}

void Tensor::zero_grad() {
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
    Tensor t;
    t.impl_ = std::make_shared<TensorData>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;  // value snapshot; no graph link
    t.impl_->requires_grad = false;
    return t;
}

Tensor Tensor::clone() const {
    return detach();
}

std::string shape_str(const Tensor& t) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < t.shape().size(); ++i) {
        if (i) os << 'x';
        os << t.shape()[i];
    }
    os << ']';
    return os.str();
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape::Tape() : prev_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(const char* op, std::function<void()> backward) {
    if (g_active_tape) g_active_tape->nodes_.push_back({op, std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
    if (!loss.is_scalar()) {
        throw ContractError("backward: loss must be scalar, got " + shape_str(loss));
    }
    grad_buf(loss.impl())[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        it->backward();
    }
}

NoGradGuard::NoGradGuard() : saved_(g_active_tape) { g_active_tape = nullptr; }

NoGradGuard::~NoGradGuard() { g_active_tape = saved_; }

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

namespace {

bool recording(const Tensor& a) {
    return Tape::active() != nullptr && wants_grad(a);
}

bool recording(const Tensor& a, const Tensor& b) {
    return Tape::active() != nullptr && (wants_grad(a) || wants_grad(b));
}

Tensor make_out(std::vector<std::size_t> shape, bool track) {
    Tensor t(std::move(shape));
    t.set_requires_grad(track);
    return t;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
        shape_error("matmul", a, b);
    }
    const std::size_t m = a.shape()[0], p = a.shape()[1], n = b.shape()[1];
    const bool track = recording(a, b);
    Tensor out = make_out({m, n}, track);
    mm_nn(a.data().data(), b.data().data(), out.data().data(), m, p, n);
    if (track) {
        Data da = a.impl(), db = b.impl(), dout = out.impl();
        const bool ga = wants_grad(a), gb = wants_grad(b);
        Tape::record("matmul", [da, db, dout, m, p, n, ga, gb] {
            if (dout->grad.empty()) return;
            if (ga) mm_nt_acc(dout->grad.data(), db->data.data(), grad_buf(da), m, n, p);
            if (gb) mm_tn_acc(da->data.data(), dout->grad.data(), grad_buf(db), m, p, n);
        });
    }
    return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1]) {
        shape_error("matmul_nt", a, b);
    }
    const std::size_t m = a.shape()[0], n = a.shape()[1], p = b.shape()[0];
    const bool track = recording(a, b);
    Tensor out = make_out({m, p}, track);
    mm_nt_acc(a.data().data(), b.data().data(), out.data().data(), m, n, p);
    if (track) {
        Data da = a.impl(), db = b.impl(), dout = out.impl();
        const bool ga = wants_grad(a), gb = wants_grad(b);
        Tape::record("matmul_nt", [da, db, dout, m, n, p, ga, gb] {
            if (dout->grad.empty()) return;
            if (ga) {
                std::vector<double> tmp(m * n, 0.0);
                mm_nn(dout->grad.data(), db->data.data(), tmp.data(), m, p, n);
                double* g = grad_buf(da);
                for (std::size_t i = 0; i < tmp.size(); ++i) g[i] += tmp[i];
            }
            if (gb) mm_tn_acc(dout->grad.data(), da->data.data(), grad_buf(db), m, p, n);
        });
    }
    return out;
}

namespace {

enum class AddKind { Elementwise, RowBroadcast };

AddKind add_kind(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape()) return AddKind::Elementwise;
    if (a.rank() == 2 && b.rank() == 1 && b.shape()[0] == a.shape()[1]) {
        return AddKind::RowBroadcast;
    }
    shape_error(op, a, b);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    const AddKind kind = add_kind("add", a, b);
    const bool track = recording(a, b);
    Tensor out = make_out(a.shape(), track);
    const std::size_t n = a.size();
    if (kind == AddKind::Elementwise) {
        for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    } else {
        const std::size_t cols = b.size();
        for (std::size_t i = 0; i < n; ++i) {
            out.data()[i] = a.data()[i] + b.data()[i % cols];
        }
    }
    if (track) {
        Data da = a.impl(), db = b.impl(), dout = out.impl();
        const bool ga = wants_grad(a), gb = wants_grad(b);
        Tape::record("add", [da, db, dout, kind, ga, gb] {
            if (dout->grad.empty()) return;
            const std::size_t n = dout->grad.size();
            if (ga) {
                double* g = grad_buf(da);
                for (std::size_t i = 0; i < n; ++i) g[i] += dout->grad[i];
            }
            if (gb) {
                double* g = grad_buf(db);
                if (kind == AddKind::Elementwise) {
                    for (std::size_t i = 0; i < n; ++i) g[i] += dout->grad[i];
                } else {
                    const std::size_t cols = db->data.size();
                    for (std::size_t i = 0; i < n; ++i) g[i % cols] += dout->grad[i];
                }
            }
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_error("sub", a, b);
    const bool track = recording(a, b);
    Tensor out = make_out(a.shape(), track);
    for (std::size_t i = 0; i < a.size(); ++i) {
        out.data()[i] = a.data()[i] - b.data()[i];
    }
    if (track) {
        Data da = a.impl(), db = b.impl(), dout = out.impl();
        const bool ga = wants_grad(a), gb = wants_grad(b);
        Tape::record("sub", [da, db, dout, ga, gb] {
            if (dout->grad.empty()) return;
            const std::size_t n = dout->grad.size();
            if (ga) {
                double* g = grad_buf(da);
                for (std::size_t i = 0; i < n; ++i) g[i] += dout->grad[i];
            }
            if (gb) {
                double* g = grad_buf(db);
                for (std::size_t i = 0; i < n; ++i) g[i] -= dout->grad[i];
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_error("mul", a, b);
    const bool track = recording(a, b);
    Tensor out = make_out(a.shape(), track);
    for (std::size_t i = 0; i < a.size(); ++i) {
        out.data()[i] = a.data()[i] * b.data()[i];
    }
    if (track) {
        Data da = a.impl(), db = b.impl(), dout = out.impl();
        const bool ga = wants_grad(a), gb = wants_grad(b);
        Tape::record("mul", [da, db, dout, ga, gb] {
            if (dout->grad.empty()) return;
            const std::size_t n = dout->grad.size();
            if (ga) {
                double* g = grad_buf(da);
                for (std::size_t i = 0; i < n; ++i) g[i] += dout->grad[i] * db->data[i];
            }
            if (gb) {
                double* g = grad_buf(db);
                for (std::size_t i = 0; i < n; ++i) g[i] += dout->grad[i] * da->data[i];
            }
        });
    }
    return out;
}

Tensor scale(const Tensor& a, double c) {
    const bool track = recording(a);
    Tensor out = make_out(a.shape(), track);
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * c;
    if (track) {
        Data da = a.impl(), dout = out.impl();
        Tape::record("scale", [da, dout, c] {
            if (dout->grad.empty()) return;
            double* g = grad_buf(da);
            for (std::size_t i = 0; i < dout->grad.size(); ++i) {
                g[i] += dout->grad[i] * c;
            }
        });
    }
    return out;
}

Tensor add_const(const Tensor& a, double c) {
    const bool track = recording(a);
    Tensor out = make_out(a.shape(), track);
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + c;
    if (track) {
        Data da = a.impl(), dout = out.impl();
        Tape::record("add_const", [da, dout] {
            if (dout->grad.empty()) return;
            double* g = grad_buf(da);
            for (std::size_t i = 0; i < dout->grad.size(); ++i) g[i] += dout->grad[i];
        });
    }
    return out;
}

Tensor concat(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    const std::size_t rank = parts.front().rank();
    if (rank != 1 && rank != 2) shape_error("concat", parts.front());
    const std::size_t rows = parts.front().rows();
    std::size_t total_cols = 0;
    bool track = false;
    for (const Tensor& p : parts) {
        if (p.rank() != rank || p.rows() != rows) {
            shape_error("concat", parts.front(), p);
        }
        total_cols += p.cols();
        track = track || (Tape::active() && wants_grad(p));
    }
    Tensor out = make_out(rank == 1 ? std::vector<std::size_t>{total_cols}
                                    : std::vector<std::size_t>{rows, total_cols},
                          track);
    std::size_t col_off = 0;
    for (const Tensor& p : parts) {
        const std::size_t pc = p.cols();
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(p.data().data() + r * pc, pc,
                        out.data().data() + r * total_cols + col_off);
        }
        col_off += pc;
    }
    if (track) {
        std::vector<Data> srcs;
        std::vector<std::size_t> widths;
        std::vector<bool> gs;
        for (const Tensor& p : parts) {
            srcs.push_back(p.impl());
            widths.push_back(p.cols());
            gs.push_back(wants_grad(p));
        }
        Data dout = out.impl();
        Tape::record("concat", [srcs, widths, gs, dout, rows, total_cols] {
            if (dout->grad.empty()) return;
            std::size_t col_off = 0;
            for (std::size_t s = 0; s < srcs.size(); ++s) {
                const std::size_t pc = widths[s];
                if (gs[s]) {
                    double* g = grad_buf(srcs[s]);
                    for (std::size_t r = 0; r < rows; ++r) {
                        const double* src = dout->grad.data() + r * total_cols + col_off;
                        double* dst = g + r * pc;
                        for (std::size_t j = 0; j < pc; ++j) dst[j] += src[j];
                    }
                }
                col_off += pc;
            }
        });
    }
    return out;
}

std::vector<Tensor> split(const Tensor& t, const std::vector<std::size_t>& widths) {
    const std::size_t rank = t.rank();
    if (rank != 1 && rank != 2) shape_error("split", t);
    const std::size_t rows = t.rows();
    const std::size_t total_cols = t.cols();
    std::size_t sum = std::accumulate(widths.begin(), widths.end(), std::size_t{0});
    if (sum != total_cols) {
        throw ContractError("split: widths sum " + std::to_string(sum) +
                            " != cols " + std::to_string(total_cols));
    }
    const bool track = recording(t);
    std::vector<Tensor> outs;
    std::size_t col_off = 0;
    for (std::size_t w : widths) {
        Tensor out = make_out(rank == 1 ? std::vector<std::size_t>{w}
                                        : std::vector<std::size_t>{rows, w},
                              track);
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(t.data().data() + r * total_cols + col_off, w,
                        out.data().data() + r * w);
        }
        if (track) {
            Data dsrc = t.impl(), dout = out.impl();
            Tape::record("split", [dsrc, dout, rows, total_cols, col_off, w] {
                if (dout->grad.empty()) return;
                double* g = grad_buf(dsrc);
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* src = dout->grad.data() + r * w;
                    double* dst = g + r * total_cols + col_off;
                    for (std::size_t j = 0; j < w; ++j) dst[j] += src[j];
                }
            });
        }
        outs.push_back(std::move(out));
        col_off += w;
    }
    return outs;
}

Tensor gather_rows(const Tensor& m, const std::vector<std::size_t>& indices) {
    if (m.rank() != 2) shape_error("gather_rows", m);
    const std::size_t rows = m.shape()[0], cols = m.shape()[1];
    for (std::size_t idx : indices) {
        if (idx >= rows) {
            throw ContractError("gather_rows: index " + std::to_string(idx) +
                                " out of range [0, " + std::to_string(rows) + ")");
        }
    }
    const bool track = recording(m);
    Tensor out = make_out({indices.size(), cols}, track);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        std::copy_n(m.data().data() + indices[i] * cols, cols,
                    out.data().data() + i * cols);
    }
    if (track) {
        Data dm = m.impl(), dout = out.impl();
        auto idx = indices;
        Tape::record("gather_rows", [dm, dout, idx, cols] {
            if (dout->grad.empty()) return;
            double* g = grad_buf(dm);
            for (std::size_t i = 0; i < idx.size(); ++i) {
                const double* src = dout->grad.data() + i * cols;
                double* dst = g + idx[i] * cols;
                for (std::size_t j = 0; j < cols; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

namespace {

// Shared scaffolding for elementwise unary ops: dy/dx computed from (x, y).
template <typename Fwd, typename Bwd>
Tensor unary_op(const char* name, const Tensor& a, Fwd fwd, Bwd dydx) {
    const bool track = recording(a);
    Tensor out = make_out(a.shape(), track);
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = fwd(a.data()[i]);
    if (track) {
        Data da = a.impl(), dout = out.impl();
        Tape::record(name, [da, dout, dydx] {
            if (dout->grad.empty()) return;
            double* g = grad_buf(da);
            for (std::size_t i = 0; i < dout->grad.size(); ++i) {
                g[i] += dout->grad[i] * dydx(da->data[i], dout->data[i]);
            }
        });
    }
    return out;
}

}  // namespace

Tensor relu(const Tensor& a) {
    // subgradient 0 at the kink
    return unary_op(
        "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& a, double alpha) {
    return unary_op(
        "leaky_relu", a,
        [alpha](double x) { return x > 0.0 ? x : alpha * x; },
        [alpha](double x, double) { return x > 0.0 ? 1.0 : alpha; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(
        "sigmoid", a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor log(const Tensor& a) {
    for (double v : a.data()) {
        if (!(v > 0.0)) {
            throw std::domain_error("log: non-positive input " + std::to_string(v));
        }
    }
    return unary_op(
        "log", a, [](double x) { return std::log(x); },
        [](double x, double) { return 1.0 / x; });
}

Tensor log_sigmoid(const Tensor& a) {
    return unary_op(
        "log_sigmoid", a,
        [](double x) {
            return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
        },
        [](double x, double) { return 1.0 / (1.0 + std::exp(x)); });
}

Tensor mean(const Tensor& a) {
    const bool track = recording(a);
    const std::size_t n = a.size();
    if (n == 0) throw ContractError("mean: empty tensor");
    double s = 0.0;
    for (double v : a.data()) s += v;
    Tensor out = Tensor::scalar(s / static_cast<double>(n));
    out.set_requires_grad(track);
    if (track) {
        Data da = a.impl(), dout = out.impl();
        Tape::record("mean", [da, dout, n] {
            if (dout->grad.empty()) return;
            const double g0 = dout->grad[0] / static_cast<double>(n);
            double* g = grad_buf(da);
            for (std::size_t i = 0; i < n; ++i) g[i] += g0;
        });
    }
    return out;
}

Tensor sum(const Tensor& a) {
    const bool track = recording(a);
    double s = 0.0;
    for (double v : a.data()) s += v;
    Tensor out = Tensor::scalar(s);
    out.set_requires_grad(track);
    if (track) {
        Data da = a.impl(), dout = out.impl();
        Tape::record("sum", [da, dout] {
            if (dout->grad.empty()) return;
            const double g0 = dout->grad[0];
            double* g = grad_buf(da);
            for (std::size_t i = 0; i < da->data.size(); ++i) g[i] += g0;
        });
    }
    return out;
}

Tensor l2_norm(const Tensor& a) {
    const bool track = recording(a);
    double s = 0.0;
    for (double v : a.data()) s += v * v;
    const double norm = std::sqrt(s);
    Tensor out = Tensor::scalar(norm);
    out.set_requires_grad(track);
    if (track) {
        Data da = a.impl(), dout = out.impl();
        Tape::record("l2_norm", [da, dout, norm] {
            if (dout->grad.empty()) return;
            const double g0 = dout->grad[0] / (norm + kNormEps);
            double* g = grad_buf(da);
            for (std::size_t i = 0; i < da->data.size(); ++i) {
                g[i] += g0 * da->data[i];
            }
        });
    }
    return out;
}

Tensor l2_normalize(const Tensor& a) {
    if (a.rank() != 1 && a.rank() != 2) shape_error("l2_normalize", a);
    const std::size_t rows = a.rows(), cols = a.cols();
    const bool track = recording(a);
    Tensor out = make_out(a.shape(), track);
    std::vector<double> norms(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = a.data().data() + r * cols;
        double s = 0.0;
        for (std::size_t j = 0; j < cols; ++j) s += x[j] * x[j];
        const double norm = std::sqrt(s) + kNormEps;
        norms[r] = norm;
        double* y = out.data().data() + r * cols;
        for (std::size_t j = 0; j < cols; ++j) y[j] = x[j] / norm;
    }
    if (track) {
        Data da = a.impl(), dout = out.impl();
        Tape::record("l2_normalize", [da, dout, norms, rows, cols] {
            if (dout->grad.empty()) return;
            double* g = grad_buf(da);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* x = da->data.data() + r * cols;
                const double* gy = dout->grad.data() + r * cols;
                const double norm = norms[r];
                double dot = 0.0;
                for (std::size_t j = 0; j < cols; ++j) dot += gy[j] * x[j];
                const double c = dot / (norm * norm * norm);
                double* gx = g + r * cols;
                for (std::size_t j = 0; j < cols; ++j) {
                    gx[j] += gy[j] / norm - c * x[j];
                }
            }
        });
    }
    return out;
}

Tensor cosine_sim(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape() || a.rank() < 1 || a.rank() > 2) {
        shape_error("cosine_sim", a, b);
    }
    const std::size_t rows = a.rows(), cols = a.cols();
    const bool track = recording(a, b);
    Tensor out = make_out(a.rank() == 1 ? std::vector<std::size_t>{}
                                        : std::vector<std::size_t>{rows},
                          track);
    std::vector<double> na(rows), nb(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = a.data().data() + r * cols;
        const double* y = b.data().data() + r * cols;
        double sx = 0.0, sy = 0.0, dot = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            sx += x[j] * x[j];
            sy += y[j] * y[j];
            dot += x[j] * y[j];
        }
        na[r] = std::sqrt(sx) + kNormEps;
        nb[r] = std::sqrt(sy) + kNormEps;
        out.data()[r] = dot / (na[r] * nb[r]);
    }
    if (track) {
        Data da = a.impl(), db = b.impl(), dout = out.impl();
        const bool ga = wants_grad(a), gb = wants_grad(b);
        Tape::record("cosine_sim", [da, db, dout, na, nb, rows, cols, ga, gb] {
            if (dout->grad.empty()) return;
            for (std::size_t r = 0; r < rows; ++r) {
                const double gc = dout->grad[r];
                if (gc == 0.0) continue;
                const double* x = da->data.data() + r * cols;
                const double* y = db->data.data() + r * cols;
                const double cosv = dout->data[r];
                if (ga) {
                    double* gx = grad_buf(da) + r * cols;
                    for (std::size_t j = 0; j < cols; ++j) {
                        gx[j] += gc * (y[j] / (na[r] * nb[r]) -
                                       cosv * x[j] / (na[r] * na[r]));
                    }
                }
                if (gb) {
                    double* gy = grad_buf(db) + r * cols;
                    for (std::size_t j = 0; j < cols; ++j) {
                        gy[j] += gc * (x[j] / (na[r] * nb[r]) -
                                       cosv * y[j] / (nb[r] * nb[r]));
                    }
                }
            }
        });
    }
    return out;
}

Tensor squared_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_error("squared_diff", a, b);
    const bool track = recording(a, b);
    Tensor out = make_out(a.shape(), track);
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a.data()[i] - b.data()[i];
        out.data()[i] = d * d;
    }
    if (track) {
        Data da = a.impl(), db = b.impl(), dout = out.impl();
        const bool ga = wants_grad(a), gb = wants_grad(b);
        Tape::record("squared_diff", [da, db, dout, ga, gb] {
            if (dout->grad.empty()) return;
            for (std::size_t i = 0; i < dout->grad.size(); ++i) {
                const double g2 = dout->grad[i] * 2.0 * (da->data[i] - db->data[i]);
                if (ga) grad_buf(da)[i] += g2;
                if (gb) grad_buf(db)[i] -= g2;
            }
        });
    }
    return out;
}

Tensor softmax_cross_entropy(const Tensor& logits,
                             const std::vector<std::size_t>& targets) {
    if (logits.rank() != 2) shape_error("softmax_cross_entropy", logits);
    const std::size_t rows = logits.shape()[0], cols = logits.shape()[1];
    if (targets.size() != rows) {
        throw ContractError("softmax_cross_entropy: " +
                            std::to_string(targets.size()) + " targets for " +
                            std::to_string(rows) + " rows");
    }
    for (std::size_t t : targets) {
        if (t >= cols) {
            throw ContractError("softmax_cross_entropy: target " +
                                std::to_string(t) + " out of range [0, " +
                                std::to_string(cols) + ")");
        }
    }
    const bool track = recording(logits);
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* z = logits.data().data() + r * cols;
        double zmax = z[0];
        for (std::size_t j = 1; j < cols; ++j) zmax = std::max(zmax, z[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < cols; ++j) sum += std::exp(z[j] - zmax);
        total += zmax + std::log(sum) - z[targets[r]];
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(rows));
    out.set_requires_grad(track);
    if (track) {
        Data da = logits.impl(), dout = out.impl();
        auto tgt = targets;
        Tape::record("softmax_cross_entropy", [da, dout, tgt, rows, cols] {
            if (dout->grad.empty()) return;
            const double g0 = dout->grad[0] / static_cast<double>(rows);
            double* g = grad_buf(da);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* z = da->data.data() + r * cols;
                double zmax = z[0];
                for (std::size_t j = 1; j < cols; ++j) zmax = std::max(zmax, z[j]);
                double sum = 0.0;
                for (std::size_t j = 0; j < cols; ++j) sum += std::exp(z[j] - zmax);
                double* gr = g + r * cols;
                for (std::size_t j = 0; j < cols; ++j) {
                    gr[j] += g0 * std::exp(z[j] - zmax) / sum;
                }
                gr[tgt[r]] -= g0;
            }
        });
    }
    return out;
}

}  // namespace flam::ag
