#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "koopflow/common.hpp"

namespace koopflow {

using Shape = std::vector<long>;

inline long shape_numel(const Shape& s) {
    long n = 1;
    for (long d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
    return out + "]";
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated lazily, same length as value
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

}  // namespace detail

// Dense row-major tensor of doubles. Value-semantic handle: copies share the
// underlying node, clone() deep-copies. 1-D tensors behave as a single row in
// the 2-D ops.
class Tensor {
public:
    Tensor() : node_(std::make_shared<detail::Node>()) {}

    Tensor(Shape shape, std::vector<double> data) : node_(std::make_shared<detail::Node>()) {
        if (shape_numel(shape) != static_cast<long>(data.size()))
            throw ShapeError("data length " + std::to_string(data.size()) + " does not match " + shape_str(shape));
        node_->shape = std::move(shape);
        node_->value = std::move(data);
    }

    static Tensor zeros(Shape shape) {
        long n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0));
    }

    static Tensor full(Shape shape, double v) {
        long n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), v));
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor identity(long n) {
        Tensor t = zeros({n, n});
        for (long i = 0; i < n; ++i) t.node_->value[static_cast<std::size_t>(i * n + i)] = 1.0;
        return t;
    }

    const Shape& shape() const { return node_->shape; }
    long ndim() const { return static_cast<long>(node_->shape.size()); }
    long numel() const { return static_cast<long>(node_->value.size()); }
    bool is_scalar() const { return numel() == 1; }

    // 1-D tensors are treated as one row
    long rows() const { return ndim() <= 1 ? 1 : node_->shape[0]; }
    long cols() const {
        if (ndim() == 0) return static_cast<long>(node_->value.size());
        return ndim() == 1 ? node_->shape[0] : node_->shape[1];
    }

    const std::vector<double>& data() const { return node_->value; }
    std::vector<double>& data() { return node_->value; }

    double item() const {
        if (!is_scalar()) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
        return node_->value[0];
    }

    double at(long i) const { return node_->value[static_cast<std::size_t>(i)]; }
    double at(long r, long c) const { return node_->value[static_cast<std::size_t>(r * cols() + c)]; }
    void set(long i, double v) { node_->value[static_cast<std::size_t>(i)] = v; }
    void set(long r, long c, double v) { node_->value[static_cast<std::size_t>(r * cols() + c)] = v; }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        node_->requires_grad = b;
        if (b) node_->ensure_grad();
        return *this;
    }

    const std::vector<double>& grad() const {
        const_cast<detail::Node*>(node_.get())->ensure_grad();
        return node_->grad;
    }

    void zero_grad() {
        node_->ensure_grad();
        std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    Tensor clone() const {
        Tensor t(node_->shape, node_->value);
        return t;
    }

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

    std::shared_ptr<detail::Node> node() const { return node_; }

private:
    std::shared_ptr<detail::Node> node_;
};

// Dynamic reverse-mode tape. One tape is active at a time (RAII); ops record a
// backward closure when any input requires a gradient. Rebuilt every step.
class Tape {
public:
    Tape() : prev_(active_ptr()) { active_ptr() = this; }
    ~Tape() { active_ptr() = prev_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_ptr(); }

    static Tape* swap_active(Tape* t) {
        Tape* old = active_ptr();
        active_ptr() = t;
        return old;
    }

    void record(std::function<void()> fn) { entries_.push_back(std::move(fn)); }

    std::size_t size() const { return entries_.size(); }

    // Seeds d(loss)/d(loss) = 1 and replays recorded ops in reverse.
    // Gradients accumulate into every reachable requires_grad tensor.
    void backward(const Tensor& loss) {
        if (!loss.is_scalar()) throw ShapeError("backward requires a scalar loss, got " + shape_str(loss.shape()));
        auto n = loss.node();
        n->ensure_grad();
        n->grad[0] += 1.0;
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
    }

private:
    static Tape*& active_ptr() {
        thread_local Tape* t = nullptr;
        return t;
    }
    Tape* prev_;
    std::vector<std::function<void()>> entries_;
};

// Temporarily disables recording (used for optimizer state, oracles, power iteration).
class NoGradGuard {
public:
    NoGradGuard() : saved_(Tape::swap_active(nullptr)) {}
    ~NoGradGuard() { Tape::swap_active(saved_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    Tape* saved_;
};

namespace detail {

inline void check_finite(const char* op, const std::vector<double>& v) {
    if (!all_finite(v)) throw NumericError(std::string(op) + " produced a non-finite value");
}

inline bool should_record(std::initializer_list<const Tensor*> inputs) {
    if (Tape::active() == nullptr) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

// C[m x n] += or = A[m x k] * B[k x n], row-major
inline void gemm_nn(const double* a, const double* b, double* c, long m, long k, long n, bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, 0.0);
    for (long i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (long p = 0; p < k; ++p) {
            double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (long j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m x n] += A[m x k] * B^T where B is [n x k]
inline void gemm_nt(const double* a, const double* b, double* c, long m, long k, long n, bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, 0.0);
    for (long i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (long j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double s = 0.0;
            for (long p = 0; p < k; ++p) s += arow[p] * brow[p];
            crow[j] += s;
        }
    }
}

// C[k x n] += A^T * B where A is [m x k], B is [m x n]
inline void gemm_tn(const double* a, const double* b, double* c, long m, long k, long n, bool accumulate) {
    if (!accumulate) std::fill(c, c + k * n, 0.0);
    for (long i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (long p = 0; p < k; ++p) {
            double av = arow[p];
            if (av == 0.0) continue;
            double* crow = c + p * n;
            for (long j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// primitives
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2)
        throw ShapeError("matmul expects 2-D operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    long m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
    if (k != k2)
        throw ShapeError("matmul inner dimensions differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor c = Tensor::zeros({m, n});
    detail::gemm_nn(a.data().data(), b.data().data(), c.data().data(), m, k, n, false);
    detail::check_finite("matmul", c.data());
    if (detail::should_record({&a, &b})) {
        c.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), cn = c.node();
        Tape::active()->record([an, bn, cn, m, k, n] {
            if (an->requires_grad) {
                an->ensure_grad();
                detail::gemm_nt(cn->grad.data(), bn->value.data(), an->grad.data(), m, n, k, true);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                detail::gemm_tn(an->value.data(), cn->grad.data(), bn->grad.data(), m, k, n, true);
            }
        });
    }
    return c;
}

namespace detail {

enum class BinOp { Add, Sub, Mul, Div };

inline Tensor binary_op(BinOp op, const char* name, const Tensor& a, const Tensor& b) {
    const bool a_scalar = a.is_scalar(), b_scalar = b.is_scalar();
    if (!a_scalar && !b_scalar && a.shape() != b.shape())
        throw ShapeError(std::string(name) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " are neither equal nor scalar-broadcastable");
    const Tensor& big = (!a_scalar || b_scalar) ? a : b;
    Tensor c = Tensor::zeros(big.shape());
    const long n = c.numel();
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& cv = c.data();
    for (long i = 0; i < n; ++i) {
        double x = av[a_scalar ? 0 : i], y = bv[b_scalar ? 0 : i];
        switch (op) {
            case BinOp::Add: cv[i] = x + y; break;
            case BinOp::Sub: cv[i] = x - y; break;
            case BinOp::Mul: cv[i] = x * y; break;
            case BinOp::Div: cv[i] = x / y; break;
        }
    }
    check_finite(name, cv);
    if (should_record({&a, &b})) {
        c.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), cn = c.node();
        Tape::active()->record([op, an, bn, cn, a_scalar, b_scalar, n] {
            for (long i = 0; i < n; ++i) {
                double g = cn->grad[i];
                double x = an->value[a_scalar ? 0 : i], y = bn->value[b_scalar ? 0 : i];
                double dx = 0.0, dy = 0.0;
                switch (op) {
                    case BinOp::Add: dx = g; dy = g; break;
                    case BinOp::Sub: dx = g; dy = -g; break;
                    case BinOp::Mul: dx = g * y; dy = g * x; break;
                    case BinOp::Div: dx = g / y; dy = -g * x / (y * y); break;
                }
                if (an->requires_grad) { an->ensure_grad(); an->grad[a_scalar ? 0 : i] += dx; }
                if (bn->requires_grad) { bn->ensure_grad(); bn->grad[b_scalar ? 0 : i] += dy; }
            }
        });
    }
    return c;
}

// value and derivative evaluated together
struct UnaryRule {
    const char* name;
    double (*f)(double);
    double (*df)(double);
};

inline Tensor unary_op(const UnaryRule& rule, const Tensor& a) {
    Tensor c = Tensor::zeros(a.shape());
    const long n = c.numel();
    for (long i = 0; i < n; ++i) c.data()[i] = rule.f(a.data()[i]);
    check_finite(rule.name, c.data());
    if (should_record({&a})) {
        c.set_requires_grad(true);
        auto an = a.node(), cn = c.node();
        auto df = rule.df;
        Tape::active()->record([an, cn, df, n] {
            an->ensure_grad();
            for (long i = 0; i < n; ++i) an->grad[i] += cn->grad[i] * df(an->value[i]);
        });
    }
    return c;
}

inline double sigmoid_val(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary_op(detail::BinOp::Add, "add", a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary_op(detail::BinOp::Sub, "sub", a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary_op(detail::BinOp::Mul, "mul", a, b); }
inline Tensor div(const Tensor& a, const Tensor& b) { return detail::binary_op(detail::BinOp::Div, "div", a, b); }

inline Tensor exp(const Tensor& a) {
    static constexpr detail::UnaryRule r{"exp", [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); }};
    return detail::unary_op(r, a);
}

inline Tensor log1p(const Tensor& a) {
    static constexpr detail::UnaryRule r{"log1p", [](double x) { return std::log1p(x); },
                                         [](double x) { return 1.0 / (1.0 + x); }};
    return detail::unary_op(r, a);
}

inline Tensor tanh(const Tensor& a) {
    static constexpr detail::UnaryRule r{"tanh", [](double x) { return std::tanh(x); },
                                         [](double x) { double t = std::tanh(x); return 1.0 - t * t; }};
    return detail::unary_op(r, a);
}

inline Tensor silu(const Tensor& a) {
    static constexpr detail::UnaryRule r{
        "silu", [](double x) { return x * detail::sigmoid_val(x); },
        [](double x) {
            double s = detail::sigmoid_val(x);
            return s * (1.0 + x * (1.0 - s));
        }};
    return detail::unary_op(r, a);
}

inline Tensor atan(const Tensor& a) {
    static constexpr detail::UnaryRule r{"atan", [](double x) { return std::atan(x); },
                                         [](double x) { return 1.0 / (1.0 + x * x); }};
    return detail::unary_op(r, a);
}

inline Tensor square(const Tensor& a) {
    static constexpr detail::UnaryRule r{"square", [](double x) { return x * x; }, [](double x) { return 2.0 * x; }};
    return detail::unary_op(r, a);
}

inline Tensor add_scalar(const Tensor& a, double v) { return add(a, Tensor::scalar(v)); }
inline Tensor mul_scalar(const Tensor& a, double v) { return mul(a, Tensor::scalar(v)); }
inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

// y[r, j] = x[r, idx[j]]; idx entry -1 yields 0 (used for conv zero padding).
// Backward scatter-adds, so repeated indices accumulate correctly.
inline Tensor gather_cols(const Tensor& x, const std::vector<long>& idx) {
    const long r = x.rows(), c = x.cols(), k = static_cast<long>(idx.size());
    for (long j : idx)
        if (j < -1 || j >= c) throw ShapeError("gather_cols index " + std::to_string(j) + " out of range for cols " + std::to_string(c));
    Tensor y = Tensor::zeros({r, k});
    for (long i = 0; i < r; ++i)
        for (long j = 0; j < k; ++j)
            if (idx[j] >= 0) y.data()[i * k + j] = x.data()[i * c + idx[j]];
    if (detail::should_record({&x})) {
        y.set_requires_grad(true);
        auto xn = x.node(), yn = y.node();
        Tape::active()->record([xn, yn, idx, r, c, k] {
            xn->ensure_grad();
            for (long i = 0; i < r; ++i)
                for (long j = 0; j < k; ++j)
                    if (idx[j] >= 0) xn->grad[i * c + idx[j]] += yn->grad[i * k + j];
        });
    }
    return y;
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows())
        throw ShapeError("concat_cols row mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const long r = a.rows(), ca = a.cols(), cb = b.cols();
    Tensor y = Tensor::zeros({r, ca + cb});
    for (long i = 0; i < r; ++i) {
        std::copy_n(a.data().begin() + i * ca, ca, y.data().begin() + i * (ca + cb));
        std::copy_n(b.data().begin() + i * cb, cb, y.data().begin() + i * (ca + cb) + ca);
    }
    if (detail::should_record({&a, &b})) {
        y.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), yn = y.node();
        Tape::active()->record([an, bn, yn, r, ca, cb] {
            for (long i = 0; i < r; ++i) {
                if (an->requires_grad) {
                    an->ensure_grad();
                    for (long j = 0; j < ca; ++j) an->grad[i * ca + j] += yn->grad[i * (ca + cb) + j];
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    for (long j = 0; j < cb; ++j) bn->grad[i * cb + j] += yn->grad[i * (ca + cb) + ca + j];
                }
            }
        });
    }
    return y;
}

// per-row sum: [N x D] -> [N x 1]
inline Tensor row_sum(const Tensor& x) {
    const long r = x.rows(), c = x.cols();
    Tensor y = Tensor::zeros({r, 1});
    for (long i = 0; i < r; ++i) {
        double s = 0.0;
        for (long j = 0; j < c; ++j) s += x.data()[i * c + j];
        y.data()[i] = s;
    }
    if (detail::should_record({&x})) {
        y.set_requires_grad(true);
        auto xn = x.node(), yn = y.node();
        Tape::active()->record([xn, yn, r, c] {
            xn->ensure_grad();
            for (long i = 0; i < r; ++i)
                for (long j = 0; j < c; ++j) xn->grad[i * c + j] += yn->grad[i];
        });
    }
    return y;
}

inline Tensor sum(const Tensor& x) {
    Tensor y = Tensor::scalar(std::accumulate(x.data().begin(), x.data().end(), 0.0));
    if (detail::should_record({&x})) {
        y.set_requires_grad(true);
        auto xn = x.node(), yn = y.node();
        Tape::active()->record([xn, yn] {
            xn->ensure_grad();
            for (double& g : xn->grad) g += yn->grad[0];
        });
    }
    return y;
}

inline Tensor mean(const Tensor& x) { return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel())); }

// broadcast a row vector over every row of x
inline Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    const long r = x.rows(), c = x.cols();
    if (v.numel() != c)
        throw ShapeError("add_rowvec: vector " + shape_str(v.shape()) + " does not match cols of " + shape_str(x.shape()));
    Tensor y = Tensor::zeros({r, c});
    for (long i = 0; i < r; ++i)
        for (long j = 0; j < c; ++j) y.data()[i * c + j] = x.data()[i * c + j] + v.data()[j];
    detail::check_finite("add_rowvec", y.data());
    if (detail::should_record({&x, &v})) {
        y.set_requires_grad(true);
        auto xn = x.node(), vn = v.node(), yn = y.node();
        Tape::active()->record([xn, vn, yn, r, c] {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (long i = 0; i < r * c; ++i) xn->grad[i] += yn->grad[i];
            }
            if (vn->requires_grad) {
                vn->ensure_grad();
                for (long i = 0; i < r; ++i)
                    for (long j = 0; j < c; ++j) vn->grad[j] += yn->grad[i * c + j];
            }
        });
    }
    return y;
}

// scale every row of x by the vector v: y[i,j] = x[i,j] * v[j]
inline Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
    const long r = x.rows(), c = x.cols();
    if (v.numel() != c)
        throw ShapeError("mul_rowvec: vector " + shape_str(v.shape()) + " does not match cols of " + shape_str(x.shape()));
    Tensor y = Tensor::zeros({r, c});
    for (long i = 0; i < r; ++i)
        for (long j = 0; j < c; ++j) y.data()[i * c + j] = x.data()[i * c + j] * v.data()[j];
    detail::check_finite("mul_rowvec", y.data());
    if (detail::should_record({&x, &v})) {
        y.set_requires_grad(true);
        auto xn = x.node(), vn = v.node(), yn = y.node();
        Tape::active()->record([xn, vn, yn, r, c] {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (long i = 0; i < r; ++i)
                    for (long j = 0; j < c; ++j) xn->grad[i * c + j] += yn->grad[i * c + j] * vn->value[j];
            }
            if (vn->requires_grad) {
                vn->ensure_grad();
                for (long i = 0; i < r; ++i)
                    for (long j = 0; j < c; ++j) vn->grad[j] += yn->grad[i * c + j] * xn->value[i * c + j];
            }
        });
    }
    return y;
}

// reinterpret with a new shape (copying); gradient passes through unchanged
inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
    Tensor y(std::move(shape), x.data());
    if (detail::should_record({&x})) {
        y.set_requires_grad(true);
        auto xn = x.node(), yn = y.node();
        Tape::active()->record([xn, yn] {
            xn->ensure_grad();
            for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += yn->grad[i];
        });
    }
    return y;
}

// [N*g x c] -> [N x c], averaging each group of g consecutive rows
inline Tensor mean_pool_rows(const Tensor& x, long group) {
    const long r = x.rows(), c = x.cols();
    if (group < 1 || r % group != 0)
        throw ShapeError("mean_pool_rows: rows " + std::to_string(r) + " not divisible by group " + std::to_string(group));
    const long n = r / group;
    Tensor y = Tensor::zeros({n, c});
    for (long i = 0; i < n; ++i)
        for (long g = 0; g < group; ++g)
            for (long j = 0; j < c; ++j) y.data()[i * c + j] += x.data()[(i * group + g) * c + j] / static_cast<double>(group);
    if (detail::should_record({&x})) {
        y.set_requires_grad(true);
        auto xn = x.node(), yn = y.node();
        Tape::active()->record([xn, yn, n, c, group] {
            xn->ensure_grad();
            for (long i = 0; i < n; ++i)
                for (long g = 0; g < group; ++g)
                    for (long j = 0; j < c; ++j)
                        xn->grad[(i * group + g) * c + j] += yn->grad[i * c + j] / static_cast<double>(group);
        });
    }
    return y;
}

inline void backward(const Tensor& loss) {
    Tape* t = Tape::active();
    if (t == nullptr) throw NumericError("backward called with no active tape");
    t->backward(loss);
}

}  // namespace koopflow
