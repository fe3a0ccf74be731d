#pragma once

// Minimal tape-based reverse-mode automatic differentiation over dense
// row-major float64 tensors. Only the operations needed by the teacher and
// student networks and by input-gradient scoring are provided.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "stad/error.hpp"

namespace stad::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
    }
};

using NodePtr = std::shared_ptr<Node>;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

}  // namespace detail

class Tape;

/// Handle to a node of the computation graph. Copies share the node.
class Tensor {
  public:
    Tensor() = default;
    Tensor(detail::NodePtr node, Tape* tape) : node_(std::move(node)), tape_(tape) {}

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t size() const { return node_->value.size(); }
    std::span<const double> values() const { return node_->value; }
    /// Empty when no gradient has reached this tensor.
    std::span<const double> grad() const { return node_->grad; }
    bool requires_grad() const { return node_->requires_grad; }
    Tape* tape() const { return tape_; }

    double item() const {
        if (size() != 1) throw DimensionError("item() on non-scalar tensor " + to_string(shape()));
        return node_->value[0];
    }

    const detail::NodePtr& node() const { return node_; }

  private:
    detail::NodePtr node_;
    Tape* tape_ = nullptr;
};

/// Tensor that never participates in gradient recording.
inline Tensor constant(Shape shape, std::vector<double> values) {
    if (numel(shape) != values.size())
        throw DimensionError("constant: shape " + to_string(shape) + " holds " +
                             std::to_string(numel(shape)) + " values, got " + std::to_string(values.size()));
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    return Tensor(std::move(node), nullptr);
}

inline Tensor zeros(Shape shape) {
    const auto n = numel(shape);
    return constant(std::move(shape), std::vector<double>(n, 0.0));
}

/// Ordered record of executed operations. Confined to one thread.
class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Tensor leaf(Shape shape, std::vector<double> values, bool requires_grad = true) {
        Tensor t = constant(std::move(shape), std::move(values));
        t.node()->requires_grad = requires_grad;
        if (requires_grad) {
            t.node()->ensure_grad();
            leaves_.push_back(t.node());
        }
        return Tensor(t.node(), this);
    }

    void record(std::function<void()> adjoint) { adjoints_.push_back(std::move(adjoint)); }
    std::size_t size() const { return adjoints_.size(); }

    /// Populates the gradient of every requires-grad leaf with d(loss)/d(leaf).
    void backward(const Tensor& loss) {
        if (consumed_) throw ValidationError("backward: tape already consumed; call reset() first");
        if (loss.size() != 1) throw DimensionError("backward: loss must be scalar, got " + to_string(loss.shape()));
        if (!loss.requires_grad() || loss.tape() != this)
            throw ValidationError("backward: loss is not connected to this tape");
        consumed_ = true;
        loss.node()->ensure_grad();
        loss.node()->grad[0] = 1.0;
        for (auto it = adjoints_.rbegin(); it != adjoints_.rend(); ++it) (*it)();
        for (auto& leaf : leaves_) leaf->ensure_grad();
    }

    /// Drops recorded operations and zeroes leaf gradients.
    void reset() {
        adjoints_.clear();
        for (auto& leaf : leaves_) std::fill(leaf->grad.begin(), leaf->grad.end(), 0.0);
        consumed_ = false;
    }

  private:
    std::vector<std::function<void()>> adjoints_;
    std::vector<detail::NodePtr> leaves_;
    bool consumed_ = false;
};

namespace detail {

inline Tape* common_tape(std::initializer_list<const Tensor*> inputs) {
    Tape* tape = nullptr;
    for (const Tensor* t : inputs) {
        if (!t->defined()) throw ValidationError("operation on undefined tensor");
        if (!t->requires_grad()) continue;
        if (tape && t->tape() != tape) throw ValidationError("operands recorded on different tapes");
        tape = t->tape();
    }
    return tape;
}

/// Creates the output node and, when any input is tracked, records `adjoint`
/// which receives the output gradient.
template <class Adjoint>
Tensor emit(Shape shape, std::vector<double> value, std::initializer_list<const Tensor*> inputs, Adjoint adjoint) {
    Tape* tape = common_tape(inputs);
    auto out = std::make_shared<Node>();
    out->shape = std::move(shape);
    out->value = std::move(value);
    if (tape) {
        out->requires_grad = true;
        tape->record([out, adjoint = std::move(adjoint)]() mutable {
            if (out->grad.empty()) return;
            adjoint(std::span<const double>(out->grad));
        });
    }
    return Tensor(std::move(out), tape);
}

inline bool tracked(const NodePtr& n) { return n->requires_grad; }

inline std::span<double> grad_of(const NodePtr& n) {
    n->ensure_grad();
    return n->grad;
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.rank() != rank)
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                             to_string(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                             to_string(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reduction operations

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
    auto an = a.node(), bn = b.node();
    return detail::emit(a.shape(), std::move(out), {&a, &b}, [an, bn](std::span<const double> g) {
        if (detail::tracked(an)) {
            auto ga = detail::grad_of(an);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (detail::tracked(bn)) {
            auto gb = detail::grad_of(bn);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
    auto an = a.node(), bn = b.node();
    return detail::emit(a.shape(), std::move(out), {&a, &b}, [an, bn](std::span<const double> g) {
        if (detail::tracked(an)) {
            auto ga = detail::grad_of(an);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (detail::tracked(bn)) {
            auto gb = detail::grad_of(bn);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

/// Elementwise (Hadamard) product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    auto an = a.node(), bn = b.node();
    return detail::emit(a.shape(), std::move(out), {&a, &b}, [an, bn](std::span<const double> g) {
        if (detail::tracked(an)) {
            auto ga = detail::grad_of(an);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->value[i];
        }
        if (detail::tracked(bn)) {
            auto gb = detail::grad_of(bn);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->value[i];
        }
    });
}

inline Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * a.values()[i];
    auto an = a.node();
    return detail::emit(a.shape(), std::move(out), {&a}, [an, s](std::span<const double> g) {
        auto ga = detail::grad_of(an);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
    });
}

inline Tensor add_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.values().begin(), a.values().end());
    for (double& v : out) v += s;
    auto an = a.node();
    return detail::emit(a.shape(), std::move(out), {&a}, [an](std::span<const double> g) {
        auto ga = detail::grad_of(an);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] > 0.0 ? a.values()[i] : 0.0;
    auto an = a.node();
    return detail::emit(a.shape(), std::move(out), {&a}, [an](std::span<const double> g) {
        auto ga = detail::grad_of(an);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (an->value[i] > 0.0) ga[i] += g[i];
    });
}

inline Tensor square(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * a.values()[i];
    auto an = a.node();
    return detail::emit(a.shape(), std::move(out), {&a}, [an](std::span<const double> g) {
        auto ga = detail::grad_of(an);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += 2.0 * an->value[i] * g[i];
    });
}

inline Tensor sqrt(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (a.values()[i] < 0.0) throw NumericalError("sqrt of negative value");
        out[i] = std::sqrt(a.values()[i]);
    }
    auto an = a.node();
    auto result = detail::emit(a.shape(), out, {&a}, [an, out](std::span<const double> g) {
        auto ga = detail::grad_of(an);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += 0.5 * g[i] / out[i];
    });
    return result;
}

/// Sum of all elements; returns a rank-0 tensor.
inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    auto an = a.node();
    return detail::emit(Shape{}, {s}, {&a}, [an](std::span<const double> g) {
        auto ga = detail::grad_of(an);
        for (double& v : ga) v += g[0];
    });
}

/// Sums the last dimension away.
inline Tensor sum_lastdim(const Tensor& a) {
    if (a.rank() == 0) throw DimensionError("sum_lastdim: rank-0 input");
    const std::size_t d = a.shape().back();
    const std::size_t rows = d == 0 ? 0 : a.size() / d;
    Shape shape(a.shape().begin(), a.shape().end() - 1);
    std::vector<double> out(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) out[r] += a.values()[r * d + j];
    auto an = a.node();
    return detail::emit(std::move(shape), std::move(out), {&a}, [an, d, rows](std::span<const double> g) {
        auto ga = detail::grad_of(an);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) ga[r * d + j] += g[r];
    });
}

/// Frobenius norm sqrt(sum(a^2) + eta); eta keeps the gradient finite at a = 0.
inline Tensor frobenius_norm(const Tensor& a, double eta = 1e-12) {
    return sqrt(add_scalar(sum(square(a)), eta));
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size())
        throw DimensionError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
    std::vector<double> out(a.values().begin(), a.values().end());
    auto an = a.node();
    return detail::emit(std::move(shape), std::move(out), {&a}, [an](std::span<const double> g) {
        auto ga = detail::grad_of(an);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

inline Tensor transpose(const Tensor& a) {
    detail::require_rank(a, 2, "transpose");
    const std::size_t p = a.dim(0), q = a.dim(1);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < q; ++j) out[j * p + i] = a.values()[i * q + j];
    auto an = a.node();
    return detail::emit(Shape{q, p}, std::move(out), {&a}, [an, p, q](std::span<const double> g) {
        auto ga = detail::grad_of(an);
        for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = 0; j < q; ++j) ga[i * q + j] += g[j * p + i];
    });
}

/// Rows [begin, begin+count) of a rank-2 tensor.
inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
    detail::require_rank(a, 2, "slice_rows");
    if (begin + count > a.dim(0))
        throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                             ") out of range for " + to_string(a.shape()));
    const std::size_t d = a.dim(1);
    std::vector<double> out(a.values().begin() + begin * d, a.values().begin() + (begin + count) * d);
    auto an = a.node();
    return detail::emit(Shape{count, d}, std::move(out), {&a}, [an, begin, d](std::span<const double> g) {
        auto ga = detail::grad_of(an);
        for (std::size_t i = 0; i < g.size(); ++i) ga[begin * d + i] += g[i];
    });
}

/// Output row i is input row perm[i].
inline Tensor permute_rows(const Tensor& a, std::vector<std::size_t> perm) {
    detail::require_rank(a, 2, "permute_rows");
    const std::size_t rows = a.dim(0), d = a.dim(1);
    if (perm.size() != rows) throw DimensionError("permute_rows: permutation length mismatch");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < rows; ++i) {
        if (perm[i] >= rows) throw DimensionError("permute_rows: index out of range");
        std::copy_n(a.values().begin() + perm[i] * d, d, out.begin() + i * d);
    }
    auto an = a.node();
    return detail::emit(a.shape(), std::move(out), {&a}, [an, perm = std::move(perm), d](std::span<const double> g) {
        auto ga = detail::grad_of(an);
        for (std::size_t i = 0; i < perm.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) ga[perm[i] * d + j] += g[i * d + j];
    });
}

// ---------------------------------------------------------------------------
// Dense layers

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 2, "matmul");
    detail::require_rank(b, 2, "matmul");
    if (a.dim(1) != b.dim(0))
        throw DimensionError("matmul: inner dimensions differ, " + to_string(a.shape()) + " x " + to_string(b.shape()));
    const auto p = static_cast<Eigen::Index>(a.dim(0));
    const auto q = static_cast<Eigen::Index>(a.dim(1));
    const auto r = static_cast<Eigen::Index>(b.dim(1));
    std::vector<double> out(static_cast<std::size_t>(p * r));
    detail::MatMap(out.data(), p, r).noalias() =
        detail::ConstMatMap(a.values().data(), p, q) * detail::ConstMatMap(b.values().data(), q, r);
    auto an = a.node(), bn = b.node();
    return detail::emit(Shape{a.dim(0), b.dim(1)}, std::move(out), {&a, &b}, [an, bn, p, q, r](std::span<const double> g) {
        detail::ConstMatMap dc(g.data(), p, r);
        if (detail::tracked(an))
            detail::MatMap(detail::grad_of(an).data(), p, q).noalias() +=
                dc * detail::ConstMatMap(bn->value.data(), q, r).transpose();
        if (detail::tracked(bn))
            detail::MatMap(detail::grad_of(bn).data(), q, r).noalias() +=
                detail::ConstMatMap(an->value.data(), p, q).transpose() * dc;
    });
}

/// x[T x D] + bias[D] broadcast over rows.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
    detail::require_rank(x, 2, "add_bias");
    detail::require_rank(bias, 1, "add_bias");
    const std::size_t t = x.dim(0), d = x.dim(1);
    if (bias.dim(0) != d)
        throw DimensionError("add_bias: bias " + to_string(bias.shape()) + " does not match " + to_string(x.shape()));
    std::vector<double> out(x.values().begin(), x.values().end());
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] += bias.values()[j];
    auto xn = x.node(), bn = bias.node();
    return detail::emit(x.shape(), std::move(out), {&x, &bias}, [xn, bn, t, d](std::span<const double> g) {
        if (detail::tracked(xn)) {
            auto gx = detail::grad_of(xn);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (detail::tracked(bn)) {
            auto gb = detail::grad_of(bn);
            for (std::size_t i = 0; i < t; ++i)
                for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
        }
    });
}

/// Affine fully connected layer x*W + b.
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    return add_bias(matmul(x, weight), bias);
}

/// Row-wise layer normalization with learned gain and shift (biased variance).
inline Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& shift, double eps = 1e-10) {
    detail::require_rank(x, 2, "layernorm");
    const std::size_t t = x.dim(0), d = x.dim(1);
    if (gain.shape() != Shape{d} || shift.shape() != Shape{d})
        throw DimensionError("layernorm: gain/shift must be [" + std::to_string(d) + "]");
    std::vector<double> normalized(x.size()), inv_std(t), out(x.size());
    for (std::size_t i = 0; i < t; ++i) {
        const double* row = x.values().data() + i * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<double>(d);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            normalized[i * d + j] = (row[j] - mean) * inv_std[i];
            out[i * d + j] = normalized[i * d + j] * gain.values()[j] + shift.values()[j];
        }
    }
    auto xn = x.node(), gn = gain.node(), sn = shift.node();
    return detail::emit(x.shape(), std::move(out), {&x, &gain, &shift},
                        [xn, gn, sn, t, d, normalized = std::move(normalized),
                         inv_std = std::move(inv_std)](std::span<const double> g) {
                            if (detail::tracked(gn)) {
                                auto gg = detail::grad_of(gn);
                                for (std::size_t i = 0; i < t; ++i)
                                    for (std::size_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * normalized[i * d + j];
                            }
                            if (detail::tracked(sn)) {
                                auto gs = detail::grad_of(sn);
                                for (std::size_t i = 0; i < t; ++i)
                                    for (std::size_t j = 0; j < d; ++j) gs[j] += g[i * d + j];
                            }
                            if (!detail::tracked(xn)) return;
                            auto gx = detail::grad_of(xn);
                            const double inv_d = 1.0 / static_cast<double>(d);
                            for (std::size_t i = 0; i < t; ++i) {
                                double mean_dn = 0.0, mean_dn_n = 0.0;
                                for (std::size_t j = 0; j < d; ++j) {
                                    const double dn = g[i * d + j] * gn->value[j];
                                    mean_dn += dn;
                                    mean_dn_n += dn * normalized[i * d + j];
                                }
                                mean_dn *= inv_d;
                                mean_dn_n *= inv_d;
                                for (std::size_t j = 0; j < d; ++j) {
                                    const double dn = g[i * d + j] * gn->value[j];
                                    gx[i * d + j] += inv_std[i] * (dn - mean_dn - normalized[i * d + j] * mean_dn_n);
                                }
                            }
                        });
}

// ---------------------------------------------------------------------------
// Softmax and attention

namespace detail {

inline void softmax_rows(const double* in, double* out, std::size_t rows, std::size_t d) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = in + r * d;
        double* y = out + r * d;
        const double m = *std::max_element(x, x + d);
        double z = 0.0;
        for (std::size_t j = 0; j < d; ++j) z += (y[j] = std::exp(x[j] - m));
        for (std::size_t j = 0; j < d; ++j) y[j] /= z;
    }
}

inline void softmax_rows_backward(const double* p, const double* g, double* dx, std::size_t rows, std::size_t d) {
    for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * p[r * d + j];
        for (std::size_t j = 0; j < d; ++j) dx[r * d + j] += p[r * d + j] * (g[r * d + j] - dot);
    }
}

}  // namespace detail

/// Softmax over the last dimension, stabilized by max subtraction.
inline Tensor softmax_lastdim(const Tensor& x) {
    if (x.rank() == 0 || x.shape().back() == 0) throw DimensionError("softmax_lastdim: empty last dimension");
    const std::size_t d = x.shape().back(), rows = x.size() / d;
    std::vector<double> out(x.size());
    detail::softmax_rows(x.values().data(), out.data(), rows, d);
    auto xn = x.node();
    return detail::emit(x.shape(), out, {&x}, [xn, out, rows, d](std::span<const double> g) {
        detail::softmax_rows_backward(out.data(), g.data(), detail::grad_of(xn).data(), rows, d);
    });
}

/// Token groups for attention: consecutive row ranges that attend only
/// within themselves (one training patch or one inference tile each).
struct TokenGroups {
    std::vector<std::size_t> sizes;

    static TokenGroups uniform(std::size_t groups, std::size_t group_size) {
        return TokenGroups{std::vector<std::size_t>(groups, group_size)};
    }
    std::size_t total() const { return std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}); }
};

/// Attention probabilities per (group, head), each a g x g row-stochastic matrix.
struct AttentionWeights {
    std::vector<std::vector<double>> per_group_head;  // index group * heads + head
    std::size_t heads = 0;
};

/// Multi-head scaled dot-product self-attention confined to token groups.
/// q, k, v are [T x D] with D split evenly into `heads` contiguous column blocks.
inline Tensor grouped_attention(const Tensor& q, const Tensor& k, const Tensor& v, const TokenGroups& groups,
                                std::size_t heads, AttentionWeights* weights_out = nullptr) {
    detail::require_rank(q, 2, "grouped_attention");
    detail::require_same_shape(q, k, "grouped_attention");
    detail::require_same_shape(q, v, "grouped_attention");
    const std::size_t t = q.dim(0), d = q.dim(1);
    if (heads == 0 || d % heads != 0) throw DimensionError("grouped_attention: model width not divisible by heads");
    if (groups.total() != t) throw DimensionError("grouped_attention: token groups do not cover all rows");
    const std::size_t dh = d / heads;
    const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));
    using Strided = Eigen::Map<const detail::RowMatrix, 0, Eigen::OuterStride<>>;
    using StridedMut = Eigen::Map<detail::RowMatrix, 0, Eigen::OuterStride<>>;
    const auto stride = Eigen::OuterStride<>(static_cast<Eigen::Index>(d));
    const auto edh = static_cast<Eigen::Index>(dh);

    std::vector<double> out(t * d, 0.0);
    auto probs = std::make_shared<std::vector<std::vector<double>>>();
    probs->reserve(groups.sizes.size() * heads);
    std::size_t offset = 0;
    for (std::size_t gs : groups.sizes) {
        const auto eg = static_cast<Eigen::Index>(gs);
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t base = offset * d + h * dh;
            Strided qh(q.values().data() + base, eg, edh, stride);
            Strided kh(k.values().data() + base, eg, edh, stride);
            Strided vh(v.values().data() + base, eg, edh, stride);
            detail::RowMatrix scores = (qh * kh.transpose()) * scale_factor;
            std::vector<double> p(gs * gs);
            detail::softmax_rows(scores.data(), p.data(), gs, gs);
            StridedMut(out.data() + base, eg, edh, stride).noalias() = detail::ConstMatMap(p.data(), eg, eg) * vh;
            probs->push_back(std::move(p));
        }
        offset += gs;
    }
    if (weights_out) {
        weights_out->per_group_head = *probs;
        weights_out->heads = heads;
    }
    auto qn = q.node(), kn = k.node(), vn = v.node();
    auto sizes = groups.sizes;
    return detail::emit(q.shape(), std::move(out), {&q, &k, &v},
                        [qn, kn, vn, probs, sizes, heads, d, dh, scale_factor](std::span<const double> g) {
                            const auto stride = Eigen::OuterStride<>(static_cast<Eigen::Index>(d));
                            const auto edh = static_cast<Eigen::Index>(dh);
                            std::span<double> gq, gk, gv;
                            if (detail::tracked(qn)) gq = detail::grad_of(qn);
                            if (detail::tracked(kn)) gk = detail::grad_of(kn);
                            if (detail::tracked(vn)) gv = detail::grad_of(vn);
                            std::size_t offset = 0, idx = 0;
                            for (std::size_t gs : sizes) {
                                const auto eg = static_cast<Eigen::Index>(gs);
                                for (std::size_t h = 0; h < heads; ++h, ++idx) {
                                    const std::size_t base = offset * d + h * dh;
                                    const auto& p = (*probs)[idx];
                                    detail::ConstMatMap pm(p.data(), eg, eg);
                                    Strided go(g.data() + base, eg, edh, stride);
                                    Strided qh(qn->value.data() + base, eg, edh, stride);
                                    Strided kh(kn->value.data() + base, eg, edh, stride);
                                    Strided vh(vn->value.data() + base, eg, edh, stride);
                                    if (!gv.empty())
                                        StridedMut(gv.data() + base, eg, edh, stride).noalias() += pm.transpose() * go;
                                    if (gq.empty() && gk.empty()) continue;
                                    detail::RowMatrix dp = go * vh.transpose();
                                    detail::RowMatrix ds = detail::RowMatrix::Zero(eg, eg);
                                    detail::softmax_rows_backward(p.data(), dp.data(), ds.data(), gs, gs);
                                    ds *= scale_factor;
                                    if (!gq.empty())
                                        StridedMut(gq.data() + base, eg, edh, stride).noalias() += ds * kh;
                                    if (!gk.empty())
                                        StridedMut(gk.data() + base, eg, edh, stride).noalias() += ds.transpose() * qh;
                                }
                                offset += gs;
                            }
                        });
}

// ---------------------------------------------------------------------------
// Spatial convolution (odd square kernels, stride 1, zero padding k/2)

namespace detail {

/// cols[(c*kh + u)*kw + v][i*n + j] = x[c][i+u-ph][j+v-pw] (zero outside).
inline std::vector<double> im2col(const double* x, std::size_t c, std::size_t m, std::size_t n, std::size_t kh,
                                  std::size_t kw) {
    const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(kh / 2), pw = static_cast<std::ptrdiff_t>(kw / 2);
    std::vector<double> cols(c * kh * kw * m * n, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t u = 0; u < kh; ++u)
            for (std::size_t v = 0; v < kw; ++v) {
                double* row = cols.data() + ((ch * kh + u) * kw + v) * m * n;
                for (std::size_t i = 0; i < m; ++i) {
                    const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i) + static_cast<std::ptrdiff_t>(u) - ph;
                    if (si < 0 || si >= static_cast<std::ptrdiff_t>(m)) continue;
                    for (std::size_t j = 0; j < n; ++j) {
                        const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j) + static_cast<std::ptrdiff_t>(v) - pw;
                        if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(n)) continue;
                        row[i * n + j] = x[(ch * m + static_cast<std::size_t>(si)) * n + static_cast<std::size_t>(sj)];
                    }
                }
            }
    return cols;
}

/// Adjoint of im2col: accumulates cols back into x.
inline void col2im(const double* cols, double* x, std::size_t c, std::size_t m, std::size_t n, std::size_t kh,
                   std::size_t kw) {
    const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(kh / 2), pw = static_cast<std::ptrdiff_t>(kw / 2);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t u = 0; u < kh; ++u)
            for (std::size_t v = 0; v < kw; ++v) {
                const double* row = cols + ((ch * kh + u) * kw + v) * m * n;
                for (std::size_t i = 0; i < m; ++i) {
                    const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i) + static_cast<std::ptrdiff_t>(u) - ph;
                    if (si < 0 || si >= static_cast<std::ptrdiff_t>(m)) continue;
                    for (std::size_t j = 0; j < n; ++j) {
                        const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j) + static_cast<std::ptrdiff_t>(v) - pw;
                        if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(n)) continue;
                        x[(ch * m + static_cast<std::size_t>(si)) * n + static_cast<std::size_t>(sj)] += row[i * n + j];
                    }
                }
            }
}

inline void check_kernel(const Tensor& k, const char* op) {
    require_rank(k, 4, op);
    if (k.dim(2) % 2 == 0 || k.dim(3) % 2 == 0)
        throw DimensionError(std::string(op) + ": kernel spatial size must be odd, got " + to_string(k.shape()));
}

}  // namespace detail

/// Cross-correlation x[C x M x N] with k[F x C x kh x kw] -> [F x M x N].
inline Tensor conv2d(const Tensor& x, const Tensor& k) {
    detail::require_rank(x, 3, "conv2d");
    detail::check_kernel(k, "conv2d");
    if (k.dim(1) != x.dim(0))
        throw DimensionError("conv2d: kernel " + to_string(k.shape()) + " expects " + std::to_string(k.dim(1)) +
                             " input channels, input is " + to_string(x.shape()));
    const std::size_t c = x.dim(0), m = x.dim(1), n = x.dim(2), f = k.dim(0), kh = k.dim(2), kw = k.dim(3);
    const auto ckk = static_cast<Eigen::Index>(c * kh * kw), mn = static_cast<Eigen::Index>(m * n),
               ef = static_cast<Eigen::Index>(f);
    auto cols = std::make_shared<std::vector<double>>(detail::im2col(x.values().data(), c, m, n, kh, kw));
    std::vector<double> out(f * m * n);
    detail::MatMap(out.data(), ef, mn).noalias() =
        detail::ConstMatMap(k.values().data(), ef, ckk) * detail::ConstMatMap(cols->data(), ckk, mn);
    auto xn = x.node(), kn = k.node();
    return detail::emit(Shape{f, m, n}, std::move(out), {&x, &k},
                        [xn, kn, cols, c, m, n, kh, kw, ckk, mn, ef](std::span<const double> g) {
                            detail::ConstMatMap dout(g.data(), ef, mn);
                            if (detail::tracked(kn))
                                detail::MatMap(detail::grad_of(kn).data(), ef, ckk).noalias() +=
                                    dout * detail::ConstMatMap(cols->data(), ckk, mn).transpose();
                            if (detail::tracked(xn)) {
                                std::vector<double> dcols(static_cast<std::size_t>(ckk * mn));
                                detail::MatMap(dcols.data(), ckk, mn).noalias() =
                                    detail::ConstMatMap(kn->value.data(), ef, ckk).transpose() * dout;
                                detail::col2im(dcols.data(), detail::grad_of(xn).data(), c, m, n, kh, kw);
                            }
                        });
}

/// Transposed convolution x[F x M x N] with k[F x C x kh x kw] -> [C x M x N];
/// the exact adjoint of conv2d's map from its input to its output.
inline Tensor deconv2d(const Tensor& x, const Tensor& k) {
    detail::require_rank(x, 3, "deconv2d");
    detail::check_kernel(k, "deconv2d");
    if (k.dim(0) != x.dim(0))
        throw DimensionError("deconv2d: kernel " + to_string(k.shape()) + " expects " + std::to_string(k.dim(0)) +
                             " input channels, input is " + to_string(x.shape()));
    const std::size_t f = x.dim(0), m = x.dim(1), n = x.dim(2), c = k.dim(1), kh = k.dim(2), kw = k.dim(3);
    const auto ckk = static_cast<Eigen::Index>(c * kh * kw), mn = static_cast<Eigen::Index>(m * n),
               ef = static_cast<Eigen::Index>(f);
    std::vector<double> cols(static_cast<std::size_t>(ckk * mn));
    detail::MatMap(cols.data(), ckk, mn).noalias() =
        detail::ConstMatMap(k.values().data(), ef, ckk).transpose() * detail::ConstMatMap(x.values().data(), ef, mn);
    std::vector<double> out(c * m * n, 0.0);
    detail::col2im(cols.data(), out.data(), c, m, n, kh, kw);
    auto xn = x.node(), kn = k.node();
    return detail::emit(Shape{c, m, n}, std::move(out), {&x, &k},
                        [xn, kn, c, m, n, kh, kw, ckk, mn, ef](std::span<const double> g) {
                            const auto gcols = detail::im2col(g.data(), c, m, n, kh, kw);
                            detail::ConstMatMap gc(gcols.data(), ckk, mn);
                            if (detail::tracked(xn))
                                detail::MatMap(detail::grad_of(xn).data(), ef, mn).noalias() +=
                                    detail::ConstMatMap(kn->value.data(), ef, ckk) * gc;
                            if (detail::tracked(kn))
                                detail::MatMap(detail::grad_of(kn).data(), ef, ckk).noalias() +=
                                    detail::ConstMatMap(xn->value.data(), ef, mn) * gc.transpose();
                        });
}

/// x[C x M x N] + bias[C] broadcast over pixels.
inline Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    detail::require_rank(x, 3, "add_channel_bias");
    if (bias.shape() != Shape{x.dim(0)})
        throw DimensionError("add_channel_bias: bias " + to_string(bias.shape()) + " does not match " +
                             to_string(x.shape()));
    const std::size_t c = x.dim(0), plane = x.dim(1) * x.dim(2);
    std::vector<double> out(x.values().begin(), x.values().end());
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < plane; ++i) out[ch * plane + i] += bias.values()[ch];
    auto xn = x.node(), bn = bias.node();
    return detail::emit(x.shape(), std::move(out), {&x, &bias}, [xn, bn, c, plane](std::span<const double> g) {
        if (detail::tracked(xn)) {
            auto gx = detail::grad_of(xn);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (detail::tracked(bn)) {
            auto gb = detail::grad_of(bn);
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t i = 0; i < plane; ++i) gb[ch] += g[ch * plane + i];
        }
    });
}

}  // namespace stad::ad
