#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "apl/rng.hpp"

namespace apl {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

namespace detail {

// One recorded value in the computation graph. `grad` is the persistent
// accumulator read by the optimizer; `adjoint` is scratch used while a
// backward pass is in flight.
struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    std::vector<double> adjoint;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    std::size_t numel() const { return data.size(); }
};

inline void debug_check_finite(const Node& n, const char* op) {
#ifndef NDEBUG
    for (double v : n.data) {
        assert(std::isfinite(v) && "non-finite value produced by forward op");
        (void)v;
    }
    (void)op;
#else
    (void)n;
    (void)op;
#endif
}

}  // namespace detail

// Dense 64-bit tensor participating in reverse-mode autodiff. Copies are
// shallow: they refer to the same storage and gradient accumulator.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return make(std::move(shape), requires_grad, 0.0);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        return make(std::move(shape), requires_grad, value);
    }

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (shape_numel(shape) != values.size()) {
            throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match " +
                                        std::to_string(values.size()) + " values");
        }
        Tensor t;
        t.node_ = std::make_shared<detail::Node>();
        t.node_->shape = std::move(shape);
        t.node_->data = std::move(values);
        t.node_->requires_grad = requires_grad;
        if (requires_grad) t.node_->grad.assign(t.node_->data.size(), 0.0);
        return t;
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return from({1}, {value}, requires_grad);
    }

    static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false) {
        std::vector<double> v(shape_numel(shape));
        for (double& x : v) x = rng.normal(0.0, stddev);
        return from(std::move(shape), std::move(v), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->data.size(); }
    std::size_t rows() const { return node_->shape.at(0); }
    std::size_t cols() const { return node_->shape.at(1); }
    bool requires_grad() const { return node_->requires_grad; }

    std::span<const double> data() const { return node_->data; }
    std::span<double> data_mut() { return node_->data; }
    std::span<const double> grad() const { return node_->grad; }
    std::span<double> grad_mut() { return node_->grad; }

    double value() const {
        if (numel() != 1) {
            throw std::invalid_argument("value(): tensor " + shape_str(shape()) + " is not scalar");
        }
        return node_->data[0];
    }

    double at(std::size_t i, std::size_t j) const { return node_->data[i * cols() + j]; }

    void zero_grad() {
        if (node_ && node_->requires_grad) node_->grad.assign(node_->data.size(), 0.0);
    }

    std::shared_ptr<detail::Node> node() const { return node_; }

private:
    static Tensor make(Shape shape, bool requires_grad, double fill) {
        Tensor t;
        t.node_ = std::make_shared<detail::Node>();
        t.node_->data.assign(shape_numel(shape), fill);
        t.node_->shape = std::move(shape);
        t.node_->requires_grad = requires_grad;
        if (requires_grad) t.node_->grad.assign(t.node_->data.size(), 0.0);
        return t;
    }

    std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline Tensor
make_op(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
        std::function<void(Node&)> backward_fn, const char* op) {
    bool rg = false;
    for (const Tensor& t : inputs) rg = rg || t.requires_grad();
    Tensor out = Tensor::from(std::move(shape), std::move(data), rg);
    if (rg) {
        auto n = out.node();
        n->parents.reserve(inputs.size());
        for (const Tensor& t : inputs) n->parents.push_back(t.node());
        n->backward_fn = std::move(backward_fn);
    }
    debug_check_finite(*out.node(), op);
    return out;
}

// Adds into a parent's adjoint buffer, allocating it on first touch.
inline std::vector<double>& adj(Node& n) {
    if (n.adjoint.size() != n.data.size()) n.adjoint.assign(n.data.size(), 0.0);
    return n.adjoint;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward ops
// ---------------------------------------------------------------------------

inline void check_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw std::invalid_argument(std::string(op) + ": expected rank-2 tensor, got " +
                                    shape_str(t.shape()));
    }
}

// Matrix product a[m x k] * b[k x n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    check_rank2(a, "matmul");
    check_rank2(b, "matmul");
    if (a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: inner dimensions disagree: " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> out(m * n, 0.0);
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        double* orow = out.data() + i * n;
        const double* arow = ad + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = bd + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return detail::make_op(
        {m, n}, std::move(out), {a, b},
        [m, k, n](detail::Node& self) {
            const double* g = self.adjoint.data();
            detail::Node& pa = *self.parents[0];
            detail::Node& pb = *self.parents[1];
            if (pa.requires_grad) {
                double* da = detail::adj(pa).data();
                const double* bd2 = pb.data.data();
                // dA[i,p] += sum_j g[i,j] * B[p,j]
                for (std::size_t i = 0; i < m; ++i) {
                    const double* grow = g + i * n;
                    double* darow = da + i * k;
                    for (std::size_t p = 0; p < k; ++p) {
                        const double* brow = bd2 + p * n;
                        double acc = 0.0;
                        for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        darow[p] += acc;
                    }
                }
            }
            if (pb.requires_grad) {
                double* db = detail::adj(pb).data();
                const double* ad2 = pa.data.data();
                // dB[p,j] += sum_i A[i,p] * g[i,j]
                for (std::size_t i = 0; i < m; ++i) {
                    const double* grow = g + i * n;
                    const double* arow = ad2 + i * k;
                    for (std::size_t p = 0; p < k; ++p) {
                        const double av = arow[p];
                        double* dbrow = db + p * n;
                        for (std::size_t j = 0; j < n; ++j) dbrow[j] += av * grow[j];
                    }
                }
            }
        },
        "matmul");
}

// a[m x k] * b[n x k]^T -> [m x n]; both operands read along contiguous rows.
inline Tensor matmul_transposed(const Tensor& a, const Tensor& b) {
    check_rank2(a, "matmul_transposed");
    check_rank2(b, "matmul_transposed");
    if (a.cols() != b.cols()) {
        throw std::invalid_argument("matmul_transposed: inner dimensions disagree: " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    std::vector<double> out(m * n);
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = ad + i * k;
        double* orow = out.data() + i * n;
        for (std::size_t t = 0; t < n; ++t) {
            const double* brow = bd + t * k;
            double acc = 0.0;
            for (std::size_t d = 0; d < k; ++d) acc += arow[d] * brow[d];
            orow[t] = acc;
        }
    }
    return detail::make_op(
        {m, n}, std::move(out), {a, b},
        [m, k, n](detail::Node& self) {
            const double* g = self.adjoint.data();
            detail::Node& pa = *self.parents[0];
            detail::Node& pb = *self.parents[1];
            if (pa.requires_grad) {
                // dA = g * B
                double* da = detail::adj(pa).data();
                const double* bd2 = pb.data.data();
                for (std::size_t i = 0; i < m; ++i) {
                    const double* grow = g + i * n;
                    double* darow = da + i * k;
                    for (std::size_t t = 0; t < n; ++t) {
                        const double gv = grow[t];
                        const double* brow = bd2 + t * k;
                        for (std::size_t d = 0; d < k; ++d) darow[d] += gv * brow[d];
                    }
                }
            }
            if (pb.requires_grad) {
                // dB = g^T * A
                double* db = detail::adj(pb).data();
                const double* ad2 = pa.data.data();
                for (std::size_t i = 0; i < m; ++i) {
                    const double* grow = g + i * n;
                    const double* arow = ad2 + i * k;
                    for (std::size_t t = 0; t < n; ++t) {
                        const double gv = grow[t];
                        double* dbrow = db + t * k;
                        for (std::size_t d = 0; d < k; ++d) dbrow[d] += gv * arow[d];
                    }
                }
            }
        },
        "matmul_transposed");
}

// Row-wise softmax with per-row max subtraction.
inline Tensor softmax_rows(const Tensor& x) {
    check_rank2(x, "softmax_rows");
    const std::size_t m = x.rows(), n = x.cols();
    std::vector<double> out(m * n);
    const double* xd = x.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = xd + i * n;
        double mx = row[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        double* orow = out.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < n; ++j) orow[j] *= inv;
    }
    return detail::make_op(
        {m, n}, std::move(out), {x},
        [m, n](detail::Node& self) {
            detail::Node& p = *self.parents[0];
            if (!p.requires_grad) return;
            double* dx = detail::adj(p).data();
            const double* y = self.data.data();
            const double* g = self.adjoint.data();
            // dx_j = y_j * (g_j - sum_k g_k y_k) per row
            for (std::size_t i = 0; i < m; ++i) {
                const double* yr = y + i * n;
                const double* gr = g + i * n;
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
                double* dr = dx + i * n;
                for (std::size_t j = 0; j < n; ++j) dr[j] += yr[j] * (gr[j] - dot);
            }
        },
        "softmax_rows");
}

inline constexpr double kSeluLambda = 1.0507009873554805;
inline constexpr double kSeluAlpha = 1.6732632423543772;

inline Tensor selu(const Tensor& x) {
    std::vector<double> out(x.numel());
    const double* xd = x.data().data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = xd[i] > 0.0 ? kSeluLambda * xd[i]
                             : kSeluLambda * kSeluAlpha * (std::exp(xd[i]) - 1.0);
    }
    return detail::make_op(
        x.shape(), std::move(out), {x},
        [](detail::Node& self) {
            detail::Node& p = *self.parents[0];
            if (!p.requires_grad) return;
            double* dx = detail::adj(p).data();
            const double* xd2 = p.data.data();
            const double* g = self.adjoint.data();
            for (std::size_t i = 0; i < self.data.size(); ++i) {
                dx[i] += g[i] * (xd2[i] > 0.0 ? kSeluLambda
                                              : kSeluLambda * kSeluAlpha * std::exp(xd2[i]));
            }
        },
        "selu");
}

// Column means: [m x n] -> [n].
inline Tensor mean_rows(const Tensor& x) {
    check_rank2(x, "mean_rows");
    const std::size_t m = x.rows(), n = x.cols();
    if (m == 0) throw std::invalid_argument("mean_rows: empty input");
    std::vector<double> out(n, 0.0);
    const double* xd = x.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) out[j] += xd[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[j] /= static_cast<double>(m);
    return detail::make_op(
        {n}, std::move(out), {x},
        [m, n](detail::Node& self) {
            detail::Node& p = *self.parents[0];
            if (!p.requires_grad) return;
            double* dx = detail::adj(p).data();
            const double* g = self.adjoint.data();
            const double inv = 1.0 / static_cast<double>(m);
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += g[j] * inv;
            }
        },
        "mean_rows");
}

// Rows of a followed by rows of b; column counts must agree.
inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
    check_rank2(a, "concat_rows");
    check_rank2(b, "concat_rows");
    if (a.cols() != b.cols()) {
        throw std::invalid_argument("concat_rows: column counts disagree: " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const std::size_t n = a.cols();
    std::vector<double> out;
    out.reserve(a.numel() + b.numel());
    out.insert(out.end(), a.data().begin(), a.data().end());
    out.insert(out.end(), b.data().begin(), b.data().end());
    const std::size_t ma = a.rows();
    return detail::make_op(
        {a.rows() + b.rows(), n}, std::move(out), {a, b},
        [ma, n](detail::Node& self) {
            const double* g = self.adjoint.data();
            detail::Node& pa = *self.parents[0];
            detail::Node& pb = *self.parents[1];
            if (pa.requires_grad) {
                double* da = detail::adj(pa).data();
                for (std::size_t i = 0; i < ma * n; ++i) da[i] += g[i];
            }
            if (pb.requires_grad) {
                double* db = detail::adj(pb).data();
                const double* gb = g + ma * n;
                for (std::size_t i = 0; i < pb.data.size(); ++i) db[i] += gb[i];
            }
        },
        "concat_rows");
}

// Stack rank-1 rows of equal length into a [k x n] matrix.
inline Tensor stack_rows(const std::vector<Tensor>& rows) {
    if (rows.empty()) throw std::invalid_argument("stack_rows: no rows");
    const std::size_t n = rows[0].numel();
    std::vector<double> out;
    out.reserve(rows.size() * n);
    for (const Tensor& r : rows) {
        if (r.numel() != n) {
            throw std::invalid_argument("stack_rows: row sizes disagree: " +
                                        std::to_string(n) + " vs " + std::to_string(r.numel()));
        }
        out.insert(out.end(), r.data().begin(), r.data().end());
    }
    return detail::make_op(
        {rows.size(), n}, std::move(out), rows,
        [n](detail::Node& self) {
            const double* g = self.adjoint.data();
            for (std::size_t r = 0; r < self.parents.size(); ++r) {
                detail::Node& p = *self.parents[r];
                if (!p.requires_grad) continue;
                double* dp = detail::adj(p).data();
                const double* gr = g + r * n;
                for (std::size_t j = 0; j < n; ++j) dp[j] += gr[j];
            }
        },
        "stack_rows");
}

// Concatenation of two rank-1 tensors.
inline Tensor concat_vec(const Tensor& a, const Tensor& b) {
    if (a.rank() != 1 || b.rank() != 1) {
        throw std::invalid_argument("concat_vec: expected rank-1 tensors, got " +
                                    shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    std::vector<double> out;
    out.reserve(a.numel() + b.numel());
    out.insert(out.end(), a.data().begin(), a.data().end());
    out.insert(out.end(), b.data().begin(), b.data().end());
    const std::size_t na = a.numel();
    return detail::make_op(
        {a.numel() + b.numel()}, std::move(out), {a, b},
        [na](detail::Node& self) {
            const double* g = self.adjoint.data();
            detail::Node& pa = *self.parents[0];
            detail::Node& pb = *self.parents[1];
            if (pa.requires_grad) {
                double* da = detail::adj(pa).data();
                for (std::size_t i = 0; i < na; ++i) da[i] += g[i];
            }
            if (pb.requires_grad) {
                double* db = detail::adj(pb).data();
                for (std::size_t i = 0; i < pb.data.size(); ++i) db[i] += g[na + i];
            }
        },
        "concat_vec");
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shapes disagree: " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return detail::make_op(
        a.shape(), std::move(out), {a, b},
        [](detail::Node& self) {
            const double* g = self.adjoint.data();
            for (int s = 0; s < 2; ++s) {
                detail::Node& p = *self.parents[s];
                if (!p.requires_grad) continue;
                double* d = detail::adj(p).data();
                for (std::size_t i = 0; i < self.data.size(); ++i) d[i] += g[i];
            }
        },
        "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return detail::make_op(
        a.shape(), std::move(out), {a, b},
        [](detail::Node& self) {
            const double* g = self.adjoint.data();
            detail::Node& pa = *self.parents[0];
            detail::Node& pb = *self.parents[1];
            if (pa.requires_grad) {
                double* d = detail::adj(pa).data();
                for (std::size_t i = 0; i < self.data.size(); ++i) d[i] += g[i];
            }
            if (pb.requires_grad) {
                double* d = detail::adj(pb).data();
                for (std::size_t i = 0; i < self.data.size(); ++i) d[i] -= g[i];
            }
        },
        "sub");
}

// Elementwise product of same-shape tensors.
inline Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return detail::make_op(
        a.shape(), std::move(out), {a, b},
        [](detail::Node& self) {
            const double* g = self.adjoint.data();
            detail::Node& pa = *self.parents[0];
            detail::Node& pb = *self.parents[1];
            if (pa.requires_grad) {
                double* d = detail::adj(pa).data();
                const double* bv = pb.data.data();
                for (std::size_t i = 0; i < self.data.size(); ++i) d[i] += g[i] * bv[i];
            }
            if (pb.requires_grad) {
                double* d = detail::adj(pb).data();
                const double* av = pa.data.data();
                for (std::size_t i = 0; i < self.data.size(); ++i) d[i] += g[i] * av[i];
            }
        },
        "mul");
}

inline Tensor mul_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    return detail::make_op(
        a.shape(), std::move(out), {a},
        [c](detail::Node& self) {
            detail::Node& p = *self.parents[0];
            if (!p.requires_grad) return;
            double* d = detail::adj(p).data();
            const double* g = self.adjoint.data();
            for (std::size_t i = 0; i < self.data.size(); ++i) d[i] += g[i] * c;
        },
        "mul_scalar");
}

// a[m x n] + row[n] broadcast over every row (bias add).
inline Tensor add_row_broadcast(const Tensor& a, const Tensor& row) {
    check_rank2(a, "add_row_broadcast");
    if (row.rank() != 1 || row.numel() != a.cols()) {
        throw std::invalid_argument("add_row_broadcast: row " + shape_str(row.shape()) +
                                    " does not match columns of " + shape_str(a.shape()));
    }
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.data()[i * n + j] + row.data()[j];
    }
    return detail::make_op(
        {m, n}, std::move(out), {a, row},
        [m, n](detail::Node& self) {
            const double* g = self.adjoint.data();
            detail::Node& pa = *self.parents[0];
            detail::Node& pr = *self.parents[1];
            if (pa.requires_grad) {
                double* d = detail::adj(pa).data();
                for (std::size_t i = 0; i < m * n; ++i) d[i] += g[i];
            }
            if (pr.requires_grad) {
                double* d = detail::adj(pr).data();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) d[j] += g[i * n + j];
                }
            }
        },
        "add_row_broadcast");
}

inline Tensor sigmoid(const Tensor& x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = x.data()[i];
        if (v >= 0.0) {
            out[i] = 1.0 / (1.0 + std::exp(-v));
        } else {
            const double e = std::exp(v);
            out[i] = e / (1.0 + e);
        }
    }
    return detail::make_op(
        x.shape(), std::move(out), {x},
        [](detail::Node& self) {
            detail::Node& p = *self.parents[0];
            if (!p.requires_grad) return;
            double* d = detail::adj(p).data();
            const double* y = self.data.data();
            const double* g = self.adjoint.data();
            for (std::size_t i = 0; i < self.data.size(); ++i) d[i] += g[i] * y[i] * (1.0 - y[i]);
        },
        "sigmoid");
}

inline Tensor log(const Tensor& x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        assert(x.data()[i] > 0.0 && "log: nonpositive input");
        out[i] = std::log(x.data()[i]);
    }
    return detail::make_op(
        x.shape(), std::move(out), {x},
        [](detail::Node& self) {
            detail::Node& p = *self.parents[0];
            if (!p.requires_grad) return;
            double* d = detail::adj(p).data();
            const double* xv = p.data.data();
            const double* g = self.adjoint.data();
            for (std::size_t i = 0; i < self.data.size(); ++i) d[i] += g[i] / xv[i];
        },
        "log");
}

// max(x, lo) elementwise; gradient passes only where x >= lo.
inline Tensor clamp_min(const Tensor& x, double lo) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(x.data()[i], lo);
    return detail::make_op(
        x.shape(), std::move(out), {x},
        [lo](detail::Node& self) {
            detail::Node& p = *self.parents[0];
            if (!p.requires_grad) return;
            double* d = detail::adj(p).data();
            const double* xv = p.data.data();
            const double* g = self.adjoint.data();
            for (std::size_t i = 0; i < self.data.size(); ++i) {
                if (xv[i] >= lo) d[i] += g[i];
            }
        },
        "clamp_min");
}

// Single element by flat index, as a 1-element tensor.
inline Tensor select(const Tensor& x, std::size_t flat_index) {
    if (flat_index >= x.numel()) {
        throw std::invalid_argument("select: index " + std::to_string(flat_index) +
                                    " out of range for " + shape_str(x.shape()));
    }
    return detail::make_op(
        {1}, {x.data()[flat_index]}, {x},
        [flat_index](detail::Node& self) {
            detail::Node& p = *self.parents[0];
            if (!p.requires_grad) return;
            detail::adj(p)[flat_index] += self.adjoint[0];
        },
        "select");
}

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    return detail::make_op(
        {1}, {s}, {x},
        [](detail::Node& self) {
            detail::Node& p = *self.parents[0];
            if (!p.requires_grad) return;
            double* d = detail::adj(p).data();
            for (std::size_t i = 0; i < p.data.size(); ++i) d[i] += self.adjoint[0];
        },
        "sum");
}

// Same data, new shape (copying view).
inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw std::invalid_argument("reshape: " + shape_str(x.shape()) + " to " +
                                    shape_str(shape) + " changes element count");
    }
    std::vector<double> out(x.data().begin(), x.data().end());
    return detail::make_op(
        std::move(shape), std::move(out), {x},
        [](detail::Node& self) {
            detail::Node& p = *self.parents[0];
            if (!p.requires_grad) return;
            double* d = detail::adj(p).data();
            const double* g = self.adjoint.data();
            for (std::size_t i = 0; i < self.data.size(); ++i) d[i] += g[i];
        },
        "reshape");
}

// Alpha dropout after SELU: dropped units go to the SELU saturation value and
// the result is affinely corrected so zero-mean unit-variance inputs keep
// their first two moments. Identity when p == 0.
inline Tensor alpha_dropout(const Tensor& x, double p, Rng& rng) {
    if (p <= 0.0) return x;
    if (p >= 1.0) throw std::invalid_argument("alpha_dropout: p must be < 1");
    const double ap = -kSeluLambda * kSeluAlpha;
    const double q = 1.0 - p;
    const double a = 1.0 / std::sqrt(q + ap * ap * p * q);
    const double b = -a * p * ap;
    auto mask = std::make_shared<std::vector<std::uint8_t>>(x.numel());
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const bool keep = !rng.bernoulli(p);
        (*mask)[i] = keep ? 1 : 0;
        out[i] = a * (keep ? x.data()[i] : ap) + b;
    }
    return detail::make_op(
        x.shape(), std::move(out), {x},
        [mask, a](detail::Node& self) {
            detail::Node& p0 = *self.parents[0];
            if (!p0.requires_grad) return;
            double* d = detail::adj(p0).data();
            const double* g = self.adjoint.data();
            for (std::size_t i = 0; i < self.data.size(); ++i) {
                if ((*mask)[i]) d[i] += a * g[i];
            }
        },
        "alpha_dropout");
}

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

// Linearization of the ops reachable from a root, in topological order
// (inputs before the ops that consume them). backward() seeds the root with
// d(root)/d(root) = 1, propagates adjoints once through the list in reverse,
// then adds the result into each tensor's persistent grad accumulator, so
// repeated passes without zero_grad accumulate.
class Tape {
public:
    explicit Tape(const Tensor& root) {
        if (!root.defined()) throw std::invalid_argument("tape: undefined root");
        root_ = root.node();
        std::unordered_set<detail::Node*> seen;
        // Iterative post-order DFS.
        std::vector<std::pair<detail::Node*, std::size_t>> stack;
        if (root_->requires_grad) stack.emplace_back(root_.get(), 0);
        while (!stack.empty()) {
            auto& [node, next_child] = stack.back();
            if (next_child == 0 && seen.count(node)) {
                stack.pop_back();
                continue;
            }
            if (next_child < node->parents.size()) {
                detail::Node* child = node->parents[next_child++].get();
                if (child->requires_grad && !seen.count(child)) stack.emplace_back(child, 0);
            } else {
                seen.insert(node);
                order_.push_back(node);
                stack.pop_back();
            }
        }
#ifndef NDEBUG
        // Topological invariant: every op's inputs precede it.
        std::unordered_set<detail::Node*> placed;
        for (detail::Node* n : order_) {
            for (const auto& p : n->parents) {
                assert((!p->requires_grad || placed.count(p.get())) &&
                       "tape order violates topology");
            }
            placed.insert(n);
        }
#endif
    }

    std::size_t size() const { return order_.size(); }

    // Nodes in topological order (inputs first).
    const std::vector<detail::Node*>& order() const { return order_; }

    void backward() {
        if (root_->data.size() != 1) {
            throw std::invalid_argument("backward: root must be scalar, got " +
                                        shape_str(root_->shape));
        }
        if (!root_->requires_grad) return;
        for (detail::Node* n : order_) n->adjoint.assign(n->data.size(), 0.0);
        root_->adjoint[0] = 1.0;
        for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
            detail::Node* n = *it;
            if (n->backward_fn) n->backward_fn(*n);
        }
        for (detail::Node* n : order_) {
            for (std::size_t i = 0; i < n->grad.size(); ++i) n->grad[i] += n->adjoint[i];
            n->adjoint.clear();
            n->adjoint.shrink_to_fit();
        }
    }

private:
    std::shared_ptr<detail::Node> root_;
    std::vector<detail::Node*> order_;
};

inline void backward(const Tensor& root) { Tape(root).backward(); }

}  // namespace apl
