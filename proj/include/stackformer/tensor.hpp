#pragma once

// Dense row-major tensors with tape-free reverse-mode autodiff.
// Every differentiable op builds a graph node holding a backward closure;
// backward() replays the graph in reverse topological order.
//
// Values are immutable after an op creates them.  Gradients accumulate
// with += so repeated backward() calls without zero_grad() add up.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace stackformer {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty unless requires_grad
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;  // reads this->grad, bumps parents' grads

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), T(0));
    }
};

template <typename T>
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), T(0), requires_grad);
    }

    static Tensor filled(Shape shape, T v, bool requires_grad = false) {
        auto n = std::make_shared<TensorNode<T>>();
        n->shape = std::move(shape);
        n->value.assign(shape_numel(n->shape), v);
        n->requires_grad = requires_grad;
        if (requires_grad) n->ensure_grad();
        return Tensor(std::move(n));
    }

    static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size())
            throw std::invalid_argument("tensor data size " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
        auto n = std::make_shared<TensorNode<T>>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        if (requires_grad) n->ensure_grad();
        return Tensor(std::move(n));
    }

    const Shape& shape() const { return node_->shape; }
    std::size_t numel() const { return node_->value.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }

    const std::vector<T>& value() const { return node_->value; }
    std::vector<T>& raw_value() { return node_->value; }  // for parameter updates only
    const std::vector<T>& grad() const { return node_->grad; }
    std::vector<T>& raw_grad() {  // for optimizer-side gradient edits only
        node_->ensure_grad();
        return node_->grad;
    }
    bool requires_grad() const { return node_->requires_grad; }

    T item() const {
        if (numel() != 1)
            throw std::invalid_argument("item() on non-scalar tensor " + shape_str(shape()));
        return node_->value[0];
    }

    void zero_grad() {
        if (node_->requires_grad) node_->grad.assign(node_->value.size(), T(0));
    }

    std::shared_ptr<TensorNode<T>> node() const { return node_; }

    explicit Tensor(std::shared_ptr<TensorNode<T>> n) : node_(std::move(n)) {}

    bool defined() const { return node_ != nullptr; }

  private:
    std::shared_ptr<TensorNode<T>> node_;
};

namespace detail {

template <typename T>
Tensor<T> make_op(Shape shape, std::vector<T> value,
                  std::vector<std::shared_ptr<TensorNode<T>>> parents,
                  std::function<void(TensorNode<T>&)> backward_fn) {
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    for (auto& p : parents)
        if (p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) {
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward_fn);
        n->ensure_grad();
    }
    return Tensor<T>(std::move(n));
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------- arithmetic

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
    auto an = a.node(), bn = b.node();
    return detail::make_op<T>(a.shape(), std::move(out), {an, bn}, [an, bn](TensorNode<T>& n) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] += n.grad[i];
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
    auto an = a.node(), bn = b.node();
    return detail::make_op<T>(a.shape(), std::move(out), {an, bn}, [an, bn](TensorNode<T>& n) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] -= n.grad[i];
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    auto an = a.node(), bn = b.node();
    return detail::make_op<T>(a.shape(), std::move(out), {an, bn}, [an, bn](TensorNode<T>& n) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] += n.grad[i] * an->value[i];
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * c;
    auto an = a.node();
    return detail::make_op<T>(a.shape(), std::move(out), {an}, [an, c](TensorNode<T>& n) {
        an->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i] * c;
    });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + c;
    auto an = a.node();
    return detail::make_op<T>(a.shape(), std::move(out), {an}, [an](TensorNode<T>& n) {
        an->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
    });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] > T(0) ? a.value()[i] : T(0);
    auto an = a.node();
    return detail::make_op<T>(a.shape(), std::move(out), {an}, [an](TensorNode<T>& n) {
        an->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            if (an->value[i] > T(0)) an->grad[i] += n.grad[i];
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T s = std::accumulate(a.value().begin(), a.value().end(), T(0));
    auto an = a.node();
    return detail::make_op<T>({1}, std::vector<T>{s}, {an}, [an](TensorNode<T>& n) {
        an->ensure_grad();
        for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += n.grad[0];
    });
}

// ------------------------------------------------------------- linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) +
                                    " and " + shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<T> out(m * n, T(0));
    const T* A = a.value().data();
    const T* B = b.value().data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const T av = A[i * k + p];
            if (av == T(0)) continue;
            const T* brow = B + p * n;
            T* orow = out.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    auto an = a.node(), bn = b.node();
    return detail::make_op<T>({m, n}, std::move(out), {an, bn},
                              [an, bn, m, k, n](TensorNode<T>& nd) {
        const T* G = nd.grad.data();
        if (an->requires_grad) {  // dA = G * B^T
            an->ensure_grad();
            const T* B = bn->value.data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    T acc = T(0);
                    const T* grow = G + i * n;
                    const T* brow = B + p * n;
                    for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    an->grad[i * k + p] += acc;
                }
        }
        if (bn->requires_grad) {  // dB = A^T * G
            bn->ensure_grad();
            const T* A = an->value.data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const T av = A[i * k + p];
                    if (av == T(0)) continue;
                    const T* grow = G + i * n;
                    T* brow = bn->grad.data() + p * n;
                    for (std::size_t j = 0; j < n; ++j) brow[j] += av * grow[j];
                }
        }
    });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    if (a.rank() != 2)
        throw std::invalid_argument("transpose: expected rank-2 tensor, got " +
                                    shape_str(a.shape()));
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<T> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.value()[i * n + j];
    auto an = a.node();
    return detail::make_op<T>({n, m}, std::move(out), {an}, [an, m, n](TensorNode<T>& nd) {
        an->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) an->grad[i * n + j] += nd.grad[j * m + i];
    });
}

// Adds a length-m column vector to every column of an m x n matrix.
template <typename T>
Tensor<T> add_col_broadcast(const Tensor<T>& mat, const Tensor<T>& vec) {
    if (mat.rank() != 2 || vec.rank() != 1 || mat.dim(0) != vec.dim(0))
        throw std::invalid_argument("add_col_broadcast: shapes " + shape_str(mat.shape()) +
                                    " and " + shape_str(vec.shape()));
    const std::size_t m = mat.dim(0), n = mat.dim(1);
    std::vector<T> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = mat.value()[i * n + j] + vec.value()[i];
    auto mn = mat.node(), vn = vec.node();
    return detail::make_op<T>(mat.shape(), std::move(out), {mn, vn},
                              [mn, vn, m, n](TensorNode<T>& nd) {
        if (mn->requires_grad) {
            mn->ensure_grad();
            for (std::size_t i = 0; i < m * n; ++i) mn->grad[i] += nd.grad[i];
        }
        if (vn->requires_grad) {
            vn->ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                T acc = T(0);
                for (std::size_t j = 0; j < n; ++j) acc += nd.grad[i * n + j];
                vn->grad[i] += acc;
            }
        }
    });
}

// ------------------------------------------------------------------- softmax

namespace detail {
template <typename T>
void softmax_span(const T* x, T* y, std::size_t n) {
    T mx = x[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
    T z = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = std::exp(x[i] - mx);
        z += y[i];
    }
    for (std::size_t i = 0; i < n; ++i) y[i] /= z;
}
}  // namespace detail

// Softmax over the last axis (each row for rank-2, the whole vector for rank-1).
template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
    for (T v : a.value())
        if (!std::isfinite(v))
            throw std::invalid_argument("softmax: non-finite input");
    const std::size_t n = a.rank() == 2 ? a.dim(1) : a.numel();
    const std::size_t rows = a.numel() / n;
    std::vector<T> out(a.numel());
    for (std::size_t r = 0; r < rows; ++r)
        detail::softmax_span(a.value().data() + r * n, out.data() + r * n, n);
    auto an = a.node();
    auto y = std::make_shared<std::vector<T>>(out);
    return detail::make_op<T>(a.shape(), std::move(out), {an}, [an, y, n, rows](TensorNode<T>& nd) {
        an->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* yr = y->data() + r * n;
            const T* gr = nd.grad.data() + r * n;
            T dot = T(0);
            for (std::size_t i = 0; i < n; ++i) dot += yr[i] * gr[i];
            for (std::size_t i = 0; i < n; ++i) an->grad[r * n + i] += yr[i] * (gr[i] - dot);
        }
    });
}

// Column-wise softmax of a rank-2 tensor (each column sums to 1).
template <typename T>
Tensor<T> softmax_cols(const Tensor<T>& a) {
    return transpose(softmax(transpose(a)));
}

// Masked row softmax: out[i][j] = exp(e[i][j]) * G[i][j] / sum_n exp(e[i][n]) * G[i][n].
// A row whose mask is all zero is rejected.
template <typename T>
Tensor<T> masked_softmax_rows(const Tensor<T>& e, const std::vector<uint8_t>& allow) {
    if (e.rank() != 2)
        throw std::invalid_argument("masked_softmax_rows: expected rank-2, got " +
                                    shape_str(e.shape()));
    const std::size_t rows = e.dim(0), n = e.dim(1);
    if (allow.size() != rows * n)
        throw std::invalid_argument("masked_softmax_rows: mask size mismatch");
    std::vector<T> out(rows * n, T(0));
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = e.value().data() + r * n;
        T mx = -std::numeric_limits<T>::infinity();
        bool any = false;
        for (std::size_t j = 0; j < n; ++j)
            if (allow[r * n + j]) {
                if (!std::isfinite(xr[j]))
                    throw std::invalid_argument("masked_softmax_rows: non-finite input");
                mx = std::max(mx, xr[j]);
                any = true;
            }
        if (!any)
            throw std::invalid_argument("masked_softmax_rows: row " + std::to_string(r) +
                                        " has no unmasked entries");
        T z = T(0);
        for (std::size_t j = 0; j < n; ++j)
            if (allow[r * n + j]) {
                out[r * n + j] = std::exp(xr[j] - mx);
                z += out[r * n + j];
            }
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] /= z;
    }
    auto an = e.node();
    auto y = std::make_shared<std::vector<T>>(out);
    return detail::make_op<T>(e.shape(), std::move(out), {an}, [an, y, rows, n](TensorNode<T>& nd) {
        an->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* yr = y->data() + r * n;
            const T* gr = nd.grad.data() + r * n;
            T dot = T(0);
            for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
            for (std::size_t j = 0; j < n; ++j)
                an->grad[r * n + j] += yr[j] * (gr[j] - dot);  // zero where masked
        }
    });
}

// ---------------------------------------------------------------- layer norm

inline constexpr double kLayerNormEps = 1e-5;

// Normalizes each column of a D x N matrix; gain and bias are length-D.
template <typename T>
Tensor<T> layer_norm_cols(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias) {
    if (x.rank() != 2 || gain.rank() != 1 || bias.rank() != 1 ||
        gain.dim(0) != x.dim(0) || bias.dim(0) != x.dim(0))
        throw std::invalid_argument("layer_norm_cols: shapes " + shape_str(x.shape()) + ", " +
                                    shape_str(gain.shape()) + ", " + shape_str(bias.shape()));
    const std::size_t d = x.dim(0), n = x.dim(1);
    std::vector<T> out(d * n), xhat(d * n), istd(n);
    for (std::size_t j = 0; j < n; ++j) {
        T mean = T(0);
        for (std::size_t i = 0; i < d; ++i) mean += x.value()[i * n + j];
        mean /= T(d);
        T var = T(0);
        for (std::size_t i = 0; i < d; ++i) {
            T c = x.value()[i * n + j] - mean;
            var += c * c;
        }
        var /= T(d);
        istd[j] = T(1) / std::sqrt(var + T(kLayerNormEps));
        for (std::size_t i = 0; i < d; ++i) {
            xhat[i * n + j] = (x.value()[i * n + j] - mean) * istd[j];
            out[i * n + j] = gain.value()[i] * xhat[i * n + j] + bias.value()[i];
        }
    }
    auto xn = x.node(), gn = gain.node(), bn = bias.node();
    auto xh = std::make_shared<std::vector<T>>(std::move(xhat));
    auto is = std::make_shared<std::vector<T>>(std::move(istd));
    return detail::make_op<T>(x.shape(), std::move(out), {xn, gn, bn},
                              [xn, gn, bn, xh, is, d, n](TensorNode<T>& nd) {
        for (std::size_t j = 0; j < n; ++j) {
            T sum_g = T(0), sum_gx = T(0);
            for (std::size_t i = 0; i < d; ++i) {
                T gy = nd.grad[i * n + j] * gn->value[i];
                sum_g += gy;
                sum_gx += gy * (*xh)[i * n + j];
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::size_t i = 0; i < d; ++i) {
                    T gy = nd.grad[i * n + j] * gn->value[i];
                    xn->grad[i * n + j] +=
                        (*is)[j] * (gy - sum_g / T(d) - (*xh)[i * n + j] * sum_gx / T(d));
                }
            }
            if (gn->requires_grad) {
                gn->ensure_grad();
                for (std::size_t i = 0; i < d; ++i)
                    gn->grad[i] += nd.grad[i * n + j] * (*xh)[i * n + j];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < d; ++i) bn->grad[i] += nd.grad[i * n + j];
            }
        }
    });
}

// Vector layer norm per the D-vector contract.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias) {
    if (x.rank() != 1)
        throw std::invalid_argument("layer_norm: expected rank-1, got " + shape_str(x.shape()));
    // reshape through a view op so gradients flow
    auto xn = x.node();
    auto viewed = detail::make_op<T>({x.dim(0), std::size_t(1)}, std::vector<T>(x.value()), {xn},
                                     [xn](TensorNode<T>& nd) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < nd.grad.size(); ++i) xn->grad[i] += nd.grad[i];
    });
    auto normed = layer_norm_cols(viewed, gain, bias);
    auto nn = normed.node();
    return detail::make_op<T>({x.dim(0)}, std::vector<T>(normed.value()), {nn},
                              [nn](TensorNode<T>& nd) {
        nn->ensure_grad();
        for (std::size_t i = 0; i < nd.grad.size(); ++i) nn->grad[i] += nd.grad[i];
    });
}

// ------------------------------------------------------- gather / structural

// Embedding lookup: table is V x D, ids select rows; output is D x N (one column
// per id).  Gradient scatter-adds into the table rows.
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<std::size_t>& ids) {
    if (table.rank() != 2)
        throw std::invalid_argument("embedding: table must be rank-2");
    const std::size_t v = table.dim(0), d = table.dim(1), n = ids.size();
    for (auto id : ids)
        if (id >= v)
            throw std::invalid_argument("embedding: id " + std::to_string(id) +
                                        " out of range for table with " + std::to_string(v) +
                                        " rows");
    std::vector<T> out(d * n);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < d; ++i) out[i * n + j] = table.value()[ids[j] * d + i];
    auto tn = table.node();
    return detail::make_op<T>({d, n}, std::move(out), {tn}, [tn, ids, d, n](TensorNode<T>& nd) {
        tn->ensure_grad();
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t i = 0; i < d; ++i)
                tn->grad[ids[j] * d + i] += nd.grad[i * n + j];
    });
}

// Generic gather by flat index; backward scatter-adds.
template <typename T>
Tensor<T> gather(const Tensor<T>& a, Shape out_shape, const std::vector<std::size_t>& flat_idx) {
    if (flat_idx.size() != shape_numel(out_shape))
        throw std::invalid_argument("gather: index count does not match output shape");
    std::vector<T> out(flat_idx.size());
    for (std::size_t i = 0; i < flat_idx.size(); ++i) {
        if (flat_idx[i] >= a.numel())
            throw std::invalid_argument("gather: index out of range");
        out[i] = a.value()[flat_idx[i]];
    }
    auto an = a.node();
    return detail::make_op<T>(std::move(out_shape), std::move(out), {an},
                              [an, flat_idx](TensorNode<T>& nd) {
        an->ensure_grad();
        for (std::size_t i = 0; i < flat_idx.size(); ++i) an->grad[flat_idx[i]] += nd.grad[i];
    });
}

// Scalar element extraction by flat index.
template <typename T>
Tensor<T> element(const Tensor<T>& a, std::size_t flat_idx) {
    return gather(a, Shape{1}, std::vector<std::size_t>{flat_idx});
}

// Stacks R same-length vectors as the rows of an R x C matrix.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& rows) {
    if (rows.empty()) throw std::invalid_argument("concat_rows: empty input");
    const std::size_t c = rows[0].numel();
    std::vector<T> out;
    out.reserve(rows.size() * c);
    std::vector<std::shared_ptr<TensorNode<T>>> parents;
    for (const auto& r : rows) {
        if (r.numel() != c)
            throw std::invalid_argument("concat_rows: row length mismatch");
        out.insert(out.end(), r.value().begin(), r.value().end());
        parents.push_back(r.node());
    }
    auto ps = parents;
    return detail::make_op<T>({rows.size(), c}, std::move(out), std::move(parents),
                              [ps, c](TensorNode<T>& nd) {
        for (std::size_t r = 0; r < ps.size(); ++r) {
            if (!ps[r]->requires_grad) continue;
            ps[r]->ensure_grad();
            for (std::size_t j = 0; j < c; ++j) ps[r]->grad[j] += nd.grad[r * c + j];
        }
    });
}

// out = accum + coeff[coeff_idx] * vec.  One node per term keeps the stack
// recursion at O(N) nodes per step.
template <typename T>
Tensor<T> add_scaled_by_elem(const Tensor<T>& accum, const Tensor<T>& coeff,
                             std::size_t coeff_idx, const Tensor<T>& vec) {
    detail::check_same_shape(accum, vec, "add_scaled_by_elem");
    if (coeff_idx >= coeff.numel())
        throw std::invalid_argument("add_scaled_by_elem: coefficient index out of range");
    const T c = coeff.value()[coeff_idx];
    std::vector<T> out(accum.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = accum.value()[i] + c * vec.value()[i];
    auto an = accum.node(), cn = coeff.node(), vn = vec.node();
    return detail::make_op<T>(accum.shape(), std::move(out), {an, cn, vn},
                              [an, cn, vn, coeff_idx, c](TensorNode<T>& nd) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < nd.grad.size(); ++i) an->grad[i] += nd.grad[i];
        }
        if (cn->requires_grad) {
            cn->ensure_grad();
            T acc = T(0);
            for (std::size_t i = 0; i < nd.grad.size(); ++i) acc += nd.grad[i] * vn->value[i];
            cn->grad[coeff_idx] += acc;
        }
        if (vn->requires_grad) {
            vn->ensure_grad();
            for (std::size_t i = 0; i < nd.grad.size(); ++i) vn->grad[i] += nd.grad[i] * c;
        }
    });
}

// ------------------------------------------------------------- cross entropy

// Mean negative log-likelihood over selected columns of a K x N logits matrix.
// targets[j] is the gold row index for column j, or -1 to skip the column.
template <typename T>
Tensor<T> cross_entropy_cols(const Tensor<T>& logits, const std::vector<int>& targets) {
    if (logits.rank() != 2)
        throw std::invalid_argument("cross_entropy_cols: logits must be rank-2");
    const std::size_t k = logits.dim(0), n = logits.dim(1);
    if (targets.size() != n)
        throw std::invalid_argument("cross_entropy_cols: expected " + std::to_string(n) +
                                    " targets, got " + std::to_string(targets.size()));
    std::size_t count = 0;
    for (int t : targets)
        if (t >= 0) {
            if (std::size_t(t) >= k)
                throw std::invalid_argument("cross_entropy_cols: target out of range");
            ++count;
        }
    if (count == 0)
        throw std::invalid_argument("cross_entropy_cols: no target positions");
    // column-wise log-sum-exp
    std::vector<T> probs(k * n, T(0));
    T loss = T(0);
    for (std::size_t j = 0; j < n; ++j) {
        if (targets[j] < 0) continue;
        T mx = logits.value()[j];
        for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, logits.value()[i * n + j]);
        T z = T(0);
        for (std::size_t i = 0; i < k; ++i) {
            probs[i * n + j] = std::exp(logits.value()[i * n + j] - mx);
            z += probs[i * n + j];
        }
        for (std::size_t i = 0; i < k; ++i) probs[i * n + j] /= z;
        loss -= std::log(probs[std::size_t(targets[j]) * n + j]);
    }
    loss /= T(count);
    auto ln = logits.node();
    auto pr = std::make_shared<std::vector<T>>(std::move(probs));
    return detail::make_op<T>({1}, std::vector<T>{loss}, {ln},
                              [ln, pr, targets, k, n, count](TensorNode<T>& nd) {
        ln->ensure_grad();
        const T g = nd.grad[0] / T(count);
        for (std::size_t j = 0; j < n; ++j) {
            if (targets[j] < 0) continue;
            for (std::size_t i = 0; i < k; ++i) {
                T p = (*pr)[i * n + j];
                ln->grad[i * n + j] += g * (p - (int(i) == targets[j] ? T(1) : T(0)));
            }
        }
    });
}

// ------------------------------------------------------------------ backward

// Reverse-topological replay from a scalar loss.  Each recorded node's
// backward closure fires exactly once.
template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got " +
                                    shape_str(loss.shape()));
    if (!loss.node()->requires_grad) return;

    std::vector<TensorNode<T>*> order;
    std::unordered_set<TensorNode<T>*> seen;
    // iterative post-order DFS
    std::vector<std::pair<TensorNode<T>*, std::size_t>> stack{{loss.node().get(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorNode<T>* p = node->parents[next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss.node()->ensure_grad();
    loss.node()->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

}  // namespace stackformer
