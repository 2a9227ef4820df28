#pragma once

// The five positional encoding variants: none, sincos, relative, rotary,
// alibi.  sincos is additive at the embedding; relative/rotary/alibi act
// inside the attention heads.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "stackformer/tensor.hpp"

namespace stackformer {

enum class PosEncoding { None, SinCos, Relative, Rotary, Alibi };

inline std::string to_string(PosEncoding pe) {
    switch (pe) {
        case PosEncoding::None: return "none";
        case PosEncoding::SinCos: return "sincos";
        case PosEncoding::Relative: return "relative";
        case PosEncoding::Rotary: return "rotary";
        case PosEncoding::Alibi: return "alibi";
    }
    return "?";
}

inline PosEncoding parse_pos_encoding(const std::string& s) {
    if (s == "none") return PosEncoding::None;
    if (s == "sincos") return PosEncoding::SinCos;
    if (s == "relative") return PosEncoding::Relative;
    if (s == "rotary") return PosEncoding::Rotary;
    if (s == "alibi") return PosEncoding::Alibi;
    throw std::invalid_argument("unknown positional encoding: " + s);
}

// Additive sinusoidal table, D x N (column p is the encoding of position p):
// row 2k holds sin(p / 10000^{2k/D}), row 2k+1 holds cos of the same angle.
template <typename T>
std::vector<T> sincos_table(std::size_t d, std::size_t n) {
    std::vector<T> out(d * n, T(0));
    for (std::size_t p = 0; p < n; ++p)
        for (std::size_t k = 0; 2 * k < d; ++k) {
            double freq = std::pow(10000.0, -double(2 * k) / double(d));
            out[(2 * k) * n + p] = T(std::sin(double(p) * freq));
            if (2 * k + 1 < d) out[(2 * k + 1) * n + p] = T(std::cos(double(p) * freq));
        }
    return out;
}

// Sinusoidal encodings of signed relative distance, D x (2N-1); column c
// encodes distance c - (N-1) in [-(N-1), N-1].
template <typename T>
std::vector<T> relative_distance_table(std::size_t d, std::size_t n) {
    const std::size_t cols = 2 * n - 1;
    std::vector<T> out(d * cols, T(0));
    for (std::size_t c = 0; c < cols; ++c) {
        double dist = double(c) - double(n - 1);
        for (std::size_t k = 0; 2 * k < d; ++k) {
            double freq = std::pow(10000.0, -double(2 * k) / double(d));
            out[(2 * k) * cols + c] = T(std::sin(dist * freq));
            if (2 * k + 1 < d) out[(2 * k + 1) * cols + c] = T(std::cos(dist * freq));
        }
    }
    return out;
}

// Head m (0-based) of M gets slope 2^{-8(m+1)/M}.
inline double alibi_slope(std::size_t m, std::size_t heads) {
    return std::pow(2.0, -8.0 * double(m + 1) / double(heads));
}

// Constant N x N logit bias -slope * |i - n|; zero at distance zero.
template <typename T>
std::vector<T> alibi_bias(std::size_t n, double slope) {
    std::vector<T> out(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double dist = i > j ? double(i - j) : double(j - i);
            out[i * n + j] = T(-slope * dist);
        }
    return out;
}

// Rotary application: rows are paired (2k, 2k+1) and each column p is
// rotated by angle p * 10000^{-2k/D'}.  Orthogonal per column, so the
// backward pass is the inverse rotation.
template <typename T>
Tensor<T> rotary_apply(const Tensor<T>& x) {
    if (x.rank() != 2)
        throw std::invalid_argument("rotary_apply: expected rank-2 tensor");
    const std::size_t d = x.dim(0), n = x.dim(1);
    std::vector<T> out(x.value());
    auto angles = std::make_shared<std::vector<double>>(d / 2 * n);
    for (std::size_t k = 0; 2 * k + 1 < d; ++k) {
        double freq = std::pow(10000.0, -double(2 * k) / double(d));
        for (std::size_t p = 0; p < n; ++p) {
            double a = double(p) * freq;
            (*angles)[k * n + p] = a;
            T c = T(std::cos(a)), s = T(std::sin(a));
            T x0 = x.value()[(2 * k) * n + p];
            T x1 = x.value()[(2 * k + 1) * n + p];
            out[(2 * k) * n + p] = c * x0 - s * x1;
            out[(2 * k + 1) * n + p] = s * x0 + c * x1;
        }
    }
    auto xn = x.node();
    return detail::make_op<T>(x.shape(), std::move(out), {xn}, [xn, angles, d, n](TensorNode<T>& nd) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < nd.grad.size(); ++i) xn->grad[i] += nd.grad[i];
        for (std::size_t k = 0; 2 * k + 1 < d; ++k)
            for (std::size_t p = 0; p < n; ++p) {
                double a = (*angles)[k * n + p];
                T c = T(std::cos(a)), s = T(std::sin(a));
                T g0 = nd.grad[(2 * k) * n + p];
                T g1 = nd.grad[(2 * k + 1) * n + p];
                // undo the identity pass-through added above for rotated rows
                xn->grad[(2 * k) * n + p] += (c * g0 + s * g1) - g0;
                xn->grad[(2 * k + 1) * n + p] += (-s * g0 + c * g1) - g1;
            }
    });
}

}  // namespace stackformer
