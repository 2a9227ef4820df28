#pragma once

// Scaled dot-product multi-head self-attention with optional boolean masks.
// Masking is multiplicative in probability space: masked entries are dropped
// from both the exponentials and the normalizer.

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "stackformer/positional.hpp"
#include "stackformer/tensor.hpp"

namespace stackformer {

// G[i][n] = 1 means position i may attend to position n.
struct AttentionMask {
    std::size_t n = 0;
    std::vector<std::uint8_t> allow;  // row-major n x n

    static AttentionMask ones(std::size_t n) {
        return {n, std::vector<std::uint8_t>(n * n, 1)};
    }

    // Strict future mask: n < i.  Row 0 is empty; reject it at softmax time.
    static AttentionMask future_strict(std::size_t n) {
        AttentionMask m{n, std::vector<std::uint8_t>(n * n, 0)};
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < i; ++j) m.allow[i * n + j] = 1;
        return m;
    }

    // Strict future mask with the one exception that the BOS row (position 0)
    // attends to itself; without it the BOS column has an empty softmax row
    // and the first autoregressive conditional is undefined.
    static AttentionMask future(std::size_t n) {
        AttentionMask m = future_strict(n);
        if (n > 0) m.allow[0] = 1;
        return m;
    }

    bool at(std::size_t i, std::size_t j) const { return allow[i * n + j] != 0; }
};

struct MultiHeadConfig {
    std::size_t model_dim = 0;  // D
    std::size_t heads = 0;      // M

    std::size_t head_dim() const {  // D'
        if (heads == 0 || model_dim % heads != 0)
            throw std::invalid_argument("head width must divide model width exactly (D=" +
                                        std::to_string(model_dim) + ", M=" +
                                        std::to_string(heads) + ")");
        return model_dim / heads;
    }
};

// (q . k) / sqrt(D')
template <typename T>
Tensor<T> compatibility(const Tensor<T>& q, const Tensor<T>& k) {
    if (q.rank() != 1 || k.rank() != 1 || q.dim(0) != k.dim(0))
        throw std::invalid_argument("compatibility: widths " + shape_str(q.shape()) + " vs " +
                                    shape_str(k.shape()));
    const std::size_t d = q.dim(0);
    std::vector<std::size_t> idx(d);
    for (std::size_t i = 0; i < d; ++i) idx[i] = i;
    Tensor<T> qr = gather(q, Shape{1, d}, idx);
    Tensor<T> kc = gather(k, Shape{d, 1}, idx);
    Tensor<T> dot = matmul(qr, kc);  // 1x1
    return scale(gather(dot, Shape{1}, {0}), T(1.0 / std::sqrt(double(d))));
}

// Row i of the result is a distribution supported exactly on the unmasked
// entries of row i of G.
template <typename T>
Tensor<T> masked_attention_weights(const Tensor<T>& e, const AttentionMask& g) {
    if (e.rank() != 2 || e.dim(0) != g.n || e.dim(1) != g.n)
        throw std::invalid_argument("masked_attention_weights: scores " + shape_str(e.shape()) +
                                    " vs mask of size " + std::to_string(g.n));
    return masked_softmax_rows(e, g.allow);
}

template <typename T>
struct AttentionHeadParams {
    Tensor<T> w_q, w_k, w_v;  // D' x D
    Tensor<T> w_o;            // D x D'
    // relative positional encoding only:
    Tensor<T> rel_u, rel_v;   // D'
    Tensor<T> w_r;            // D' x D
};

template <typename T>
struct MultiHeadParams {
    std::vector<AttentionHeadParams<T>> heads;
};

// Optionally captured attention weights for export.
template <typename T>
struct AttentionTrace {
    std::vector<std::vector<T>> head_weights;  // per head, row-major N x N
};

// H is D x N.  Output column i of head m is sum_n alpha_i(n) v_n; heads are
// combined through their output projections.
template <typename T>
Tensor<T> multi_head_self_attention(const Tensor<T>& h, const MultiHeadParams<T>& params,
                                    const AttentionMask* mask = nullptr,
                                    PosEncoding pe = PosEncoding::None,
                                    AttentionTrace<T>* trace = nullptr) {
    if (h.rank() != 2)
        throw std::invalid_argument("multi_head_self_attention: H must be D x N");
    const std::size_t n = h.dim(1);
    const std::size_t m_heads = params.heads.size();
    if (m_heads == 0)
        throw std::invalid_argument("multi_head_self_attention: no heads");

    AttentionMask full = AttentionMask::ones(n);
    const AttentionMask& g = mask ? *mask : full;

    Tensor<T> out;
    for (std::size_t m = 0; m < m_heads; ++m) {
        const auto& hp = params.heads[m];
        const std::size_t dh = hp.w_q.dim(0);
        Tensor<T> q = matmul(hp.w_q, h);  // D' x N
        Tensor<T> k = matmul(hp.w_k, h);
        Tensor<T> v = matmul(hp.w_v, h);
        if (pe == PosEncoding::Rotary) {
            q = rotary_apply(q);
            k = rotary_apply(k);
        }
        Tensor<T> e = scale(matmul(transpose(q), k), T(1.0 / std::sqrt(double(dh))));
        if (pe == PosEncoding::Alibi) {
            e = add(e, Tensor<T>::from_data({n, n}, alibi_bias<T>(n, alibi_slope(m, m_heads))));
        } else if (pe == PosEncoding::Relative) {
            // Transformer-XL decomposition: content and position terms with
            // learned global biases u (content) and v (position).
            const std::size_t cols = 2 * n - 1;
            Tensor<T> r = Tensor<T>::from_data({h.dim(0), cols},
                                               relative_distance_table<T>(h.dim(0), n));
            Tensor<T> p = matmul(hp.w_r, r);  // D' x (2N-1)
            // (q_i + u)^T k_j is already partly in e; add u^T k_j:
            std::vector<std::size_t> uidx(dh);
            for (std::size_t i = 0; i < dh; ++i) uidx[i] = i;
            Tensor<T> urow = gather(hp.rel_u, Shape{1, dh}, uidx);
            Tensor<T> vrow = gather(hp.rel_v, Shape{1, dh}, uidx);
            Tensor<T> uk = matmul(urow, k);   // 1 x N
            Tensor<T> vp = matmul(vrow, p);   // 1 x (2N-1)
            Tensor<T> qp = matmul(transpose(q), p);  // N x (2N-1)
            // shift: entry (i, j) reads distance column (N-1) + (i - j)
            std::vector<std::size_t> shift_idx(n * n), uk_idx(n * n), vp_idx(n * n);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    std::size_t c = (n - 1) + i - j;
                    shift_idx[i * n + j] = i * cols + c;
                    vp_idx[i * n + j] = c;
                    uk_idx[i * n + j] = j;
                }
            Tensor<T> bias = add(gather(qp, Shape{n, n}, shift_idx),
                                 add(gather(vp, Shape{n, n}, vp_idx),
                                     gather(uk, Shape{n, n}, uk_idx)));
            e = add(e, scale(bias, T(1.0 / std::sqrt(double(dh)))));
        }
        Tensor<T> alpha = masked_softmax_rows(e, g.allow);  // rows are alpha_i
        if (trace) trace->head_weights.push_back(alpha.value());
        Tensor<T> attended = matmul(v, transpose(alpha));  // D' x N
        Tensor<T> projected = matmul(hp.w_o, attended);    // D x N
        out = out.defined() ? add(out, projected) : projected;
    }
    return out;
}

}  // namespace stackformer
