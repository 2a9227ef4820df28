#pragma once

// Differentiable stack attention.
//
// Position 0 is reserved for [BOS] and represents the empty stack.  Each
// position i carries a distribution alpha_i over {0} u [N] locating the
// index at which the current stack top was pushed.  The recursion:
//
//   alpha_0        = onehot(0)
//   PUSH  at i     -> onehot(i)
//   NO-OP at i     -> alpha_{i-1}
//   POP   at i     -> sum_{j=1}^{i-1} alpha_{i-1}(j) * alpha_{j-1}
//                     + alpha_{i-1}(0) * alpha_0
//   alpha_i        = a_i(PUSH) * push + a_i(POP) * pop + a_i(NOOP) * noop
//
// where a_i = softmax(W_A h_i + b_A) is a distribution over the three
// operations.  Popping an empty stack acts as NO-OP.

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "stackformer/rng.hpp"
#include "stackformer/tensor.hpp"

namespace stackformer {

enum class StackOp : std::uint8_t { Push, NoOp, Pop };

inline const char* to_string(StackOp op) {
    switch (op) {
        case StackOp::Push: return "PUSH";
        case StackOp::NoOp: return "NO-OP";
        case StackOp::Pop: return "POP";
    }
    return "?";
}

// Exact stack over the index set [N].  PEEK returns 0 on empty; POP on empty
// is the identity.
class HardStack {
  public:
    void push(std::size_t index) { items_.push_back(index); }

    void pop() {
        if (!items_.empty()) items_.pop_back();
    }

    std::size_t peek() const { return items_.empty() ? 0 : items_.back(); }

    bool empty() const { return items_.empty(); }
    std::size_t depth() const { return items_.size(); }

    // PUSH at step i pushes the index i itself.
    void step(StackOp op, std::size_t i) {
        switch (op) {
            case StackOp::Push: push(i); break;
            case StackOp::NoOp: break;
            case StackOp::Pop: pop(); break;
        }
    }

  private:
    std::vector<std::size_t> items_;
};

// --------------------------------------------------------------- plain alphas
//
// Non-differentiable double-precision recursion used when the actions are
// given as hard operations (the structural-supervision path) and by the
// theorem checkers' bookkeeping.

inline std::vector<double> alpha_init(std::size_t n) {
    std::vector<double> a(n + 1, 0.0);
    a[0] = 1.0;
    return a;
}

inline std::vector<double> alpha_push(std::size_t i, std::size_t n) {
    if (i < 1 || i > n)
        throw std::invalid_argument("alpha_push: index " + std::to_string(i) +
                                    " outside [1, " + std::to_string(n) + "]");
    std::vector<double> a(n + 1, 0.0);
    a[i] = 1.0;
    return a;
}

inline std::vector<double> alpha_pop(const std::vector<std::vector<double>>& alphas) {
    // alphas holds alpha_0 .. alpha_{i-1}; result is the POP candidate at step i.
    const std::size_t i = alphas.size();
    if (i < 1) throw std::invalid_argument("alpha_pop: need at least alpha_0");
    const std::size_t width = alphas[0].size();
    std::vector<double> out(width, 0.0);
    const std::vector<double>& prev = alphas[i - 1];
    for (std::size_t j = 1; j + 1 <= i; ++j)
        for (std::size_t k = 0; k < width; ++k) out[k] += prev[j] * alphas[j - 1][k];
    for (std::size_t k = 0; k < width; ++k) out[k] += prev[0] * alphas[0][k];
    return out;
}

// Computes alpha_0 .. alpha_N for a hard operation sequence with no hidden
// state input.  Equals the differentiable recursion under one-hot actions.
inline std::vector<std::vector<double>> precompute_alphas(const std::vector<StackOp>& ops,
                                                          std::size_t n) {
    if (ops.size() != n)
        throw std::invalid_argument("precompute_alphas: expected " + std::to_string(n) +
                                    " ops, got " + std::to_string(ops.size()));
    std::vector<std::vector<double>> alphas{alpha_init(n)};
    for (std::size_t i = 1; i <= n; ++i) {
        switch (ops[i - 1]) {
            case StackOp::Push: alphas.push_back(alpha_push(i, n)); break;
            case StackOp::NoOp: alphas.push_back(alphas.back()); break;
            case StackOp::Pop: alphas.push_back(alpha_pop(alphas)); break;
        }
    }
    return alphas;
}

// ------------------------------------------------------- differentiable path

// Running state of one sequence's stack attention: alpha_0 .. alpha_i so far
// plus the action distributions that produced them.
template <typename T>
struct StackAttnState {
    std::size_t n = 0;  // final sequence length N; alphas are length N+1
    std::vector<Tensor<T>> alphas;
    std::vector<Tensor<T>> actions;  // 3-vectors, actions[i-1] produced alpha_i

    explicit StackAttnState(std::size_t n_) : n(n_) {
        alphas.push_back(soft_init());
    }

    Tensor<T> soft_init() const {
        std::vector<T> v(n + 1, T(0));
        v[0] = T(1);
        return Tensor<T>::from_data({n + 1}, std::move(v));
    }

    std::size_t position() const { return alphas.size() - 1; }
};

// Action layout inside a 3-vector.
inline constexpr std::size_t kActPush = 0;
inline constexpr std::size_t kActPop = 1;
inline constexpr std::size_t kActNoOp = 2;

template <typename T>
Tensor<T> soft_push(std::size_t i, std::size_t n) {
    if (i < 1 || i > n)
        throw std::invalid_argument("soft_push: index " + std::to_string(i) + " outside [1, " +
                                    std::to_string(n) + "]");
    std::vector<T> v(n + 1, T(0));
    v[i] = T(1);
    return Tensor<T>::from_data({n + 1}, std::move(v));
}

// POP candidate at position i = alphas.size(): one pass over the stored
// alphas, O(i) vector operations.
template <typename T>
Tensor<T> soft_pop(const std::vector<Tensor<T>>& alphas) {
    const std::size_t i = alphas.size();
    if (i < 1) throw std::invalid_argument("soft_pop: need at least alpha_0");
    const Tensor<T>& prev = alphas[i - 1];
    Tensor<T> out = Tensor<T>::zeros(prev.shape());
    for (std::size_t j = 1; j <= i - 1; ++j)
        out = add_scaled_by_elem(out, prev, j, alphas[j - 1]);
    out = add_scaled_by_elem(out, prev, 0, alphas[0]);
    return out;
}

// One step of the superposition recursion.  action is a valid distribution
// over {PUSH, POP, NO-OP}; the new alpha is appended to the state and
// returned.
template <typename T>
Tensor<T> soft_step(StackAttnState<T>& state, const Tensor<T>& action) {
    if (action.numel() != 3)
        throw std::invalid_argument("soft_step: action must be a 3-vector");
    T s = T(0);
    for (T v : action.value()) {
        if (v < T(-1e-6))
            throw std::invalid_argument("soft_step: negative action probability");
        s += v;
    }
    if (std::abs(double(s) - 1.0) > 1e-6)
        throw std::invalid_argument("soft_step: action probabilities sum to " +
                                    std::to_string(double(s)));
    const std::size_t i = state.position() + 1;
    if (i > state.n)
        throw std::invalid_argument("soft_step: sequence already complete");

    Tensor<T> push = soft_push<T>(i, state.n);
    Tensor<T> pop = soft_pop(state.alphas);
    const Tensor<T>& noop = state.alphas[i - 1];

    Tensor<T> out = Tensor<T>::zeros({state.n + 1});
    out = add_scaled_by_elem(out, action, kActPush, push);
    out = add_scaled_by_elem(out, action, kActPop, pop);
    out = add_scaled_by_elem(out, action, kActNoOp, noop);

    state.alphas.push_back(out);
    state.actions.push_back(action);
    return out;
}

// a_i = softmax(W_A h_i + b_A) for every column of H at once; returns a
// 3 x N matrix of action distributions for positions 1..N (H's columns
// 1..N; the BOS column has no action).
template <typename T>
Tensor<T> action_distributions(const Tensor<T>& h_cols, const Tensor<T>& w_a,
                               const Tensor<T>& b_a) {
    if (w_a.rank() != 2 || w_a.dim(0) != 3 || b_a.numel() != 3)
        throw std::invalid_argument("action_distributions: W_A must be 3xD and b_A length 3");
    return softmax_cols(add_col_broadcast(matmul(w_a, h_cols), b_a));
}

// Single-column convenience used by unit tests and the worked examples.
template <typename T>
Tensor<T> action_distribution(const Tensor<T>& h, const Tensor<T>& w_a, const Tensor<T>& b_a) {
    if (h.rank() != 1)
        throw std::invalid_argument("action_distribution: h must be rank-1");
    Tensor<T> col = gather(h, Shape{h.dim(0), 1}, [&] {
        std::vector<std::size_t> idx(h.dim(0));
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        return idx;
    }());
    Tensor<T> a = action_distributions(col, w_a, b_a);  // 3x1
    return gather(a, Shape{3}, {0, 1, 2});
}

// Readout per Eq-style weighted sum: column i of the result is
// sum_n alpha_i(n) h_n.  H is D x (N+1) including the BOS column; the alpha
// rows are stacked into an (N+1) x (N+1) matrix A and the result is H A^T.
template <typename T>
Tensor<T> stack_readout(const Tensor<T>& h, const std::vector<Tensor<T>>& alphas) {
    if (h.rank() != 2)
        throw std::invalid_argument("stack_readout: H must be rank-2");
    if (alphas.empty() || h.dim(1) != alphas[0].numel())
        throw std::invalid_argument("stack_readout: H has " + std::to_string(h.dim(1)) +
                                    " columns but alphas have width " +
                                    std::to_string(alphas.empty() ? 0 : alphas[0].numel()));
    if (alphas.size() != h.dim(1))
        throw std::invalid_argument("stack_readout: need one alpha per column");
    Tensor<T> a = concat_rows(alphas);  // rows are alpha_i
    return matmul(h, transpose(a));
}

// The stack sublayer: runs the action/alpha recursion on the FFN output and
// adds a residual.  No layer normalization here.
template <typename T>
struct StackSublayerResult {
    Tensor<T> output;               // D x (N+1)
    StackAttnState<T> state;        // alphas + actions, for export / inspection
};

template <typename T>
StackSublayerResult<T> stack_sublayer(const Tensor<T>& h_ffn, const Tensor<T>& w_a,
                                      const Tensor<T>& b_a) {
    if (h_ffn.rank() != 2 || h_ffn.dim(1) < 1)
        throw std::invalid_argument("stack_sublayer: H must be D x (N+1)");
    const std::size_t n = h_ffn.dim(1) - 1;
    // 3 x (N+1); column 0 (BOS) gets no action
    Tensor<T> acts = action_distributions(h_ffn, w_a, b_a);

    StackAttnState<T> state(n);
    for (std::size_t i = 1; i <= n; ++i) {
        Tensor<T> a_i = gather(acts, Shape{3},
                               {0 * (n + 1) + i, 1 * (n + 1) + i, 2 * (n + 1) + i});
        soft_step(state, a_i);
    }
    Tensor<T> readout = stack_readout(h_ffn, state.alphas);
    return {add(readout, h_ffn), std::move(state)};
}

// ------------------------------------------------------------ theorem checks

struct TheoremReport {
    bool ok = true;
    std::size_t first_divergent_index = 0;  // valid when !ok
    double max_deviation = 0.0;
    std::vector<std::size_t> peek_trace;  // hard-stack PEEK after each step (incl. step 0)
};

// Hard-op equivalence: runs the differentiable recursion with one-hot
// actions in lockstep with a HardStack and compares alpha_i against
// onehot(PEEK) at every step.
inline TheoremReport check_theorem1(const std::vector<StackOp>& ops, std::size_t n,
                                    double tol = 1e-12) {
    TheoremReport rep;
    HardStack hard;
    StackAttnState<double> state(n);
    rep.peek_trace.push_back(hard.peek());
    for (std::size_t i = 1; i <= n; ++i) {
        std::vector<double> a(3, 0.0);
        switch (ops[i - 1]) {
            case StackOp::Push: a[kActPush] = 1.0; break;
            case StackOp::Pop: a[kActPop] = 1.0; break;
            case StackOp::NoOp: a[kActNoOp] = 1.0; break;
        }
        soft_step(state, Tensor<double>::from_data({3}, a));
        hard.step(ops[i - 1], i);
        rep.peek_trace.push_back(hard.peek());
    }
    for (std::size_t i = 0; i <= n; ++i) {
        const auto& alpha = state.alphas[i].value();
        for (std::size_t k = 0; k <= n; ++k) {
            double expect = (k == rep.peek_trace[i]) ? 1.0 : 0.0;
            double dev = std::abs(alpha[k] - expect);
            rep.max_deviation = std::max(rep.max_deviation, dev);
            if (dev > tol && rep.ok) {
                rep.ok = false;
                rep.first_divergent_index = i;
            }
        }
    }
    return rep;
}

// Normalization: every alpha produced by a sequence of valid soft action
// distributions sums to 1.
inline TheoremReport check_theorem2(const std::vector<std::vector<double>>& actions,
                                    std::size_t n, double tol = 1e-9) {
    TheoremReport rep;
    StackAttnState<double> state(n);
    for (std::size_t i = 1; i <= n && i <= actions.size(); ++i)
        soft_step(state, Tensor<double>::from_data({3}, actions[i - 1]));
    for (std::size_t i = 0; i < state.alphas.size(); ++i) {
        double s = 0.0;
        for (double v : state.alphas[i].value()) s += v;
        double dev = std::abs(s - 1.0);
        rep.max_deviation = std::max(rep.max_deviation, dev);
        if (dev > tol && rep.ok) {
            rep.ok = false;
            rep.first_divergent_index = i;
        }
    }
    return rep;
}

// Random helpers shared by the verification CLI and the test suites.

inline std::vector<StackOp> random_ops(Rng& rng, std::size_t n) {
    std::vector<StackOp> ops(n);
    for (auto& op : ops) op = StackOp(rng.uniform_int(3));
    return ops;
}

inline std::vector<std::vector<double>> random_action_sequences(Rng& rng, std::size_t n) {
    // Dirichlet(1,1,1) via normalized exponentials
    std::vector<std::vector<double>> acts(n, std::vector<double>(3));
    for (auto& a : acts) {
        double z = 0.0;
        for (double& v : a) {
            v = -std::log(1.0 - rng.uniform());
            z += v;
        }
        for (double& v : a) v /= z;
    }
    return acts;
}

// The worked six-step trace used as a golden test: PUSH, PUSH, PUSH, POP,
// NO-OP, POP over N=6 with PEEK trace (0,1,2,3,2,2,1).
inline std::vector<StackOp> golden_trace_ops() {
    return {StackOp::Push, StackOp::Push, StackOp::Push,
            StackOp::Pop,  StackOp::NoOp, StackOp::Pop};
}

}  // namespace stackformer
