#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cmath>

#include "gradcheck.hpp"
#include "stackformer/rng.hpp"
#include "stackformer/stack.hpp"

using namespace stackformer;

namespace {

std::vector<double> onehot(std::size_t k, std::size_t width) {
    std::vector<double> v(width, 0.0);
    v[k] = 1.0;
    return v;
}

}  // namespace

TEST_CASE("hard stack basics") {
    HardStack s;
    CHECK(s.peek() == 0);
    s.pop();  // pop on empty is identity
    CHECK(s.peek() == 0);
    CHECK(s.empty());

    s.push(5);
    CHECK(s.peek() == 5);
    s.pop();
    CHECK(s.peek() == 0);
    CHECK(s.empty());
}

TEST_CASE("hard stack golden trace peeks") {
    HardStack s;
    auto ops = golden_trace_ops();
    std::vector<std::size_t> peeks{s.peek()};
    for (std::size_t i = 1; i <= ops.size(); ++i) {
        s.step(ops[i - 1], i);
        peeks.push_back(s.peek());
    }
    CHECK(peeks == std::vector<std::size_t>{0, 1, 2, 3, 2, 2, 1});
}

TEST_CASE("soft_push is one-hot at the pushed index") {
    auto a = soft_push<double>(1, 3);
    CHECK(a.value() == onehot(1, 4));
    CHECK(soft_push<double>(3, 3).value() == onehot(3, 4));
    CHECK_THROWS_AS(soft_push<double>(0, 3), std::invalid_argument);
    CHECK_THROWS_AS(soft_push<double>(4, 3), std::invalid_argument);
}

TEST_CASE("soft_pop on empty history is a no-op") {
    StackAttnState<double> st(4);
    auto popped = soft_pop(st.alphas);  // i = 1, only alpha_0 exists
    CHECK(popped.value() == onehot(0, 5));
}

TEST_CASE("soft_pop after a single push returns to empty") {
    StackAttnState<double> st(4);
    st.alphas.push_back(soft_push<double>(1, 4));
    auto popped = soft_pop(st.alphas);  // i = 2
    CHECK(popped.value() == onehot(0, 5));
}

TEST_CASE("soft_step mixes operations convexly") {
    StackAttnState<double> st(3);
    soft_step(st, Tensor<double>::from_data({3}, {1.0, 0.0, 0.0}));  // PUSH at 1
    soft_step(st, Tensor<double>::from_data({3}, {0.5, 0.5, 0.0}));  // half PUSH, half POP
    CHECK(st.alphas[2].value()[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(st.alphas[2].value()[1] == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(st.alphas[2].value()[2] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(st.alphas[2].value()[3] == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("soft_step one-hot NO-OP keeps the previous alpha") {
    StackAttnState<double> st(2);
    soft_step(st, Tensor<double>::from_data({3}, {1.0, 0.0, 0.0}));
    soft_step(st, Tensor<double>::from_data({3}, {0.0, 0.0, 1.0}));
    CHECK(st.alphas[2].value() == st.alphas[1].value());
}

TEST_CASE("soft_step rejects invalid action distributions") {
    StackAttnState<double> st(2);
    CHECK_THROWS_AS(soft_step(st, Tensor<double>::from_data({3}, {0.9, 0.3, 0.1})),
                    std::invalid_argument);
    CHECK_THROWS_AS(soft_step(st, Tensor<double>::from_data({3}, {1.2, -0.2, 0.0})),
                    std::invalid_argument);
}

TEST_CASE("golden trace alphas") {
    auto rep = check_theorem1(golden_trace_ops(), 6);
    CHECK(rep.ok);
    CHECK(rep.max_deviation == 0.0);
    CHECK(rep.peek_trace == std::vector<std::size_t>{0, 1, 2, 3, 2, 2, 1});

    // column-by-column against the worked table
    auto alphas = precompute_alphas(golden_trace_ops(), 6);
    CHECK(alphas[0] == onehot(0, 7));
    CHECK(alphas[1] == onehot(1, 7));
    CHECK(alphas[2] == onehot(2, 7));
    CHECK(alphas[3] == onehot(3, 7));
    CHECK(alphas[4] == onehot(2, 7));
    CHECK(alphas[5] == onehot(2, 7));
    CHECK(alphas[6] == onehot(1, 7));
}

TEST_CASE("theorem 1 over random op sequences") {
    Rng rng(42);
    for (int trial = 0; trial < 200; ++trial) {
        std::size_t n = 1 + rng.uniform_int(50);
        auto rep = check_theorem1(random_ops(rng, n), n);
        CHECK(rep.ok);
    }
}

TEST_CASE("theorem 1 all NO-OP") {
    std::vector<StackOp> ops(10, StackOp::NoOp);
    auto rep = check_theorem1(ops, 10);
    CHECK(rep.ok);
    for (auto p : rep.peek_trace) CHECK(p == 0);
}

TEST_CASE("theorem 2 normalization") {
    Rng rng(43);
    for (int trial = 0; trial < 200; ++trial) {
        std::size_t n = 1 + rng.uniform_int(100);
        auto rep = check_theorem2(random_action_sequences(rng, n), n);
        CHECK(rep.ok);
        CHECK(rep.max_deviation < 1e-9);
    }

    // uniform actions
    auto rep = check_theorem2(std::vector<std::vector<double>>(
                                  20, std::vector<double>{1.0 / 3, 1.0 / 3, 1.0 / 3}),
                              20);
    CHECK(rep.ok);

    // degenerate all-POP stays at the empty stack
    StackAttnState<double> st(8);
    for (int i = 0; i < 8; ++i)
        soft_step(st, Tensor<double>::from_data({3}, {0.0, 1.0, 0.0}));
    for (const auto& a : st.alphas) CHECK(a.value() == onehot(0, 9));
}

TEST_CASE("causality: alpha_i(n) = 0 for n > i") {
    Rng rng(44);
    for (int trial = 0; trial < 50; ++trial) {
        std::size_t n = 2 + rng.uniform_int(30);
        StackAttnState<double> st(n);
        for (auto& a : random_action_sequences(rng, n))
            soft_step(st, Tensor<double>::from_data({3}, a));
        for (std::size_t i = 0; i <= n; ++i)
            for (std::size_t k = i + 1; k <= n; ++k) CHECK(st.alphas[i].value()[k] == 0.0);
    }
}

TEST_CASE("alpha entries stay within [0, 1]") {
    Rng rng(45);
    StackAttnState<double> st(40);
    for (auto& a : random_action_sequences(rng, 40)) {
        auto alpha = soft_step(st, Tensor<double>::from_data({3}, a));
        for (double v : alpha.value()) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0 + 1e-12);
        }
    }
}

TEST_CASE("precompute_alphas equals soft_step under one-hot actions") {
    Rng rng(46);
    for (int trial = 0; trial < 200; ++trial) {
        std::size_t n = 1 + rng.uniform_int(30);
        auto ops = random_ops(rng, n);
        auto pre = precompute_alphas(ops, n);

        StackAttnState<double> st(n);
        for (std::size_t i = 1; i <= n; ++i) {
            std::vector<double> a(3, 0.0);
            a[ops[i - 1] == StackOp::Push ? kActPush
                                          : ops[i - 1] == StackOp::Pop ? kActPop : kActNoOp] = 1.0;
            soft_step(st, Tensor<double>::from_data({3}, a));
        }
        REQUIRE(pre.size() == st.alphas.size());
        for (std::size_t i = 0; i < pre.size(); ++i)
            CHECK(pre[i] == st.alphas[i].value());  // bit-for-bit
    }
    CHECK(precompute_alphas({}, 0).size() == 1);
}

TEST_CASE("action_distribution examples") {
    auto w = Tensor<double>::zeros({3, 4});
    auto b = Tensor<double>::zeros({3});
    auto h = Tensor<double>::from_data({4}, {1, 2, 3, 4});
    auto a = action_distribution(h, w, b);
    for (double v : a.value()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-12));

    auto b_sat = Tensor<double>::from_data({3}, {20.0, -20.0, -20.0});
    auto a_sat = action_distribution(h, w, b_sat);
    CHECK(a_sat.value()[0] == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("action_distribution gradient") {
    Rng rng(47);
    std::vector<double> hv(6), wv(18), bv(3);
    for (auto& x : hv) x = rng.gaussian();
    for (auto& x : wv) x = rng.gaussian();
    for (auto& x : bv) x = rng.gaussian();
    auto h = Tensor<double>::from_data({6}, hv, true);
    auto w = Tensor<double>::from_data({3, 6}, wv, true);
    auto b = Tensor<double>::from_data({3}, bv, true);
    std::vector<Tensor<double>> params{h, w, b};
    auto res = gradcheck::check(params, [&] {
        auto a = action_distribution(h, w, b);
        return add(element(a, 0), scale(element(a, 2), 3.0));
    });
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("stack_readout selects columns under hard alphas") {
    auto h = Tensor<double>::from_data({2, 4}, {10, 11, 12, 13,
                                                20, 21, 22, 23});
    std::vector<Tensor<double>> alphas{
        Tensor<double>::from_data({4}, {1, 0, 0, 0}),
        Tensor<double>::from_data({4}, {0, 0, 1, 0}),
        Tensor<double>::from_data({4}, {0.5, 0, 0.5, 0}),
        Tensor<double>::from_data({4}, {0, 0, 0, 1}),
    };
    auto out = stack_readout(h, alphas);
    CHECK(out.value()[0 * 4 + 0] == 10);
    CHECK(out.value()[0 * 4 + 1] == 12);
    CHECK(out.value()[0 * 4 + 2] == doctest::Approx(0.5 * 10 + 0.5 * 12));
    CHECK(out.value()[0 * 4 + 3] == 13);
    CHECK(out.value()[1 * 4 + 2] == doctest::Approx(0.5 * 20 + 0.5 * 22));
}

TEST_CASE("stack_readout golden trace selects the worked sequence") {
    // columns: BOS, a, b, c, then three more positions carrying the ops
    std::size_t n = 6;
    auto alphas_raw = precompute_alphas(golden_trace_ops(), n);
    std::vector<Tensor<double>> alphas;
    for (auto& a : alphas_raw) alphas.push_back(Tensor<double>::from_data({n + 1}, a));
    std::vector<double> hv(1 * (n + 1));
    for (std::size_t j = 0; j <= n; ++j) hv[j] = double(100 + j);  // distinct column tags
    auto h = Tensor<double>::from_data({1, n + 1}, hv);
    auto out = stack_readout(h, alphas);
    // readout tags follow the PEEK trace 0,1,2,3,2,2,1
    std::vector<double> expect{100, 101, 102, 103, 102, 102, 101};
    for (std::size_t j = 0; j <= n; ++j) CHECK(out.value()[j] == expect[j]);
}

TEST_CASE("stack_sublayer forced NO-OP adds the BOS column") {
    std::size_t d = 3, n = 4;
    Rng rng(48);
    std::vector<double> hv(d * (n + 1));
    for (auto& x : hv) x = rng.gaussian();
    auto h = Tensor<double>::from_data({d, n + 1}, hv);
    auto w_a = Tensor<double>::zeros({3, d});
    auto b_a = Tensor<double>::from_data({3}, {-40.0, -40.0, 40.0});  // saturate NO-OP
    auto res = stack_sublayer(h, w_a, b_a);
    for (std::size_t j = 0; j <= n; ++j)
        for (std::size_t i = 0; i < d; ++i)
            CHECK(res.output.value()[i * (n + 1) + j] ==
                  doctest::Approx(hv[i * (n + 1) + j] + hv[i * (n + 1) + 0]).epsilon(1e-9));
}

TEST_CASE("stack_sublayer zero input stays zero") {
    auto h = Tensor<double>::zeros({3, 5});
    auto w_a = Tensor<double>::zeros({3, 3});
    auto b_a = Tensor<double>::zeros({3});
    auto res = stack_sublayer(h, w_a, b_a);
    for (double v : res.output.value()) CHECK(v == 0.0);
    // alphas are still well-formed distributions
    for (const auto& a : res.state.alphas) {
        double s = 0;
        for (double v : a.value()) s += v;
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("stack_sublayer gradient vs finite differences") {
    std::size_t d = 4, n = 5;
    Rng rng(49);
    std::vector<double> hv(d * (n + 1)), wv(3 * d), bv(3);
    for (auto& x : hv) x = rng.gaussian();
    for (auto& x : wv) x = rng.gaussian() * 0.5;
    for (auto& x : bv) x = rng.gaussian() * 0.5;
    auto h = Tensor<double>::from_data({d, n + 1}, hv, true);
    auto w_a = Tensor<double>::from_data({3, d}, wv, true);
    auto b_a = Tensor<double>::from_data({3}, bv, true);
    std::vector<double> tgt(d * (n + 1));
    for (auto& x : tgt) x = rng.gaussian();
    auto target = Tensor<double>::from_data({d, n + 1}, tgt);
    std::vector<Tensor<double>> params{h, w_a, b_a};
    auto res = gradcheck::check(params, [&] {
        auto out = stack_sublayer(h, w_a, b_a).output;
        auto diff = sub(out, target);
        return sum(mul(diff, diff));
    });
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("quadratic time scaling of the alpha recursion") {
    // O(N^2) total: doubling N should roughly quadruple the work, far from
    // the x8 a cubic algorithm would show.  Measure generously to stay
    // robust on loaded machines.
    auto run = [](std::size_t n) {
        Rng rng(50);
        auto acts = random_action_sequences(rng, n);
        auto t0 = std::chrono::steady_clock::now();
        StackAttnState<double> st(n);
        for (auto& a : acts) soft_step(st, Tensor<double>::from_data({3}, a));
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };
    run(64);  // warm up
    double t64 = run(64), t128 = run(128), t256 = run(256);
    double r1 = t128 / t64, r2 = t256 / t128;
    // quadratic trend: ratios near 4, well below 8
    CHECK(r1 < 7.0);
    CHECK(r2 < 7.0);
    CHECK(t256 > t64);
}
