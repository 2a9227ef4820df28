#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "stackformer/model.hpp"

using namespace stackformer;

namespace {

ModelConfig small_config(bool stack, ModelMode mode = ModelMode::Mlm,
                         PosEncoding pe = PosEncoding::None) {
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.model_dim = 8;
    cfg.heads = 2;
    cfg.ffn_dim = 16;
    cfg.pe = pe;
    cfg.stack_enabled = stack;
    cfg.mode = mode;
    cfg.vocab = Vocabulary({"a", "b"});
    return cfg;
}

// Copies values for every parameter name present in both models.
template <typename T>
void copy_shared_params(Model<T>& dst, const Model<T>& src) {
    for (auto& [name, p] : const_cast<Model<T>&>(dst).named_parameters()) {
        for (const auto& [sname, sp] : src.named_parameters())
            if (sname == name) {
                const_cast<Tensor<T>&>(p).raw_value() = sp.value();
                break;
            }
    }
}

}  // namespace

TEST_CASE("vocabulary ids and output head rows") {
    Vocabulary v({"a", "b"});
    CHECK(v.bos() == 0);
    CHECK(v.symbol(0) == "[BOS]");
    CHECK(v.id("a") == 4);
    CHECK(v.id("b") == 5);
    CHECK(v.size() == 6);
    CHECK_THROWS_AS(v.id("c"), std::invalid_argument);

    auto mlm_rows = v.output_ids(ModelMode::Mlm);
    CHECK(mlm_rows == std::vector<std::size_t>{4, 5, v.mask()});
    auto alm_rows = v.output_ids(ModelMode::Alm);
    CHECK(alm_rows == std::vector<std::size_t>{4, 5, v.eos()});
}

TEST_CASE("vocabulary admits [PAD] as a task symbol") {
    Vocabulary v({"a", "b", "[PAD]"});
    CHECK(v.size() == 6);  // no duplicate entry
    auto rows = v.output_ids(ModelMode::Mlm);
    CHECK(rows == std::vector<std::size_t>{4, 5, v.pad(), v.mask()});
}

TEST_CASE("config validation") {
    ModelConfig cfg = small_config(true);
    cfg.heads = 3;  // 8 % 3 != 0
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = small_config(true);
    cfg.vocab = Vocabulary(std::vector<std::string>{});
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("forward shape and BOS requirement") {
    Rng rng(1);
    Model<double> m(small_config(true), rng);
    std::vector<std::size_t> ids{0, 4, 5, 4};
    auto h = m.forward(ids);
    CHECK(h.shape() == Shape{8, 4});

    std::vector<std::size_t> no_bos{4, 5};
    CHECK_THROWS_AS(m.forward(no_bos), std::invalid_argument);
    std::vector<std::size_t> empty;
    CHECK_THROWS_AS(m.forward(empty), std::invalid_argument);
}

TEST_CASE("forced NO-OP stack model adds the BOS column") {
    Rng rng(2);
    Model<double> with_stack(small_config(true), rng);
    Rng rng2(2);
    Model<double> without(small_config(false), rng2);
    copy_shared_params(without, with_stack);

    // saturate every action head toward NO-OP (rows: push, pop, no-op)
    for (auto& [name, p] : with_stack.named_parameters()) {
        if (name.find(".w_a") != std::string::npos)
            const_cast<Tensor<double>&>(p).raw_value().assign(p.numel(), 0.0);
        if (name.find(".b_a") != std::string::npos)
            const_cast<Tensor<double>&>(p).raw_value() = {-200.0, -200.0, 200.0};
    }

    std::vector<std::size_t> ids{0, 4, 5, 5, 4};
    auto out = with_stack.forward(ids);

    // reproduce by hand: run the plain layers but add the stack residual
    // h <- h_f + h_f[:, 0] after each layer.  With one shared code path that
    // is exactly what a NO-OP-saturated stack must produce.
    // Layer-by-layer equivalence is already covered at the sublayer level;
    // here verify the one-layer closed form via a 1-layer model.
    ModelConfig one = small_config(true);
    one.layers = 1;
    Rng rng3(5);
    Model<double> s1(one, rng3);
    ModelConfig one_off = one;
    one_off.stack_enabled = false;
    Rng rng4(5);
    Model<double> p1(one_off, rng4);
    copy_shared_params(p1, s1);
    for (auto& [name, p] : s1.named_parameters()) {
        if (name.find(".w_a") != std::string::npos)
            const_cast<Tensor<double>&>(p).raw_value().assign(p.numel(), 0.0);
        if (name.find(".b_a") != std::string::npos)
            const_cast<Tensor<double>&>(p).raw_value() = {-200.0, -200.0, 200.0};
    }
    auto hs = s1.forward(ids);
    auto hp = p1.forward(ids);
    const std::size_t d = 8, n = ids.size();
    for (std::size_t r = 0; r < d; ++r)
        for (std::size_t c = 0; c < n; ++c) {
            double expect = hp.value()[r * n + c] + hp.value()[r * n + 0];
            CHECK(hs.value()[r * n + c] == doctest::Approx(expect).epsilon(1e-10));
        }
    CHECK(out.shape() == Shape{8, 5});
}

TEST_CASE("stack-disabled model ignores stack parameters entirely") {
    Rng rng(3);
    Model<double> m(small_config(false), rng);
    for (const auto& [name, p] : m.named_parameters()) {
        CHECK(name.find(".w_a") == std::string::npos);
        CHECK(name.find(".b_a") == std::string::npos);
    }
}

TEST_CASE("mlm_logits contract") {
    Rng rng(4);
    Model<double> m(small_config(true, ModelMode::Mlm), rng);
    const auto& v = m.vocab();
    std::vector<std::size_t> ids{v.bos(), v.id("a"), v.mask()};
    auto logits = m.mlm_logits(ids);
    CHECK(logits.shape() == Shape{3, 3});  // {a, b, [MASK]} x positions

    std::vector<std::size_t> no_mask{v.bos(), v.id("a")};
    CHECK_THROWS_AS(m.mlm_logits(no_mask), std::invalid_argument);

    Rng rng2(4);
    Model<double> alm(small_config(true, ModelMode::Alm), rng2);
    CHECK_THROWS_AS(alm.mlm_logits(ids), std::invalid_argument);
}

TEST_CASE("alm_logits contract and causality") {
    Rng rng(6);
    Model<double> m(small_config(true, ModelMode::Alm), rng);
    const auto& v = m.vocab();

    std::vector<std::size_t> prefix{v.bos(), v.id("a"), v.id("b")};
    auto logits = m.alm_logits(prefix);
    CHECK(logits.shape() == Shape{3});  // {a, b, [EOS]}

    std::vector<std::size_t> empty;
    CHECK_THROWS_AS(m.alm_logits(empty), std::invalid_argument);

    Rng rng2(6);
    Model<double> mlm(small_config(true, ModelMode::Mlm), rng2);
    CHECK_THROWS_AS(mlm.alm_logits(prefix), std::invalid_argument);

    // extending the sequence must not change logits at earlier steps
    std::vector<std::size_t> longer{v.bos(), v.id("a"), v.id("b"), v.id("b"), v.id("a")};
    auto full = m.head_logits(m.forward(longer));  // 3 x 5
    for (std::size_t r = 0; r < 3; ++r) {
        double from_prefix = logits.value()[r];
        double from_full = full.value()[r * 5 + 2];
        CHECK(from_prefix == doctest::Approx(from_full).epsilon(1e-12));
    }
}

TEST_CASE("stack-free MLM model with pe=none is permutation equivariant") {
    Rng rng(7);
    Model<double> m(small_config(false, ModelMode::Mlm, PosEncoding::None), rng);
    const auto& v = m.vocab();
    std::vector<std::size_t> ids{v.bos(), v.id("a"), v.id("b"), v.id("b")};
    std::vector<std::size_t> swapped{v.bos(), v.id("b"), v.id("b"), v.id("a")};
    // permutation (1 2 3) -> (3 1 2) applied to the non-BOS columns
    std::vector<std::size_t> perm{0, 3, 1, 2};

    auto h1 = m.forward(ids);
    auto h2 = m.forward(swapped);
    const std::size_t d = 8, n = 4;
    for (std::size_t r = 0; r < d; ++r)
        for (std::size_t c = 0; c < n; ++c)
            CHECK(h2.value()[r * n + perm[c]] ==
                  doctest::Approx(h1.value()[r * n + c]).epsilon(1e-10));
}

TEST_CASE("sincos positional term shifts the embedding") {
    Rng rng(8);
    Model<double> plain(small_config(false, ModelMode::Mlm, PosEncoding::None), rng);
    Rng rng2(8);
    Model<double> sincos(small_config(false, ModelMode::Mlm, PosEncoding::SinCos), rng2);
    copy_shared_params(sincos, plain);

    // same token twice: with pe=none the two columns of the embedding match;
    // with sincos they differ by the positional table
    const auto& v = plain.vocab();
    std::vector<std::size_t> ids{v.bos(), v.id("a"), v.id("a")};
    auto h0 = plain.forward(ids);
    auto h1 = sincos.forward(ids);
    bool any_diff = false;
    for (std::size_t i = 0; i < h0.numel(); ++i)
        any_diff = any_diff || std::abs(h0.value()[i] - h1.value()[i]) > 1e-6;
    CHECK(any_diff);
}

TEST_CASE("checkpoint round-trips bit-exactly for float models") {
    Rng rng(9);
    ModelConfig cfg = small_config(true, ModelMode::Mlm, PosEncoding::Relative);
    cfg.vocab = Vocabulary({"a", "b", "[PUSH a]", "[PUSH b]", "[POP]", "[PAD]"});
    Model<float> m(cfg, rng);
    m.save("/tmp/sf_test_ckpt");
    auto loaded = Model<float>::load("/tmp/sf_test_ckpt");

    REQUIRE(loaded.named_parameters().size() == m.named_parameters().size());
    for (std::size_t i = 0; i < m.named_parameters().size(); ++i) {
        const auto& [name, p] = m.named_parameters()[i];
        const auto& [lname, lp] = loaded.named_parameters()[i];
        CHECK(name == lname);
        CHECK(p.value() == lp.value());  // bit-exact
    }
    CHECK(loaded.vocab().symbols() == cfg.vocab.symbols());
    CHECK(loaded.vocab().task_ids() == cfg.vocab.task_ids());
    CHECK(loaded.config().pe == PosEncoding::Relative);

    const auto& v = m.vocab();
    std::vector<std::size_t> ids{v.bos(), v.id("a"), v.mask(), v.mask()};
    auto a = m.mlm_logits(ids);
    auto b = loaded.mlm_logits(ids);
    CHECK(a.value() == b.value());

    std::remove("/tmp/sf_test_ckpt.manifest");
    std::remove("/tmp/sf_test_ckpt.bin");
    CHECK_THROWS_AS(Model<float>::load("/tmp/sf_test_ckpt"), std::runtime_error);
}

TEST_CASE("forward is deterministic across replays") {
    Rng rng(10);
    Model<double> m(small_config(true), rng);
    std::vector<std::size_t> ids{0, 4, 5, 4, 4, 5};
    auto a = m.forward(ids);
    auto b = m.forward(ids);
    CHECK(a.value() == b.value());
}

TEST_CASE("forward trace captures per-layer stack state") {
    Rng rng(11);
    Model<double> m(small_config(true), rng);
    std::vector<std::size_t> ids{0, 4, 5, 4};
    ForwardTrace<double> trace;
    m.forward(ids, &trace);
    REQUIRE(trace.layer_alphas.size() == 2);
    REQUIRE(trace.layer_actions.size() == 2);
    for (const auto& layer : trace.layer_alphas) {
        CHECK(layer.size() == ids.size());
        for (const auto& row : layer) {
            double total = 0;
            for (double x : row) total += x;
            CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
        }
    }
    for (const auto& layer : trace.layer_actions) CHECK(layer.size() == ids.size() - 1);
}
