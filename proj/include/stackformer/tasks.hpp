#pragma once

// The four deterministic context-free transduction tasks:
//   RS  reverse string            {a,b}* -> reversed
//   SM  stack manipulation        initial stack + ops -> final stack, padded
//   MA  modular arithmetic        expression over Z_5 -> value
//   SE  solve equation            linear equation in z over Z_5 -> z
//
// Generators are pure functions of (length, rng).  Oracles are independent
// evaluators (stack simulator, recursive-descent parser, brute-force z
// solver), not the generators' bookkeeping.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "stackformer/model.hpp"
#include "stackformer/rng.hpp"

namespace stackformer {

enum class TaskKind { RS, SM, MA, SE };

inline std::string to_string(TaskKind t) {
    switch (t) {
        case TaskKind::RS: return "rs";
        case TaskKind::SM: return "sm";
        case TaskKind::MA: return "ma";
        case TaskKind::SE: return "se";
    }
    return "?";
}

inline TaskKind parse_task(const std::string& s) {
    if (s == "rs" || s == "RS") return TaskKind::RS;
    if (s == "sm" || s == "SM") return TaskKind::SM;
    if (s == "ma" || s == "MA") return TaskKind::MA;
    if (s == "se" || s == "SE") return TaskKind::SE;
    throw std::invalid_argument("unknown task: " + s);
}

using Symbols = std::vector<std::string>;

struct TaskInstance {
    TaskKind task;
    Symbols x, y;
};

// Multi-character bracketed tokens keep their internal spaces; everything
// else splits on whitespace.
inline Symbols split_symbols(const std::string& s) {
    Symbols out;
    std::istringstream is(s);
    std::string piece;
    while (is >> piece) {
        if (!out.empty() && out.back().front() == '[' && out.back().back() != ']')
            out.back() += " " + piece;
        else
            out.push_back(piece);
    }
    return out;
}

inline std::string join_symbols(const Symbols& syms) {
    std::string out;
    for (std::size_t i = 0; i < syms.size(); ++i) {
        if (i) out += ' ';
        out += syms[i];
    }
    return out;
}

// Task alphabets.  The multiplication sign and congruence sign are single
// UTF-8 symbols.
inline const std::string kPushA = "[PUSH a]";
inline const std::string kPushB = "[PUSH b]";
inline const std::string kPopTok = "[POP]";
inline const std::string kCong = "≡";   // congruence sign
inline const std::string kTimes = "·";  // middle dot

inline Symbols input_alphabet(TaskKind t) {
    switch (t) {
        case TaskKind::RS: return {"a", "b"};
        case TaskKind::SM: return {"a", "b", kPushA, kPushB, kPopTok};
        case TaskKind::MA: return {"0", "1", "2", "3", "4", "+", "-", kTimes, "(", ")", kCong};
        case TaskKind::SE: return {"0", "1", "2", "3", "4", "+", "-", "(", ")", kCong, "z"};
    }
    throw std::invalid_argument("bad task");
}

inline Symbols output_alphabet(TaskKind t) {
    switch (t) {
        case TaskKind::RS: return {"a", "b"};
        case TaskKind::SM: return {"a", "b", kPad};
        case TaskKind::MA:
        case TaskKind::SE: return {"0", "1", "2", "3", "4"};
    }
    throw std::invalid_argument("bad task");
}

// Sigma = Sigma_I u Sigma_O, deduplicated, input order first.
inline Symbols task_alphabet(TaskKind t) {
    Symbols all = input_alphabet(t);
    for (const auto& s : output_alphabet(t))
        if (std::find(all.begin(), all.end(), s) == all.end()) all.push_back(s);
    return all;
}

inline Vocabulary task_vocabulary(TaskKind t) { return Vocabulary(task_alphabet(t)); }

// --------------------------------------------------------------------- oracles

inline Symbols oracle_rs(const Symbols& x) {
    Symbols y(x.rbegin(), x.rend());
    return y;
}

inline Symbols oracle_sm(const Symbols& x) {
    // leading a/b symbols form the initial stack bottom-to-top; the rest are ops
    std::vector<std::string> stack;
    std::size_t i = 0;
    while (i < x.size() && (x[i] == "a" || x[i] == "b")) stack.push_back(x[i++]);
    for (; i < x.size(); ++i) {
        if (x[i] == kPushA) stack.push_back("a");
        else if (x[i] == kPushB) stack.push_back("b");
        else if (x[i] == kPopTok) {
            if (!stack.empty()) stack.pop_back();
        } else {
            throw std::invalid_argument("oracle_sm: unexpected token '" + x[i] +
                                        "' at position " + std::to_string(i));
        }
    }
    Symbols y(stack.rbegin(), stack.rend());  // top to bottom
    while (y.size() < x.size() + 1) y.push_back(kPad);
    return y;
}

namespace detail {

// Recursive-descent evaluator mod 5.  Grammar:
//   expr   := term (('+'|'-') term)*
//   term   := factor (TIMES factor)*
//   factor := digit | 'z' | '(' expr ')' | '-' factor
// 'z' is only legal when a substitution value is supplied.
class ModExprParser {
  public:
    ModExprParser(const Symbols& toks, int z_value, bool allow_z)
        : toks_(toks), z_(z_value), allow_z_(allow_z) {}

    int parse_expr() {
        int v = parse_term();
        while (pos_ < toks_.size() && (toks_[pos_] == "+" || toks_[pos_] == "-")) {
            bool plus = toks_[pos_++] == "+";
            int rhs = parse_term();
            v = plus ? v + rhs : v - rhs + 10;
        }
        return v % 5;
    }

    int parse_term() {
        int v = parse_factor();
        while (pos_ < toks_.size() && toks_[pos_] == kTimes) {
            ++pos_;
            v = (v * parse_factor()) % 5;
        }
        return v;
    }

    int parse_factor() {
        if (pos_ >= toks_.size()) fail("unexpected end of expression");
        const std::string& t = toks_[pos_];
        if (t.size() == 1 && t[0] >= '0' && t[0] <= '4') {
            ++pos_;
            return t[0] - '0';
        }
        if (t == "z") {
            if (!allow_z_) fail("variable not allowed here");
            ++pos_;
            return z_;
        }
        if (t == "(") {
            ++pos_;
            int v = parse_expr();
            expect(")");
            return v;
        }
        if (t == "-") {
            ++pos_;
            return (5 - parse_factor()) % 5;
        }
        fail("unexpected token '" + t + "'");
        return 0;
    }

    void expect(const std::string& t) {
        if (pos_ >= toks_.size() || toks_[pos_] != t)
            fail("expected '" + t + "'");
        ++pos_;
    }

    [[noreturn]] void fail(const std::string& msg) {
        throw std::invalid_argument("parse error at position " + std::to_string(pos_) + ": " +
                                    msg);
    }

    std::size_t pos() const { return pos_; }

  private:
    const Symbols& toks_;
    std::size_t pos_ = 0;
    int z_;
    bool allow_z_;
};

}  // namespace detail

inline Symbols oracle_ma(const Symbols& x) {
    detail::ModExprParser p(x, 0, false);
    int v = p.parse_expr();
    p.expect(kCong);
    if (p.pos() != x.size()) p.fail("trailing tokens");
    return {std::string(1, char('0' + v))};
}

inline Symbols oracle_se(const Symbols& x) {
    // split at the congruence sign: lhs CONG c
    auto it = std::find(x.begin(), x.end(), kCong);
    if (it == x.end() || it + 1 == x.end())
        throw std::invalid_argument("parse error: equation lacks '" + kCong + " c' suffix");
    Symbols lhs(x.begin(), it);
    const std::string& cs = *(it + 1);
    if (it + 2 != x.end() || cs.size() != 1 || cs[0] < '0' || cs[0] > '4')
        throw std::invalid_argument("parse error: bad right-hand side");
    int c = cs[0] - '0';
    int solution = -1;
    for (int z = 0; z < 5; ++z) {
        detail::ModExprParser p(lhs, z, true);
        int v = p.parse_expr();
        if (p.pos() != lhs.size()) p.fail("trailing tokens");
        if (v == c) {
            if (solution >= 0)
                throw std::invalid_argument("equation has multiple solutions");
            solution = z;
        }
    }
    if (solution < 0) throw std::invalid_argument("equation has no solution");
    return {std::string(1, char('0' + solution))};
}

inline Symbols oracle(TaskKind t, const Symbols& x) {
    switch (t) {
        case TaskKind::RS: return oracle_rs(x);
        case TaskKind::SM: return oracle_sm(x);
        case TaskKind::MA: return oracle_ma(x);
        case TaskKind::SE: return oracle_se(x);
    }
    throw std::invalid_argument("bad task");
}

// ------------------------------------------------------------------ generators

inline TaskInstance gen_rs(std::size_t len, Rng& rng) {
    if (len < 1) throw std::invalid_argument("gen_rs: length must be >= 1");
    Symbols x(len);
    for (auto& s : x) s = rng.coin(0.5) ? "a" : "b";
    return {TaskKind::RS, x, oracle_rs(x)};
}

inline TaskInstance gen_sm(std::size_t len, Rng& rng) {
    if (len < 2) throw std::invalid_argument("gen_sm: length must be >= 2");
    // at least one initial symbol and one operation; boundary uniform
    std::size_t initial = 1 + rng.uniform_int(len - 1);
    Symbols x;
    for (std::size_t i = 0; i < initial; ++i) x.push_back(rng.coin(0.5) ? "a" : "b");
    for (std::size_t i = initial; i < len; ++i) {
        switch (rng.uniform_int(3)) {
            case 0: x.push_back(kPushA); break;
            case 1: x.push_back(kPushB); break;
            default: x.push_back(kPopTok); break;
        }
    }
    return {TaskKind::SM, x, oracle_sm(x)};
}

namespace detail {

// Expressions of an exact token length.  Achievable lengths are 1 and every
// n >= 3.  When with_z is set exactly one leaf is the variable.
inline bool expr_len_ok(std::size_t n) { return n == 1 || n >= 3; }

inline Symbols gen_expr(std::size_t len, Rng& rng, bool times_allowed, bool with_z) {
    if (!expr_len_ok(len))
        throw std::invalid_argument("gen_expr: unachievable length " + std::to_string(len));
    if (len == 1) {
        if (with_z) return {"z"};
        return {std::string(1, char('0' + rng.uniform_int(5)))};
    }
    // candidate forms at this length
    struct Option { int kind; std::size_t a, b; };  // 0 paren, 1 unary, 2 binary
    std::vector<Option> opts;
    if (expr_len_ok(len - 2)) opts.push_back({0, len - 2, 0});
    if (len >= 4 && expr_len_ok(len - 3)) opts.push_back({1, len - 3, 0});
    for (std::size_t a = 1; a + 1 < len; ++a) {
        std::size_t b = len - 1 - a;
        if (expr_len_ok(a) && expr_len_ok(b)) opts.push_back({2, a, b});
    }
    const Option& o = opts[rng.uniform_int(opts.size())];
    if (o.kind == 0) {
        Symbols inner = gen_expr(o.a, rng, times_allowed, with_z);
        Symbols out{"("};
        out.insert(out.end(), inner.begin(), inner.end());
        out.push_back(")");
        return out;
    }
    if (o.kind == 1) {
        Symbols inner = gen_expr(o.a, rng, times_allowed, with_z);
        Symbols out{"(", "-"};
        out.insert(out.end(), inner.begin(), inner.end());
        out.push_back(")");
        return out;
    }
    bool z_left = with_z && rng.coin(double(o.a) / double(o.a + o.b));
    Symbols lhs = gen_expr(o.a, rng, times_allowed, with_z && z_left);
    Symbols rhs = gen_expr(o.b, rng, times_allowed, with_z && !z_left);
    std::string op;
    if (times_allowed) {
        switch (rng.uniform_int(3)) {
            case 0: op = "+"; break;
            case 1: op = "-"; break;
            default: op = kTimes; break;
        }
    } else {
        op = rng.coin(0.5) ? "+" : "-";
    }
    Symbols out = lhs;
    out.push_back(op);
    out.insert(out.end(), rhs.begin(), rhs.end());
    return out;
}

}  // namespace detail

inline TaskInstance gen_ma(std::size_t len_budget, Rng& rng) {
    if (len_budget < 2)
        throw std::invalid_argument("gen_ma: budget too small to form any expression");
    // |x| = |expr| + 1 for the congruence sign; pick an achievable expr length
    std::vector<std::size_t> lens;
    for (std::size_t n = 1; n + 1 <= len_budget; ++n)
        if (detail::expr_len_ok(n)) lens.push_back(n);
    std::size_t n = lens[rng.uniform_int(lens.size())];
    Symbols x = detail::gen_expr(n, rng, /*times_allowed=*/true, /*with_z=*/false);
    x.push_back(kCong);
    return {TaskKind::MA, x, oracle_ma(x)};
}

inline TaskInstance gen_se(std::size_t len_budget, Rng& rng) {
    if (len_budget < 3)
        throw std::invalid_argument("gen_se: budget too small to form any equation");
    // |x| = |lhs| + 2 for "CONG c"
    std::vector<std::size_t> lens;
    for (std::size_t n = 1; n + 2 <= len_budget; ++n)
        if (detail::expr_len_ok(n)) lens.push_back(n);
    std::size_t n = lens[rng.uniform_int(lens.size())];
    Symbols lhs = detail::gen_expr(n, rng, /*times_allowed=*/false, /*with_z=*/true);
    // choose z*, derive c, let the oracle find the unique solution
    int z_star = int(rng.uniform_int(5));
    detail::ModExprParser p(lhs, z_star, true);
    int c = p.parse_expr();
    Symbols x = lhs;
    x.push_back(kCong);
    x.push_back(std::string(1, char('0' + c)));
    return {TaskKind::SE, x, oracle_se(x)};
}

inline TaskInstance generate(TaskKind t, std::size_t len, Rng& rng) {
    switch (t) {
        case TaskKind::RS: return gen_rs(len, rng);
        case TaskKind::SM: return gen_sm(len, rng);
        case TaskKind::MA: return gen_ma(len, rng);
        case TaskKind::SE: return gen_se(len, rng);
    }
    throw std::invalid_argument("bad task");
}

inline std::size_t min_length(TaskKind t) {
    switch (t) {
        case TaskKind::RS: return 1;
        case TaskKind::SM: return 2;
        case TaskKind::MA: return 2;
        case TaskKind::SE: return 3;
    }
    return 1;
}

// Rejection-samples until |x| lands in [lo, hi]; MA/SE budgets quantize
// lengths, so a target budget is drawn per attempt.
inline TaskInstance generate_in_range(TaskKind t, std::size_t lo, std::size_t hi, Rng& rng) {
    lo = std::max(lo, min_length(t));
    if (lo > hi) throw std::invalid_argument("generate_in_range: empty length range");
    for (int attempt = 0; attempt < 1000; ++attempt) {
        std::size_t target = lo + rng.uniform_int(hi - lo + 1);
        if (target < min_length(t)) continue;
        TaskInstance inst = generate(t, target, rng);
        if (inst.x.size() >= lo && inst.x.size() <= hi) return inst;
    }
    throw std::runtime_error("generate_in_range: could not hit length range [" +
                             std::to_string(lo) + ", " + std::to_string(hi) + "]");
}

// --------------------------------------------------------------------- scoring

// Per-token accuracy, gold [PAD] positions excluded.  Instances whose gold
// is all [PAD] score 1 (nothing to predict).
inline double score(const Symbols& pred, const Symbols& gold) {
    if (pred.size() != gold.size())
        throw std::invalid_argument("score: length mismatch (" + std::to_string(pred.size()) +
                                    " vs " + std::to_string(gold.size()) + ")");
    std::size_t scored = 0, correct = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        if (gold[i] == kPad) continue;
        ++scored;
        if (pred[i] == gold[i]) ++correct;
    }
    return scored == 0 ? 1.0 : double(correct) / double(scored);
}

// ------------------------------------------------------------------- episodes

// A tokenized training/eval example: full input ids plus per-position output
// targets (-1 = no loss at this position).  Targets index output-head rows.
struct Episode {
    std::vector<std::size_t> input_ids;
    std::vector<int> targets;
    std::size_t answer_begin = 0;  // first position carrying an answer token
};

inline std::vector<int> output_row_of_vocab(const Vocabulary& v, ModelMode mode) {
    std::vector<int> row(v.size(), -1);
    auto out_ids = v.output_ids(mode);
    for (std::size_t r = 0; r < out_ids.size(); ++r) row[out_ids[r]] = int(r);
    return row;
}

// MLM: [BOS] x [MASK]^{|y|}; targets are y at the mask positions.
inline Episode make_mlm_input(const TaskInstance& inst, const Vocabulary& v) {
    Episode ep;
    auto row_of = output_row_of_vocab(v, ModelMode::Mlm);
    ep.input_ids.push_back(v.bos());
    for (const auto& s : inst.x) ep.input_ids.push_back(v.id(s));
    ep.answer_begin = ep.input_ids.size();
    ep.targets.assign(ep.input_ids.size(), -1);
    for (const auto& s : inst.y) {
        ep.input_ids.push_back(v.mask());
        int r = row_of[v.id(s)];
        if (r < 0) throw std::invalid_argument("target symbol outside output alphabet: " + s);
        ep.targets.push_back(r);
    }
    return ep;
}

// ALM: input [BOS] x y; position t predicts token t+1.  Loss covers the y
// tokens and the final [EOS] unless loss_on_prefix also scores x.
inline Episode make_alm_episode(const TaskInstance& inst, const Vocabulary& v,
                                bool loss_on_prefix = false) {
    Episode ep;
    auto row_of = output_row_of_vocab(v, ModelMode::Alm);
    ep.input_ids.push_back(v.bos());
    for (const auto& s : inst.x) ep.input_ids.push_back(v.id(s));
    ep.answer_begin = ep.input_ids.size();
    for (const auto& s : inst.y) ep.input_ids.push_back(v.id(s));
    ep.targets.assign(ep.input_ids.size(), -1);
    for (std::size_t t = 0; t + 1 < ep.input_ids.size(); ++t) {
        if (t + 1 < ep.answer_begin && !loss_on_prefix) continue;
        int r = row_of[ep.input_ids[t + 1]];
        if (r < 0) throw std::invalid_argument("target symbol outside output alphabet");
        ep.targets[t] = r;
    }
    ep.targets.back() = row_of[v.eos()];
    return ep;
}

// ------------------------------------------------------------------ dataset IO

// One instance per line: task TAB x TAB y, symbols space-separated, UTF-8.
inline void write_dataset(const std::string& path, const std::vector<TaskInstance>& data) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    for (const auto& inst : data)
        out << to_string(inst.task) << '\t' << join_symbols(inst.x) << '\t'
            << join_symbols(inst.y) << '\n';
}

inline std::vector<TaskInstance> read_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::vector<TaskInstance> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream is(line);
        std::string task_field, x_field, y_field;
        if (!std::getline(is, task_field, '\t') || !std::getline(is, x_field, '\t') ||
            !std::getline(is, y_field))
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": malformed line");
        out.push_back({parse_task(task_field), split_symbols(x_field), split_symbols(y_field)});
    }
    return out;
}

}  // namespace stackformer
