#pragma once

// Adam training loop with online batch generation, a fixed held-out
// longer-length test set, and deterministic gradient reduction: per-instance
// gradients are always summed in batch-index order, so the result is
// bit-identical for any worker count.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "stackformer/model.hpp"
#include "stackformer/tasks.hpp"

namespace stackformer {

struct TrainConfig {
    double lr = 1e-4;
    std::size_t batch = 32;
    std::size_t steps = 20000;
    std::uint64_t seed = 0;
    std::size_t eval_every = 500;
    std::size_t train_len_lo = 1, train_len_hi = 8;  // train: lo <= |x| <= hi
    std::size_t test_len_lo = 9, test_len_hi = 16;   // test: strictly longer
    std::size_t test_set_size = 500;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double grad_clip = 0.0;  // global-norm clip; 0 disables (the default)
    bool sample_decode = false;  // ALM only: sample instead of greedy argmax
    bool loss_on_prefix = false;
    std::size_t threads = 0;  // 0: use STACKFORMER_THREADS, else 1
};

inline std::size_t resolve_thread_count(std::size_t requested) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("STACKFORMER_THREADS")) {
        long v = std::strtol(env, nullptr, 10);
        if (v > 0) return std::size_t(v);
    }
    return 1;
}

// ------------------------------------------------------------------ optimizer

template <typename T>
class Adam {
  public:
    Adam(std::vector<Tensor<T>> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
        for (const auto& p : params_) {
            m_.emplace_back(p.numel(), T(0));
            v_.emplace_back(p.numel(), T(0));
        }
    }

    std::size_t step_count() const { return t_; }

    // Applies one update from the gradients currently on the parameters.
    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(b1_, double(t_));
        const double bc2 = 1.0 - std::pow(b2_, double(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            const auto& g = p.grad();
            for (std::size_t j = 0; j < p.numel(); ++j) {
                double gj = double(g[j]);
                if (!std::isfinite(gj))
                    throw std::runtime_error("adam_step: non-finite gradient at parameter " +
                                             std::to_string(i) + "[" + std::to_string(j) + "]");
                m_[i][j] = T(b1_ * double(m_[i][j]) + (1.0 - b1_) * gj);
                v_[i][j] = T(b2_ * double(v_[i][j]) + (1.0 - b2_) * gj * gj);
                double mhat = double(m_[i][j]) / bc1;
                double vhat = double(v_[i][j]) / bc2;
                p.raw_value()[j] = T(double(p.raw_value()[j]) - lr_ * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

  private:
    std::vector<Tensor<T>> params_;
    std::vector<std::vector<T>> m_, v_;
    double lr_, b1_, b2_, eps_;
    std::size_t t_ = 0;
};

// ------------------------------------------------------------------ records

struct EvalPoint {
    std::size_t step = 0;
    double loss = 0.0;
    double accuracy = 0.0;
    double elapsed_s = 0.0;  // wall clock; excluded from determinism compares
};

struct RunRecord {
    std::vector<EvalPoint> points;
    bool diverged = false;

    double final_accuracy() const {
        if (points.empty()) throw std::runtime_error("RunRecord: no eval points");
        return points.back().accuracy;
    }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("cannot write " + path);
        out << std::setprecision(17);
        for (const auto& p : points)
            out << p.step << '\t' << p.loss << '\t' << p.accuracy << '\t' << p.elapsed_s << '\n';
        if (diverged) out << "diverged\n";
    }

    static RunRecord load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open " + path);
        RunRecord rec;
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            if (line == "diverged") {
                rec.diverged = true;
                continue;
            }
            std::istringstream is(line);
            EvalPoint p;
            if (!(is >> p.step >> p.loss >> p.accuracy >> p.elapsed_s))
                throw std::runtime_error(path + ": malformed record line: " + line);
            rec.points.push_back(p);
        }
        return rec;
    }

    // Equality over the deterministic fields; wall clock is excluded.
    static bool same_trajectory(const RunRecord& a, const RunRecord& b) {
        if (a.diverged != b.diverged || a.points.size() != b.points.size()) return false;
        for (std::size_t i = 0; i < a.points.size(); ++i)
            if (a.points[i].step != b.points[i].step || a.points[i].loss != b.points[i].loss ||
                a.points[i].accuracy != b.points[i].accuracy)
                return false;
        return true;
    }
};

inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
    if (xs.empty()) throw std::invalid_argument("mean_std: empty sample");
    double mean = 0;
    for (double x : xs) mean += x;
    mean /= double(xs.size());
    double var = 0;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= double(xs.size());
    return {mean, std::sqrt(var)};
}

// ----------------------------------------------------------------- evaluation

// Head rows the decoder may emit: only symbols in the task's output alphabet.
// Chance level is then exactly 1/|Sigma_O|, matching the tasks' reported
// chance baselines.
inline std::vector<std::size_t> decodable_rows(const Vocabulary& v, ModelMode mode, TaskKind task) {
    auto out_syms = output_alphabet(task);
    auto rows = v.output_ids(mode);
    std::vector<std::size_t> allowed;
    for (std::size_t r = 0; r < rows.size(); ++r)
        if (std::find(out_syms.begin(), out_syms.end(), v.symbol(rows[r])) != out_syms.end())
            allowed.push_back(r);
    if (allowed.empty()) throw std::invalid_argument("no decodable output rows for task");
    return allowed;
}

template <typename T>
Symbols predict(const Model<T>& model, const TaskInstance& inst, bool sample = false,
                Rng* rng = nullptr) {
    const Vocabulary& v = model.vocab();
    const ModelMode mode = model.config().mode;
    auto rows = v.output_ids(mode);
    auto allowed = decodable_rows(v, mode, inst.task);
    Symbols pred;
    if (mode == ModelMode::Mlm) {
        Episode ep = make_mlm_input(inst, v);
        Tensor<T> logits = model.mlm_logits(ep.input_ids);  // K x N
        const std::size_t n = logits.dim(1);
        for (std::size_t pos = ep.answer_begin; pos < ep.input_ids.size(); ++pos) {
            std::size_t best = allowed[0];
            for (std::size_t r : allowed)
                if (logits.value()[r * n + pos] > logits.value()[best * n + pos]) best = r;
            pred.push_back(v.symbol(rows[best]));
        }
    } else {
        std::vector<std::size_t> seq;
        seq.push_back(v.bos());
        for (const auto& s : inst.x) seq.push_back(v.id(s));
        for (std::size_t step = 0; step < inst.y.size(); ++step) {
            Tensor<T> logits = model.alm_logits(seq);  // K
            std::size_t chosen;
            if (sample) {
                if (!rng) throw std::invalid_argument("sampled decoding needs an Rng");
                // softmax over the allowed rows only
                double maxv = -1e300;
                for (std::size_t r : allowed) maxv = std::max(maxv, double(logits.value()[r]));
                std::vector<double> probs;
                double z = 0;
                for (std::size_t r : allowed) {
                    probs.push_back(std::exp(double(logits.value()[r]) - maxv));
                    z += probs.back();
                }
                double u = rng->uniform() * z, acc = 0;
                chosen = allowed.back();
                for (std::size_t i = 0; i < allowed.size(); ++i) {
                    acc += probs[i];
                    if (u <= acc) { chosen = allowed[i]; break; }
                }
            } else {
                chosen = allowed[0];
                for (std::size_t r : allowed)
                    if (logits.value()[r] > logits.value()[chosen]) chosen = r;
            }
            pred.push_back(v.symbol(rows[chosen]));
            seq.push_back(rows[chosen]);
        }
    }
    return pred;
}

template <typename T>
double evaluate(const Model<T>& model, const std::vector<TaskInstance>& data,
                bool sample = false, Rng* rng = nullptr) {
    if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
    double total = 0;
    for (const auto& inst : data) total += score(predict(model, inst, sample, rng), inst.y);
    return total / double(data.size());
}

// ------------------------------------------------------------------ training

namespace detail {

template <typename T>
Tensor<T> episode_loss(const Model<T>& model, const Episode& ep) {
    Tensor<T> logits = model.head_logits(model.forward(ep.input_ids));
    return cross_entropy_cols(logits, ep.targets);
}

}  // namespace detail

// Trains in place.  Evaluation happens every eval_every steps and at the
// final step; point 0 records the untrained loss/accuracy.
template <typename T>
RunRecord train_loop(Model<T>& model, TaskKind task, const TrainConfig& cfg) {
    if (cfg.batch == 0 || cfg.steps == 0)
        throw std::invalid_argument("train_loop: batch and steps must be positive");
    if (cfg.test_len_lo <= cfg.train_len_hi)
        throw std::invalid_argument("train_loop: test lengths must exceed train lengths");
    const ModelMode mode = model.config().mode;
    const Vocabulary& vocab = model.vocab();

    Rng data_rng(cfg.seed * 0x9E3779B97F4A7C15ull + 0xD1B54A32D192ED03ull);
    Rng test_rng(cfg.seed * 0x9E3779B97F4A7C15ull + 0x8CB92BA72F3D8DD7ull);

    std::vector<TaskInstance> test_set;
    for (std::size_t i = 0; i < cfg.test_set_size; ++i)
        test_set.push_back(generate_in_range(task, cfg.test_len_lo, cfg.test_len_hi, test_rng));

    auto make_episode = [&](const TaskInstance& inst) {
        return mode == ModelMode::Mlm ? make_mlm_input(inst, vocab)
                                      : make_alm_episode(inst, vocab, cfg.loss_on_prefix);
    };

    auto params = model.parameters();
    Adam<T> opt(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    const std::size_t nthreads = std::min(resolve_thread_count(cfg.threads), cfg.batch);

    // Replica models for extra workers; parameters are re-synced every step.
    std::vector<Model<T>> replicas;
    Rng dummy(0);
    for (std::size_t w = 1; w < nthreads; ++w) replicas.emplace_back(model.config(), dummy);

    RunRecord rec;
    auto t0 = std::chrono::steady_clock::now();
    auto elapsed = [&] {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };

    // step-0 point: loss on one untrained probe batch plus test accuracy
    {
        Rng probe_rng(cfg.seed * 0x9E3779B97F4A7C15ull + 0x2545F4914F6CDD1Dull);
        double loss = 0;
        for (std::size_t i = 0; i < cfg.batch; ++i) {
            auto inst = generate_in_range(task, cfg.train_len_lo, cfg.train_len_hi, probe_rng);
            loss += double(detail::episode_loss(model, make_episode(inst)).item());
        }
        rec.points.push_back({0, loss / double(cfg.batch), evaluate(model, test_set), elapsed()});
    }

    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        std::vector<TaskInstance> batch;
        for (std::size_t i = 0; i < cfg.batch; ++i)
            batch.push_back(generate_in_range(task, cfg.train_len_lo, cfg.train_len_hi, data_rng));

        // Per-instance gradient buffers summed in batch-index order; any
        // worker count therefore produces bit-identical sums.
        std::vector<double> losses(cfg.batch, 0.0);
        std::vector<std::vector<std::vector<T>>> inst_grads(cfg.batch);
        for (auto& r : replicas) r.copy_parameters_from(model);
        auto worker = [&](std::size_t w) {
            Model<T>& m = w == 0 ? model : replicas[w - 1];
            auto wparams = m.parameters();
            for (std::size_t i = w; i < cfg.batch; i += nthreads) {
                m.zero_grad();
                Tensor<T> loss = detail::episode_loss(m, make_episode(batch[i]));
                losses[i] = double(loss.item());
                backward(loss);
                auto& slot = inst_grads[i];
                for (auto& p : wparams) slot.push_back(p.grad());
            }
        };
        std::vector<std::thread> pool;
        for (std::size_t w = 1; w < nthreads; ++w) pool.emplace_back(worker, w);
        worker(0);
        for (auto& th : pool) th.join();
        model.zero_grad();
        for (std::size_t i = 0; i < cfg.batch; ++i)
            for (std::size_t p = 0; p < params.size(); ++p) {
                auto& g = params[p].raw_grad();
                const auto& src = inst_grads[i][p];
                for (std::size_t j = 0; j < g.size(); ++j) g[j] += src[j];
            }

        double mean_loss = 0;
        for (double l : losses) mean_loss += l;
        mean_loss /= double(cfg.batch);
        if (!std::isfinite(mean_loss)) {
            rec.diverged = true;
            rec.points.push_back({step, mean_loss, 0.0, elapsed()});
            return rec;
        }

        // mean over the batch, then optional global-norm clipping
        double inv = 1.0 / double(cfg.batch);
        for (auto& p : params)
            for (auto& g : p.raw_grad()) g = T(double(g) * inv);
        if (cfg.grad_clip > 0) {
            double sq = 0;
            for (auto& p : params)
                for (auto& g : p.raw_grad()) sq += double(g) * double(g);
            double norm = std::sqrt(sq);
            if (norm > cfg.grad_clip) {
                double s = cfg.grad_clip / norm;
                for (auto& p : params)
                    for (auto& g : p.raw_grad()) g = T(double(g) * s);
            }
        }
        opt.step();

        if (step % cfg.eval_every == 0 || step == cfg.steps)
            rec.points.push_back({step, mean_loss, evaluate(model, test_set), elapsed()});
    }
    return rec;
}

}  // namespace stackformer
