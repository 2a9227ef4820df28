#pragma once

// The full transformer: embedding + positional term, L layers of
// (attention, FFN, optional stack sublayer), and MLM/ALM output heads.
// Post-norm residuals around attention and FFN; the stack sublayer carries
// a residual but no layer norm.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "stackformer/attention.hpp"
#include "stackformer/positional.hpp"
#include "stackformer/rng.hpp"
#include "stackformer/stack.hpp"
#include "stackformer/tensor.hpp"

namespace stackformer {

inline constexpr const char* kBos = "[BOS]";
inline constexpr const char* kEos = "[EOS]";
inline constexpr const char* kMask = "[MASK]";
inline constexpr const char* kPad = "[PAD]";

enum class ModelMode { Mlm, Alm };

inline std::string to_string(ModelMode m) { return m == ModelMode::Mlm ? "mlm" : "alm"; }

inline ModelMode parse_mode(const std::string& s) {
    if (s == "mlm") return ModelMode::Mlm;
    if (s == "alm") return ModelMode::Alm;
    throw std::invalid_argument("unknown mode: " + s);
}

// Symbol <-> id bijection.  [BOS] is always id 0 so that the stack's
// index-0 empty-stack convention reads naturally; the other specials
// follow, then the task symbols in listed order.
class Vocabulary {
  public:
    Vocabulary() = default;

    // task_symbols is Sigma = Sigma_I u Sigma_O; it may legitimately repeat a
    // special (SM's output alphabet contains [PAD]).
    explicit Vocabulary(const std::vector<std::string>& task_symbols) {
        for (const char* s : {kBos, kEos, kMask, kPad}) intern(s);
        for (const auto& s : task_symbols) {
            std::size_t i = intern(s);
            if (std::find(sigma_ids_.begin(), sigma_ids_.end(), i) == sigma_ids_.end())
                sigma_ids_.push_back(i);
        }
    }

    static Vocabulary from_symbols(std::vector<std::string> all,
                                   std::vector<std::string> sigma = {}) {
        Vocabulary v;
        for (auto& s : all) v.intern(s);
        if (v.symbols_.empty() || v.symbols_[0] != kBos)
            throw std::invalid_argument("vocabulary must start with [BOS]");
        if (sigma.empty()) {
            for (std::size_t i = 4; i < v.symbols_.size(); ++i) v.sigma_ids_.push_back(i);
        } else {
            for (auto& s : sigma) v.sigma_ids_.push_back(v.id(s));
        }
        return v;
    }

    std::size_t id(const std::string& sym) const {
        auto it = ids_.find(sym);
        if (it == ids_.end()) throw std::invalid_argument("unknown token: " + sym);
        return it->second;
    }

    bool contains(const std::string& sym) const { return ids_.count(sym) != 0; }
    const std::string& symbol(std::size_t id) const { return symbols_.at(id); }
    std::size_t size() const { return symbols_.size(); }
    const std::vector<std::string>& symbols() const { return symbols_; }

    std::size_t bos() const { return id(kBos); }
    std::size_t eos() const { return id(kEos); }
    std::size_t mask() const { return id(kMask); }
    std::size_t pad() const { return id(kPad); }

    // Sigma, the task alphabet, in construction order.  Usually everything
    // after the four specials, but may also include [PAD] (SM outputs).
    const std::vector<std::size_t>& task_ids() const { return sigma_ids_; }

    // Output head rows in order: Sigma plus [MASK] (MLM) or [EOS] (ALM).
    std::vector<std::size_t> output_ids(ModelMode mode) const {
        auto out = sigma_ids_;
        out.push_back(mode == ModelMode::Mlm ? mask() : eos());
        return out;
    }

  private:
    std::size_t intern(const std::string& s) {
        auto it = ids_.find(s);
        if (it != ids_.end()) return it->second;
        ids_[s] = symbols_.size();
        symbols_.push_back(s);
        return symbols_.size() - 1;
    }

    std::vector<std::string> symbols_;
    std::vector<std::size_t> sigma_ids_;
    std::map<std::string, std::size_t> ids_;
};

struct ModelConfig {
    std::size_t layers = 5;     // L
    std::size_t model_dim = 64; // D
    std::size_t heads = 8;      // M
    std::size_t ffn_dim = 256;  // inner FFN width, 4*D by convention
    PosEncoding pe = PosEncoding::None;
    bool stack_enabled = true;
    ModelMode mode = ModelMode::Mlm;
    Vocabulary vocab;

    void validate() const {
        if (layers == 0 || model_dim == 0 || ffn_dim == 0)
            throw std::invalid_argument("model config: zero-sized dimension");
        MultiHeadConfig{model_dim, heads}.head_dim();  // throws unless D' = D/M exact
        if (vocab.task_ids().empty())
            throw std::invalid_argument("model config: vocabulary has no task symbols");
    }
};

// Per-sequence diagnostics collected during a forward pass.
template <typename T>
struct ForwardTrace {
    // per layer: the (N+1) alpha rows, each of width N+1
    std::vector<std::vector<std::vector<T>>> layer_alphas;
    // per layer: action distributions (3-vectors) for positions 1..N
    std::vector<std::vector<std::vector<T>>> layer_actions;
};

template <typename T>
struct LayerParams {
    MultiHeadParams<T> attn;
    Tensor<T> ln1_gain, ln1_bias, ln2_gain, ln2_bias;
    Tensor<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    Tensor<T> w_a, b_a;  // stack action head, only when stack_enabled
};

template <typename T>
class Model {
  public:
    Model() = default;

    Model(ModelConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
        cfg_.validate();
        const std::size_t d = cfg_.model_dim;
        const std::size_t dh = MultiHeadConfig{d, cfg_.heads}.head_dim();
        const std::size_t k = cfg_.vocab.output_ids(cfg_.mode).size();

        embedding_ = add_param("embedding", {cfg_.vocab.size(), d},
                               [&](std::size_t) { return T(rng.gaussian() * 0.02); });
        for (std::size_t l = 0; l < cfg_.layers; ++l) {
            LayerParams<T> lp;
            for (std::size_t m = 0; m < cfg_.heads; ++m) {
                AttentionHeadParams<T> hp;
                std::string base = "layer" + std::to_string(l) + ".head" + std::to_string(m);
                hp.w_q = affine_param(base + ".w_q", {dh, d}, d, rng);
                hp.w_k = affine_param(base + ".w_k", {dh, d}, d, rng);
                hp.w_v = affine_param(base + ".w_v", {dh, d}, d, rng);
                hp.w_o = affine_param(base + ".w_o", {d, dh}, dh, rng);
                if (cfg_.pe == PosEncoding::Relative) {
                    hp.rel_u = add_param(base + ".rel_u", {dh}, [](std::size_t) { return T(0); });
                    hp.rel_v = add_param(base + ".rel_v", {dh}, [](std::size_t) { return T(0); });
                    hp.w_r = affine_param(base + ".w_r", {dh, d}, d, rng);
                }
                lp.attn.heads.push_back(std::move(hp));
            }
            std::string base = "layer" + std::to_string(l);
            lp.ln1_gain = add_param(base + ".ln1_gain", {d}, [](std::size_t) { return T(1); });
            lp.ln1_bias = add_param(base + ".ln1_bias", {d}, [](std::size_t) { return T(0); });
            lp.ln2_gain = add_param(base + ".ln2_gain", {d}, [](std::size_t) { return T(1); });
            lp.ln2_bias = add_param(base + ".ln2_bias", {d}, [](std::size_t) { return T(0); });
            lp.ffn_w1 = affine_param(base + ".ffn_w1", {cfg_.ffn_dim, d}, d, rng);
            lp.ffn_b1 = add_param(base + ".ffn_b1", {cfg_.ffn_dim}, [](std::size_t) { return T(0); });
            lp.ffn_w2 = affine_param(base + ".ffn_w2", {d, cfg_.ffn_dim}, cfg_.ffn_dim, rng);
            lp.ffn_b2 = add_param(base + ".ffn_b2", {d}, [](std::size_t) { return T(0); });
            if (cfg_.stack_enabled) {
                lp.w_a = affine_param(base + ".w_a", {3, d}, d, rng);
                lp.b_a = add_param(base + ".b_a", {3}, [](std::size_t) { return T(0); });
            }
            layers_.push_back(std::move(lp));
        }
        out_w_ = affine_param("out_w", {k, d}, d, rng);
        out_b_ = add_param("out_b", {k}, [](std::size_t) { return T(0); });
    }

    const ModelConfig& config() const { return cfg_; }
    const Vocabulary& vocab() const { return cfg_.vocab; }

    const std::vector<std::pair<std::string, Tensor<T>>>& named_parameters() const {
        return params_;
    }

    std::vector<Tensor<T>> parameters() const {
        std::vector<Tensor<T>> out;
        for (auto& [name, p] : params_) out.push_back(p);
        return out;
    }

    void zero_grad() {
        for (auto& [name, p] : params_) p.zero_grad();
    }

    // Copies parameter values from another model with identical architecture.
    void copy_parameters_from(const Model& other) {
        if (other.params_.size() != params_.size())
            throw std::invalid_argument("copy_parameters_from: parameter count mismatch");
        for (std::size_t i = 0; i < params_.size(); ++i)
            params_[i].second.raw_value() = other.params_[i].second.value();
    }

    // Forward pass over a token sequence (BOS already prepended).  Returns
    // H^(L), D x N_total.
    Tensor<T> forward(const std::vector<std::size_t>& ids, ForwardTrace<T>* trace = nullptr) const {
        if (ids.empty() || ids[0] != cfg_.vocab.bos())
            throw std::invalid_argument("forward: sequence must start with [BOS]");
        const std::size_t n = ids.size();
        Tensor<T> h = stackformer::embedding(embedding_, ids);
        if (cfg_.pe == PosEncoding::SinCos)
            h = add(h, Tensor<T>::from_data({cfg_.model_dim, n},
                                            sincos_table<T>(cfg_.model_dim, n)));
        AttentionMask mask;
        const AttentionMask* mask_ptr = nullptr;
        if (cfg_.mode == ModelMode::Alm) {
            mask = AttentionMask::future(n);
            mask_ptr = &mask;
        }
        for (const auto& lp : layers_) {
            Tensor<T> attended = multi_head_self_attention(h, lp.attn, mask_ptr, cfg_.pe);
            Tensor<T> h_m = layer_norm_cols(add(attended, h), lp.ln1_gain, lp.ln1_bias);
            Tensor<T> inner = relu(add_col_broadcast(matmul(lp.ffn_w1, h_m), lp.ffn_b1));
            Tensor<T> ffn_out = add_col_broadcast(matmul(lp.ffn_w2, inner), lp.ffn_b2);
            Tensor<T> h_f = layer_norm_cols(add(ffn_out, h_m), lp.ln2_gain, lp.ln2_bias);
            if (cfg_.stack_enabled) {
                auto res = stack_sublayer(h_f, lp.w_a, lp.b_a);
                if (trace) {
                    std::vector<std::vector<T>> alphas, actions;
                    for (const auto& a : res.state.alphas) alphas.push_back(a.value());
                    for (const auto& a : res.state.actions) actions.push_back(a.value());
                    trace->layer_alphas.push_back(std::move(alphas));
                    trace->layer_actions.push_back(std::move(actions));
                }
                h = res.output;
            } else {
                h = h_f;
            }
        }
        return h;
    }

    // Output-head logits for every column: K x N_total, rows in
    // vocab.output_ids(mode) order.
    Tensor<T> head_logits(const Tensor<T>& h_final) const {
        return add_col_broadcast(matmul(out_w_, h_final), out_b_);
    }

    // MLM: bidirectional forward; logits over the task alphabet + [MASK].
    // The caller computes loss/argmax at the mask positions.
    Tensor<T> mlm_logits(const std::vector<std::size_t>& ids,
                         ForwardTrace<T>* trace = nullptr) const {
        if (cfg_.mode != ModelMode::Mlm)
            throw std::invalid_argument("mlm_logits: model is not in MLM mode");
        bool has_mask = false;
        for (auto id : ids) has_mask = has_mask || id == cfg_.vocab.mask();
        if (!has_mask)
            throw std::invalid_argument("mlm_logits: input contains no [MASK]");
        return head_logits(forward(ids, trace));
    }

    // ALM: future-masked forward; returns the next-token distribution's
    // logits given the prefix (read from the last column).
    Tensor<T> alm_logits(const std::vector<std::size_t>& prefix,
                         ForwardTrace<T>* trace = nullptr) const {
        if (cfg_.mode != ModelMode::Alm)
            throw std::invalid_argument("alm_logits: model is not in ALM mode");
        if (prefix.empty())
            throw std::invalid_argument("alm_logits: empty prefix (missing [BOS])");
        Tensor<T> logits = head_logits(forward(prefix, trace));  // K x N
        const std::size_t k = logits.dim(0), n = logits.dim(1);
        std::vector<std::size_t> idx(k);
        for (std::size_t i = 0; i < k; ++i) idx[i] = i * n + (n - 1);
        return gather(logits, Shape{k}, idx);
    }

    // ------------------------------------------------------------ checkpoint

    // Plain-text manifest (config, vocab, name/shape/offset per parameter)
    // plus a raw little-endian float32 block file.  Round-trips bit-exactly
    // for float models.
    void save(const std::string& prefix) const {
        std::ofstream man(prefix + ".manifest");
        if (!man) throw std::runtime_error("cannot write " + prefix + ".manifest");
        man << "stackformer-checkpoint v1\n";
        man << "mode " << to_string(cfg_.mode) << "\n";
        man << "pe " << to_string(cfg_.pe) << "\n";
        man << "layers " << cfg_.layers << "\n";
        man << "dim " << cfg_.model_dim << "\n";
        man << "heads " << cfg_.heads << "\n";
        man << "ffn " << cfg_.ffn_dim << "\n";
        man << "stack " << (cfg_.stack_enabled ? 1 : 0) << "\n";
        man << "vocab\t" << cfg_.vocab.size();
        for (const auto& s : cfg_.vocab.symbols()) man << "\t" << s;
        man << "\n";
        man << "sigma\t" << cfg_.vocab.task_ids().size();
        for (auto id : cfg_.vocab.task_ids()) man << "\t" << cfg_.vocab.symbol(id);
        man << "\n";
        std::size_t offset = 0;
        for (const auto& [name, p] : params_) {
            man << "param " << name << " " << p.rank();
            for (auto dimension : p.shape()) man << " " << dimension;
            man << " " << offset << "\n";
            offset += p.numel();
        }
        std::ofstream bin(prefix + ".bin", std::ios::binary);
        if (!bin) throw std::runtime_error("cannot write " + prefix + ".bin");
        for (const auto& [name, p] : params_)
            for (T v : p.value()) {
                float f = float(v);
                bin.write(reinterpret_cast<const char*>(&f), sizeof(float));
            }
    }

    static Model load(const std::string& prefix) {
        std::ifstream man(prefix + ".manifest");
        if (!man) throw std::runtime_error("cannot open " + prefix + ".manifest");
        std::string line;
        std::getline(man, line);
        if (line != "stackformer-checkpoint v1")
            throw std::runtime_error("bad checkpoint header: " + line);
        ModelConfig cfg;
        struct ParamRec { std::string name; Shape shape; std::size_t offset; };
        std::vector<ParamRec> recs;
        std::vector<std::string> all_syms, sigma_syms;
        while (std::getline(man, line)) {
            std::istringstream is(line);
            std::string key;
            is >> key;
            if (key == "mode") { std::string v; is >> v; cfg.mode = parse_mode(v); }
            else if (key == "pe") { std::string v; is >> v; cfg.pe = parse_pos_encoding(v); }
            else if (key == "layers") is >> cfg.layers;
            else if (key == "dim") is >> cfg.model_dim;
            else if (key == "heads") is >> cfg.heads;
            else if (key == "ffn") is >> cfg.ffn_dim;
            else if (key == "stack") { int v; is >> v; cfg.stack_enabled = v != 0; }
            else if (key == "vocab" || key == "sigma") {
                // tab-separated because symbols may contain spaces
                std::vector<std::string> fields;
                std::string field;
                std::istringstream ts(line);
                while (std::getline(ts, field, '\t')) fields.push_back(field);
                std::size_t count = std::stoul(fields.at(1));
                std::vector<std::string> syms(fields.begin() + 2, fields.end());
                if (syms.size() != count)
                    throw std::runtime_error(key + " count mismatch in manifest");
                if (key == "vocab") all_syms = syms;
                else sigma_syms = syms;
            } else if (key == "param") {
                ParamRec r;
                std::size_t rank;
                is >> r.name >> rank;
                r.shape.resize(rank);
                for (auto& dimension : r.shape) is >> dimension;
                is >> r.offset;
                recs.push_back(std::move(r));
            }
        }
        if (all_syms.empty()) throw std::runtime_error("manifest lacks a vocab line");
        cfg.vocab = Vocabulary::from_symbols(all_syms, sigma_syms);
        Rng rng(0);
        Model model(cfg, rng);
        if (recs.size() != model.params_.size())
            throw std::runtime_error("checkpoint parameter count mismatch");
        std::ifstream bin(prefix + ".bin", std::ios::binary);
        if (!bin) throw std::runtime_error("cannot open " + prefix + ".bin");
        for (std::size_t i = 0; i < recs.size(); ++i) {
            auto& [name, p] = model.params_[i];
            if (recs[i].name != name || recs[i].shape != p.shape())
                throw std::runtime_error("checkpoint parameter mismatch at " + recs[i].name);
            bin.seekg(std::streamoff(recs[i].offset * sizeof(float)));
            for (std::size_t j = 0; j < p.numel(); ++j) {
                float f;
                bin.read(reinterpret_cast<char*>(&f), sizeof(float));
                p.raw_value()[j] = T(f);
            }
            if (!bin) throw std::runtime_error("checkpoint data truncated at " + recs[i].name);
        }
        return model;
    }

  private:
    template <typename F>
    Tensor<T> add_param(const std::string& name, Shape shape, F&& init) {
        std::vector<T> v(shape_numel(shape));
        for (auto& x : v) x = init(std::size_t(0));
        auto t = Tensor<T>::from_data(std::move(shape), std::move(v), true);
        params_.emplace_back(name, t);
        return t;
    }

    Tensor<T> affine_param(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng) {
        double bound = 1.0 / std::sqrt(double(fan_in));
        return add_param(name, std::move(shape),
                         [&](std::size_t) { return T(rng.uniform(-bound, bound)); });
    }

    ModelConfig cfg_;
    std::vector<std::pair<std::string, Tensor<T>>> params_;
    Tensor<T> embedding_;
    std::vector<LayerParams<T>> layers_;
    Tensor<T> out_w_, out_b_;
};

}  // namespace stackformer
