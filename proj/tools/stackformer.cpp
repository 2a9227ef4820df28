// Command-line entry point: dataset generation, training, evaluation,
// theorem/gradient verification, and attention-map export.
//
// Exit codes: 0 success, 1 verification failure, 2 usage/config error.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "stackformer/export.hpp"
#include "stackformer/model.hpp"
#include "stackformer/stack.hpp"
#include "stackformer/tasks.hpp"
#include "stackformer/train.hpp"

using namespace stackformer;

namespace {

// Flat key=value config file; '#' starts a comment.  CLI flags override.
std::map<std::string, std::string> read_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        auto end = line.find_last_not_of(" \t\r");
        if (end == std::string::npos) continue;
        line = line.substr(0, end + 1);
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                     ": expected key=value");
        auto strip = [](std::string s) {
            auto b = s.find_first_not_of(" \t");
            auto e = s.find_last_not_of(" \t");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        kv[strip(line.substr(0, eq))] = strip(line.substr(eq + 1));
    }
    return kv;
}

struct RunSettings {
    std::string task = "rs";
    std::string mode = "mlm";
    std::string pe = "none";
    bool stack = true;
    std::size_t layers = 2, dim = 32, heads = 4, ffn = 128;
    double lr = 1e-4;
    std::size_t batch = 32, steps = 6000;
    std::uint64_t seed = 0;
    std::size_t eval_every = 500;
    std::size_t train_min = 1, train_max = 8, test_min = 9, test_max = 16;
    std::size_t test_size = 500;
    double grad_clip = 0.0;
    bool loss_on_prefix = false;
    std::size_t threads = 0;
    std::string out = "run";

    void apply(const std::map<std::string, std::string>& kv) {
        for (const auto& [k, v] : kv) {
            if (k == "task") task = v;
            else if (k == "mode") mode = v;
            else if (k == "pe") pe = v;
            else if (k == "stack") stack = (v == "on" || v == "1" || v == "true");
            else if (k == "layers") layers = std::stoul(v);
            else if (k == "dim") dim = std::stoul(v);
            else if (k == "heads") heads = std::stoul(v);
            else if (k == "ffn") ffn = std::stoul(v);
            else if (k == "lr") lr = std::stod(v);
            else if (k == "batch") batch = std::stoul(v);
            else if (k == "steps") steps = std::stoul(v);
            else if (k == "seed") seed = std::stoull(v);
            else if (k == "eval_every") eval_every = std::stoul(v);
            else if (k == "train_min") train_min = std::stoul(v);
            else if (k == "train_max") train_max = std::stoul(v);
            else if (k == "test_min") test_min = std::stoul(v);
            else if (k == "test_max") test_max = std::stoul(v);
            else if (k == "test_size") test_size = std::stoul(v);
            else if (k == "grad_clip") grad_clip = std::stod(v);
            else if (k == "loss_on_prefix") loss_on_prefix = (v == "1" || v == "true");
            else if (k == "threads") threads = std::stoul(v);
            else if (k == "out") out = v;
            else throw std::runtime_error("unknown config key: " + k);
        }
    }

    ModelConfig model_config() const {
        ModelConfig cfg;
        cfg.layers = layers;
        cfg.model_dim = dim;
        cfg.heads = heads;
        cfg.ffn_dim = ffn;
        cfg.pe = parse_pos_encoding(pe);
        cfg.stack_enabled = stack;
        cfg.mode = parse_mode(mode);
        cfg.vocab = task_vocabulary(parse_task(task));
        cfg.validate();
        return cfg;
    }

    TrainConfig train_config() const {
        TrainConfig t;
        t.lr = lr;
        t.batch = batch;
        t.steps = steps;
        t.seed = seed;
        t.eval_every = eval_every;
        t.train_len_lo = train_min;
        t.train_len_hi = train_max;
        t.test_len_lo = test_min;
        t.test_len_hi = test_max;
        t.test_set_size = test_size;
        t.grad_clip = grad_clip;
        t.loss_on_prefix = loss_on_prefix;
        t.threads = threads;
        return t;
    }

    // The resolved manifest: every artifact is reproducible from this alone.
    void write_manifest(const std::string& path) const {
        std::ofstream outf(path);
        if (!outf) throw std::runtime_error("cannot write " + path);
        outf << "task=" << task << "\nmode=" << mode << "\npe=" << pe
             << "\nstack=" << (stack ? "on" : "off") << "\nlayers=" << layers
             << "\ndim=" << dim << "\nheads=" << heads << "\nffn=" << ffn << "\nlr=" << lr
             << "\nbatch=" << batch << "\nsteps=" << steps << "\nseed=" << seed
             << "\neval_every=" << eval_every << "\ntrain_min=" << train_min
             << "\ntrain_max=" << train_max << "\ntest_min=" << test_min
             << "\ntest_max=" << test_max << "\ntest_size=" << test_size
             << "\ngrad_clip=" << grad_clip << "\nloss_on_prefix=" << loss_on_prefix
             << "\nthreads=" << threads << "\nout=" << out << "\n";
    }
};

int cmd_gen(const std::string& task_s, std::size_t count, std::size_t min_len,
            std::size_t max_len, std::uint64_t seed, const std::string& out) {
    TaskKind task = parse_task(task_s);
    Rng rng(seed * 0x9E3779B97F4A7C15ull + 0xA24BAED4963EE407ull);
    std::vector<TaskInstance> data;
    for (std::size_t i = 0; i < count; ++i) {
        TaskInstance inst = generate_in_range(task, min_len, max_len, rng);
        if (inst.y != oracle(task, inst.x))
            throw std::runtime_error("generated instance failed oracle re-verification");
        data.push_back(std::move(inst));
    }
    write_dataset(out, data);
    std::cout << "wrote " << data.size() << " " << task_s << " instances to " << out << "\n";
    return 0;
}

int cmd_train(const RunSettings& s) {
    std::filesystem::create_directories(s.out);
    s.write_manifest(s.out + "/manifest.txt");
    Rng init_rng(s.seed);
    Model<float> model(s.model_config(), init_rng);
    std::cout << "training " << s.task << " (stack=" << (s.stack ? "on" : "off")
              << ", mode=" << s.mode << ", pe=" << s.pe << ", seed=" << s.seed << ")\n";
    RunRecord rec = train_loop(model, parse_task(s.task), s.train_config());
    rec.save(s.out + "/record.tsv");
    model.save(s.out + "/checkpoint");
    if (rec.diverged) {
        std::cout << "run diverged at step " << rec.points.back().step
                  << "; partial record saved\n";
        return 1;
    }
    std::cout << "final test accuracy " << rec.final_accuracy() << " after "
              << rec.points.back().step << " steps (" << rec.points.back().elapsed_s
              << " s)\n";
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_path, bool sample,
             std::uint64_t seed) {
    auto model = Model<float>::load(checkpoint);
    auto data = read_dataset(data_path);
    Rng rng(seed);
    double acc = evaluate(model, data, sample, &rng);
    std::cout << "accuracy " << acc << " over " << data.size() << " instances\n";
    return 0;
}

int verify_theorems(std::size_t trials, std::uint64_t seed) {
    // the worked six-operation trace first
    auto golden = golden_trace_ops();
    TheoremReport g = check_theorem1(golden, golden.size());
    if (!g.ok) {
        std::cout << "FAIL theorem1 on the golden trace: first divergence at index "
                  << g.first_divergent_index << ", deviation " << g.max_deviation << "\n";
        return 1;
    }
    Rng rng(seed);
    for (std::size_t t = 0; t < trials; ++t) {
        std::size_t n = 1 + rng.uniform_int(50);
        auto ops = random_ops(rng, n);
        TheoremReport r1 = check_theorem1(ops, n);
        if (!r1.ok) {
            std::cout << "FAIL theorem1 at trial " << t << " (N=" << n << "): ops";
            for (auto op : ops)
                std::cout << ' '
                          << (op == StackOp::Push ? "PUSH" : op == StackOp::Pop ? "POP" : "NO-OP");
            std::cout << "; first divergence at index " << r1.first_divergent_index
                      << ", deviation " << r1.max_deviation << "\n";
            return 1;
        }
        std::size_t n2 = 1 + rng.uniform_int(100);
        auto actions = random_action_sequences(rng, n2);
        TheoremReport r2 = check_theorem2(actions, n2);
        if (!r2.ok) {
            std::cout << "FAIL theorem2 at trial " << t << " (N=" << n2 << "): row "
                      << r2.first_divergent_index << " deviates from unit mass by "
                      << r2.max_deviation << "\n";
            return 1;
        }
    }
    std::cout << "PASS theorems: golden trace + " << trials
              << " random cases for Theorem 1 and Theorem 2\n";
    return 0;
}

int verify_gradcheck(std::size_t trials, std::uint64_t seed) {
    // Central finite differences against autodiff through a full
    // stack-augmented layer (attention + FFN + stack sublayer), 64-bit.
    const double h = 1e-5, tol = 1e-4;
    double worst = 0;
    Rng rng(seed);
    for (std::size_t t = 0; t < trials; ++t) {
        ModelConfig cfg;
        cfg.layers = 1;
        cfg.model_dim = 4 + 2 * rng.uniform_int(3);  // 4, 6, 8
        cfg.heads = (cfg.model_dim % 4 == 0) ? 2 : 1;
        cfg.ffn_dim = 2 * cfg.model_dim;
        cfg.pe = PosEncoding::None;
        cfg.stack_enabled = true;
        cfg.mode = ModelMode::Mlm;
        cfg.vocab = task_vocabulary(TaskKind::RS);
        Rng mr(seed * 1000 + t);
        Model<double> model(cfg, mr);
        std::size_t n = 2 + rng.uniform_int(3);
        std::vector<std::size_t> ids{model.vocab().bos()};
        for (std::size_t i = 0; i + 1 < n; ++i)
            ids.push_back(rng.coin(0.5) ? model.vocab().id("a") : model.vocab().id("b"));
        ids.push_back(model.vocab().mask());
        std::vector<int> targets(ids.size(), -1);
        targets.back() = 0;
        auto f = [&] { return cross_entropy_cols(model.head_logits(model.forward(ids)), targets); };
        model.zero_grad();
        backward(f());
        for (auto& [name, p] : model.named_parameters()) {
            auto& param = const_cast<Tensor<double>&>(p);
            auto analytic = param.grad();
            for (std::size_t j = 0; j < param.numel(); ++j) {
                double saved = param.raw_value()[j];
                param.raw_value()[j] = saved + h;
                double up = f().item();
                param.raw_value()[j] = saved - h;
                double down = f().item();
                param.raw_value()[j] = saved;
                double numeric = (up - down) / (2 * h);
                double err = std::abs(analytic[j] - numeric);
                double denom = std::max({std::abs(analytic[j]), std::abs(numeric), 1e-4});
                double rel = err / denom;
                if (rel > worst) worst = rel;
                if (rel > tol) {
                    std::cout << "FAIL gradcheck at trial " << t << ", parameter " << name << "["
                              << j << "]: analytic " << analytic[j] << " vs numeric " << numeric
                              << " (rel err " << rel << ")\n";
                    return 1;
                }
            }
        }
    }
    std::cout << "PASS gradcheck: " << trials << " configurations, max rel err " << worst << "\n";
    return 0;
}

int cmd_dump_attention(const std::string& checkpoint, const std::string& task_s,
                       const std::string& input, const std::string& out) {
    auto model = Model<float>::load(checkpoint);
    TaskKind task = parse_task(task_s);
    TaskInstance inst{task, split_symbols(input), {}};
    inst.y = oracle(task, inst.x);
    const Vocabulary& v = model.vocab();
    Episode ep = model.config().mode == ModelMode::Mlm ? make_mlm_input(inst, v)
                                                       : make_alm_episode(inst, v);
    dump_attention(model, ep.input_ids, out);
    std::cout << "wrote per-layer alpha CSV/PGM and action dump with prefix " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"stack-attention transformer: data, training, verification, export"};
    app.require_subcommand(1);

    // gen
    auto* gen = app.add_subcommand("gen", "generate a dataset TSV");
    std::string gen_task = "rs", gen_out = "data.tsv";
    std::size_t gen_count = 1000, gen_min = 1, gen_max = 8;
    std::uint64_t gen_seed = 0;
    gen->add_option("--task", gen_task, "rs|sm|ma|se");
    gen->add_option("--count", gen_count);
    gen->add_option("--min-len", gen_min);
    gen->add_option("--max-len", gen_max);
    gen->add_option("--seed", gen_seed);
    gen->add_option("--out", gen_out);

    // train
    auto* train = app.add_subcommand("train", "train a model and write records + checkpoint");
    std::string config_path;
    RunSettings settings;
    std::string tr_task, tr_mode, tr_pe, tr_stack, tr_out;
    double tr_lr = -1, tr_clip = -1;
    long long tr_layers = -1, tr_dim = -1, tr_heads = -1, tr_ffn = -1, tr_batch = -1,
              tr_steps = -1, tr_eval = -1, tr_tmin = -1, tr_tmax = -1, tr_emin = -1,
              tr_emax = -1, tr_tsize = -1, tr_threads = -1, tr_seed = -1;
    train->add_option("--config", config_path, "key=value config file");
    train->add_option("--task", tr_task, "rs|sm|ma|se");
    train->add_option("--mode", tr_mode, "mlm|alm");
    train->add_option("--pe", tr_pe, "none|sincos|relative|rotary|alibi");
    train->add_option("--stack", tr_stack, "on|off");
    train->add_option("--layers", tr_layers);
    train->add_option("--dim", tr_dim);
    train->add_option("--heads", tr_heads);
    train->add_option("--ffn", tr_ffn);
    train->add_option("--lr", tr_lr);
    train->add_option("--batch", tr_batch);
    train->add_option("--steps", tr_steps);
    train->add_option("--seed", tr_seed);
    train->add_option("--eval-every", tr_eval);
    train->add_option("--train-min", tr_tmin);
    train->add_option("--train-max", tr_tmax);
    train->add_option("--test-min", tr_emin);
    train->add_option("--test-max", tr_emax);
    train->add_option("--test-size", tr_tsize);
    train->add_option("--grad-clip", tr_clip);
    train->add_option("--threads", tr_threads);
    train->add_option("--out", tr_out, "output directory");

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    std::string ev_ckpt, ev_data;
    bool ev_sample = false;
    std::uint64_t ev_seed = 0;
    eval->add_option("--checkpoint", ev_ckpt)->required();
    eval->add_option("--data", ev_data)->required();
    eval->add_flag("--sample", ev_sample, "sample ALM decoding instead of greedy");
    eval->add_option("--seed", ev_seed);

    // verify
    auto* verify = app.add_subcommand("verify", "machine-check theorems or gradients");
    std::string vf_what = "theorems";
    std::size_t vf_trials = 1000;
    std::uint64_t vf_seed = 0;
    verify->add_option("what", vf_what, "theorems|gradcheck")->required();
    verify->add_option("--trials", vf_trials);
    verify->add_option("--seed", vf_seed);

    // dump-attention
    auto* dump = app.add_subcommand("dump-attention", "export per-layer alpha maps");
    std::string da_ckpt, da_task = "rs", da_input, da_out = "attention";
    dump->add_option("--checkpoint", da_ckpt)->required();
    dump->add_option("--task", da_task, "rs|sm|ma|se");
    dump->add_option("--input", da_input, "input symbols, space separated")->required();
    dump->add_option("--out", da_out, "output path prefix");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) return cmd_gen(gen_task, gen_count, gen_min, gen_max, gen_seed, gen_out);
        if (train->parsed()) {
            if (!config_path.empty()) settings.apply(read_config_file(config_path));
            if (!tr_task.empty()) settings.task = tr_task;
            if (!tr_mode.empty()) settings.mode = tr_mode;
            if (!tr_pe.empty()) settings.pe = tr_pe;
            if (!tr_stack.empty()) settings.stack = (tr_stack == "on");
            if (tr_layers >= 0) settings.layers = std::size_t(tr_layers);
            if (tr_dim >= 0) settings.dim = std::size_t(tr_dim);
            if (tr_heads >= 0) settings.heads = std::size_t(tr_heads);
            if (tr_ffn >= 0) settings.ffn = std::size_t(tr_ffn);
            if (tr_lr >= 0) settings.lr = tr_lr;
            if (tr_batch >= 0) settings.batch = std::size_t(tr_batch);
            if (tr_steps >= 0) settings.steps = std::size_t(tr_steps);
            if (tr_seed >= 0) settings.seed = std::uint64_t(tr_seed);
            if (tr_eval >= 0) settings.eval_every = std::size_t(tr_eval);
            if (tr_tmin >= 0) settings.train_min = std::size_t(tr_tmin);
            if (tr_tmax >= 0) settings.train_max = std::size_t(tr_tmax);
            if (tr_emin >= 0) settings.test_min = std::size_t(tr_emin);
            if (tr_emax >= 0) settings.test_max = std::size_t(tr_emax);
            if (tr_tsize >= 0) settings.test_size = std::size_t(tr_tsize);
            if (tr_clip >= 0) settings.grad_clip = tr_clip;
            if (tr_threads >= 0) settings.threads = std::size_t(tr_threads);
            if (!tr_out.empty()) settings.out = tr_out;
            return cmd_train(settings);
        }
        if (eval->parsed()) return cmd_eval(ev_ckpt, ev_data, ev_sample, ev_seed);
        if (verify->parsed()) {
            if (vf_what == "theorems") return verify_theorems(vf_trials, vf_seed);
            if (vf_what == "gradcheck")
                return verify_gradcheck(std::min<std::size_t>(vf_trials, 20), vf_seed);
            std::cerr << "unknown verification target: " << vf_what << "\n";
            return 2;
        }
        if (dump->parsed()) return cmd_dump_attention(da_ckpt, da_task, da_input, da_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 2;
}
