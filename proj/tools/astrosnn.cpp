// astrosnn: command-line surface over the library. Verification suites,
// byte-level LM training/evaluation/generation, working-memory task runs and
// sweeps, and the inference-cost benchmark.
//
// Conventions shared by every command:
//   - precedence: CLI flag > --config file > built-in default
//   - when --out is set, outputs land there next to a resolved-config
//     snapshot that replays the run via --config
//   - exit status 0 iff everything requested succeeded
//   - seed-deterministic output, wall-clock fields excepted

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "astrosnn/bench.hpp"
#include "astrosnn/checkpoint.hpp"
#include "astrosnn/corpus.hpp"
#include "astrosnn/errors.hpp"
#include "astrosnn/model.hpp"
#include "astrosnn/report.hpp"
#include "astrosnn/runconfig.hpp"
#include "astrosnn/tasks.hpp"
#include "astrosnn/train.hpp"
#include "astrosnn/verify.hpp"

namespace {

using namespace astrosnn;

// ---------------------------------------------------------------------------
// Flag/config-file binding
// ---------------------------------------------------------------------------

// One table per command drives CLI11 registration, config-file consumption,
// and the resolved snapshot, so the three can never drift apart.
class Binder {
public:
    explicit Binder(CLI::App* cmd) : cmd_(cmd) {}

    CLI::Option* opt_int(int64_t& v, const std::string& flag, const std::string& help) {
        return row(cmd_->add_option(flag, v, help), flag,
                   [&v](const std::string& k, const std::string& raw) { v = config_int(k, raw); },
                   [&v] { return config_render(v); });
    }
    CLI::Option* opt_uint(uint64_t& v, const std::string& flag, const std::string& help) {
        return row(cmd_->add_option(flag, v, help), flag,
                   [&v](const std::string& k, const std::string& raw) { v = config_uint(k, raw); },
                   [&v] { return config_render(v); });
    }
    CLI::Option* opt_double(double& v, const std::string& flag, const std::string& help) {
        return row(cmd_->add_option(flag, v, help), flag,
                   [&v](const std::string& k, const std::string& raw) { v = config_double(k, raw); },
                   [&v] { return config_render(v); });
    }
    CLI::Option* opt_bool(bool& v, const std::string& flag, const std::string& help) {
        return row(cmd_->add_option(flag, v, help)->expected(1), flag,
                   [&v](const std::string& k, const std::string& raw) { v = config_bool(k, raw); },
                   [&v] { return config_render(v); });
    }
    CLI::Option* opt_str(std::string& v, const std::string& flag, const std::string& help) {
        return row(cmd_->add_option(flag, v, help), flag,
                   [&v](const std::string&, const std::string& raw) { v = raw; },
                   [&v] { return v; });
    }
    CLI::Option* opt_flag(bool& v, const std::string& flag, const std::string& help) {
        return row(cmd_->add_flag(flag, v, help), flag,
                   [&v](const std::string& k, const std::string& raw) { v = config_bool(k, raw); },
                   [&v] { return config_render(v); });
    }

    // File values apply only where the CLI left the default in place.
    void apply_file(const std::string& path) {
        if (path.empty()) return;
        ConfigOverrides ov(KeyValueFile::load(path));
        for (Row& r : rows_) {
            const std::string* raw = ov.take(r.key);
            if (raw && r.opt->count() == 0) r.set(r.key, *raw);
        }
        ov.reject_unknown();
    }

    std::vector<std::pair<std::string, std::string>> resolved() const {
        std::vector<std::pair<std::string, std::string>> out;
        for (const Row& r : rows_) out.emplace_back(r.key, r.get());
        return out;
    }

private:
    struct Row {
        std::string key;
        CLI::Option* opt;
        std::function<void(const std::string&, const std::string&)> set;
        std::function<std::string()> get;
    };

    CLI::Option* row(CLI::Option* opt, const std::string& flag,
                     std::function<void(const std::string&, const std::string&)> set,
                     std::function<std::string()> get) {
        std::string key = flag.substr(flag.find_first_not_of('-'));
        rows_.push_back({key, opt, std::move(set), std::move(get)});
        return opt;
    }

    CLI::App* cmd_;
    std::vector<Row> rows_;
};

// Flags every command carries.
struct CommonOpts {
    std::string config;
    std::string out;
    uint64_t seed = 0;

    void attach(CLI::App* cmd, Binder& b) {
        cmd->add_option("--config", config, "key=value config file (CLI flags win)");
        b.opt_str(out, "--out", "output directory (snapshot, CSV and JSON land here)");
        b.opt_uint(seed, "--seed", "run seed");
    }
};

void snapshot_if_out(const CommonOpts& common, const std::string& command, const Binder& b) {
    if (common.out.empty()) return;
    write_config_snapshot(common.out, command, b.resolved());
}

std::string out_path(const std::string& dir, const std::string& name) {
    return (std::filesystem::path(dir) / name).string();
}

ExecMode parse_exec_mode(const std::string& s) {
    if (s == "recurrent") return ExecMode::recurrent;
    if (s == "parallel") return ExecMode::parallel;
    if (s == "chunked") return ExecMode::chunked;
    throw ConfigError("unknown mode '" + s + "' (expected recurrent, parallel or chunked)");
}

template <typename F>
int dispatch_dtype(const std::string& dtype, F&& f) {
    if (dtype == "f32") return f(float{});
    if (dtype == "f64") return f(double{});
    throw ConfigError("dtype must be f32 or f64, got " + dtype);
}

// ---------------------------------------------------------------------------
// verify-equivalence
// ---------------------------------------------------------------------------

struct VerifyOpts {
    CommonOpts common;
    EquivConfig cfg;
};

int run_verify(const VerifyOpts& o, const Binder& b) {
    snapshot_if_out(o.common, "verify-equivalence", b);
    EquivReport rep = equivalence_suite(o.cfg);

    std::ostringstream csv;
    write_equiv_csv(rep, csv);
    if (!o.common.out.empty()) {
        write_text_file(out_path(o.common.out, "equivalence.csv"), csv.str());
        write_json_file(out_path(o.common.out, "equivalence.json"), equiv_report_json(rep));
    } else {
        std::cout << csv.str();
    }

    double worst = 0;
    for (const EquivTrial& t : rep.trials) worst = std::max(worst, t.max_pre_diff);
    std::cout << "equivalence: " << rep.trials.size() << " trials, worst pre diff " << worst
              << " (tolerance " << rep.tolerance << "), " << rep.failures << " failures, "
              << rep.seconds << "s\n";

    if (o.cfg.inject_mask_fault) {
        // Negative control: success means the suite caught the corrupted mask.
        bool detected = rep.failures > 0;
        std::cout << (detected ? "fault injection detected as expected\n"
                               : "fault injection went UNDETECTED\n");
        return detected ? 0 : 1;
    }
    std::cout << (rep.pass ? "PASS" : "FAIL") << "\n";
    return rep.pass ? 0 : 1;
}

// ---------------------------------------------------------------------------
// grad-check
// ---------------------------------------------------------------------------

struct GradOpts {
    CommonOpts common;
    GradConfig cfg;
};

int run_grad(const GradOpts& o, const Binder& b) {
    snapshot_if_out(o.common, "grad-check", b);
    GradReport rep = grad_suite(o.cfg);

    std::ostringstream csv;
    write_grad_csv(rep, csv);
    if (!o.common.out.empty()) {
        write_text_file(out_path(o.common.out, "gradcheck.csv"), csv.str());
        write_json_file(out_path(o.common.out, "gradcheck.json"), grad_report_json(rep));
    } else {
        std::cout << csv.str();
    }

    std::cout << "relative error histogram:\n";
    for (int k = 0; k < kGradHistBuckets; ++k)
        if (rep.rel_err_histogram[static_cast<size_t>(k)] > 0)
            std::cout << "  " << grad_hist_label(k) << " : "
                      << rep.rel_err_histogram[static_cast<size_t>(k)] << "\n";
    std::cout << "grad-check: max rel err " << rep.max_rel_err << " (tolerance "
              << o.cfg.fd_tolerance << "), mode-backward max diff " << rep.bptt_max_diff
              << " (tolerance " << o.cfg.bptt_tolerance << "), " << rep.seconds << "s\n"
              << (rep.pass ? "PASS" : "FAIL") << "\n";
    return rep.pass ? 0 : 1;
}

// ---------------------------------------------------------------------------
// train-lm
// ---------------------------------------------------------------------------

struct TrainLmOpts {
    CommonOpts common;
    std::string corpus_path;
    std::string dtype = "f32";
    int64_t layers = 2;
    int64_t dim = 64;
    int64_t heads = 8;
    int64_t context = 256;
    bool ffn = false;
    bool norm = true;
    bool rope = true;
    double peak_lr = 2.5e-4;
    double min_lr = 6e-5;
    int64_t warmup_steps = 100;
    int64_t total_steps = 20000;
    int64_t max_steps = 0;  // 0: total_steps
    double weight_decay = 0.1;
    double clip_norm = 1.0;
    int64_t batch = 8;
    double heldout_frac = 0.1;
    int64_t eval_bytes = 65536;  // heldout prefix evaluated per eval
    int64_t eval_every = 250;
    double target_bpc = 0;  // >0: stop once held-out BPC drops below
    int64_t log_every = 25;
    int64_t checkpoint_every = 0;
};

std::vector<int32_t> eval_slice(const std::vector<int32_t>& heldout, int64_t cap) {
    int64_t n = std::min<int64_t>(cap, static_cast<int64_t>(heldout.size()));
    return {heldout.begin(), heldout.begin() + n};
}

template <typename T>
int run_train_lm_typed(const TrainLmOpts& o) {
    auto tokens = load_corpus(o.corpus_path);
    CorpusSplit split = split_corpus(tokens, o.heldout_frac);
    std::vector<int32_t> evalset = eval_slice(split.heldout, o.eval_bytes);

    ModelConfig mc;
    mc.layers = o.layers;
    mc.dim = o.dim;
    mc.heads = o.heads;
    mc.context_len = o.context;
    mc.ffn = o.ffn;
    mc.norm = o.norm;
    mc.rope = o.rope;
    mc.dtype = o.dtype;
    mc.seed = Rng::mix(o.common.seed, 1);
    Model<T> model = Model<T>::build(mc);

    OptimConfig oc;
    oc.peak_lr = o.peak_lr;
    oc.min_lr = o.min_lr;
    oc.warmup_steps = o.warmup_steps;
    oc.total_steps = o.total_steps;
    oc.weight_decay = o.weight_decay;
    oc.clip_norm = o.clip_norm;
    oc.batch = o.batch;
    oc.window = o.context;
    Trainer<T> trainer(model, oc, Rng::mix(o.common.seed, 2));

    auto [bpc0, ppl0] = eval_bpc_ppl(model, evalset);
    double loss0_nats = bpc0 * std::log(2.0);
    std::cout << "step 0: held-out loss " << loss0_nats << " nats (" << bpc0 << " bpc)\n";

    std::ofstream train_csv(out_path(o.common.out, "train_log.csv"), std::ios::trunc);
    std::ofstream eval_csv(out_path(o.common.out, "eval_log.csv"), std::ios::trunc);
    eval_csv << "step,bpc,ppl\n";
    eval_csv << 0 << ',' << bpc0 << ',' << ppl0 << '\n';

    double best_bpc = bpc0;
    bool reached = false;
    auto t0 = std::chrono::steady_clock::now();

    TrainLoopOpts opts;
    opts.max_steps = o.max_steps;
    opts.csv = &train_csv;
    opts.csv_every = o.log_every;
    opts.checkpoint_every = o.checkpoint_every;
    opts.checkpoint_path = out_path(o.common.out, "model.ckpt");
    opts.on_step = [&](const StepLog& log) {
        if (log.step % o.log_every == 0)
            std::cout << "step " << log.step << ": train loss " << log.loss_nats << " nats ("
                      << log.bpc << " bpc), lr " << log.lr << ", grad norm " << log.grad_norm
                      << ", " << log.tokens_per_sec << " tok/s\n";
    };
    opts.should_stop = [&](const StepLog& log) {
        if (log.step % o.eval_every != 0) return false;
        auto [bpc, ppl] = eval_bpc_ppl(model, evalset);
        eval_csv << log.step << ',' << bpc << ',' << ppl << '\n';
        eval_csv.flush();
        std::cout << "step " << log.step << ": held-out " << bpc << " bpc, ppl " << ppl << "\n";
        best_bpc = std::min(best_bpc, bpc);
        if (o.target_bpc > 0 && bpc < o.target_bpc) {
            reached = true;
            return true;
        }
        return false;
    };

    StepLog last = train_loop(trainer, split.train, opts);
    trainer.save(out_path(o.common.out, "model.ckpt"));

    auto [bpc, ppl] = eval_bpc_ppl(model, evalset);
    best_bpc = std::min(best_bpc, bpc);
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    nlohmann::json summary{{"steps", trainer.steps_done()},
                           {"loss0_nats", loss0_nats},
                           {"loss0_bpc", bpc0},
                           {"final_bpc", bpc},
                           {"final_ppl", ppl},
                           {"best_bpc", best_bpc},
                           {"target_bpc", o.target_bpc},
                           {"target_reached", reached},
                           {"train_tokens", static_cast<int64_t>(split.train.size())},
                           {"heldout_tokens", static_cast<int64_t>(split.heldout.size())},
                           {"eval_tokens", static_cast<int64_t>(evalset.size())},
                           {"last_train_loss_nats", last.loss_nats},
                           {"seconds", secs}};
    write_json_file(out_path(o.common.out, "summary.json"), summary);
    std::cout << "done: " << trainer.steps_done() << " steps, held-out " << bpc << " bpc (ppl "
              << ppl << "), checkpoint " << opts.checkpoint_path << "\n";
    return 0;
}

int run_train_lm(const TrainLmOpts& o, const Binder& b) {
    if (o.common.out.empty()) throw ConfigError("train-lm needs --out for its artifacts");
    ensure_dir(o.common.out);
    snapshot_if_out(o.common, "train-lm", b);
    return dispatch_dtype(o.dtype, [&](auto tag) {
        return run_train_lm_typed<decltype(tag)>(o);
    });
}

// ---------------------------------------------------------------------------
// eval-lm
// ---------------------------------------------------------------------------

struct EvalLmOpts {
    CommonOpts common;
    std::string checkpoint;
    std::string corpus_path;
    std::string mode = "parallel";
    int64_t chunk = 64;
};

template <typename T>
int run_eval_lm_typed(const EvalLmOpts& o) {
    LoadedCheckpoint<T> ck = load_checkpoint<T>(o.checkpoint);
    auto tokens = load_corpus(o.corpus_path);
    auto [bpc, ppl] = eval_bpc_ppl(ck.model, tokens, parse_exec_mode(o.mode), o.chunk);
    std::cout << "eval: " << tokens.size() << " tokens, " << bpc << " bpc, ppl " << ppl
              << " (checkpoint step " << ck.train_step << ")\n";
    if (!o.common.out.empty()) {
        nlohmann::json j{{"checkpoint", o.checkpoint},
                         {"checkpoint_step", ck.train_step},
                         {"tokens", static_cast<int64_t>(tokens.size())},
                         {"bpc", bpc},
                         {"ppl", ppl},
                         {"mode", o.mode}};
        write_json_file(out_path(o.common.out, "eval.json"), j);
    }
    return 0;
}

int run_eval_lm(const EvalLmOpts& o, const Binder& b) {
    snapshot_if_out(o.common, "eval-lm", b);
    ModelConfig mc = peek_checkpoint_config(o.checkpoint);
    return dispatch_dtype(mc.dtype, [&](auto tag) {
        return run_eval_lm_typed<decltype(tag)>(o);
    });
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

struct GenerateOpts {
    CommonOpts common;
    std::string checkpoint;
    std::string prompt;
    int64_t tokens = 256;
    double temperature = 1.0;
};

// Temperature 0 is argmax; otherwise an inverse-CDF draw from the softmax at
// 1/temperature.
template <typename T>
int32_t sample_logits(const Tensor<T>& logits, double temperature, Rng& rng) {
    const T* p = logits.data();
    int64_t n = logits.size();
    int32_t best = 0;
    for (int64_t i = 1; i < n; ++i)
        if (p[i] > p[best]) best = static_cast<int32_t>(i);
    if (temperature <= 0) return best;

    double mx = static_cast<double>(p[best]);
    std::vector<double> w(static_cast<size_t>(n));
    double z = 0;
    for (int64_t i = 0; i < n; ++i) {
        w[static_cast<size_t>(i)] = std::exp((static_cast<double>(p[i]) - mx) / temperature);
        z += w[static_cast<size_t>(i)];
    }
    double u = rng.uniform() * z;
    double cum = 0;
    for (int64_t i = 0; i < n; ++i) {
        cum += w[static_cast<size_t>(i)];
        if (u < cum) return static_cast<int32_t>(i);
    }
    return static_cast<int32_t>(n - 1);
}

template <typename T>
int run_generate_typed(const GenerateOpts& o) {
    LoadedCheckpoint<T> ck = load_checkpoint<T>(o.checkpoint);
    if (o.prompt.empty()) throw ConfigError("generate needs a non-empty --prompt");

    // Streaming decode: constant state per token regardless of history length.
    LmState<T> st = LmState<T>::zero(ck.model);
    Tensor<T> logits;
    for (int32_t t : bytes_to_tokens(o.prompt)) logits = step_lm(ck.model, st, t);

    Rng rng(Rng::mix(o.common.seed, 17));
    std::string generated;
    for (int64_t i = 0; i < o.tokens; ++i) {
        int32_t t = sample_logits(logits, o.temperature, rng);
        generated.push_back(static_cast<char>(static_cast<unsigned char>(t)));
        logits = step_lm(ck.model, st, t);
    }

    std::cout << o.prompt << generated << "\n";
    if (!o.common.out.empty())
        write_text_file(out_path(o.common.out, "generate.txt"), o.prompt + generated);
    return 0;
}

int run_generate(const GenerateOpts& o, const Binder& b) {
    snapshot_if_out(o.common, "generate", b);
    ModelConfig mc = peek_checkpoint_config(o.checkpoint);
    return dispatch_dtype(mc.dtype, [&](auto tag) {
        return run_generate_typed<decltype(tag)>(o);
    });
}

// ---------------------------------------------------------------------------
// train-task
// ---------------------------------------------------------------------------

struct TrainTaskOpts {
    CommonOpts common;
    std::string task = "memory";
    std::string cell = "amsu";
    int64_t length = 10;
    int64_t dim = 64;
    int64_t heads = 8;
    int64_t distractors = kUmbrellaDistractors;
    int64_t batch = 16;
    int64_t max_steps = 500;
    double lr = 1e-3;
    int64_t eval_episodes = 500;
};

TaskRunReport task_run_report(TaskKind kind, CellKind cell, int64_t length,
                              const TaskOutcome<float>& out, uint64_t ci_seed) {
    TaskRunReport rep;
    rep.task = task_name(kind);
    rep.cell = cell_name(cell);
    rep.length = length;
    rep.train_steps = out.train_steps;
    rep.metric_name = kind == TaskKind::memory_length ? "error_rate" : "mean_regret";
    rep.metric_value = out.metric;
    rep.ci = bootstrap_mean_ci(out.per_episode, ci_seed);
    rep.episodes = static_cast<int64_t>(out.per_episode.size());
    return rep;
}

int run_train_task(const TrainTaskOpts& o, const Binder& b) {
    snapshot_if_out(o.common, "train-task", b);
    TaskKind kind = parse_task(o.task);
    CellKind cell = parse_cell(o.cell);

    TaskNetConfig nc;
    nc.cell = cell;
    nc.in_features = task_feature_count(kind, o.distractors);
    nc.dim = o.dim;
    nc.heads = o.heads;
    nc.seed = Rng::mix(o.common.seed, 1);

    TaskTrainConfig tc;
    tc.batch = o.batch;
    tc.max_steps = o.max_steps;
    tc.lr = o.lr;
    tc.eval_episodes = o.eval_episodes;
    tc.seed = Rng::mix(o.common.seed, 2);

    auto net = TaskNet<float>::build(nc);
    TaskOutcome<float> out = train_task(net, kind, o.length, tc, o.distractors);
    TaskRunReport rep = task_run_report(kind, cell, o.length, out, Rng::mix(o.common.seed, 3));

    std::ostringstream csv;
    write_task_run_csv(rep, csv);
    if (!o.common.out.empty()) {
        write_text_file(out_path(o.common.out, "task.csv"), csv.str());
        write_json_file(out_path(o.common.out, "task.json"), task_run_json(rep));
    } else {
        std::cout << csv.str();
    }
    std::cout << rep.cell << " on " << rep.task << " L=" << rep.length << ": " << rep.metric_name
              << " " << rep.metric_value << " (95% CI [" << rep.ci.lo << ", " << rep.ci.hi
              << "], " << rep.episodes << " episodes, " << rep.train_steps << " train steps)\n";
    return 0;
}

// ---------------------------------------------------------------------------
// sweep-task
// ---------------------------------------------------------------------------

struct SweepTaskOpts {
    CommonOpts common;
    std::string task = "memory";
    std::string cells = "amsu,lif,alif";
    std::string lengths = "1,2,5,10,25,50,100";
    int64_t dim = 64;
    int64_t heads = 8;
    int64_t distractors = kUmbrellaDistractors;
    int64_t batch = 16;
    int64_t max_steps = 500;
    double lr = 1e-3;
    int64_t eval_episodes = 500;
    int64_t jobs = 1;  // points are seed-independent, so parallelism is safe
};

int run_sweep_task(const SweepTaskOpts& o, const Binder& b) {
    snapshot_if_out(o.common, "sweep-task", b);
    TaskKind kind = parse_task(o.task);

    std::vector<CellKind> cells;
    {
        std::istringstream ss(o.cells);
        std::string item;
        while (std::getline(ss, item, ',')) cells.push_back(parse_cell(item));
        if (cells.empty()) throw ConfigError("sweep needs at least one cell");
    }
    std::vector<int64_t> lengths = config_int_list("lengths", o.lengths);
    for (size_t i = 0; i + 1 < lengths.size(); ++i)
        if (lengths[i] >= lengths[i + 1])
            throw ConfigError("sweep lengths must be strictly ascending");
    if (o.jobs < 1) throw ConfigError("jobs must be at least 1");

    TaskNetConfig nc;
    nc.dim = o.dim;
    nc.heads = o.heads;
    nc.seed = Rng::mix(o.common.seed, 1);
    TaskTrainConfig tc;
    tc.batch = o.batch;
    tc.max_steps = o.max_steps;
    tc.lr = o.lr;
    tc.eval_episodes = o.eval_episodes;
    tc.seed = Rng::mix(o.common.seed, 2);

    // Grid of independent points; identical results at any job count.
    struct Job {
        CellKind cell;
        int64_t length;
    };
    std::vector<Job> grid;
    for (CellKind c : cells)
        for (int64_t L : lengths) grid.push_back({c, L});
    std::vector<SweepPoint> points(grid.size());

    auto worker = [&](std::atomic<size_t>& next) {
        for (size_t i = next.fetch_add(1); i < grid.size(); i = next.fetch_add(1))
            points[i] = sweep_point<float>(kind, grid[i].cell, grid[i].length, nc, tc,
                                           o.distractors);
    };
    if (o.jobs == 1) {
        std::atomic<size_t> next{0};
        worker(next);
    } else {
        std::atomic<size_t> next{0};
        std::vector<std::thread> pool;
        for (int64_t j = 0; j < std::min<int64_t>(o.jobs, static_cast<int64_t>(grid.size())); ++j)
            pool.emplace_back([&] { worker(next); });
        for (std::thread& t : pool) t.join();
    }

    std::ostringstream csv;
    write_sweep_csv_header(csv);
    for (const SweepPoint& p : points) write_sweep_csv_row(csv, p);
    if (!o.common.out.empty()) {
        write_text_file(out_path(o.common.out, "sweep.csv"), csv.str());
        write_json_file(out_path(o.common.out, "sweep.json"), sweep_points_json(points));
    }
    std::cout << csv.str();
    return 0;
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

struct BenchOpts {
    CommonOpts common;
    std::string lengths = "128,256,512,1024,2048,4096,8192";
    std::string dtype = "f32";
    BenchConfig cfg;
};

template <typename T>
int run_bench_typed(const BenchOpts& o) {
    BenchConfig cfg = o.cfg;
    cfg.seed = o.common.seed;
    BenchReport rep = run_bench<T>(cfg);

    std::ostringstream csv;
    write_bench_csv(rep, csv);
    if (!o.common.out.empty()) {
        write_text_file(out_path(o.common.out, "bench.csv"), csv.str());
        write_json_file(out_path(o.common.out, "bench.json"), bench_report_json(rep));
    }
    std::cout << csv.str();
    std::cout << "amsu fit: " << rep.amsu_fit.slope_us_per_len << " us/token per unit length"
              << " (stderr " << rep.amsu_fit.slope_stderr << ")\n"
              << "attention fit: " << rep.attn_fit.slope_us_per_len << " us/token per unit length"
              << " (stderr " << rep.attn_fit.slope_stderr << ")\n"
              << "total " << rep.seconds << "s\n";
    return 0;
}

int run_bench_cmd(const BenchOpts& o, const Binder& b) {
    snapshot_if_out(o.common, "bench", b);
    BenchOpts r = o;
    r.cfg.seq_lengths = config_int_list("lengths", o.lengths);
    return dispatch_dtype(o.dtype, [&](auto tag) {
        return run_bench_typed<decltype(tag)>(r);
    });
}

}  // namespace

// ---------------------------------------------------------------------------
// main
// ---------------------------------------------------------------------------

int main(int argc, char** argv) {
    CLI::App app{"astrocyte-modulated spiking unit toolkit"};
    app.require_subcommand(1);
    int rc = 0;

    // verify-equivalence
    auto* vc = app.add_subcommand("verify-equivalence",
                                  "prove recurrent, parallel and chunked execution agree");
    VerifyOpts vo;
    Binder vb(vc);
    vo.common.attach(vc, vb);
    vb.opt_int(vo.cfg.trials, "--trials", "randomized configurations to test");
    vb.opt_int(vo.cfg.max_width, "--max-width", "largest hidden width sampled");
    vb.opt_int(vo.cfg.max_steps, "--max-steps", "longest sequence sampled");
    vb.opt_double(vo.cfg.tolerance, "--tolerance", "max allowed pre-activation difference");
    vb.opt_double(vo.cfg.spike_guard, "--spike-guard",
                  "threshold margin below which spike flips are forgiven");
    vb.opt_flag(vo.cfg.inject_mask_fault, "--inject-fault",
                "corrupt the decay mask to prove the suite detects it");
    vc->callback([&] {
        vb.apply_file(vo.common.config);
        vo.cfg.seed = Rng::mix(vo.common.seed, 0x65717576);
        rc = run_verify(vo, vb);
    });

    // grad-check
    auto* gc = app.add_subcommand("grad-check",
                                  "finite-difference and cross-mode backward verification");
    GradOpts go;
    Binder gb(gc);
    go.common.attach(gc, gb);
    gb.opt_int(go.cfg.layers, "--layers", "model depth");
    gb.opt_int(go.cfg.dim, "--dim", "model width");
    gb.opt_int(go.cfg.heads, "--heads", "astrocyte heads");
    gb.opt_int(go.cfg.vocab, "--vocab", "vocabulary size");
    gb.opt_int(go.cfg.steps, "--steps", "sequence length");
    gb.opt_int(go.cfg.samples_per_matrix, "--samples", "probed entries per weight matrix");
    gb.opt_double(go.cfg.fd_eps, "--fd-eps", "finite-difference step");
    gb.opt_double(go.cfg.fd_tolerance, "--fd-tolerance", "max relative error accepted");
    gb.opt_double(go.cfg.bptt_tolerance, "--bptt-tolerance",
                  "max recurrent-vs-parallel gradient difference accepted");
    gc->callback([&] {
        gb.apply_file(go.common.config);
        go.cfg.seed = Rng::mix(go.common.seed, 0x67726164);
        rc = run_grad(go, gb);
    });

    // train-lm
    auto* tc = app.add_subcommand("train-lm", "train a byte-level language model");
    TrainLmOpts to;
    Binder tb(tc);
    to.common.attach(tc, tb);
    tb.opt_str(to.corpus_path, "--corpus", "byte corpus file")->required();
    tb.opt_str(to.dtype, "--dtype", "f32 or f64");
    tb.opt_int(to.layers, "--layers", "model depth");
    tb.opt_int(to.dim, "--dim", "model width");
    tb.opt_int(to.heads, "--heads", "astrocyte heads");
    tb.opt_int(to.context, "--context", "training window, tokens");
    tb.opt_bool(to.ffn, "--ffn", "per-layer feed-forward block");
    tb.opt_bool(to.norm, "--norm", "pre-layer RMS normalization");
    tb.opt_bool(to.rope, "--rope", "rotary positions on k/q");
    tb.opt_double(to.peak_lr, "--peak-lr", "post-warmup learning rate");
    tb.opt_double(to.min_lr, "--min-lr", "cosine floor");
    tb.opt_int(to.warmup_steps, "--warmup-steps", "linear warmup length");
    tb.opt_int(to.total_steps, "--total-steps", "schedule horizon");
    tb.opt_int(to.max_steps, "--max-steps", "stop after this many steps (0: run to horizon)");
    tb.opt_double(to.weight_decay, "--weight-decay", "decoupled weight decay");
    tb.opt_double(to.clip_norm, "--clip-norm", "global gradient norm ceiling");
    tb.opt_int(to.batch, "--batch", "windows per step");
    tb.opt_double(to.heldout_frac, "--heldout-frac", "trailing fraction held out");
    tb.opt_int(to.eval_bytes, "--eval-bytes", "held-out prefix evaluated per eval");
    tb.opt_int(to.eval_every, "--eval-every", "steps between held-out evals");
    tb.opt_double(to.target_bpc, "--target-bpc", "early-stop threshold (0: off)");
    tb.opt_int(to.log_every, "--log-every", "steps between log lines");
    tb.opt_int(to.checkpoint_every, "--checkpoint-every", "steps between checkpoints (0: end only)");
    tc->callback([&] {
        tb.apply_file(to.common.config);
        rc = run_train_lm(to, tb);
    });

    // eval-lm
    auto* ec = app.add_subcommand("eval-lm", "bits-per-character on a byte corpus");
    EvalLmOpts eo;
    Binder eb(ec);
    eo.common.attach(ec, eb);
    eb.opt_str(eo.checkpoint, "--checkpoint", "model checkpoint")->required();
    eb.opt_str(eo.corpus_path, "--corpus", "byte corpus file")->required();
    eb.opt_str(eo.mode, "--mode", "recurrent, parallel or chunked");
    eb.opt_int(eo.chunk, "--chunk", "chunk length for chunked mode");
    ec->callback([&] {
        eb.apply_file(eo.common.config);
        rc = run_eval_lm(eo, eb);
    });

    // generate
    auto* ge = app.add_subcommand("generate", "sample bytes from a checkpoint, streaming");
    GenerateOpts geo;
    Binder geb(ge);
    geo.common.attach(ge, geb);
    geb.opt_str(geo.checkpoint, "--checkpoint", "model checkpoint")->required();
    geb.opt_str(geo.prompt, "--prompt", "prompt bytes")->required();
    geb.opt_int(geo.tokens, "--tokens", "bytes to generate");
    geb.opt_double(geo.temperature, "--temperature", "softmax temperature (0: argmax)");
    ge->callback([&] {
        geb.apply_file(geo.common.config);
        rc = run_generate(geo, geb);
    });

    // train-task
    auto* tt = app.add_subcommand("train-task", "train one cell on one working-memory task");
    TrainTaskOpts tto;
    Binder ttb(tt);
    tto.common.attach(tt, ttb);
    ttb.opt_str(tto.task, "--task", "memory or umbrella");
    ttb.opt_str(tto.cell, "--cell", "amsu, lif or alif");
    ttb.opt_int(tto.length, "--length", "episode gap length");
    ttb.opt_int(tto.dim, "--dim", "cell width");
    ttb.opt_int(tto.heads, "--heads", "astrocyte heads (amsu)");
    ttb.opt_int(tto.distractors, "--distractors", "umbrella distractor features");
    ttb.opt_int(tto.batch, "--batch", "episodes per step");
    ttb.opt_int(tto.max_steps, "--max-steps", "training step ceiling");
    ttb.opt_double(tto.lr, "--lr", "peak learning rate");
    ttb.opt_int(tto.eval_episodes, "--eval-episodes", "held-out episodes scored");
    tt->callback([&] {
        ttb.apply_file(tto.common.config);
        rc = run_train_task(tto, ttb);
    });

    // sweep-task
    auto* st = app.add_subcommand("sweep-task", "length sweep across cells");
    SweepTaskOpts sto;
    Binder stb(st);
    sto.common.attach(st, stb);
    stb.opt_str(sto.task, "--task", "memory or umbrella");
    stb.opt_str(sto.cells, "--cells", "comma-separated cell list");
    stb.opt_str(sto.lengths, "--lengths", "comma-separated ascending lengths");
    stb.opt_int(sto.dim, "--dim", "cell width");
    stb.opt_int(sto.heads, "--heads", "astrocyte heads (amsu)");
    stb.opt_int(sto.distractors, "--distractors", "umbrella distractor features");
    stb.opt_int(sto.batch, "--batch", "episodes per step");
    stb.opt_int(sto.max_steps, "--max-steps", "training step ceiling per point");
    stb.opt_double(sto.lr, "--lr", "peak learning rate");
    stb.opt_int(sto.eval_episodes, "--eval-episodes", "held-out episodes per point");
    stb.opt_int(sto.jobs, "--jobs", "worker threads (results identical at any count)");
    st->callback([&] {
        stb.apply_file(sto.common.config);
        rc = run_sweep_task(sto, stb);
    });

    // bench
    auto* bc = app.add_subcommand("bench", "per-token latency and state size vs context length");
    BenchOpts bo;
    Binder bb(bc);
    bo.common.attach(bc, bb);
    bb.opt_str(bo.lengths, "--lengths", "comma-separated ascending sequence lengths");
    bb.opt_str(bo.dtype, "--dtype", "f32 or f64");
    bb.opt_int(bo.cfg.dim, "--dim", "model width");
    bb.opt_int(bo.cfg.layers, "--layers", "model depth");
    bb.opt_int(bo.cfg.heads, "--heads", "heads in both systems");
    bb.opt_int(bo.cfg.vocab, "--vocab", "vocabulary size");
    bb.opt_int(bo.cfg.repeats, "--repeats", "timed blocks per length");
    bb.opt_int(bo.cfg.warmup, "--warmup", "discarded blocks per length");
    bb.opt_int(bo.cfg.probe_tokens, "--probe", "tokens timed per block");
    bc->callback([&] {
        bb.apply_file(bo.common.config);
        rc = run_bench_cmd(bo, bb);
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return rc;
}
