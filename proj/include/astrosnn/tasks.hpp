#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "astrosnn/train.hpp"

namespace astrosnn {

// ---------------------------------------------------------------------------
// Episode generators
// ---------------------------------------------------------------------------

enum class TaskKind { memory_length, umbrella };

inline const char* task_name(TaskKind k) {
    return k == TaskKind::memory_length ? "memory" : "umbrella";
}

inline TaskKind parse_task(const std::string& s) {
    if (s == "memory") return TaskKind::memory_length;
    if (s == "umbrella") return TaskKind::umbrella;
    throw ConfigError("unknown task '" + s + "' (expected memory or umbrella)");
}

enum class CellKind { amsu, lif, alif };

inline const char* cell_name(CellKind k) {
    switch (k) {
        case CellKind::amsu: return "amsu";
        case CellKind::lif: return "lif";
        default: return "alif";
    }
}

inline CellKind parse_cell(const std::string& s) {
    if (s == "amsu") return CellKind::amsu;
    if (s == "lif") return CellKind::lif;
    if (s == "alif") return CellKind::alif;
    throw ConfigError("unknown cell '" + s + "' (expected amsu, lif or alif)");
}

constexpr int64_t kUmbrellaDistractors = 20;

inline int64_t task_feature_count(TaskKind k, int64_t distractors = kUmbrellaDistractors) {
    return k == TaskKind::memory_length ? 3 : 2 + distractors;
}

template <typename T>
struct TaskEpisode {
    Tensor<T> inputs;  // steps × features
    int32_t target = 0;
    int64_t length = 0;  // the L parameter, steps = L + 2
    uint64_t seed = 0;
    TaskKind kind = TaskKind::memory_length;
};

// Cue bit as a one-hot on features 0/1 at step 0, silence for L steps, then
// a query flag on feature 2. The answer is the cue.
template <typename T>
TaskEpisode<T> gen_memory_length(int64_t L, uint64_t seed) {
    if (L < 1) throw ParameterError("memory length must be >= 1, got " + std::to_string(L));
    Rng rng(seed);
    int32_t cue = rng.coin() ? 1 : 0;
    Tensor<T> in = Tensor<T>::zeros({L + 2, 3});
    in.data()[cue] = T(1);
    in.data()[(L + 1) * 3 + 2] = T(1);
    return {in, cue, L, seed, TaskKind::memory_length};
}

// Need-bit on feature 0 at step 0 only; feature 1 flags the two decision
// points (start and final step); features 2.. carry fresh random bits on
// every intermediate step. The answer is the need-bit, so a prediction's
// regret is its 0/1 mismatch.
template <typename T>
TaskEpisode<T> gen_umbrella(int64_t L, uint64_t seed, int64_t distractors = kUmbrellaDistractors) {
    if (L < 1) throw ParameterError("umbrella length must be >= 1, got " + std::to_string(L));
    if (distractors < 1) throw ParameterError("need at least one distractor feature");
    Rng rng(seed);
    int32_t need = rng.coin() ? 1 : 0;
    int64_t width = 2 + distractors;
    Tensor<T> in = Tensor<T>::zeros({L + 2, width});
    in.data()[0] = static_cast<T>(need);
    in.data()[1] = T(1);
    for (int64_t t = 1; t <= L; ++t)
        for (int64_t j = 0; j < distractors; ++j)
            in.data()[t * width + 2 + j] = rng.coin() ? T(1) : T(0);
    in.data()[(L + 1) * width + 1] = T(1);
    return {in, need, L, seed, TaskKind::umbrella};
}

template <typename T>
TaskEpisode<T> gen_episode(TaskKind kind, int64_t L, uint64_t seed,
                           int64_t distractors = kUmbrellaDistractors) {
    return kind == TaskKind::memory_length ? gen_memory_length<T>(L, seed)
                                           : gen_umbrella<T>(L, seed, distractors);
}

// ---------------------------------------------------------------------------
// Two-layer task networks, one per cell kind
// ---------------------------------------------------------------------------

struct TaskNetConfig {
    CellKind cell = CellKind::amsu;
    int64_t in_features = 3;
    int64_t dim = 64;
    int64_t heads = 8;  // amsu only
    int64_t classes = 2;
    bool rope = true;
    double tau_mem = 2.0;
    double tau_a_min = 32.0;
    double tau_a_max = 512.0;
    // "time" reads tau as a time constant in steps (per-step retention
    // exp(-1/tau)); "step" divides by tau literally, which forgets far too
    // fast for these tasks and exists for parity with the unit contract
    std::string tau_mode = "time";
    // Operating points for spike-coded readout. The AM-SU membrane is
    // reset-free and its drive sigma(x)*R is strictly positive, so it settles
    // at sigma(x)*R/(1-retention) ~ 1.27 per unit; at v_th = 0 every unit
    // fires every step and the final-step spikes carry nothing. A negative
    // threshold here means "auto": the resting level sigma(0)*R/(1-retention),
    // which centers the spike rate at 1/2 and keeps every unit inside the
    // surrogate window. Baseline cells keep the canonical v_th = 1 and scale
    // their weights so one-hot drive reaches the window instead.
    double amsu_threshold = -1.0;
    double baseline_gain = 2.5;
    uint64_t seed = 0;

    void validate() const {
        if (in_features < 1 || dim < 1 || classes < 2)
            throw ConfigError("task net needs in_features >= 1, dim >= 1, classes >= 2");
        if (cell == CellKind::amsu && (heads < 1 || dim % heads != 0))
            throw ConfigError("amsu task net needs heads >= 1 dividing dim");
        if (!(tau_mem > 1) || !(tau_a_min > 1) || tau_a_max < tau_a_min)
            throw ConfigError("task net taus must exceed 1 with tau_a_min <= tau_a_max");
        if (tau_mode != "step" && tau_mode != "time")
            throw ConfigError("tau_mode must be 'step' or 'time', got '" + tau_mode + "'");
        if (!(baseline_gain > 0)) throw ConfigError("task net needs baseline_gain > 0");
    }
};

// Readout is a small random linear head over the final-step SPIKES of both
// layers (a skip readout). Reading spikes rather than membrane values is
// load-bearing: a leaky membrane's exponentially small residue stays
// float-representable for hundreds of silent steps, and an argmax over
// membrane readouts will happily decide on ~1e-17 logit gaps against an
// exactly-zero alternative, letting a 2-step time constant "solve" arbitrary
// gaps. A spike cannot be flipped by a sub-ulp residue, so the decision
// variable only carries suprathreshold codes.
// Both layers feed the head because the deeper layer sees dense spike trains:
// its astrocyte matrix accumulates ~min(L, tau_a) outer products, so its
// pre-activations can drift outside the surrogate window at long L, while the
// first layer's inputs stay sparse (cue and query rows only) and its code
// survives at every length.
// The head must NOT be zero-initialized: if an episode is short enough that
// the net stays silent, zero spikes and a zero head kill both gradient paths
// at once (dW_head = err * spikes = 0, dspikes = W_head^T err = 0) and
// training is stuck at ln 2 forever.
template <typename T>
class TaskNet {
public:
    CellKind cell = CellKind::amsu;
    std::vector<AmSuParams<T>> amsu;
    std::vector<LifParams<T>> lif;
    std::vector<AlifParams<T>> alif;
    Tensor<T> head;  // classes × dim

    static TaskNet build(const TaskNetConfig& c) {
        c.validate();
        TaskNet net;
        net.cell = c.cell;
        Rng rng(c.seed);
        T tau_m = static_cast<T>(effective_tau(c.tau_mem, c.tau_mode));
        int64_t d = c.dim;
        if (c.cell == CellKind::amsu) {
            auto taus_nominal = tau_schedule(c.heads, c.tau_a_min, c.tau_a_max);
            std::vector<T> taus;
            for (double t : taus_nominal) taus.push_back(static_cast<T>(effective_tau(t, c.tau_mode)));
            double th = c.amsu_threshold;
            if (th < 0) th = 0.5 / (1.0 - 1.0 / static_cast<double>(tau_m));
            net.amsu.push_back(AmSuParams<T>::init(c.in_features, d, c.heads, taus, rng, c.rope,
                                                   tau_m, static_cast<T>(th)));
            net.amsu.push_back(
                AmSuParams<T>::init(d, d, c.heads, taus, rng, c.rope, tau_m, static_cast<T>(th)));
            // The astrocyte readout o = H'q accumulates ~min(L, tau_a) outer
            // products, so with random q its magnitude grows with episode
            // length and by L ~ 100 it throws every unit far outside the
            // surrogate window (dead gradients at exactly the lengths this
            // task exists to probe). Zero-init q makes o vanish at init, so
            // pre-activations start at the centered membrane level at every
            // length; q then grows only as fast as its own gradient, which
            // dies off again if o ever overshoots the window.
            for (auto& p : net.amsu) p.w_q = Tensor<T>::zeros(p.w_q.shape());
        } else if (c.cell == CellKind::lif) {
            for (int64_t din : {c.in_features, d}) {
                LifParams<T> p;
                p.w = Tensor<T>::randn({d, din}, rng,
                                       static_cast<T>(c.baseline_gain) / std::sqrt(static_cast<T>(din)));
                p.tau = tau_m;
                net.lif.push_back(p);
            }
        } else {
            for (int64_t din : {c.in_features, d}) {
                AlifParams<T> p;
                p.w = Tensor<T>::randn({d, din}, rng,
                                       static_cast<T>(c.baseline_gain) / std::sqrt(static_cast<T>(din)));
                p.w_rec = Tensor<T>::randn({d, d}, rng,
                                           static_cast<T>(c.baseline_gain) / std::sqrt(static_cast<T>(d)));
                p.tau = tau_m;
                net.alif.push_back(p);
            }
        }
        net.head =
            Tensor<T>::randn({c.classes, 2 * d}, rng, T(1) / std::sqrt(static_cast<T>(2 * d)));
        return net;
    }

    // inputs: steps × in_features. Baseline cells always run stepwise; the
    // mode argument only selects the amsu execution path.
    Tensor<T> logits(const Tensor<T>& inputs, ExecMode mode = ExecMode::parallel,
                     SpikeMode spike_mode = SpikeMode::hard, int64_t chunk = 16) {
        int64_t steps = inputs.shape()[0];
        Tensor<T> last0, last1;
        if (cell == CellKind::amsu) {
            ForwardOut<T> a = forward(amsu[0], inputs, mode, chunk, spike_mode);
            ForwardOut<T> b = forward(amsu[1], a.spikes, mode, chunk, spike_mode);
            last0 = slice_rows(a.spikes, steps - 1, steps);
            last1 = slice_rows(b.spikes, steps - 1, steps);
        } else if (cell == CellKind::lif) {
            Tensor<T> u0 = Tensor<T>::zeros({1, lif[0].w.shape()[0]});
            Tensor<T> u1 = Tensor<T>::zeros({1, lif[1].w.shape()[0]});
            for (int64_t t = 0; t < steps; ++t) {
                StepOut<T> a = lif_step(lif[0], u0, slice_rows(inputs, t, t + 1));
                StepOut<T> b = lif_step(lif[1], u1, a.spikes);
                if (t == steps - 1) {
                    last0 = a.spikes;
                    last1 = b.spikes;
                }
            }
        } else {
            AlifState<T> s0 = AlifState<T>::zero(alif[0]);
            AlifState<T> s1 = AlifState<T>::zero(alif[1]);
            for (int64_t t = 0; t < steps; ++t) {
                StepOut<T> a = alif_step(alif[0], s0, slice_rows(inputs, t, t + 1));
                StepOut<T> b = alif_step(alif[1], s1, a.spikes);
                if (t == steps - 1) {
                    last0 = a.spikes;
                    last1 = b.spikes;
                }
            }
        }
        return matmul_nt(concat_cols(std::vector<Tensor<T>>{last0, last1}), head);
    }

    int32_t predict(const Tensor<T>& inputs, ExecMode mode = ExecMode::parallel) {
        Tensor<T> lg = logits(inputs, mode);
        int32_t best = 0;
        for (int64_t j = 1; j < lg.shape()[1]; ++j)
            if (lg.data()[j] > lg.data()[best]) best = static_cast<int32_t>(j);
        return best;
    }

    std::vector<Tensor<T>*> params() {
        std::vector<Tensor<T>*> out;
        for (auto& p : amsu)
            for (Tensor<T>* w : p.weights()) out.push_back(w);
        for (auto& p : lif) out.push_back(&p.w);
        for (auto& p : alif) {
            out.push_back(&p.w);
            out.push_back(&p.w_rec);
        }
        out.push_back(&head);
        return out;
    }
};

// ---------------------------------------------------------------------------
// Supervised training on generated episodes
// ---------------------------------------------------------------------------

struct TaskTrainConfig {
    int64_t batch = 16;
    int64_t max_steps = 500;
    double lr = 1e-3;
    double clip = 1.0;
    int64_t eval_episodes = 500;
    // stop once this many consecutive batches were classified perfectly
    int64_t settle_batches = 6;
    uint64_t seed = 0;

    void validate() const {
        if (batch < 1 || max_steps < 1 || eval_episodes < 1)
            throw ParameterError("task training needs positive batch, steps and eval episodes");
        if (!(lr > 0) || !(clip > 0)) throw ParameterError("lr and clip must be positive");
    }
};

template <typename T>
struct TaskOutcome {
    int64_t train_steps = 0;
    double metric = 0;                // held-out error rate / mean regret
    std::vector<double> per_episode;  // 0/1 losses, for resampled intervals
};

namespace detail {
inline uint64_t train_episode_seed(uint64_t seed, int64_t step, int64_t batch, int64_t b) {
    return Rng::mix(Rng::mix(seed, 0x7261696eULL), static_cast<uint64_t>(step * batch + b));
}
inline uint64_t eval_episode_seed(uint64_t seed, int64_t i) {
    return Rng::mix(Rng::mix(seed, 0x6576616cULL), static_cast<uint64_t>(i));
}
}  // namespace detail

// Trains a fresh episode batch per step (no finite dataset to overfit) and
// scores held-out episodes from a disjoint seed stream.
template <typename T>
TaskOutcome<T> train_task(TaskNet<T>& net, TaskKind kind, int64_t length,
                          const TaskTrainConfig& tc,
                          int64_t distractors = kUmbrellaDistractors) {
    tc.validate();
    auto params = net.params();

    OptimConfig oc;
    oc.peak_lr = tc.lr;
    oc.min_lr = tc.lr / 10;
    oc.warmup_steps = std::min<int64_t>(20, tc.max_steps - 1);
    oc.total_steps = tc.max_steps;
    oc.weight_decay = 0;
    oc.clip_norm = tc.clip;
    auto state = OptimState<T>::init(params);
    std::vector<bool> decay(params.size(), false);

    TaskOutcome<T> out;
    int64_t settled = 0;
    for (int64_t s = 0; s < tc.max_steps; ++s) {
        Tape<T> tape;
        for (Tensor<T>* p : params) tape.watch(*p);

        Tensor<T> loss;
        int64_t correct = 0;
        for (int64_t b = 0; b < tc.batch; ++b) {
            auto ep = gen_episode<T>(kind, length, detail::train_episode_seed(tc.seed, s, tc.batch, b),
                                     distractors);
            Tensor<T> lg = net.logits(ep.inputs);
            int32_t pred = 0;
            for (int64_t j = 1; j < lg.shape()[1]; ++j)
                if (lg.data()[j] > lg.data()[pred]) pred = static_cast<int32_t>(j);
            if (pred == ep.target) ++correct;
            Tensor<T> ce = cross_entropy_logits(lg, {ep.target});
            loss = b == 0 ? ce : add(loss, ce);
        }
        // Settle check comes BEFORE the update. A spike readout is a step
        // function of the parameters, so one more optimizer step after a
        // perfect batch can flip every decision at once; stopping here keeps
        // exactly the parameters the final batch validated.
        settled = correct == tc.batch ? settled + 1 : 0;
        if (settled >= tc.settle_batches) break;

        loss = scale(loss, T(1) / static_cast<T>(tc.batch));
        tape.backward(loss);
        clip_gradients(params, oc.clip_norm);
        adam_step(params, decay, state, oc, lr_at(oc, s));
        out.train_steps = s + 1;
    }

    for (int64_t i = 0; i < tc.eval_episodes; ++i) {
        auto ep = gen_episode<T>(kind, length, detail::eval_episode_seed(tc.seed, i), distractors);
        out.per_episode.push_back(net.predict(ep.inputs) == ep.target ? 0.0 : 1.0);
    }
    double sum = 0;
    for (double e : out.per_episode) sum += e;
    out.metric = sum / static_cast<double>(out.per_episode.size());
    return out;
}

// ---------------------------------------------------------------------------
// Length sweep
// ---------------------------------------------------------------------------

struct SweepPoint {
    TaskKind task;
    CellKind cell;
    int64_t length = 0;
    int64_t train_steps = 0;
    std::string metric_name;
    double metric_value = 0;
    uint64_t seed = 0;
};

inline void write_sweep_csv_header(std::ostream& os) {
    os << "task,cell,length,train_steps,metric_name,metric_value,seed\n";
}

inline void write_sweep_csv_row(std::ostream& os, const SweepPoint& p) {
    os << task_name(p.task) << ',' << cell_name(p.cell) << ',' << p.length << ',' << p.train_steps
       << ',' << p.metric_name << ',' << p.metric_value << ',' << p.seed << '\n';
}

// Geometric grid rounded to unique integers, ascending.
inline std::vector<int64_t> log_spaced_lengths(int64_t lo, int64_t hi, int64_t n) {
    if (lo < 1 || hi < lo || n < 1) throw ParameterError("bad length grid");
    std::vector<int64_t> out;
    for (int64_t i = 0; i < n; ++i) {
        double f = n == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1);
        auto v = static_cast<int64_t>(std::llround(
            static_cast<double>(lo) * std::pow(static_cast<double>(hi) / static_cast<double>(lo), f)));
        if (out.empty() || v > out.back()) out.push_back(v);
    }
    return out;
}

// One point of a length sweep: fresh model, derived seeds, full train + eval.
// Points are independently reproducible (and therefore safe to compute in
// any order or concurrently).
template <typename T>
SweepPoint sweep_point(TaskKind kind, CellKind cell, int64_t length, TaskNetConfig netcfg,
                       TaskTrainConfig tc, int64_t distractors = kUmbrellaDistractors) {
    netcfg.cell = cell;
    netcfg.in_features = task_feature_count(kind, distractors);
    netcfg.seed = Rng::mix(netcfg.seed, static_cast<uint64_t>(length));
    tc.seed = Rng::mix(tc.seed, static_cast<uint64_t>(length) * 2 + 1);
    auto net = TaskNet<T>::build(netcfg);
    auto outcome = train_task(net, kind, length, tc, distractors);
    const char* metric = kind == TaskKind::memory_length ? "error_rate" : "mean_regret";
    return SweepPoint{kind, cell, length, outcome.train_steps, metric, outcome.metric, tc.seed};
}

// One fresh model per length; per-length seeds are derived so points are
// independently reproducible.
template <typename T>
std::vector<SweepPoint> sweep_task(TaskKind kind, CellKind cell,
                                   const std::vector<int64_t>& lengths, TaskNetConfig netcfg,
                                   TaskTrainConfig tc, std::ostream* csv = nullptr,
                                   int64_t distractors = kUmbrellaDistractors) {
    if (lengths.empty()) throw ParameterError("sweep needs at least one length");
    for (size_t i = 0; i + 1 < lengths.size(); ++i)
        if (lengths[i] >= lengths[i + 1])
            throw ParameterError("sweep lengths must be strictly ascending");

    if (csv) write_sweep_csv_header(*csv);
    std::vector<SweepPoint> points;
    for (int64_t L : lengths) {
        SweepPoint p = sweep_point<T>(kind, cell, L, netcfg, tc, distractors);
        points.push_back(p);
        if (csv) write_sweep_csv_row(*csv, p);
    }
    return points;
}

// ---------------------------------------------------------------------------
// Bootstrap confidence interval for a mean
// ---------------------------------------------------------------------------

struct BootCI {
    double mean = 0;
    double lo = 0;
    double hi = 0;
};

inline BootCI bootstrap_mean_ci(const std::vector<double>& xs, uint64_t seed,
                                int64_t resamples = 2000, double conf = 0.95) {
    if (xs.empty()) throw DataError("bootstrap over an empty sample");
    if (!(conf > 0 && conf < 1)) throw ParameterError("confidence must lie in (0,1)");
    double sum = 0;
    for (double x : xs) sum += x;
    BootCI ci;
    ci.mean = sum / static_cast<double>(xs.size());

    Rng rng(seed);
    std::vector<double> means;
    means.reserve(static_cast<size_t>(resamples));
    for (int64_t r = 0; r < resamples; ++r) {
        double s = 0;
        for (size_t i = 0; i < xs.size(); ++i) s += xs[rng.below(xs.size())];
        means.push_back(s / static_cast<double>(xs.size()));
    }
    std::sort(means.begin(), means.end());
    auto quantile = [&](double q) {
        double pos = q * static_cast<double>(means.size() - 1);
        auto i = static_cast<size_t>(pos);
        double frac = pos - static_cast<double>(i);
        if (i + 1 >= means.size()) return means.back();
        return means[i] * (1 - frac) + means[i + 1] * frac;
    };
    ci.lo = quantile((1 - conf) / 2);
    ci.hi = quantile(1 - (1 - conf) / 2);
    return ci;
}

}  // namespace astrosnn
