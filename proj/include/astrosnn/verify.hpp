#pragma once

// Randomized verification suites shared by the CLI and the acceptance tests:
//
//   equivalence_suite  -- recurrent, parallel, and chunked execution of the
//                         same unit on the same input must produce identical
//                         pre-activations (to tolerance) and identical spikes
//                         away from the threshold. An opt-in injected fault
//                         corrupts the decay mask so callers can confirm the
//                         suite actually detects a wrong mask.
//   grad_suite         -- smooth-relaxation gradients of a small model against
//                         central finite differences, plus agreement of the
//                         backward pass across execution modes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "astrosnn/amsu.hpp"
#include "astrosnn/model.hpp"
#include "astrosnn/tensor.hpp"

namespace astrosnn {

inline double monotonic_seconds() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

// ---------------------------------------------------------------------------
// Mode equivalence
// ---------------------------------------------------------------------------

struct EquivConfig {
    int64_t trials = 200;
    int64_t max_width = 32;  // width ceiling; heads sampled from {1, 2, 4}
    int64_t max_steps = 64;
    double tolerance = 1e-10;   // max abs pre-activation difference, 64-bit
    double spike_guard = 1e-8;  // spikes must agree where |pre - v_th| exceeds this
    uint64_t seed = 20260818;
    bool inject_mask_fault = false;  // negative control: skew the decay-mask exponent

    void validate() const {
        if (trials < 1) throw ParameterError("equivalence suite needs at least one trial");
        if (max_width < 4 || max_steps < 1)
            throw ParameterError("equivalence suite needs max_width >= 4 and max_steps >= 1");
        if (!(tolerance > 0) || !(spike_guard > 0))
            throw ParameterError("equivalence tolerances must be positive");
    }
};

struct EquivTrial {
    int64_t index = 0;
    int64_t d = 0;
    int64_t heads = 0;
    int64_t steps = 0;
    int64_t chunk = 0;
    uint64_t seed = 0;
    double max_pre_diff = 0;       // worst pairing of the three modes
    int64_t spike_mismatches = 0;  // disagreements away from the threshold
    bool pass = false;
};

struct EquivReport {
    std::vector<EquivTrial> trials;
    double tolerance = 0;
    int64_t failures = 0;
    double seconds = 0;
    bool pass = false;
};

// Restores a clean mask on every exit path so a throwing trial cannot leave
// the fault armed for unrelated code.
class MaskFaultScope {
public:
    explicit MaskFaultScope(bool on) {
        if (on) decay_mask_fault_skew() = 1;
    }
    ~MaskFaultScope() { decay_mask_fault_skew() = 0; }
    MaskFaultScope(const MaskFaultScope&) = delete;
    MaskFaultScope& operator=(const MaskFaultScope&) = delete;
};

namespace detail {

inline double log_uniform(Rng& rng, double lo, double hi) {
    return std::exp(std::log(lo) + rng.uniform() * (std::log(hi) - std::log(lo)));
}

}  // namespace detail

inline EquivReport equivalence_suite(const EquivConfig& cfg) {
    cfg.validate();
    double t0 = monotonic_seconds();
    MaskFaultScope fault(cfg.inject_mask_fault);
    EquivReport rep;
    rep.tolerance = cfg.tolerance;
    for (int64_t i = 0; i < cfg.trials; ++i) {
        EquivTrial tr;
        tr.index = i;
        tr.seed = Rng::mix(cfg.seed, static_cast<uint64_t>(i));
        Rng rng(tr.seed);

        static constexpr int64_t kHeadChoices[3] = {1, 2, 4};
        tr.heads = kHeadChoices[rng.below(3)];
        bool rope = rng.below(2) == 0;
        int64_t max_hd = cfg.max_width / tr.heads;
        int64_t head_dim;
        if (rope) {  // rotary pairs require an even head dimension
            int64_t max_half = std::max<int64_t>(1, max_hd / 2);
            head_dim = 2 * (1 + static_cast<int64_t>(rng.below(static_cast<uint64_t>(max_half))));
        } else {
            head_dim = 1 + static_cast<int64_t>(rng.below(static_cast<uint64_t>(max_hd)));
        }
        tr.d = tr.heads * head_dim;
        // trial 0 pins the single-step degenerate case, which must always pass
        tr.steps = (i == 0) ? 1
                            : 1 + static_cast<int64_t>(
                                      rng.below(static_cast<uint64_t>(cfg.max_steps)));
        tr.chunk = 1 + static_cast<int64_t>(rng.below(static_cast<uint64_t>(tr.steps)));
        int64_t d_in = 1 + static_cast<int64_t>(rng.below(6));

        std::vector<double> taus;
        for (int64_t h = 0; h < tr.heads; ++h) taus.push_back(detail::log_uniform(rng, 1.2, 600.0));
        double tau_n = detail::log_uniform(rng, 1.1, 8.0);
        double v_th = -0.25 + rng.uniform();
        double r = 0.5 + rng.uniform();

        std::vector<double> taus_d(taus.begin(), taus.end());
        AmSuParams<double> p = AmSuParams<double>::init(d_in, tr.d, tr.heads, taus_d, rng, rope,
                                                        tau_n, v_th, r);
        Tensor<double> input = Tensor<double>::randn({tr.steps, d_in}, rng, 1.0);

        ForwardOut<double> rec = forward(p, input, ExecMode::recurrent);
        ForwardOut<double> par = forward(p, input, ExecMode::parallel);
        ForwardOut<double> chk = forward(p, input, ExecMode::chunked, tr.chunk);

        const ForwardOut<double>* outs[3] = {&rec, &par, &chk};
        for (int a = 0; a < 3; ++a) {
            for (int b = a + 1; b < 3; ++b) {
                for (int64_t j = 0; j < rec.pre.size(); ++j) {
                    double pa = outs[a]->pre.data()[j];
                    double pb = outs[b]->pre.data()[j];
                    tr.max_pre_diff = std::max(tr.max_pre_diff, std::abs(pa - pb));
                    if (outs[a]->spikes.data()[j] != outs[b]->spikes.data()[j] &&
                        std::min(std::abs(pa - v_th), std::abs(pb - v_th)) > cfg.spike_guard)
                        ++tr.spike_mismatches;
                }
            }
        }
        tr.pass = tr.max_pre_diff < cfg.tolerance && tr.spike_mismatches == 0;
        if (!tr.pass) ++rep.failures;
        rep.trials.push_back(tr);
    }
    rep.pass = rep.failures == 0;
    rep.seconds = monotonic_seconds() - t0;
    return rep;
}

inline void write_equiv_csv(const EquivReport& rep, std::ostream& os) {
    os << "trial,d,heads,steps,chunk,seed,max_pre_diff,spike_mismatches,pass\n";
    char buf[64];
    for (const EquivTrial& t : rep.trials) {
        std::snprintf(buf, sizeof buf, "%.6e", t.max_pre_diff);
        os << t.index << ',' << t.d << ',' << t.heads << ',' << t.steps << ',' << t.chunk << ','
           << t.seed << ',' << buf << ',' << t.spike_mismatches << ',' << (t.pass ? 1 : 0)
           << '\n';
    }
}

// ---------------------------------------------------------------------------
// Gradient checks
// ---------------------------------------------------------------------------

struct GradConfig {
    int64_t layers = 2;
    int64_t dim = 8;
    int64_t heads = 2;
    int64_t vocab = 11;
    int64_t steps = 6;
    int64_t samples_per_matrix = 4;  // finite-difference probes per tensor; 0 = vacuous pass
    double fd_eps = 1e-5;
    double fd_tolerance = 1e-4;    // relative error against central differences
    double bptt_tolerance = 1e-8;  // abs gradient difference across execution modes
    uint64_t seed = 97;

    void validate() const {
        if (layers < 1 || dim < 1 || heads < 1 || vocab < 2 || steps < 2)
            throw ParameterError("grad suite needs layers,dim,heads >= 1, vocab >= 2, steps >= 2");
        if (samples_per_matrix < 0) throw ParameterError("samples_per_matrix must be >= 0");
        if (!(fd_eps > 0) || !(fd_tolerance > 0) || !(bptt_tolerance > 0))
            throw ParameterError("grad tolerances must be positive");
    }
};

struct GradEntry {
    std::string name;
    int64_t samples = 0;
    double max_rel_err = 0;
    bool pass = false;
};

// Histogram buckets cover relative errors by decade: bucket k holds
// [1e-(16-k), 1e-(15-k)) for k in 0..15, bucket 16 holds everything >= 0.1.
// Errors below 1e-16 (or exact zeros) land in bucket 0.
inline constexpr int kGradHistBuckets = 17;

inline int grad_hist_bucket(double rel) {
    if (!(rel > 1e-16)) return 0;
    int b = 16 + static_cast<int>(std::floor(std::log10(rel)));
    return std::clamp(b, 0, kGradHistBuckets - 1);
}

inline std::string grad_hist_label(int bucket) {
    if (bucket <= 0) return "<1e-15";
    if (bucket >= kGradHistBuckets - 1) return ">=1e-1";
    char buf[32];
    std::snprintf(buf, sizeof buf, "1e-%d", 16 - bucket);
    return buf;
}

struct GradReport {
    std::vector<GradEntry> entries;
    std::vector<int64_t> rel_err_histogram = std::vector<int64_t>(kGradHistBuckets, 0);
    double max_rel_err = 0;
    double bptt_max_diff = 0;
    double seconds = 0;
    bool pass = false;
};

namespace detail {

template <typename T>
double smooth_lm_loss(Model<T>& m, const std::vector<int32_t>& tokens,
                      const std::vector<int32_t>& targets, ExecMode mode, int64_t chunk) {
    Tensor<T> logits = forward_lm(m, tokens, mode, chunk, SpikeMode::smooth);
    Tensor<T> loss = cross_entropy_logits(logits, targets);
    return static_cast<double>(mean(loss).data()[0]);
}

}  // namespace detail

// The model is evaluated with the smooth spike relaxation end to end, which
// makes the loss differentiable and the finite-difference oracle exact up to
// truncation error. Hard-spike backward weights are covered separately by the
// surrogate contract tests.
inline GradReport grad_suite(const GradConfig& cfg) {
    cfg.validate();
    double t0 = monotonic_seconds();
    GradReport rep;

    ModelConfig mc;
    mc.layers = cfg.layers;
    mc.dim = cfg.dim;
    mc.heads = cfg.heads;
    mc.vocab = cfg.vocab;
    mc.context_len = cfg.steps;
    mc.ffn = true;  // cover the feed-forward backward path too
    mc.dtype = "f64";
    mc.seed = cfg.seed;
    Model<double> m = Model<double>::build(mc);

    Rng rng(Rng::mix(cfg.seed, 0x67726164));
    // The freshly built head is all zeros (untrained models predict the
    // uniform distribution), which would zero every upstream gradient and turn
    // the finite-difference comparison into 0 == 0. Checking gradients at a
    // generic point requires a non-degenerate head.
    m.head = Tensor<double>::randn(m.head.shape(), rng,
                                   1.0 / std::sqrt(static_cast<double>(cfg.dim)));
    std::vector<int32_t> tokens, targets;
    for (int64_t t = 0; t < cfg.steps; ++t) {
        tokens.push_back(static_cast<int32_t>(rng.below(static_cast<uint64_t>(cfg.vocab))));
        targets.push_back(static_cast<int32_t>(rng.below(static_cast<uint64_t>(cfg.vocab))));
    }

    auto named = m.named_params();

    // analytic gradients, parallel mode
    std::vector<std::vector<double>> grads_par;
    {
        Tape<double> tape;
        for (auto& [name, t] : named) tape.watch(*t);
        Tensor<double> logits = forward_lm(m, tokens, ExecMode::parallel, 16, SpikeMode::smooth);
        Tensor<double> loss = mean(cross_entropy_logits(logits, targets));
        tape.backward(loss);
        for (auto& [name, t] : named)
            grads_par.emplace_back(t->node()->grad.begin(), t->node()->grad.end());
    }

    // the same gradients through the recurrent and chunked paths
    for (ExecMode mode : {ExecMode::recurrent, ExecMode::chunked}) {
        Tape<double> tape;
        for (auto& [name, t] : named) tape.watch(*t);
        Tensor<double> logits = forward_lm(m, tokens, mode, 3, SpikeMode::smooth);
        Tensor<double> loss = mean(cross_entropy_logits(logits, targets));
        tape.backward(loss);
        for (size_t i = 0; i < named.size(); ++i) {
            const auto& g = named[i].second->node()->grad;
            for (size_t j = 0; j < g.size(); ++j)
                rep.bptt_max_diff =
                    std::max(rep.bptt_max_diff, std::abs(g[j] - grads_par[i][j]));
        }
    }

    // central finite differences on sampled entries of every tensor
    for (size_t i = 0; i < named.size(); ++i) {
        auto& [name, tensor] = named[i];
        GradEntry entry;
        entry.name = name;
        int64_t n = tensor->size();
        int64_t samples = std::min<int64_t>(cfg.samples_per_matrix, n);
        Rng srng(Rng::mix(cfg.seed, static_cast<uint64_t>(0xfd00 + i)));
        for (int64_t s = 0; s < samples; ++s) {
            int64_t idx = static_cast<int64_t>(srng.below(static_cast<uint64_t>(n)));
            double w0 = tensor->data()[idx];
            double eps = cfg.fd_eps * std::max(1.0, std::abs(w0));
            tensor->data()[idx] = w0 + eps;
            double fp = detail::smooth_lm_loss(m, tokens, targets, ExecMode::parallel, 16);
            tensor->data()[idx] = w0 - eps;
            double fm = detail::smooth_lm_loss(m, tokens, targets, ExecMode::parallel, 16);
            tensor->data()[idx] = w0;
            double fd = (fp - fm) / (2 * eps);
            double g = grads_par[i][static_cast<size_t>(idx)];
            double denom = std::max({std::abs(g), std::abs(fd), 1e-12});
            double rel = (std::abs(g) < 1e-12 && std::abs(fd) < 1e-12)
                             ? 0.0
                             : std::abs(g - fd) / denom;
            entry.max_rel_err = std::max(entry.max_rel_err, rel);
            ++rep.rel_err_histogram[static_cast<size_t>(grad_hist_bucket(rel))];
        }
        entry.samples = samples;
        entry.pass = entry.max_rel_err < cfg.fd_tolerance;
        rep.max_rel_err = std::max(rep.max_rel_err, entry.max_rel_err);
        rep.entries.push_back(std::move(entry));
    }

    bool fd_ok = true;
    for (const GradEntry& e : rep.entries) fd_ok = fd_ok && e.pass;
    rep.pass = fd_ok && rep.bptt_max_diff < cfg.bptt_tolerance;
    rep.seconds = monotonic_seconds() - t0;
    return rep;
}

inline void write_grad_csv(const GradReport& rep, std::ostream& os) {
    os << "tensor,samples,max_rel_err,pass\n";
    char buf[64];
    for (const GradEntry& e : rep.entries) {
        std::snprintf(buf, sizeof buf, "%.6e", e.max_rel_err);
        os << e.name << ',' << e.samples << ',' << buf << ',' << (e.pass ? 1 : 0) << '\n';
    }
}

}  // namespace astrosnn
