#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "astrosnn/checkpoint.hpp"
#include "astrosnn/model.hpp"

namespace astrosnn {

// ---------------------------------------------------------------------------
// Optimizer configuration and state
// ---------------------------------------------------------------------------

struct OptimConfig {
    double peak_lr = 2.5e-4;
    double min_lr = 6e-5;
    int64_t warmup_steps = 100;   // desk scale; the reference regimen used 1000
    int64_t total_steps = 20000;  // reference regimen: 600k
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-8;
    double weight_decay = 0.1;
    double clip_norm = 1.0;
    int64_t batch = 8;    // sequences per step
    int64_t window = 256; // tokens per sequence

    int64_t batch_tokens() const { return batch * window; }

    void validate() const {
        if (!(min_lr > 0) || !(min_lr <= peak_lr))
            throw ParameterError("need 0 < min_lr <= peak_lr");
        if (warmup_steps < 0 || warmup_steps >= total_steps)
            throw ParameterError("need 0 <= warmup_steps < total_steps");
        if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
            throw ParameterError("betas must lie in [0,1)");
        if (batch < 1 || window < 2) throw ParameterError("batch >= 1 and window >= 2 required");
        if (!(clip_norm > 0)) throw ParameterError("clip_norm must be positive");
    }
};

// Linear warmup to peak_lr, then cosine decay to min_lr. Exact at the
// endpoints: lr_at(warmup) = peak, lr_at(total) = min.
inline double lr_at(const OptimConfig& c, int64_t step) {
    if (step <= 0) return c.warmup_steps > 0 ? 0.0 : c.peak_lr;
    if (step < c.warmup_steps)
        return c.peak_lr * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
    if (step == c.warmup_steps) return c.peak_lr;  // exact, not via cos(0) arithmetic
    if (step >= c.total_steps) return c.min_lr;
    double progress = static_cast<double>(step - c.warmup_steps) /
                      static_cast<double>(c.total_steps - c.warmup_steps);
    return c.min_lr + (c.peak_lr - c.min_lr) * (1.0 + std::cos(progress * M_PI)) / 2.0;
}

template <typename T>
struct OptimState {
    std::vector<std::vector<T>> m;  // first moments, one buffer per parameter
    std::vector<std::vector<T>> v;  // second moments
    int64_t step = 0;

    static OptimState init(const std::vector<Tensor<T>*>& params) {
        OptimState s;
        for (const Tensor<T>* p : params) {
            s.m.emplace_back(static_cast<size_t>(p->size()), T(0));
            s.v.emplace_back(static_cast<size_t>(p->size()), T(0));
        }
        return s;
    }
};

// ---------------------------------------------------------------------------
// Gradient clipping and the Adam update
// ---------------------------------------------------------------------------

// Returns the pre-clip global L2 norm; scales every gradient in place when it
// exceeds max_norm.
template <typename T>
double clip_gradients(const std::vector<Tensor<T>*>& params, double max_norm) {
    double sq = 0;
    for (Tensor<T>* p : params) {
        const auto& g = p->node()->grad;
        for (T x : g) {
            if (!std::isfinite(static_cast<double>(x)))
                throw NumericError("non-finite gradient while clipping");
            sq += static_cast<double>(x) * static_cast<double>(x);
        }
    }
    double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0) {
        T s = static_cast<T>(max_norm / norm);
        for (Tensor<T>* p : params)
            for (T& x : p->node()->grad) x *= s;
    }
    return norm;
}

// Bias-corrected Adam with decoupled weight decay. Decay multiplies the
// parameter by (1 - lr·wd) before the Adam delta, and only where
// decay_mask_flags is set. Aborts before mutating anything if any gradient
// is non-finite.
template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params, const std::vector<bool>& decay_flags,
               OptimState<T>& st, const OptimConfig& c, double lr) {
    if (params.size() != st.m.size() || params.size() != decay_flags.size())
        throw ShapeError("optimizer state does not mirror the parameter list");
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& g = params[i]->node()->grad;
        if (g.size() != st.m[i].size())
            throw ShapeError("moment buffer " + std::to_string(i) + " shape mismatch");
        for (T x : g)
            if (!std::isfinite(static_cast<double>(x)))
                throw NumericError("non-finite gradient in parameter " + std::to_string(i) +
                                   "; optimizer step aborted");
    }

    st.step += 1;
    double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.step));
    double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.step));

    for (size_t i = 0; i < params.size(); ++i) {
        T* p = params[i]->data();
        const auto& g = params[i]->node()->grad;
        auto& m = st.m[i];
        auto& v = st.v[i];
        T decay_mult = static_cast<T>(1.0 - (decay_flags[i] ? lr * c.weight_decay : 0.0));
        for (size_t j = 0; j < g.size(); ++j) {
            p[j] *= decay_mult;
            m[j] = static_cast<T>(c.beta1) * m[j] + static_cast<T>(1.0 - c.beta1) * g[j];
            v[j] = static_cast<T>(c.beta2) * v[j] + static_cast<T>(1.0 - c.beta2) * g[j] * g[j];
            double m_hat = static_cast<double>(m[j]) / bc1;
            double v_hat = static_cast<double>(v[j]) / bc2;
            p[j] -= static_cast<T>(lr * m_hat / (std::sqrt(v_hat) + c.eps));
        }
    }
}

// ---------------------------------------------------------------------------
// Language-model trainer
// ---------------------------------------------------------------------------

struct StepLog {
    int64_t step = 0;
    double loss_nats = 0;
    double bpc = 0;
    double lr = 0;
    double grad_norm = 0;
    double tokens_per_sec = 0;
};

inline void write_csv_header(std::ostream& os) {
    os << "step,loss_nats,bpc,lr,grad_norm,tokens_per_sec\n";
}

inline void write_csv_row(std::ostream& os, const StepLog& r) {
    os << r.step << ',' << r.loss_nats << ',' << r.bpc << ',' << r.lr << ',' << r.grad_norm
       << ',' << r.tokens_per_sec << '\n';
}

// Owns the optimizer state for one model. Window sampling is stateless in
// the step counter (seed mixed with the step index), so a resumed run draws
// the same batches as an uninterrupted one.
template <typename T>
class Trainer {
public:
    Trainer(Model<T>& model, OptimConfig cfg, uint64_t data_seed)
        : model_(&model), cfg_(cfg), data_seed_(data_seed) {
        cfg_.validate();
        collect_params();
        state_ = OptimState<T>::init(params_);
    }

    // One optimization step over `batch` windows sampled from the corpus.
    StepLog step(const std::vector<int32_t>& corpus) {
        int64_t n = static_cast<int64_t>(corpus.size());
        if (n < cfg_.window + 1)
            throw DataError("corpus of " + std::to_string(n) + " tokens is shorter than one " +
                            std::to_string(cfg_.window) + "-token window");
        auto t0 = std::chrono::steady_clock::now();

        Tape<T> tape;
        for (Tensor<T>* p : params_) tape.watch(*p);

        Rng rng(Rng::mix(data_seed_, static_cast<uint64_t>(state_.step)));
        std::vector<Tensor<T>> losses;
        for (int64_t b = 0; b < cfg_.batch; ++b) {
            int64_t start = static_cast<int64_t>(rng.below(static_cast<uint64_t>(n - cfg_.window)));
            std::vector<int32_t> tokens(corpus.begin() + start, corpus.begin() + start + cfg_.window);
            std::vector<int32_t> targets(corpus.begin() + start + 1,
                                         corpus.begin() + start + 1 + cfg_.window);
            Tensor<T> logits = forward_lm(*model_, tokens, ExecMode::parallel);
            losses.push_back(cross_entropy_logits(logits, targets));
        }
        Tensor<T> loss = losses[0];
        for (size_t b = 1; b < losses.size(); ++b) loss = add(loss, losses[b]);
        loss = scale(loss, T(1) / static_cast<T>(cfg_.batch));

        tape.backward(loss);
        double gnorm = clip_gradients(params_, cfg_.clip_norm);
        double lr = lr_at(cfg_, state_.step);
        adam_step(params_, decay_flags_, state_, cfg_, lr);

        auto t1 = std::chrono::steady_clock::now();
        double secs = std::chrono::duration<double>(t1 - t0).count();

        StepLog log;
        log.step = state_.step;  // post-increment count: first step logs as 1
        log.loss_nats = static_cast<double>(loss.item());
        log.bpc = log.loss_nats / std::log(2.0);
        log.lr = lr;
        log.grad_norm = gnorm;
        log.tokens_per_sec = secs > 0 ? static_cast<double>(cfg_.batch_tokens()) / secs : 0;
        return log;
    }

    int64_t steps_done() const { return state_.step; }
    const OptimConfig& config() const { return cfg_; }

    void save(const std::string& path) const {
        std::vector<std::pair<std::string, const Tensor<T>*>> extra;
        std::vector<Tensor<T>> moment_tensors;
        auto named = model_->named_params();
        moment_tensors.reserve(named.size() * 2);
        for (size_t i = 0; i < named.size(); ++i) {
            moment_tensors.push_back(Tensor<T>::from(named[i].second->shape(), state_.m[i]));
            moment_tensors.push_back(Tensor<T>::from(named[i].second->shape(), state_.v[i]));
        }
        for (size_t i = 0; i < named.size(); ++i) {
            extra.emplace_back("optim.m." + named[i].first, &moment_tensors[2 * i]);
            extra.emplace_back("optim.v." + named[i].first, &moment_tensors[2 * i + 1]);
        }
        save_checkpoint(*model_, path, state_.step, extra);
    }

    // Restores step counter and moments from a loaded checkpoint. The model
    // weights are the loaded model's; this trainer must wrap that model.
    void restore(const LoadedCheckpoint<T>& ck) {
        state_.step = ck.train_step;
        auto named = model_->named_params();
        for (size_t i = 0; i < named.size(); ++i) {
            const Tensor<T>* m = ck.find_extra("optim.m." + named[i].first);
            const Tensor<T>* v = ck.find_extra("optim.v." + named[i].first);
            if (!m || !v)
                throw IoError("checkpoint lacks optimizer moments for '" + named[i].first +
                              "'; cannot resume");
            state_.m[i] = m->values();
            state_.v[i] = v->values();
        }
    }

private:
    void collect_params() {
        auto named = model_->named_params();
        auto decayable = model_->decayable_params();
        for (auto& [name, t] : named) {
            params_.push_back(t);
            bool decay = false;
            for (Tensor<T>* d : decayable)
                if (d == t) decay = true;
            decay_flags_.push_back(decay);
        }
    }

    Model<T>* model_;
    OptimConfig cfg_;
    OptimState<T> state_;
    uint64_t data_seed_;
    std::vector<Tensor<T>*> params_;
    std::vector<bool> decay_flags_;
};

// ---------------------------------------------------------------------------
// Training loop and evaluation
// ---------------------------------------------------------------------------

struct TrainLoopOpts {
    int64_t max_steps = 0;          // 0: run to optimizer total_steps
    int64_t csv_every = 10;
    std::ostream* csv = nullptr;
    int64_t checkpoint_every = 0;   // 0: no periodic checkpoints
    std::string checkpoint_path;
    std::function<bool(const StepLog&)> should_stop;  // optional early exit
    std::function<void(const StepLog&)> on_step;      // optional observer
};

template <typename T>
StepLog train_loop(Trainer<T>& trainer, const std::vector<int32_t>& corpus,
                   const TrainLoopOpts& opts) {
    int64_t limit = opts.max_steps > 0 ? opts.max_steps : trainer.config().total_steps;
    if (opts.csv && trainer.steps_done() == 0) write_csv_header(*opts.csv);
    StepLog last;
    while (trainer.steps_done() < limit) {
        last = trainer.step(corpus);
        if (opts.csv && (last.step % opts.csv_every == 0 || last.step == limit))
            write_csv_row(*opts.csv, last);
        if (opts.on_step) opts.on_step(last);
        if (opts.checkpoint_every > 0 && !opts.checkpoint_path.empty() &&
            last.step % opts.checkpoint_every == 0)
            trainer.save(opts.checkpoint_path);
        if (opts.should_stop && opts.should_stop(last)) break;
    }
    return last;
}

// Deterministic held-out evaluation over consecutive context windows.
// Returns bits per byte and the matching perplexity (tokens are bytes, so
// PPL = 2^BPC).
template <typename T>
std::pair<double, double> eval_bpc_ppl(Model<T>& model, const std::vector<int32_t>& corpus,
                                       ExecMode mode = ExecMode::parallel, int64_t chunk = 64) {
    int64_t n = static_cast<int64_t>(corpus.size());
    if (n < 2) throw DataError("evaluation corpus needs at least 2 tokens");
    int64_t window = model.cfg.context_len;
    double total_nats = 0;
    int64_t total_tokens = 0;
    for (int64_t start = 0; start + 1 < n; start += window) {
        int64_t len = std::min(window, n - 1 - start);
        std::vector<int32_t> tokens(corpus.begin() + start, corpus.begin() + start + len);
        std::vector<int32_t> targets(corpus.begin() + start + 1,
                                     corpus.begin() + start + 1 + len);
        Tensor<T> logits = forward_lm(model, tokens, mode, chunk);
        total_nats += static_cast<double>(cross_entropy_logits(logits, targets).item()) *
                      static_cast<double>(len);
        total_tokens += len;
    }
    double nats = total_nats / static_cast<double>(total_tokens);
    double bpc = nats / std::log(2.0);
    return {bpc, std::exp(nats)};
}

}  // namespace astrosnn
