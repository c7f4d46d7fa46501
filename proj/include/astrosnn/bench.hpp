#pragma once

// Inference-cost benchmark: streaming AM-SU generation against an in-repo
// naive causal-attention baseline with a growing key/value cache, at matched
// width, depth, and head count.
//
// Per sequence length T, both systems are advanced to depth T - probe and the
// last `probe` tokens are timed; the reported per-token latency is the median
// over `repeats` timed blocks after `warmup` discarded blocks, each starting
// from a snapshot of the prefilled state. Latency is wall-clock dependent;
// state sizes are exact scalar counts.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "astrosnn/model.hpp"
#include "astrosnn/tensor.hpp"

namespace astrosnn {

struct BenchConfig {
    std::vector<int64_t> seq_lengths = {128, 256, 512, 1024, 2048, 4096, 8192};
    int64_t dim = 64;
    int64_t layers = 2;
    int64_t heads = 8;
    int64_t vocab = 256;
    int64_t repeats = 5;
    int64_t warmup = 2;
    int64_t probe_tokens = 32;
    uint64_t seed = 1;

    void validate() const {
        if (seq_lengths.empty()) throw ParameterError("bench needs at least one sequence length");
        for (size_t i = 0; i + 1 < seq_lengths.size(); ++i)
            if (seq_lengths[i] >= seq_lengths[i + 1])
                throw ParameterError("bench sequence lengths must be strictly ascending");
        if (seq_lengths.front() < 1) throw ParameterError("sequence lengths must be positive");
        if (dim < 1 || layers < 1 || heads < 1 || dim % heads != 0)
            throw ParameterError("bench needs layers >= 1 and heads dividing dim");
        if (vocab < 2) throw ParameterError("bench vocab must be at least 2");
        if (repeats < 1 || warmup < 0 || probe_tokens < 1)
            throw ParameterError("bench needs repeats >= 1, warmup >= 0, probe_tokens >= 1");
    }
};

// ---------------------------------------------------------------------------
// Naive causal-attention baseline
// ---------------------------------------------------------------------------

// Standard pre-softmax scaled dot-product attention over an append-only cache,
// one token at a time. Deliberately naive: per-token cost is O(T d) and cache
// memory is O(T d) per layer, the scaling the AM-SU recurrence avoids.
template <typename T>
struct AttnBaseline {
    int64_t dim = 0;
    int64_t heads = 0;
    Tensor<T> embed;  // vocab × d
    struct Layer {
        Tensor<T> wq, wk, wv, wo;  // d × d each
    };
    std::vector<Layer> layers;
    Tensor<T> head;  // vocab × d

    static AttnBaseline build(int64_t dim, int64_t n_layers, int64_t heads, int64_t vocab,
                              uint64_t seed) {
        AttnBaseline b;
        b.dim = dim;
        b.heads = heads;
        Rng rng(seed);
        T sd = T(1) / std::sqrt(static_cast<T>(dim));
        b.embed = Tensor<T>::randn({vocab, dim}, rng, sd);
        for (int64_t l = 0; l < n_layers; ++l)
            b.layers.push_back({Tensor<T>::randn({dim, dim}, rng, sd),
                                Tensor<T>::randn({dim, dim}, rng, sd),
                                Tensor<T>::randn({dim, dim}, rng, sd),
                                Tensor<T>::randn({dim, dim}, rng, sd)});
        b.head = Tensor<T>::randn({vocab, dim}, rng, sd);
        return b;
    }
};

template <typename T>
struct AttnState {
    // per layer: k and v rows for every past token, appended in step order
    std::vector<std::vector<T>> k_cache, v_cache;
    int64_t filled = 0;
    int64_t capacity = 0;

    static AttnState zero(const AttnBaseline<T>& b, int64_t capacity) {
        AttnState s;
        s.capacity = capacity;
        size_t bytes = static_cast<size_t>(capacity) * static_cast<size_t>(b.dim);
        s.k_cache.assign(b.layers.size(), std::vector<T>(bytes, T(0)));
        s.v_cache.assign(b.layers.size(), std::vector<T>(bytes, T(0)));
        return s;
    }

    int64_t scalar_count() const {
        return static_cast<int64_t>(k_cache.size()) * 2 * filled *
               (filled ? static_cast<int64_t>(k_cache[0].size()) / capacity : 0);
    }
};

template <typename T>
Tensor<T> attn_step(const AttnBaseline<T>& b, AttnState<T>& st, int32_t token) {
    if (st.filled >= st.capacity) throw ContractError("attention cache is full");
    int64_t d = b.dim;
    int64_t hd = d / b.heads;
    Tensor<T> x = embedding_gather(b.embed, {token});
    std::vector<T> attn_out(static_cast<size_t>(d));
    for (size_t l = 0; l < b.layers.size(); ++l) {
        Tensor<T> q = matmul_nt(x, b.layers[l].wq);
        Tensor<T> k = matmul_nt(x, b.layers[l].wk);
        Tensor<T> v = matmul_nt(x, b.layers[l].wv);
        T* kc = st.k_cache[l].data() + static_cast<size_t>(st.filled) * d;
        T* vc = st.v_cache[l].data() + static_cast<size_t>(st.filled) * d;
        std::copy(k.data(), k.data() + d, kc);
        std::copy(v.data(), v.data() + d, vc);
        int64_t n = st.filled + 1;
        const T scale = T(1) / std::sqrt(static_cast<T>(hd));
        for (int64_t h = 0; h < b.heads; ++h) {
            const T* qh = q.data() + h * hd;
            // causal attention over every cached position, softmax per head
            std::vector<T> scores(static_cast<size_t>(n));
            T mx = -std::numeric_limits<T>::infinity();
            for (int64_t j = 0; j < n; ++j) {
                const T* kj = st.k_cache[l].data() + static_cast<size_t>(j) * d + h * hd;
                T s = 0;
                for (int64_t e = 0; e < hd; ++e) s += qh[e] * kj[e];
                scores[static_cast<size_t>(j)] = s * scale;
                mx = std::max(mx, scores[static_cast<size_t>(j)]);
            }
            T z = 0;
            for (int64_t j = 0; j < n; ++j) {
                scores[static_cast<size_t>(j)] = std::exp(scores[static_cast<size_t>(j)] - mx);
                z += scores[static_cast<size_t>(j)];
            }
            for (int64_t e = 0; e < hd; ++e) attn_out[static_cast<size_t>(h * hd + e)] = T(0);
            for (int64_t j = 0; j < n; ++j) {
                const T w = scores[static_cast<size_t>(j)] / z;
                const T* vj = st.v_cache[l].data() + static_cast<size_t>(j) * d + h * hd;
                for (int64_t e = 0; e < hd; ++e)
                    attn_out[static_cast<size_t>(h * hd + e)] += w * vj[e];
            }
        }
        Tensor<T> o = Tensor<T>::from({1, d}, attn_out);
        x = add(x, matmul_nt(o, b.layers[l].wo));  // residual
    }
    st.filled += 1;
    return matmul_nt(x, b.head);
}

// ---------------------------------------------------------------------------
// Measurement
// ---------------------------------------------------------------------------

struct BenchRow {
    std::string system;  // "amsu" | "attention"
    int64_t seq_len = 0;
    double per_token_us = 0;  // median over repeats
    double tokens_per_sec = 0;
    int64_t state_scalars = 0;
    int64_t state_bytes = 0;
};

struct BenchFit {
    // least-squares fit of per-token latency (us) against sequence length,
    // over every repeat measurement (not just the medians)
    double slope_us_per_len = 0;
    double slope_stderr = 0;
    double intercept_us = 0;
};

struct BenchReport {
    std::vector<BenchRow> rows;
    BenchFit amsu_fit, attn_fit;
    double seconds = 0;
};

namespace detail {

inline double bench_now() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

inline double median_of(std::vector<double> xs) {
    std::sort(xs.begin(), xs.end());
    size_t n = xs.size();
    return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

inline BenchFit fit_line(const std::vector<std::pair<double, double>>& pts) {
    BenchFit f;
    size_t n = pts.size();
    if (n < 2) return f;
    double sx = 0, sy = 0;
    for (auto& [x, y] : pts) {
        sx += x;
        sy += y;
    }
    double mx = sx / n, my = sy / n;
    double sxx = 0, sxy = 0;
    for (auto& [x, y] : pts) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if (sxx == 0) return f;
    f.slope_us_per_len = sxy / sxx;
    f.intercept_us = my - f.slope_us_per_len * mx;
    double sse = 0;
    for (auto& [x, y] : pts) {
        double r = y - (f.intercept_us + f.slope_us_per_len * x);
        sse += r * r;
    }
    if (n > 2) f.slope_stderr = std::sqrt(sse / (n - 2) / sxx);
    return f;
}

}  // namespace detail

template <typename T>
BenchReport run_bench(const BenchConfig& cfg) {
    cfg.validate();
    double t0 = detail::bench_now();
    BenchReport rep;

    ModelConfig mc;
    mc.layers = cfg.layers;
    mc.dim = cfg.dim;
    mc.heads = cfg.heads;
    mc.vocab = cfg.vocab;
    mc.context_len = cfg.seq_lengths.back();
    mc.dtype = dtype_name<T>();
    mc.seed = cfg.seed;
    Model<T> model = Model<T>::build(mc);
    AttnBaseline<T> baseline =
        AttnBaseline<T>::build(cfg.dim, cfg.layers, cfg.heads, cfg.vocab, Rng::mix(cfg.seed, 2));

    Rng tok_rng(Rng::mix(cfg.seed, 3));
    std::vector<std::pair<double, double>> amsu_pts, attn_pts;

    for (int64_t len : cfg.seq_lengths) {
        int64_t probe = std::min(cfg.probe_tokens, len);
        int64_t prefill = len - probe;
        std::vector<int32_t> prefill_toks, probe_toks;
        for (int64_t i = 0; i < prefill; ++i)
            prefill_toks.push_back(static_cast<int32_t>(tok_rng.below(cfg.vocab)));
        for (int64_t i = 0; i < probe; ++i)
            probe_toks.push_back(static_cast<int32_t>(tok_rng.below(cfg.vocab)));

        // AM-SU: state size is length-independent
        {
            LmState<T> base_state = LmState<T>::zero(model);
            for (int32_t t : prefill_toks) step_lm(model, base_state, t);
            std::vector<double> us;
            for (int64_t r = 0; r < cfg.warmup + cfg.repeats; ++r) {
                LmState<T> st = base_state;
                double a = detail::bench_now();
                for (int32_t t : probe_toks) step_lm(model, st, t);
                double el = (detail::bench_now() - a) * 1e6 / probe;
                if (r >= cfg.warmup) {
                    us.push_back(el);
                    amsu_pts.push_back({static_cast<double>(len), el});
                }
            }
            BenchRow row;
            row.system = "amsu";
            row.seq_len = len;
            row.per_token_us = detail::median_of(us);
            row.tokens_per_sec = 1e6 / row.per_token_us;
            row.state_scalars = base_state.scalar_count();
            row.state_bytes = row.state_scalars * static_cast<int64_t>(sizeof(T));
            rep.rows.push_back(row);
        }

        // attention: cache grows with every token
        {
            AttnState<T> base_state = AttnState<T>::zero(baseline, len);
            for (int32_t t : prefill_toks) attn_step(baseline, base_state, t);
            std::vector<double> us;
            for (int64_t r = 0; r < cfg.warmup + cfg.repeats; ++r) {
                AttnState<T> st = base_state;
                double a = detail::bench_now();
                for (int32_t t : probe_toks) attn_step(baseline, st, t);
                double el = (detail::bench_now() - a) * 1e6 / probe;
                if (r >= cfg.warmup) {
                    us.push_back(el);
                    attn_pts.push_back({static_cast<double>(len), el});
                }
            }
            BenchRow row;
            row.system = "attention";
            row.seq_len = len;
            row.per_token_us = detail::median_of(us);
            row.tokens_per_sec = 1e6 / row.per_token_us;
            row.state_scalars = static_cast<int64_t>(baseline.layers.size()) * 2 * len * cfg.dim;
            row.state_bytes = row.state_scalars * static_cast<int64_t>(sizeof(T));
            rep.rows.push_back(row);
        }
    }

    rep.amsu_fit = detail::fit_line(amsu_pts);
    rep.attn_fit = detail::fit_line(attn_pts);
    rep.seconds = detail::bench_now() - t0;
    return rep;
}

inline void write_bench_csv(const BenchReport& rep, std::ostream& os) {
    os << "system,seq_len,per_token_us,tokens_per_sec,state_scalars,state_bytes\n";
    char buf[96];
    for (const BenchRow& r : rep.rows) {
        std::snprintf(buf, sizeof buf, "%s,%lld,%.3f,%.1f,%lld,%lld", r.system.c_str(),
                      static_cast<long long>(r.seq_len), r.per_token_us, r.tokens_per_sec,
                      static_cast<long long>(r.state_scalars),
                      static_cast<long long>(r.state_bytes));
        os << buf << '\n';
    }
}

}  // namespace astrosnn
