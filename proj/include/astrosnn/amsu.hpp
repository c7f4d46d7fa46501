#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "astrosnn/tensor.hpp"

namespace astrosnn {

// How the threshold nonlinearity participates in a forward pass. `hard` is
// the real unit: binary spikes, triangular surrogate on the backward pass.
// `smooth` swaps in sigmoid(pre - v_th) so gradients can be checked against
// finite differences.
enum class SpikeMode { hard, smooth };

enum class ExecMode { recurrent, parallel, chunked };

inline const char* exec_mode_name(ExecMode m) {
    switch (m) {
        case ExecMode::recurrent: return "recurrent";
        case ExecMode::parallel: return "parallel";
        default: return "chunked";
    }
}

// tau^(-e) with subnormal results flushed to zero. Keeps long-horizon decay
// factors from degenerating into denormal arithmetic.
template <typename T>
T decay_pow(T tau, int64_t e) {
    T v = std::pow(tau, static_cast<T>(-e));
    if (v != T(0) && std::abs(v) < std::numeric_limits<T>::min()) return T(0);
    return v;
}

// ---------------------------------------------------------------------------
// Parameters and state
// ---------------------------------------------------------------------------

template <typename T>
struct AmSuParams {
    Tensor<T> w_x;  // d × d_in
    Tensor<T> w_k;  // d × d
    Tensor<T> w_v;  // d × d
    Tensor<T> w_q;  // d × d
    std::vector<T> tau_a;  // one per head
    T tau_n = T(2);
    T v_th = T(0);
    T r = T(1);
    T alpha = T(2);
    int64_t heads = 1;
    bool rope_enabled = true;

    int64_t d() const { return w_x.shape()[0]; }
    int64_t d_in() const { return w_x.shape()[1]; }
    int64_t head_dim() const { return d() / heads; }

    void validate() const {
        if (!(tau_n > T(1))) throw ParameterError("tau_n must exceed 1 (decay, not growth)");
        if (static_cast<int64_t>(tau_a.size()) != heads)
            throw ParameterError("tau_a list length " + std::to_string(tau_a.size()) +
                                 " does not match head count " + std::to_string(heads));
        for (T t : tau_a)
            if (!(t > T(1))) throw ParameterError("every tau_a must exceed 1");
        if (heads < 1 || d() % heads != 0)
            throw ParameterError("head count " + std::to_string(heads) +
                                 " must divide width " + std::to_string(d()));
        if (w_k.shape() != Shape{d(), d()} || w_v.shape() != Shape{d(), d()} ||
            w_q.shape() != Shape{d(), d()})
            throw ShapeError("k/v/q projections must all be " + std::to_string(d()) + "x" +
                             std::to_string(d()));
        for (const Tensor<T>* w : {&w_x, &w_k, &w_v, &w_q})
            if (!w->finite()) throw NumericError("non-finite unit weights");
    }

    // Weight entries ~ N(0, 1/sqrt(d)); time constants fixed.
    static AmSuParams init(int64_t d_in, int64_t d, int64_t heads, std::vector<T> tau_a,
                           Rng& rng, bool rope = true, T tau_n = T(2), T v_th = T(0),
                           T r = T(1), T alpha = T(2)) {
        AmSuParams p;
        T sd = T(1) / std::sqrt(static_cast<T>(d));
        p.w_x = Tensor<T>::randn({d, d_in}, rng, sd);
        p.w_k = Tensor<T>::randn({d, d}, rng, sd);
        p.w_v = Tensor<T>::randn({d, d}, rng, sd);
        p.w_q = Tensor<T>::randn({d, d}, rng, sd);
        p.tau_a = std::move(tau_a);
        p.tau_n = tau_n;
        p.v_th = v_th;
        p.r = r;
        p.alpha = alpha;
        p.heads = heads;
        p.rope_enabled = rope;
        p.validate();
        return p;
    }

    std::vector<Tensor<T>*> weights() { return {&w_x, &w_k, &w_v, &w_q}; }
};

template <typename T>
struct AmSuState {
    Tensor<T> u;                // 1 × d membrane potentials
    std::vector<Tensor<T>> h;   // heads × (head_dim × head_dim) astrocyte matrices
    int64_t t = 0;              // absolute position, drives the rotary angle

    static AmSuState zero(const AmSuParams<T>& p) {
        AmSuState s;
        s.u = Tensor<T>::zeros({1, p.d()});
        for (int64_t i = 0; i < p.heads; ++i)
            s.h.push_back(Tensor<T>::zeros({p.head_dim(), p.head_dim()}));
        s.t = 0;
        return s;
    }

    void check(const AmSuParams<T>& p) const {
        if (u.shape() != Shape{1, p.d()})
            throw ShapeError("state u shape " + shape_str(u.shape()) + " does not match width " +
                             std::to_string(p.d()));
        if (static_cast<int64_t>(h.size()) != p.heads)
            throw ShapeError("state holds " + std::to_string(h.size()) + " astrocyte matrices for " +
                             std::to_string(p.heads) + " heads");
        int64_t hd = p.head_dim();
        for (const auto& m : h) {
            if (m.shape() != Shape{hd, hd}) throw ShapeError("astrocyte matrix shape mismatch");
            if (!m.finite()) throw NumericError("non-finite astrocyte state");
        }
        if (!u.finite()) throw NumericError("non-finite membrane state");
    }
};

// ---------------------------------------------------------------------------
// Decay mask
// ---------------------------------------------------------------------------

// Lower-triangular matrix of powers: M[i][j] = tau^(j-i) for i >= j, else 0.
// Diagonal is exactly 1; entries that underflow flush to zero.
// Negative-control seam: a nonzero skew biases every off-diagonal decay
// exponent, deliberately corrupting the parallel and chunked paths (recurrent
// never builds a mask) so the equivalence verifier can prove it detects a
// wrong mask. Always zero outside that fault mode.
inline int& decay_mask_fault_skew() {
    static int skew = 0;
    return skew;
}

template <typename T>
Tensor<T> decay_mask(int64_t len, T tau) {
    if (len < 1) throw ParameterError("mask length must be at least 1");
    if (!(tau > T(1))) throw ParameterError("mask time constant must exceed 1");
    Tensor<T> m = Tensor<T>::zeros({len, len});
    T* p = m.data();
    for (int64_t i = 0; i < len; ++i) {
        p[i * len + i] = T(1);
        for (int64_t j = i - 1; j >= 0; --j) {
            T v = p[(i - 1) * len + j] / tau;  // each sub-diagonal is the row above / tau
            if (v != T(0) && std::abs(v) < std::numeric_limits<T>::min()) v = T(0);
            p[i * len + j] = v;
        }
    }
    if (int skew = decay_mask_fault_skew(); skew != 0) {
        T f = std::pow(tau, static_cast<T>(-skew));
        for (int64_t i = 0; i < len; ++i)
            for (int64_t j = 0; j < i; ++j) p[i * len + j] *= f;
    }
    return m;
}

// ---------------------------------------------------------------------------
// Spike function
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> spike_fn(const Tensor<T>& pre, T v_th, T alpha, SpikeMode mode) {
    if (mode == SpikeMode::hard) return heaviside_ste(pre, v_th, alpha);
    return sigmoid(shift(pre, -v_th));
}

// ---------------------------------------------------------------------------
// Recurrent step
// ---------------------------------------------------------------------------

template <typename T>
struct StepOut {
    Tensor<T> spikes;  // 1 × d
    Tensor<T> pre;     // 1 × d pre-activations
};

// One timestep: x = W_x·s_in, I = σ(x), u' = u/τ_n + I·R; per head the
// astrocyte matrix accumulates the decayed outer product v·kᵀ/√head_dim and
// is read out against q. Spikes threshold concat(o) + u'. Updates state in
// place (including the position counter).
template <typename T>
StepOut<T> step_recurrent(const AmSuParams<T>& p, AmSuState<T>& st, const Tensor<T>& s_in,
                          SpikeMode mode = SpikeMode::hard) {
    if (s_in.rank() != 2 || s_in.shape()[0] != 1 || s_in.shape()[1] != p.d_in())
        throw ShapeError("step input must be 1x" + std::to_string(p.d_in()) + ", got " +
                         shape_str(s_in.shape()));
    st.check(p);

    int64_t hd = p.head_dim();
    T inv_sqrt = T(1) / std::sqrt(static_cast<T>(hd));

    Tensor<T> x = matmul_nt(s_in, p.w_x);                    // 1 × d
    Tensor<T> u_next = add(scale(st.u, T(1) / p.tau_n), scale(sigmoid(x), p.r));

    Tensor<T> k = matmul_nt(x, p.w_k);
    Tensor<T> v = matmul_nt(x, p.w_v);
    Tensor<T> q = matmul_nt(x, p.w_q);

    std::vector<Tensor<T>> outs;
    std::vector<Tensor<T>> h_next;
    for (int64_t h = 0; h < p.heads; ++h) {
        Tensor<T> kh = slice_cols(k, h * hd, (h + 1) * hd);
        Tensor<T> vh = slice_cols(v, h * hd, (h + 1) * hd);
        Tensor<T> qh = slice_cols(q, h * hd, (h + 1) * hd);
        if (p.rope_enabled) {
            kh = rope_apply(kh, st.t);
            qh = rope_apply(qh, st.t);
        }
        Tensor<T> outer = scale(matmul_tn(vh, kh), inv_sqrt);  // v·kᵀ/√head_dim
        Tensor<T> hn = add(scale(st.h[h], T(1) / p.tau_a[h]), outer);
        outs.push_back(matmul_nt(qh, hn));  // row form of H'·q
        h_next.push_back(hn);
    }

    Tensor<T> pre = add(concat_cols(outs), u_next);
    StepOut<T> out{spike_fn(pre, p.v_th, p.alpha, mode), pre};

    st.u = u_next;
    st.h = std::move(h_next);
    st.t += 1;
    return out;
}

// ---------------------------------------------------------------------------
// Sequence forms
// ---------------------------------------------------------------------------

template <typename T>
struct ForwardOut {
    Tensor<T> spikes;  // T × d
    Tensor<T> pre;     // T × d
};

template <typename T>
ForwardOut<T> forward_recurrent(const AmSuParams<T>& p, const Tensor<T>& s_in, AmSuState<T>& st,
                                SpikeMode mode = SpikeMode::hard) {
    if (s_in.rank() != 2 || s_in.shape()[1] != p.d_in())
        throw ShapeError("sequence input must be Tx" + std::to_string(p.d_in()));
    std::vector<Tensor<T>> spikes, pres;
    for (int64_t t = 0; t < s_in.shape()[0]; ++t) {
        StepOut<T> o = step_recurrent(p, st, slice_rows(s_in, t, t + 1), mode);
        spikes.push_back(o.spikes);
        pres.push_back(o.pre);
    }
    return {concat_rows(spikes), concat_rows(pres)};
}

// Whole-sequence masked-attention form. Assumes zero initial state; row t
// reproduces the t-th recurrent step exactly in exact arithmetic.
template <typename T>
ForwardOut<T> forward_parallel(const AmSuParams<T>& p, const Tensor<T>& s_in,
                               SpikeMode mode = SpikeMode::hard) {
    if (s_in.rank() != 2 || s_in.shape()[1] != p.d_in())
        throw ShapeError("sequence input must be Tx" + std::to_string(p.d_in()));
    int64_t len = s_in.shape()[0];
    int64_t hd = p.head_dim();
    T inv_sqrt = T(1) / std::sqrt(static_cast<T>(hd));

    Tensor<T> x = matmul_nt(s_in, p.w_x);  // T × d
    Tensor<T> mn = decay_mask<T>(len, p.tau_n);
    Tensor<T> u_all = scale(matmul(mn, sigmoid(x)), p.r);

    Tensor<T> k = matmul_nt(x, p.w_k);
    Tensor<T> v = matmul_nt(x, p.w_v);
    Tensor<T> q = matmul_nt(x, p.w_q);

    std::vector<Tensor<T>> outs;
    for (int64_t h = 0; h < p.heads; ++h) {
        Tensor<T> kh = slice_cols(k, h * hd, (h + 1) * hd);
        Tensor<T> vh = slice_cols(v, h * hd, (h + 1) * hd);
        Tensor<T> qh = slice_cols(q, h * hd, (h + 1) * hd);
        if (p.rope_enabled) {
            kh = rope_apply(kh, 0);
            qh = rope_apply(qh, 0);
        }
        Tensor<T> ma = decay_mask<T>(len, p.tau_a[h]);
        for (int64_t i = 0; i < ma.size(); ++i) ma.data()[i] *= inv_sqrt;  // constant, off-tape
        Tensor<T> scores = mul(matmul_nt(qh, kh), ma);
        outs.push_back(matmul(scores, vh));
    }

    Tensor<T> pre = add(concat_cols(outs), u_all);
    return {spike_fn(pre, p.v_th, p.alpha, mode), pre};
}

namespace detail {

// Column of decay factors tau^-(j_coeff·j + offset), j = 0..len-1,
// materialized as a len×width matrix so it can gate rows elementwise
// (column vectors do not broadcast in this engine).
template <typename T>
Tensor<T> decay_col_matrix(int64_t len, int64_t width, T tau, int64_t j_coeff, int64_t offset) {
    Tensor<T> m = Tensor<T>::zeros({len, width});
    for (int64_t j = 0; j < len; ++j) {
        T f = decay_pow(tau, j_coeff * j + offset);
        for (int64_t c = 0; c < width; ++c) m.data()[j * width + c] = f;
    }
    return m;
}

}  // namespace detail

// Streaming form: intra-chunk masked attention plus carried state. Equals
// forward_parallel from a zero state and accepts a non-zero carried state;
// per-chunk cost is bounded by the chunk length.
template <typename T>
ForwardOut<T> forward_chunked(const AmSuParams<T>& p, const Tensor<T>& s_in, int64_t chunk,
                              AmSuState<T>& st, SpikeMode mode = SpikeMode::hard) {
    if (chunk < 1) throw ParameterError("chunk length must be at least 1");
    if (s_in.rank() != 2 || s_in.shape()[1] != p.d_in())
        throw ShapeError("sequence input must be Tx" + std::to_string(p.d_in()));
    st.check(p);

    int64_t total = s_in.shape()[0];
    int64_t hd = p.head_dim();
    T inv_sqrt = T(1) / std::sqrt(static_cast<T>(hd));

    std::vector<Tensor<T>> spikes, pres;
    for (int64_t c0 = 0; c0 < total; c0 += chunk) {
        int64_t c1 = std::min(c0 + chunk, total);
        int64_t len = c1 - c0;
        Tensor<T> s_c = slice_rows(s_in, c0, c1);

        Tensor<T> x = matmul_nt(s_c, p.w_x);
        Tensor<T> mn = decay_mask<T>(len, p.tau_n);
        Tensor<T> u_intra = scale(matmul(mn, sigmoid(x)), p.r);
        // carried membrane decays one extra step per row: u_enter·tau_n^-(j+1)
        Tensor<T> dcol_n = detail::decay_col_matrix<T>(len, 1, p.tau_n, 1, 1);
        Tensor<T> u_all = add(u_intra, matmul(dcol_n, st.u));

        Tensor<T> k = matmul_nt(x, p.w_k);
        Tensor<T> v = matmul_nt(x, p.w_v);
        Tensor<T> q = matmul_nt(x, p.w_q);

        std::vector<Tensor<T>> outs;
        std::vector<Tensor<T>> h_next;
        for (int64_t h = 0; h < p.heads; ++h) {
            Tensor<T> kh = slice_cols(k, h * hd, (h + 1) * hd);
            Tensor<T> vh = slice_cols(v, h * hd, (h + 1) * hd);
            Tensor<T> qh = slice_cols(q, h * hd, (h + 1) * hd);
            if (p.rope_enabled) {
                kh = rope_apply(kh, st.t);  // absolute positions across chunks
                qh = rope_apply(qh, st.t);
            }
            Tensor<T> ma = decay_mask<T>(len, p.tau_a[h]);
            for (int64_t i = 0; i < ma.size(); ++i) ma.data()[i] *= inv_sqrt;
            Tensor<T> scores = mul(matmul_nt(qh, kh), ma);
            Tensor<T> o_intra = matmul(scores, vh);
            // carried astrocyte readout: row j sees H_enter·tau_a^-(j+1)
            Tensor<T> dmat = detail::decay_col_matrix<T>(len, hd, p.tau_a[h], 1, 1);
            Tensor<T> o_carry = matmul_nt(mul(dmat, qh), st.h[h]);
            outs.push_back(add(o_intra, o_carry));
            // exit state: H_enter/tau^len + sum_j tau^(j-(len-1))·v_j k_jᵀ/√hd
            Tensor<T> wmat = detail::decay_col_matrix<T>(len, hd, p.tau_a[h], -1, len - 1);
            Tensor<T> acc = scale(matmul_tn(mul(wmat, vh), kh), inv_sqrt);
            h_next.push_back(add(scale(st.h[h], decay_pow(p.tau_a[h], len)), acc));
        }

        Tensor<T> pre = add(concat_cols(outs), u_all);
        spikes.push_back(spike_fn(pre, p.v_th, p.alpha, mode));
        pres.push_back(pre);

        st.u = slice_rows(u_all, len - 1, len);
        st.h = std::move(h_next);
        st.t += len;
    }
    return {concat_rows(spikes), concat_rows(pres)};
}

// Single entry point used by the model layer.
template <typename T>
ForwardOut<T> forward(const AmSuParams<T>& p, const Tensor<T>& s_in, ExecMode mode,
                      int64_t chunk = 16, SpikeMode spike_mode = SpikeMode::hard) {
    if (mode == ExecMode::parallel) return forward_parallel(p, s_in, spike_mode);
    AmSuState<T> st = AmSuState<T>::zero(p);
    if (mode == ExecMode::recurrent) return forward_recurrent(p, s_in, st, spike_mode);
    return forward_chunked(p, s_in, chunk, st, spike_mode);
}

// ---------------------------------------------------------------------------
// Baseline cells
// ---------------------------------------------------------------------------

template <typename T>
struct LifParams {
    Tensor<T> w;  // d × d_in
    T tau = T(2);
    T v_th = T(1);
    T alpha = T(2);
};

// Leaky integrate-and-fire with hard reset: u' = u/tau + W·s_in, spike at
// u' >= v_th, spiking entries reset to 0. The reset gate is detached so the
// surrogate path stays the spike function itself.
template <typename T>
StepOut<T> lif_step(const LifParams<T>& p, Tensor<T>& u, const Tensor<T>& s_in) {
    if (s_in.rank() != 2 || s_in.shape()[0] != 1 || s_in.shape()[1] != p.w.shape()[1])
        throw ShapeError("lif input must be 1x" + std::to_string(p.w.shape()[1]));
    if (u.shape() != Shape{1, p.w.shape()[0]}) throw ShapeError("lif state shape mismatch");
    Tensor<T> u_next = add(scale(u, T(1) / p.tau), matmul_nt(s_in, p.w));
    Tensor<T> spikes = heaviside_ste(u_next, p.v_th, p.alpha);
    Tensor<T> keep = shift(scale(detach(spikes), T(-1)), T(1));  // 1 - spike, constant
    u = mul(u_next, keep);
    return {spikes, u_next};
}

template <typename T>
struct AlifParams {
    Tensor<T> w;      // d × d_in
    Tensor<T> w_rec;  // d × d, autaptic weights on the layer's own spikes
    T tau = T(2);
    T rho = std::exp(T(-1) / T(200));
    T beta = T(1.8);
    T b0 = T(1);
    T alpha = T(2);
};

template <typename T>
struct AlifState {
    Tensor<T> u;  // 1 × d
    Tensor<T> a;  // 1 × d adaptation trace
    Tensor<T> s;  // 1 × d own spikes from the previous step
    static AlifState zero(const AlifParams<T>& p) {
        int64_t d = p.w.shape()[0];
        return {Tensor<T>::zeros({1, d}), Tensor<T>::zeros({1, d}), Tensor<T>::zeros({1, d})};
    }
};

// Adaptive LIF: threshold theta = b0 + beta·a rises with spiking history;
// autaptic input feeds both membrane and adaptation. Hard reset.
template <typename T>
StepOut<T> alif_step(const AlifParams<T>& p, AlifState<T>& st, const Tensor<T>& s_in) {
    if (s_in.rank() != 2 || s_in.shape()[0] != 1 || s_in.shape()[1] != p.w.shape()[1])
        throw ShapeError("alif input must be 1x" + std::to_string(p.w.shape()[1]));
    Tensor<T> a_next = add(scale(st.a, p.rho), scale(st.s, T(1) - p.rho));
    Tensor<T> theta = shift(scale(a_next, p.beta), p.b0);
    Tensor<T> u_next = add(add(scale(st.u, T(1) / p.tau), matmul_nt(s_in, p.w)),
                           matmul_nt(st.s, p.w_rec));
    Tensor<T> spikes = heaviside_ste(sub(u_next, theta), T(0), p.alpha);
    Tensor<T> keep = shift(scale(detach(spikes), T(-1)), T(1));
    st.u = mul(u_next, keep);
    st.a = a_next;
    st.s = spikes;
    return {spikes, u_next};
}

}  // namespace astrosnn
