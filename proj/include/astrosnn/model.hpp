#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "astrosnn/amsu.hpp"
#include "astrosnn/tensor.hpp"

namespace astrosnn {

// ---------------------------------------------------------------------------
// Byte tokenizer: vocab is exactly the 256 byte values.
// ---------------------------------------------------------------------------

constexpr int64_t kByteVocab = 256;

inline std::vector<int32_t> byte_encode(const std::string& text) {
    std::vector<int32_t> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<int32_t>(c));
    return ids;
}

inline std::string byte_decode(const std::vector<int32_t>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (int32_t id : ids) {
        if (id < 0 || id >= kByteVocab)
            throw IndexError("byte id " + std::to_string(id) + " outside [0,256)");
        out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

template <typename T>
const char* dtype_name() {
    if constexpr (std::is_same_v<T, float>) return "f32";
    else return "f64";
}

struct ModelConfig {
    int64_t layers = 2;
    int64_t dim = 64;
    int64_t heads = 8;
    int64_t vocab = kByteVocab;
    int64_t context_len = 256;
    double tau_n = 2.0;
    double tau_a_min = 32.0;
    double tau_a_max = 512.0;
    double v_th = 0.0;
    double r = 1.0;
    double alpha = 2.0;
    bool rope = true;
    bool norm = true;
    bool ffn = false;
    std::string dtype = "f32";
    uint64_t seed = 0;
    // How tau values translate into per-step retention. "step": u_next gets
    // u/tau directly. "time": tau is a time constant in steps and the
    // per-step factor is exp(-1/tau), i.e. the unit sees tau' = exp(1/tau).
    std::string tau_mode = "step";

    void validate() const {
        if (layers < 1) throw ConfigError("layers must be at least 1");
        if (vocab < 2) throw ConfigError("vocab must be at least 2");
        if (heads < 1 || dim % heads != 0)
            throw ConfigError("head count " + std::to_string(heads) + " must divide width " +
                              std::to_string(dim));
        if (!(tau_a_min < tau_a_max))
            throw ConfigError("tau_a_min must be below tau_a_max");
        if (!(tau_a_min > 1.0) || !(tau_n > 1.0))
            throw ConfigError("time constants must exceed 1");
        if (context_len < 1) throw ConfigError("context_len must be at least 1");
        if (dtype != "f32" && dtype != "f64")
            throw ConfigError("dtype must be f32 or f64, got " + dtype);
        if (tau_mode != "step" && tau_mode != "time")
            throw ConfigError("tau_mode must be step or time, got " + tau_mode);
        if (!(alpha > 0.0)) throw ConfigError("surrogate width alpha must be positive");
    }

    nlohmann::json to_json() const {
        return nlohmann::json{
            {"layers", layers},       {"dim", dim},
            {"heads", heads},         {"vocab", vocab},
            {"context_len", context_len},
            {"tau_n", tau_n},         {"tau_a_min", tau_a_min},
            {"tau_a_max", tau_a_max}, {"v_th", v_th},
            {"r", r},                 {"alpha", alpha},
            {"rope", rope},           {"norm", norm},
            {"ffn", ffn},             {"dtype", dtype},
            {"seed", seed},           {"tau_mode", tau_mode}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.layers = j.at("layers").get<int64_t>();
        c.dim = j.at("dim").get<int64_t>();
        c.heads = j.at("heads").get<int64_t>();
        c.vocab = j.at("vocab").get<int64_t>();
        c.context_len = j.at("context_len").get<int64_t>();
        c.tau_n = j.at("tau_n").get<double>();
        c.tau_a_min = j.at("tau_a_min").get<double>();
        c.tau_a_max = j.at("tau_a_max").get<double>();
        c.v_th = j.at("v_th").get<double>();
        c.r = j.at("r").get<double>();
        c.alpha = j.at("alpha").get<double>();
        c.rope = j.at("rope").get<bool>();
        c.norm = j.at("norm").get<bool>();
        c.ffn = j.at("ffn").get<bool>();
        c.dtype = j.at("dtype").get<std::string>();
        c.seed = j.at("seed").get<uint64_t>();
        c.tau_mode = j.value("tau_mode", std::string("step"));
        c.validate();
        return c;
    }

    bool operator==(const ModelConfig& o) const = default;
};

// Raises with the first differing field named; used when a run supplies both
// a config and a checkpoint.
inline void ensure_compatible(const ModelConfig& expected, const ModelConfig& found) {
    auto je = expected.to_json();
    auto jf = found.to_json();
    for (auto it = je.begin(); it != je.end(); ++it)
        if (jf.at(it.key()) != it.value())
            throw ConfigError("checkpoint config mismatch on '" + it.key() + "': expected " +
                              it.value().dump() + ", found " + jf.at(it.key()).dump());
}

// ---------------------------------------------------------------------------
// Head time-constant schedule
// ---------------------------------------------------------------------------

// Geometric ladder from tau_min to tau_max: tau_h = tau_min·(max/min)^(h/(H-1)).
inline std::vector<double> tau_schedule(int64_t heads, double tau_min, double tau_max) {
    if (heads < 1) throw ParameterError("head count must be at least 1");
    if (heads == 1) return {tau_min};
    if (!(tau_min < tau_max)) throw ParameterError("tau_min must be below tau_max");
    std::vector<double> taus(static_cast<size_t>(heads));
    double ratio = tau_max / tau_min;
    for (int64_t h = 0; h < heads; ++h)
        taus[static_cast<size_t>(h)] =
            tau_min * std::pow(ratio, static_cast<double>(h) / static_cast<double>(heads - 1));
    return taus;
}

// Per-step retention divisor for a configured tau under the given mode.
inline double effective_tau(double tau, const std::string& tau_mode) {
    return tau_mode == "time" ? std::exp(1.0 / tau) : tau;
}

// ---------------------------------------------------------------------------
// Stacked decoder model
// ---------------------------------------------------------------------------

template <typename T>
struct Model {
    ModelConfig cfg;
    Tensor<T> embed;                     // vocab × d
    std::vector<AmSuParams<T>> units;    // one per layer
    std::vector<Tensor<T>> norm_gain;    // per layer, 1 × d (when cfg.norm)
    std::vector<Tensor<T>> ffn_w1;       // per layer, 4d × d (when cfg.ffn)
    std::vector<Tensor<T>> ffn_w2;       // per layer, d × 4d
    Tensor<T> head;                      // vocab × d

    // Layer 0 consumes real-valued embeddings; later layers consume the
    // previous layer's binary spikes. The head is zero-initialized so an
    // untrained model predicts the uniform distribution.
    static Model build(const ModelConfig& cfg) {
        cfg.validate();
        if (cfg.dtype != dtype_name<T>())
            throw ConfigError(std::string("config dtype ") + cfg.dtype +
                              " does not match the requested instantiation " + dtype_name<T>());
        Model m;
        m.cfg = cfg;
        Rng rng(cfg.seed);
        T sd = T(1) / std::sqrt(static_cast<T>(cfg.dim));
        m.embed = Tensor<T>::randn({cfg.vocab, cfg.dim}, rng, sd);

        std::vector<double> taus_cfg = tau_schedule(cfg.heads, cfg.tau_a_min, cfg.tau_a_max);
        std::vector<T> taus;
        for (double t : taus_cfg) taus.push_back(static_cast<T>(effective_tau(t, cfg.tau_mode)));
        T tau_n = static_cast<T>(effective_tau(cfg.tau_n, cfg.tau_mode));

        for (int64_t l = 0; l < cfg.layers; ++l) {
            m.units.push_back(AmSuParams<T>::init(
                cfg.dim, cfg.dim, cfg.heads, taus, rng, cfg.rope, tau_n,
                static_cast<T>(cfg.v_th), static_cast<T>(cfg.r), static_cast<T>(cfg.alpha)));
            if (cfg.norm) m.norm_gain.push_back(Tensor<T>::full({1, cfg.dim}, T(1)));
            if (cfg.ffn) {
                m.ffn_w1.push_back(Tensor<T>::randn({4 * cfg.dim, cfg.dim}, rng, sd));
                m.ffn_w2.push_back(Tensor<T>::randn({cfg.dim, 4 * cfg.dim}, rng, sd));
            }
        }
        m.head = Tensor<T>::zeros({cfg.vocab, cfg.dim});
        return m;
    }

    std::vector<std::pair<std::string, Tensor<T>*>> named_params() {
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        out.emplace_back("embed", &embed);
        for (size_t l = 0; l < units.size(); ++l) {
            std::string base = "layers." + std::to_string(l) + ".";
            out.emplace_back(base + "w_x", &units[l].w_x);
            out.emplace_back(base + "w_k", &units[l].w_k);
            out.emplace_back(base + "w_v", &units[l].w_v);
            out.emplace_back(base + "w_q", &units[l].w_q);
            if (cfg.norm) out.emplace_back(base + "norm_gain", &norm_gain[l]);
            if (cfg.ffn) {
                out.emplace_back(base + "ffn_w1", &ffn_w1[l]);
                out.emplace_back(base + "ffn_w2", &ffn_w2[l]);
            }
        }
        out.emplace_back("head", &head);
        return out;
    }

    // Weight matrices subject to decoupled weight decay: projections, ffn,
    // head. Embedding rows and norm gains are exempt.
    std::vector<Tensor<T>*> decayable_params() {
        std::vector<Tensor<T>*> out;
        for (auto& u : units)
            for (Tensor<T>* w : u.weights()) out.push_back(w);
        for (auto& w : ffn_w1) out.push_back(&w);
        for (auto& w : ffn_w2) out.push_back(&w);
        out.push_back(&head);
        return out;
    }

    int64_t param_count() {
        int64_t n = 0;
        for (auto& [name, t] : named_params()) n += t->size();
        return n;
    }
};

// ---------------------------------------------------------------------------
// Whole-sequence forward pass
// ---------------------------------------------------------------------------

template <typename T>
struct LayerTrace {
    Tensor<T> spikes;
    Tensor<T> pre;
};

template <typename T>
Tensor<T> forward_lm(Model<T>& m, const std::vector<int32_t>& tokens, ExecMode mode,
                     int64_t chunk = 16, SpikeMode spike_mode = SpikeMode::hard,
                     std::vector<LayerTrace<T>>* trace = nullptr) {
    if (tokens.empty()) throw ContractError("forward_lm needs at least one token");
    if (static_cast<int64_t>(tokens.size()) > m.cfg.context_len)
        throw ContractError("sequence length " + std::to_string(tokens.size()) +
                            " exceeds context_len " + std::to_string(m.cfg.context_len));
    Tensor<T> cur = embedding_gather(m.embed, tokens);
    Tensor<T> last_pre;
    for (size_t l = 0; l < m.units.size(); ++l) {
        Tensor<T> unit_in = m.cfg.norm ? rms_norm(cur, m.norm_gain[l]) : cur;
        ForwardOut<T> out = forward(m.units[l], unit_in, mode, chunk, spike_mode);
        Tensor<T> pre = out.pre;
        Tensor<T> spikes = out.spikes;
        if (m.cfg.ffn) {
            pre = matmul_nt(sigmoid(matmul_nt(pre, m.ffn_w1[l])), m.ffn_w2[l]);
            spikes = spike_fn(pre, static_cast<T>(m.cfg.v_th), static_cast<T>(m.cfg.alpha),
                              spike_mode);
        }
        if (trace) trace->push_back({spikes, pre});
        last_pre = pre;
        cur = spikes;
    }
    return matmul_nt(last_pre, m.head);
}

// ---------------------------------------------------------------------------
// Streaming forward pass: one token at a time, constant state
// ---------------------------------------------------------------------------

template <typename T>
struct LmState {
    std::vector<AmSuState<T>> layer_states;

    static LmState zero(const Model<T>& m) {
        LmState s;
        for (const auto& u : m.units) s.layer_states.push_back(AmSuState<T>::zero(u));
        return s;
    }

    // Total scalars carried between tokens: layers·(d + heads·head_dim²).
    int64_t scalar_count() const {
        int64_t n = 0;
        for (const auto& st : layer_states) {
            n += st.u.size();
            for (const auto& h : st.h) n += h.size();
        }
        return n;
    }
};

template <typename T>
Tensor<T> step_lm(Model<T>& m, LmState<T>& state, int32_t token) {
    if (token < 0 || token >= m.cfg.vocab)
        throw IndexError("token " + std::to_string(token) + " out of range");
    Tensor<T> cur = embedding_gather(m.embed, {token});
    Tensor<T> last_pre;
    for (size_t l = 0; l < m.units.size(); ++l) {
        Tensor<T> unit_in = m.cfg.norm ? rms_norm(cur, m.norm_gain[l]) : cur;
        StepOut<T> out = step_recurrent(m.units[l], state.layer_states[l], unit_in);
        Tensor<T> pre = out.pre;
        Tensor<T> spikes = out.spikes;
        if (m.cfg.ffn) {
            pre = matmul_nt(sigmoid(matmul_nt(pre, m.ffn_w1[l])), m.ffn_w2[l]);
            spikes = heaviside_ste(pre, static_cast<T>(m.cfg.v_th), static_cast<T>(m.cfg.alpha));
        }
        last_pre = pre;
        cur = spikes;
    }
    return matmul_nt(last_pre, m.head);
}

}  // namespace astrosnn
