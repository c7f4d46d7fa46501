#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "astrosnn/errors.hpp"
#include "astrosnn/rng.hpp"

namespace astrosnn {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

template <typename T>
class Tape;

template <typename T>
struct TensorNode {
    std::vector<T> value;
    std::vector<T> grad;   // allocated when the node joins a tape
    Tape<T>* tape = nullptr;
    bool tracked = false;  // leaf explicitly watched
};

// Dense row-major array, rank 1 or 2, with optional participation in a
// gradient tape. Handles share storage; values are treated as immutable
// once an op has consumed them.
template <typename T>
class Tensor {
    static_assert(std::is_floating_point_v<T>, "Tensor requires float or double");

public:
    Tensor() = default;

    static Tensor zeros(Shape s) {
        Tensor t;
        t.shape_ = std::move(s);
        t.check_rank();
        t.node_ = std::make_shared<TensorNode<T>>();
        t.node_->value.assign(shape_numel(t.shape_), T(0));
        return t;
    }

    static Tensor full(Shape s, T v) {
        Tensor t = zeros(std::move(s));
        std::fill(t.node_->value.begin(), t.node_->value.end(), v);
        return t;
    }

    static Tensor scalar(T v) { return full({1}, v); }

    static Tensor from(Shape s, std::vector<T> values) {
        Tensor t;
        t.shape_ = std::move(s);
        t.check_rank();
        if (shape_numel(t.shape_) != static_cast<int64_t>(values.size()))
            throw ShapeError("value count " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(t.shape_));
        t.node_ = std::make_shared<TensorNode<T>>();
        t.node_->value = std::move(values);
        return t;
    }

    static Tensor randn(Shape s, Rng& rng, T stddev = T(1)) {
        Tensor t = zeros(std::move(s));
        for (auto& v : t.node_->value) v = static_cast<T>(rng.normal()) * stddev;
        return t;
    }

    const Shape& shape() const { return shape_; }
    int64_t size() const { return node_ ? static_cast<int64_t>(node_->value.size()) : 0; }
    int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
    int64_t rows() const { require_rank2(); return shape_[0]; }
    int64_t cols() const { require_rank2(); return shape_[1]; }
    bool defined() const { return static_cast<bool>(node_); }

    T* data() { return node_->value.data(); }
    const T* data() const { return node_->value.data(); }
    std::vector<T>& values() { return node_->value; }
    const std::vector<T>& values() const { return node_->value; }

    T at(int64_t i) const { return node_->value[static_cast<size_t>(i)]; }
    T at(int64_t r, int64_t c) const {
        require_rank2();
        return node_->value[static_cast<size_t>(r * shape_[1] + c)];
    }
    T item() const {
        if (size() != 1) throw ContractError("item() on tensor of size " + std::to_string(size()));
        return node_->value[0];
    }

    Tape<T>* tape() const { return node_ ? node_->tape : nullptr; }
    bool tracked() const { return node_ && node_->tracked; }
    std::shared_ptr<TensorNode<T>>& node() { return node_; }
    const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

    const std::vector<T>& grad() const {
        if (!node_ || node_->grad.empty())
            throw StateError("tensor has no gradient (not on a tape or backward not run)");
        return node_->grad;
    }

    bool finite() const {
        for (T v : node_->value)
            if (!std::isfinite(v)) return false;
        return true;
    }

    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.node_ = std::make_shared<TensorNode<T>>();
        t.node_->value = node_->value;
        return t;
    }

private:
    friend class Tape<T>;

    void check_rank() const {
        if (shape_.size() < 1 || shape_.size() > 2)
            throw ShapeError("only rank-1 and rank-2 tensors are supported, got " + shape_str(shape_));
        for (int64_t d : shape_)
            if (d < 1) throw ShapeError("non-positive dimension in " + shape_str(shape_));
    }
    void require_rank2() const {
        if (shape_.size() != 2) throw ShapeError("expected rank-2 tensor, got " + shape_str(shape_));
    }

    Shape shape_;
    std::shared_ptr<TensorNode<T>> node_;
};

// Reverse-mode tape. Operations append their backward closures in execution
// order, so the record list is already a topological order; backward() walks
// it once in reverse and then the tape is consumed.
//
// Nodes hold a raw pointer back to their tape, so the destructor detaches
// every node this tape ever touched. Tensors (parameters especially) may
// outlive the tape and be re-watched by a later one.
template <typename T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    ~Tape() {
        for (auto& n : nodes_) {
            if (n->tape == this) {
                n->tape = nullptr;
                n->tracked = false;
            }
        }
    }

    void watch(Tensor<T>& t) {
        if (!t.defined()) throw ContractError("watch() on undefined tensor");
        auto& n = t.node();
        n->tape = this;
        n->tracked = true;
        n->grad.assign(t.size(), T(0));
        nodes_.push_back(n);
    }

    void attach(Tensor<T>& t) {
        auto& n = t.node();
        n->tape = this;
        n->grad.assign(t.size(), T(0));
        nodes_.push_back(n);
    }

    void record(std::function<void()> backward_fn) {
        records_.push_back(std::move(backward_fn));
    }

    bool consumed() const { return consumed_; }
    size_t num_records() const { return records_.size(); }

    void backward(const Tensor<T>& root) {
        if (consumed_) throw StateError("backward on a consumed tape");
        if (!root.defined() || root.tape() != this)
            throw ContractError("backward root does not belong to this tape");
        if (root.size() != 1)
            throw ContractError("backward root must be scalar, got " + shape_str(root.shape()));
        root.node()->grad[0] = T(1);
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
        consumed_ = true;
    }

private:
    std::vector<std::function<void()>> records_;
    std::vector<std::shared_ptr<TensorNode<T>>> nodes_;
    bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Raw GEMM kernels. Row-major, accumulate optionally. Loop orders chosen so
// the inner loop is contiguous for both operands.
// ---------------------------------------------------------------------------

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
    for (int64_t i = 0; i < m; ++i) {
        T* ci = c + i * n;
        if (!accumulate) std::fill(ci, ci + n, T(0));
        const T* ai = a + i * k;
        for (int64_t p = 0; p < k; ++p) {
            T aip = ai[p];
            if (aip == T(0)) continue;
            const T* bp = b + p * n;
            for (int64_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

// c[m×n] (+)= a[m×k] · b[n×k]ᵀ
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
    for (int64_t i = 0; i < m; ++i) {
        const T* ai = a + i * k;
        T* ci = c + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const T* bj = b + j * k;
            T s = T(0);
            for (int64_t p = 0; p < k; ++p) s += ai[p] * bj[p];
            ci[j] = accumulate ? ci[j] + s : s;
        }
    }
}

// c[m×n] (+)= a[k×m]ᵀ · b[k×n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
    if (!accumulate)
        for (int64_t i = 0; i < m * n; ++i) c[i] = T(0);
    for (int64_t p = 0; p < k; ++p) {
        const T* ap = a + p * m;
        const T* bp = b + p * n;
        for (int64_t i = 0; i < m; ++i) {
            T api = ap[i];
            if (api == T(0)) continue;
            T* ci = c + i * n;
            for (int64_t j = 0; j < n; ++j) ci[j] += api * bp[j];
        }
    }
}

// ---------------------------------------------------------------------------
// Op plumbing
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Tape<T>* common_tape(std::initializer_list<const Tensor<T>*> ts) {
    Tape<T>* tape = nullptr;
    for (const Tensor<T>* t : ts) {
        if (!t->defined() || !t->tape()) continue;
        if (tape && tape != t->tape())
            throw ContractError("operation mixes tensors from two different tapes");
        tape = t->tape();
    }
    return tape;
}

template <typename T>
Tensor<T> make_result(Shape s, Tape<T>* tape) {
    Tensor<T> out = Tensor<T>::zeros(std::move(s));
    if (tape) tape->attach(out);
    return out;
}

enum class Broadcast { none, scalar_a, scalar_b, row_a, row_b };

template <typename T>
Broadcast classify_broadcast(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() == b.shape()) return Broadcast::none;
    if (b.size() == 1) return Broadcast::scalar_b;
    if (a.size() == 1) return Broadcast::scalar_a;
    // row vector against matrix
    auto is_row_of = [](const Tensor<T>& v, const Tensor<T>& m) {
        if (m.rank() != 2) return false;
        if (v.rank() == 1 && v.shape()[0] == m.shape()[1]) return true;
        if (v.rank() == 2 && v.shape()[0] == 1 && v.shape()[1] == m.shape()[1]) return true;
        return false;
    };
    if (is_row_of(b, a)) return Broadcast::row_b;
    if (is_row_of(a, b)) return Broadcast::row_a;
    throw ShapeError("incompatible shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()) +
                     " (broadcast is limited to scalar-with-tensor and row-vector-with-matrix)");
}

// Accumulates a full-shaped gradient into a possibly-broadcast operand.
template <typename T>
void reduce_accumulate(const std::vector<T>& g_full, const Shape& full_shape,
                       std::vector<T>& g_small, int64_t small_size) {
    int64_t full_size = shape_numel(full_shape);
    if (small_size == full_size) {
        for (int64_t i = 0; i < full_size; ++i) g_small[i] += g_full[i];
    } else if (small_size == 1) {
        T s = T(0);
        for (int64_t i = 0; i < full_size; ++i) s += g_full[i];
        g_small[0] += s;
    } else {
        // row vector: sum over rows
        int64_t n = full_shape[1];
        int64_t m = full_shape[0];
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) g_small[j] += g_full[i * n + j];
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops (with scalar / row-vector broadcasting)
// ---------------------------------------------------------------------------

namespace detail {

template <typename T, typename FwdFn>
Tensor<T> binary_elementwise(const Tensor<T>& a, const Tensor<T>& b, FwdFn fwd,
                             T da_coeff_kind /*unused tag*/, bool is_mul, bool is_sub) {
    (void)da_coeff_kind;
    Broadcast bc = classify_broadcast(a, b);
    const Tensor<T>& big = (bc == Broadcast::scalar_a || bc == Broadcast::row_a) ? b : a;
    Tape<T>* tape = common_tape<T>({&a, &b});
    Tensor<T> out = make_result<T>(big.shape(), tape);

    int64_t n_total = big.size();
    int64_t ncols = big.rank() == 2 ? big.shape()[1] : n_total;
    auto idx_small = [&](int64_t i, const Tensor<T>& small) -> int64_t {
        if (small.size() == 1) return 0;
        return i % ncols;  // row vector broadcast
    };

    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    bool a_small = (bc == Broadcast::scalar_a || bc == Broadcast::row_a);
    bool b_small = (bc == Broadcast::scalar_b || bc == Broadcast::row_b);
    for (int64_t i = 0; i < n_total; ++i) {
        T va = a_small ? pa[idx_small(i, a)] : pa[i];
        T vb = b_small ? pb[idx_small(i, b)] : pb[i];
        po[i] = fwd(va, vb);
    }

    if (tape) {
        auto an = a.node();
        auto bn = b.node();
        auto on = out.node();
        Shape full_shape = big.shape();
        int64_t asz = a.size(), bsz = b.size();
        tape->record([an, bn, on, full_shape, asz, bsz, a_small, b_small, ncols, is_mul, is_sub]() {
            const auto& g = on->grad;
            int64_t n_total2 = static_cast<int64_t>(g.size());
            if (!an->grad.empty()) {
                std::vector<T> ga(n_total2);
                for (int64_t i = 0; i < n_total2; ++i) {
                    T coeff = T(1);
                    if (is_mul) {
                        int64_t bi = b_small ? (bsz == 1 ? 0 : i % ncols) : i;
                        coeff = bn->value[bi];
                    }
                    ga[i] = g[i] * coeff;
                }
                if (a_small)
                    detail::reduce_accumulate<T>(ga, full_shape, an->grad, asz);
                else
                    for (int64_t i = 0; i < n_total2; ++i) an->grad[i] += ga[i];
            }
            if (!bn->grad.empty()) {
                std::vector<T> gb(n_total2);
                for (int64_t i = 0; i < n_total2; ++i) {
                    T coeff = is_sub ? T(-1) : T(1);
                    if (is_mul) {
                        int64_t ai = a_small ? (asz == 1 ? 0 : i % ncols) : i;
                        coeff = an->value[ai];
                    }
                    gb[i] = g[i] * coeff;
                }
                if (b_small)
                    detail::reduce_accumulate<T>(gb, full_shape, bn->grad, bsz);
                else
                    for (int64_t i = 0; i < n_total2; ++i) bn->grad[i] += gb[i];
            }
        });
    }
    return out;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_elementwise<T>(a, b, [](T x, T y) { return x + y; }, T(0), false, false);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_elementwise<T>(a, b, [](T x, T y) { return x - y; }, T(0), false, true);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_elementwise<T>(a, b, [](T x, T y) { return x * y; }, T(0), true, false);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    Tape<T>* tape = detail::common_tape<T>({&a});
    Tensor<T> out = detail::make_result<T>(a.shape(), tape);
    const T* pa = a.data();
    T* po = out.data();
    for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] * c;
    if (tape) {
        auto an = a.node();
        auto on = out.node();
        tape->record([an, on, c]() {
            if (an->grad.empty()) return;
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * c;
        });
    }
    return out;
}

template <typename T>
Tensor<T> shift(const Tensor<T>& a, T c) {
    Tape<T>* tape = detail::common_tape<T>({&a});
    Tensor<T> out = detail::make_result<T>(a.shape(), tape);
    const T* pa = a.data();
    T* po = out.data();
    for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] + c;
    if (tape) {
        auto an = a.node();
        auto on = out.node();
        tape->record([an, on]() {
            if (an->grad.empty()) return;
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
void require_matmul_shapes(const Tensor<T>& a, const Tensor<T>& b, int64_t a_inner, int64_t b_inner) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul needs rank-2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    if (a_inner != b_inner)
        throw ShapeError("matmul inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}
}  // namespace detail

// a[m×k] · b[k×n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_matmul_shapes(a, b, a.shape()[1], b.shape()[0]);
    int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Tape<T>* tape = detail::common_tape<T>({&a, &b});
    Tensor<T> out = detail::make_result<T>({m, n}, tape);
    gemm_nn(a.data(), b.data(), out.data(), m, k, n, false);
    if (tape) {
        auto an = a.node();
        auto bn = b.node();
        auto on = out.node();
        tape->record([an, bn, on, m, k, n]() {
            if (!an->grad.empty())
                gemm_nt(on->grad.data(), bn->value.data(), an->grad.data(), m, n, k, true);
            if (!bn->grad.empty())
                gemm_tn(an->value.data(), on->grad.data(), bn->grad.data(), k, m, n, true);
        });
    }
    return out;
}

// a[m×k] · b[n×k]ᵀ
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_matmul_shapes(a, b, a.shape()[1], b.shape()[1]);
    int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
    Tape<T>* tape = detail::common_tape<T>({&a, &b});
    Tensor<T> out = detail::make_result<T>({m, n}, tape);
    gemm_nt(a.data(), b.data(), out.data(), m, k, n, false);
    if (tape) {
        auto an = a.node();
        auto bn = b.node();
        auto on = out.node();
        tape->record([an, bn, on, m, k, n]() {
            // C = A·Bᵀ: dA += dC·B, dB += dCᵀ·A
            if (!an->grad.empty())
                gemm_nn(on->grad.data(), bn->value.data(), an->grad.data(), m, n, k, true);
            if (!bn->grad.empty())
                gemm_tn(on->grad.data(), an->value.data(), bn->grad.data(), n, m, k, true);
        });
    }
    return out;
}

// a[k×m]ᵀ · b[k×n]
template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_matmul_shapes(a, b, a.shape()[0], b.shape()[0]);
    int64_t m = a.shape()[1], k = a.shape()[0], n = b.shape()[1];
    Tape<T>* tape = detail::common_tape<T>({&a, &b});
    Tensor<T> out = detail::make_result<T>({m, n}, tape);
    gemm_tn(a.data(), b.data(), out.data(), m, k, n, false);
    if (tape) {
        auto an = a.node();
        auto bn = b.node();
        auto on = out.node();
        tape->record([an, bn, on, m, k, n]() {
            // C = AᵀB: dA += B·dCᵀ, dB += A·dC
            if (!an->grad.empty())
                gemm_nt(bn->value.data(), on->grad.data(), an->grad.data(), k, n, m, true);
            if (!bn->grad.empty())
                gemm_nn(an->value.data(), on->grad.data(), bn->grad.data(), k, m, n, true);
        });
    }
    return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    if (a.rank() != 2) throw ShapeError("transpose needs rank-2, got " + shape_str(a.shape()));
    int64_t m = a.shape()[0], n = a.shape()[1];
    Tape<T>* tape = detail::common_tape<T>({&a});
    Tensor<T> out = detail::make_result<T>({n, m}, tape);
    const T* pa = a.data();
    T* po = out.data();
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) po[j * m + i] = pa[i * n + j];
    if (tape) {
        auto an = a.node();
        auto on = out.node();
        tape->record([an, on, m, n]() {
            if (an->grad.empty()) return;
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) an->grad[i * n + j] += on->grad[j * m + i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    Tape<T>* tape = detail::common_tape<T>({&a});
    Tensor<T> out = detail::make_result<T>(a.shape(), tape);
    const T* pa = a.data();
    T* po = out.data();
    for (int64_t i = 0; i < a.size(); ++i) {
        T x = pa[i];
        if (x >= T(0)) {
            po[i] = T(1) / (T(1) + std::exp(-x));
        } else {
            T e = std::exp(x);
            po[i] = e / (T(1) + e);
        }
    }
    if (tape) {
        auto an = a.node();
        auto on = out.node();
        tape->record([an, on]() {
            if (an->grad.empty()) return;
            for (size_t i = 0; i < on->grad.size(); ++i) {
                T y = on->value[i];
                an->grad[i] += on->grad[i] * y * (T(1) - y);
            }
        });
    }
    return out;
}

// Triangular surrogate window: weight alpha at x == v_th, zero outside
// |x - v_th| >= 1/alpha.
template <typename T>
inline T surrogate_window(T x, T v_th, T alpha) {
    T w = alpha - alpha * alpha * std::abs(x - v_th);
    return w > T(0) ? w : T(0);
}

// Forward: exact 0/1 threshold crossing. Backward: straight-through with the
// triangular surrogate multiplied into the upstream gradient.
template <typename T>
Tensor<T> heaviside_ste(const Tensor<T>& a, T v_th, T alpha) {
    if (!(alpha > T(0))) throw ParameterError("surrogate width alpha must be positive");
    Tape<T>* tape = detail::common_tape<T>({&a});
    Tensor<T> out = detail::make_result<T>(a.shape(), tape);
    const T* pa = a.data();
    T* po = out.data();
    for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] >= v_th ? T(1) : T(0);
    if (tape) {
        auto an = a.node();
        auto on = out.node();
        tape->record([an, on, v_th, alpha]() {
            if (an->grad.empty()) return;
            for (size_t i = 0; i < on->grad.size(); ++i)
                an->grad[i] += on->grad[i] * surrogate_window(an->value[i], v_th, alpha);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    Tape<T>* tape = detail::common_tape<T>({&a});
    Tensor<T> out = detail::make_result<T>({1}, tape);
    T s = T(0);
    const T* pa = a.data();
    for (int64_t i = 0; i < a.size(); ++i) s += pa[i];
    out.data()[0] = s;
    if (tape) {
        auto an = a.node();
        auto on = out.node();
        tape->record([an, on]() {
            if (an->grad.empty()) return;
            T g = on->grad[0];
            for (auto& v : an->grad) v += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    Tensor<T> s = sum(a);
    return scale(s, T(1) / static_cast<T>(a.size()));
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, int64_t r0, int64_t r1) {
    if (a.rank() != 2) throw ShapeError("slice_rows needs rank-2");
    int64_t m = a.shape()[0], n = a.shape()[1];
    if (r0 < 0 || r1 > m || r0 >= r1) throw IndexError("row slice out of range");
    Tape<T>* tape = detail::common_tape<T>({&a});
    Tensor<T> out = detail::make_result<T>({r1 - r0, n}, tape);
    std::copy(a.data() + r0 * n, a.data() + r1 * n, out.data());
    if (tape) {
        auto an = a.node();
        auto on = out.node();
        tape->record([an, on, r0, n]() {
            if (an->grad.empty()) return;
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[r0 * n + i] += on->grad[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, int64_t c0, int64_t c1) {
    if (a.rank() != 2) throw ShapeError("slice_cols needs rank-2");
    int64_t m = a.shape()[0], n = a.shape()[1];
    if (c0 < 0 || c1 > n || c0 >= c1) throw IndexError("column slice out of range");
    int64_t w = c1 - c0;
    Tape<T>* tape = detail::common_tape<T>({&a});
    Tensor<T> out = detail::make_result<T>({m, w}, tape);
    const T* pa = a.data();
    T* po = out.data();
    for (int64_t i = 0; i < m; ++i)
        std::copy(pa + i * n + c0, pa + i * n + c1, po + i * w);
    if (tape) {
        auto an = a.node();
        auto on = out.node();
        tape->record([an, on, m, n, c0, w]() {
            if (an->grad.empty()) return;
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < w; ++j) an->grad[i * n + c0 + j] += on->grad[i * w + j];
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ContractError("concat_cols of zero tensors");
    int64_t m = parts[0].shape()[0];
    int64_t n = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.shape()[0] != m)
            throw ShapeError("concat_cols row mismatch");
        n += p.shape()[1];
    }
    std::initializer_list<const Tensor<T>*> dummy{};
    Tape<T>* tape = nullptr;
    for (const auto& p : parts) {
        if (p.tape()) {
            if (tape && tape != p.tape()) throw ContractError("concat mixes tapes");
            tape = p.tape();
        }
    }
    (void)dummy;
    Tensor<T> out = detail::make_result<T>({m, n}, tape);
    T* po = out.data();
    int64_t off = 0;
    for (const auto& p : parts) {
        int64_t w = p.shape()[1];
        const T* pp = p.data();
        for (int64_t i = 0; i < m; ++i)
            std::copy(pp + i * w, pp + (i + 1) * w, po + i * n + off);
        off += w;
    }
    if (tape) {
        std::vector<std::shared_ptr<TensorNode<T>>> ins;
        std::vector<int64_t> widths;
        for (const auto& p : parts) {
            ins.push_back(p.node());
            widths.push_back(p.shape()[1]);
        }
        auto on = out.node();
        tape->record([ins, widths, on, m, n]() {
            int64_t off2 = 0;
            for (size_t t = 0; t < ins.size(); ++t) {
                int64_t w = widths[t];
                if (!ins[t]->grad.empty())
                    for (int64_t i = 0; i < m; ++i)
                        for (int64_t j = 0; j < w; ++j)
                            ins[t]->grad[i * w + j] += on->grad[i * n + off2 + j];
                off2 += w;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ContractError("concat_rows of zero tensors");
    int64_t n = parts[0].shape()[1];
    int64_t m = 0;
    Tape<T>* tape = nullptr;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.shape()[1] != n) throw ShapeError("concat_rows col mismatch");
        m += p.shape()[0];
        if (p.tape()) {
            if (tape && tape != p.tape()) throw ContractError("concat mixes tapes");
            tape = p.tape();
        }
    }
    Tensor<T> out = detail::make_result<T>({m, n}, tape);
    T* po = out.data();
    int64_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.data(), p.data() + p.size(), po + off);
        off += p.size();
    }
    if (tape) {
        std::vector<std::shared_ptr<TensorNode<T>>> ins;
        std::vector<int64_t> sizes;
        for (const auto& p : parts) {
            ins.push_back(p.node());
            sizes.push_back(p.size());
        }
        auto on = out.node();
        tape->record([ins, sizes, on]() {
            int64_t off2 = 0;
            for (size_t t = 0; t < ins.size(); ++t) {
                if (!ins[t]->grad.empty())
                    for (int64_t i = 0; i < sizes[t]; ++i) ins[t]->grad[i] += on->grad[off2 + i];
                off2 += sizes[t];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> detach(const Tensor<T>& a) {
    return Tensor<T>::from(a.shape(), a.values());
}

// ---------------------------------------------------------------------------
// Embedding gather, RMS normalization, cross entropy, rotary rotation
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> embedding_gather(const Tensor<T>& table, const std::vector<int32_t>& ids) {
    if (table.rank() != 2) throw ShapeError("embedding table must be rank-2");
    int64_t v = table.shape()[0], d = table.shape()[1];
    for (int32_t id : ids)
        if (id < 0 || id >= v)
            throw IndexError("token id " + std::to_string(id) + " out of range for vocab " +
                             std::to_string(v));
    int64_t t_len = static_cast<int64_t>(ids.size());
    Tape<T>* tape = detail::common_tape<T>({&table});
    Tensor<T> out = detail::make_result<T>({t_len, d}, tape);
    const T* pt = table.data();
    T* po = out.data();
    for (int64_t t = 0; t < t_len; ++t)
        std::copy(pt + ids[t] * d, pt + (ids[t] + 1) * d, po + t * d);
    if (tape) {
        auto tn = table.node();
        auto on = out.node();
        std::vector<int32_t> ids_copy = ids;
        tape->record([tn, on, ids_copy, d]() {
            if (tn->grad.empty()) return;
            for (size_t t = 0; t < ids_copy.size(); ++t)
                for (int64_t j = 0; j < d; ++j)
                    tn->grad[ids_copy[t] * d + j] += on->grad[t * d + j];
        });
    }
    return out;
}

// Row-wise RMS normalization with a learned gain: y = x / rms(x) * gain.
template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps = T(1e-8)) {
    if (x.rank() != 2) throw ShapeError("rms_norm input must be rank-2");
    int64_t m = x.shape()[0], n = x.shape()[1];
    if (gain.size() != n) throw ShapeError("rms_norm gain size mismatch");
    Tape<T>* tape = detail::common_tape<T>({&x, &gain});
    Tensor<T> out = detail::make_result<T>({m, n}, tape);
    std::vector<T> inv_rms(m);
    const T* px = x.data();
    const T* pg = gain.data();
    T* po = out.data();
    for (int64_t i = 0; i < m; ++i) {
        T ss = T(0);
        for (int64_t j = 0; j < n; ++j) ss += px[i * n + j] * px[i * n + j];
        T r = std::sqrt(ss / static_cast<T>(n) + eps);
        inv_rms[i] = T(1) / r;
        for (int64_t j = 0; j < n; ++j) po[i * n + j] = px[i * n + j] * inv_rms[i] * pg[j];
    }
    if (tape) {
        auto xn = x.node();
        auto gn = gain.node();
        auto on = out.node();
        tape->record([xn, gn, on, inv_rms, m, n]() {
            for (int64_t i = 0; i < m; ++i) {
                T ir = inv_rms[i];
                const T* xrow = xn->value.data() + i * n;
                const T* grow = on->grad.data() + i * n;
                if (!gn->grad.empty())
                    for (int64_t j = 0; j < n; ++j) gn->grad[j] += grow[j] * xrow[j] * ir;
                if (!xn->grad.empty()) {
                    // w = dy ⊙ g; dx = w/r − x·(w·x)/(n·r³)
                    T wx = T(0);
                    for (int64_t j = 0; j < n; ++j) wx += grow[j] * gn->value[j] * xrow[j];
                    T k = wx * ir * ir * ir / static_cast<T>(n);
                    for (int64_t j = 0; j < n; ++j)
                        xn->grad[i * n + j] += grow[j] * gn->value[j] * ir - xrow[j] * k;
                }
            }
        });
    }
    return out;
}

// Mean over positions of -log softmax(logits)[target], stabilized by
// max-subtraction.
template <typename T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits, const std::vector<int32_t>& targets) {
    if (logits.rank() != 2) throw ShapeError("cross_entropy logits must be rank-2");
    int64_t rows = logits.shape()[0], v = logits.shape()[1];
    if (static_cast<int64_t>(targets.size()) != rows)
        throw ShapeError("cross_entropy target count mismatch");
    for (int32_t t : targets)
        if (t < 0 || t >= v)
            throw IndexError("target " + std::to_string(t) + " out of range for vocab " +
                             std::to_string(v));
    Tape<T>* tape = detail::common_tape<T>({&logits});
    Tensor<T> out = detail::make_result<T>({1}, tape);
    const T* pl = logits.data();
    T total = T(0);
    for (int64_t i = 0; i < rows; ++i) {
        const T* row = pl + i * v;
        T mx = row[0];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        T se = T(0);
        for (int64_t j = 0; j < v; ++j) se += std::exp(row[j] - mx);
        total += mx + std::log(se) - row[targets[i]];
    }
    out.data()[0] = total / static_cast<T>(rows);
    if (tape) {
        auto ln = logits.node();
        auto on = out.node();
        std::vector<int32_t> tg = targets;
        tape->record([ln, on, tg, rows, v]() {
            if (ln->grad.empty()) return;
            T g = on->grad[0] / static_cast<T>(rows);
            for (int64_t i = 0; i < rows; ++i) {
                const T* row = ln->value.data() + i * v;
                T mx = row[0];
                for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
                T se = T(0);
                for (int64_t j = 0; j < v; ++j) se += std::exp(row[j] - mx);
                for (int64_t j = 0; j < v; ++j) {
                    T p = std::exp(row[j] - mx) / se;
                    ln->grad[i * v + j] += g * (p - (tg[i] == j ? T(1) : T(0)));
                }
            }
        });
    }
    return out;
}

// Rotary rotation of consecutive pairs: row r (absolute position
// start_pos + r) rotates pair i by angle pos·θᵢ, θᵢ = 10000^(−2i/dim).
// The backward pass is the inverse rotation.
template <typename T>
Tensor<T> rope_apply(const Tensor<T>& x, int64_t start_pos) {
    if (x.rank() != 2) throw ShapeError("rope input must be rank-2");
    int64_t m = x.shape()[0], n = x.shape()[1];
    if (n % 2 != 0) throw ConfigError("rotary encoding requires an even head dimension, got " +
                                      std::to_string(n));
    Tape<T>* tape = detail::common_tape<T>({&x});
    Tensor<T> out = detail::make_result<T>({m, n}, tape);
    int64_t pairs = n / 2;
    std::vector<T> theta(pairs);
    for (int64_t i = 0; i < pairs; ++i)
        theta[i] = std::pow(T(10000), T(-2) * static_cast<T>(i) / static_cast<T>(n));
    const T* px = x.data();
    T* po = out.data();
    for (int64_t r = 0; r < m; ++r) {
        T pos = static_cast<T>(start_pos + r);
        for (int64_t i = 0; i < pairs; ++i) {
            T a = pos * theta[i];
            T c = std::cos(a), s = std::sin(a);
            T x0 = px[r * n + 2 * i], x1 = px[r * n + 2 * i + 1];
            po[r * n + 2 * i] = x0 * c - x1 * s;
            po[r * n + 2 * i + 1] = x0 * s + x1 * c;
        }
    }
    if (tape) {
        auto xn = x.node();
        auto on = out.node();
        tape->record([xn, on, theta, start_pos, m, n]() {
            if (xn->grad.empty()) return;
            int64_t pairs2 = n / 2;
            for (int64_t r = 0; r < m; ++r) {
                T pos = static_cast<T>(start_pos + r);
                for (int64_t i = 0; i < pairs2; ++i) {
                    T a = pos * theta[i];
                    T c = std::cos(a), s = std::sin(a);
                    T g0 = on->grad[r * n + 2 * i], g1 = on->grad[r * n + 2 * i + 1];
                    xn->grad[r * n + 2 * i] += g0 * c + g1 * s;
                    xn->grad[r * n + 2 * i + 1] += -g0 * s + g1 * c;
                }
            }
        });
    }
    return out;
}

}  // namespace astrosnn
