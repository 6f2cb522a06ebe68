#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vitdrive {

// ---------------------------------------------------------------------------
// Dense row-major tensors with reverse-mode autodiff on a define-by-run tape.
// Float instantiation is the training substrate; the double instantiation
// exists for high-precision gradient checks. No broadcasting beyond the row
// bias case, no views: every op allocates its output and never mutates inputs.
// ---------------------------------------------------------------------------

template <typename S>
class TapeT;

namespace detail {

template <typename S>
struct TensorDataT {
    std::vector<int> shape;
    std::vector<S> value;
    std::vector<S> grad;  // sized lazily on first accumulation
    bool requires_grad = false;
    const void* produced_by = nullptr;  // tape that recorded this node
};

inline std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

inline int64_t shape_numel(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

}  // namespace detail

template <typename S>
class TensorT {
public:
    using Data = detail::TensorDataT<S>;

    TensorT() = default;

    static TensorT zeros(std::vector<int> shape) {
        return filled(std::move(shape), S(0));
    }

    // Uninitialized storage for ops that overwrite every element.
    static TensorT uninitialized(std::vector<int> shape) {
        check_shape(shape);
        auto d = std::make_shared<Data>();
        d->value.resize(static_cast<size_t>(detail::shape_numel(shape)));
        d->shape = std::move(shape);
        return TensorT(std::move(d));
    }

    static TensorT filled(std::vector<int> shape, S v) {
        check_shape(shape);
        auto d = std::make_shared<Data>();
        d->value.assign(static_cast<size_t>(detail::shape_numel(shape)), v);
        d->shape = std::move(shape);
        return TensorT(std::move(d));
    }

    static TensorT from_data(std::vector<int> shape, std::vector<S> data) {
        check_shape(shape);
        if (detail::shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                        " does not match shape " + detail::shape_str(shape));
        auto d = std::make_shared<Data>();
        d->shape = std::move(shape);
        d->value = std::move(data);
        return TensorT(std::move(d));
    }

    static TensorT scalar(S v) { return from_data({1}, {v}); }

    bool defined() const { return static_cast<bool>(d_); }
    const std::vector<int>& shape() const { return d_->shape; }
    int dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(d_->shape.size()); }
    int64_t numel() const { return static_cast<int64_t>(d_->value.size()); }

    std::span<S> values() { return d_->value; }
    std::span<const S> values() const { return d_->value; }
    S item() const {
        if (numel() != 1) throw std::logic_error("item() on tensor of shape " + shape_string());
        return d_->value[0];
    }

    // 2D accessors (the dominant case in this codebase).
    S& at(int r, int c) { return d_->value[static_cast<size_t>(r) * dim(1) + c]; }
    S at(int r, int c) const { return d_->value[static_cast<size_t>(r) * dim(1) + c]; }

    bool requires_grad() const { return d_->requires_grad; }
    TensorT& set_requires_grad(bool b) {
        d_->requires_grad = b;
        return *this;
    }

    bool has_grad() const { return !d_->grad.empty(); }
    std::span<S> grad() {
        ensure_grad();
        return d_->grad;
    }
    std::span<const S> grad_view() const {
        static const std::vector<S> empty;
        return d_->grad.empty() ? std::span<const S>(empty) : std::span<const S>(d_->grad);
    }
    void zero_grad() {
        if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), S(0));
    }

    // Deep copy of values; grad and tape association are not carried over.
    TensorT clone() const {
        auto d = std::make_shared<Data>();
        d->shape = d_->shape;
        d->value = d_->value;
        d->requires_grad = d_->requires_grad;
        return TensorT(std::move(d));
    }

    void copy_values_from(const TensorT& o) {
        if (o.d_->shape != d_->shape)
            throw std::invalid_argument("copy_values_from shape mismatch: " + shape_string() +
                                        " vs " + o.shape_string());
        d_->value = o.d_->value;
    }

    std::string shape_string() const { return detail::shape_str(d_->shape); }

    bool same_node(const TensorT& o) const { return d_ == o.d_; }

private:
    explicit TensorT(std::shared_ptr<Data> d) : d_(std::move(d)) {}

    static void check_shape(const std::vector<int>& shape) {
        if (shape.empty()) throw std::invalid_argument("tensor shape must have at least one extent");
        for (int d : shape)
            if (d <= 0)
                throw std::invalid_argument("tensor extents must be positive, got " +
                                            detail::shape_str(shape));
    }

    void ensure_grad() {
        if (d_->grad.empty()) d_->grad.assign(d_->value.size(), S(0));
    }

    std::shared_ptr<Data> d_;

    friend class TapeT<S>;
    template <typename T>
    friend struct OpAccess;
};

// Internal hook used by op implementations.
template <typename S>
struct OpAccess {
    static detail::TensorDataT<S>* data(const TensorT<S>& t) { return t.d_.get(); }
};

// Ordered record of the differentiable ops of one forward pass. Ops append in
// execution order; backward() replays the exact reverse. Tapes are cheap and
// rebuilt per forward pass; one tape is single-threaded by contract.
template <typename S>
class TapeT {
public:
    void record(TensorT<S>& out, std::function<void()> backward_fn) {
        auto* d = OpAccess<S>::data(out);
        d->requires_grad = true;
        d->produced_by = this;
        nodes_.push_back(out);
        ops_.push_back(std::move(backward_fn));
    }

    bool recording(const TensorT<S>& a) const {
        return OpAccess<S>::data(a)->requires_grad;
    }

    size_t size() const { return ops_.size(); }

    // Seeds d(loss)/d(loss) = 1 and propagates in reverse execution order.
    // Leaf gradients accumulate across repeated calls; intermediate node
    // gradients are cleared per call so each call contributes exactly one
    // full gradient of the loss. Node gradients allocate on first touch, so
    // ops outside the loss cone never materialize one (their closures bail
    // out on the empty buffer).
    void backward(TensorT<S>& loss) {
        if (loss.numel() != 1)
            throw std::logic_error("backward expects a scalar loss, got shape " +
                                   loss.shape_string());
        if (OpAccess<S>::data(loss)->produced_by != this)
            throw std::logic_error("backward: loss tensor was not produced on this tape");
        for (auto& n : nodes_) n.zero_grad();
        loss.grad()[0] = S(1);
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> ops_;
    std::vector<TensorT<S>> nodes_;
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

// ---------------------------------------------------------------------------
// Kernels. Plain loops ordered for contiguous inner access; each output row is
// written by exactly one thread, so results are bitwise stable for any thread
// count.
// ---------------------------------------------------------------------------
namespace detail {

constexpr int64_t kOmpFlopCutoff = 1 << 22;

// C[m x n] = A[m x k] * B[k x n]  (overwrite)
template <typename S>
void gemm_nn_set(const S* a, const S* b, S* c, int m, int k, int n) {
#pragma omp parallel for schedule(static) if (static_cast<int64_t>(m) * k * n > kOmpFlopCutoff)
    for (int i = 0; i < m; ++i) {
        S* crow = c + static_cast<size_t>(i) * n;
        const S* arow = a + static_cast<size_t>(i) * k;
        {
            const S av = arow[0];
            for (int j = 0; j < n; ++j) crow[j] = av * b[j];
        }
        for (int p = 1; p < k; ++p) {
            const S av = arow[p];
            const S* brow = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m x n] += A[m x k] * B[k x n]
template <typename S>
void gemm_nn_acc(const S* a, const S* b, S* c, int m, int k, int n) {
#pragma omp parallel for schedule(static) if (static_cast<int64_t>(m) * k * n > kOmpFlopCutoff)
    for (int i = 0; i < m; ++i) {
        S* crow = c + static_cast<size_t>(i) * n;
        const S* arow = a + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const S av = arow[p];
            const S* brow = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m x n] = A[m x k] * B[n x k]^T  (overwrite)
template <typename S>
void gemm_nt_set(const S* a, const S* b, S* c, int m, int k, int n) {
#pragma omp parallel for schedule(static) if (static_cast<int64_t>(m) * k * n > kOmpFlopCutoff)
    for (int i = 0; i < m; ++i) {
        const S* arow = a + static_cast<size_t>(i) * k;
        S* crow = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const S* brow = b + static_cast<size_t>(j) * k;
            S acc = S(0);
#pragma omp simd reduction(+ : acc)
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] = acc;
        }
    }
}

// C[m x n] += A[m x k] * B[n x k]^T
template <typename S>
void gemm_nt_acc(const S* a, const S* b, S* c, int m, int k, int n) {
#pragma omp parallel for schedule(static) if (static_cast<int64_t>(m) * k * n > kOmpFlopCutoff)
    for (int i = 0; i < m; ++i) {
        const S* arow = a + static_cast<size_t>(i) * k;
        S* crow = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const S* brow = b + static_cast<size_t>(j) * k;
            S acc = S(0);
#pragma omp simd reduction(+ : acc)
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C[k x n] += A[m x k]^T * B[m x n]
template <typename S>
void gemm_tn_acc(const S* a, const S* b, S* c, int m, int k, int n) {
#pragma omp parallel for schedule(static) if (static_cast<int64_t>(m) * k * n > kOmpFlopCutoff)
    for (int p = 0; p < k; ++p) {
        S* crow = c + static_cast<size_t>(p) * n;
        for (int i = 0; i < m; ++i) {
            const S av = a[static_cast<size_t>(i) * k + p];
            const S* brow = b + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// exp/erf for the float path: branch-free polynomial forms that the
// vectorizer can handle, ~1e-7 relative accuracy (Cephes-style expf,
// Abramowitz-Stegun 7.1.26 erf). The double path keeps libm so the
// high-precision oracle tests see full accuracy.
inline float poly_exp(float x) {
    x = std::max(x, -87.0f);
    x = std::min(x, 88.0f);
    const float z = std::floor(1.44269504088896341f * x + 0.5f);
    x -= z * 0.693359375f;
    x -= z * -2.12194440e-4f;
    float p = 1.9875691500e-4f;
    p = p * x + 1.3981999507e-3f;
    p = p * x + 8.3334519073e-3f;
    p = p * x + 4.1665795894e-2f;
    p = p * x + 1.6666665459e-1f;
    p = p * x + 5.0000001201e-1f;
    const float r = x * x * p + x + 1.0f;
    const int32_t pow2 = (static_cast<int32_t>(z) + 127) << 23;
    float s;
    std::memcpy(&s, &pow2, sizeof(s));
    return r * s;
}

inline float poly_erf(float x) {
    const float sign = x < 0.0f ? -1.0f : 1.0f;
    const float ax = std::abs(x);
    const float t = 1.0f / (1.0f + 0.3275911f * ax);
    float p = 1.061405429f;
    p = p * t - 1.453152027f;
    p = p * t + 1.421413741f;
    p = p * t - 0.284496736f;
    p = p * t + 0.254829592f;
    const float y = 1.0f - p * t * poly_exp(-ax * ax);
    return sign * y;
}

template <typename S>
S op_exp(S x) {
    return std::exp(x);
}
template <>
inline float op_exp<float>(float x) {
    return poly_exp(x);
}

template <typename S>
S op_erf(S x) {
    return std::erf(x);
}
template <>
inline float op_erf<float>(float x) {
    return poly_erf(x);
}

// C[k x n] = A[m x k]^T * B[m x n]  (overwrite)
template <typename S>
void gemm_tn_set(const S* a, const S* b, S* c, int m, int k, int n) {
    std::fill(c, c + static_cast<size_t>(k) * n, S(0));
    gemm_tn_acc(a, b, c, m, k, n);
}

template <typename S>
void check_finite(const TensorT<S>& t, const char* op) {
#ifndef NDEBUG
    for (S v : t.values()) assert(std::isfinite(v) && op);
#else
    (void)t;
    (void)op;
#endif
}

template <typename S>
bool want_grad(TapeT<S>* tape, std::initializer_list<const TensorT<S>*> ins) {
    if (!tape) return false;
    for (const auto* t : ins)
        if ((*t).requires_grad()) return true;
    return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops. Every op takes the tape first (nullptr = inference, nothing recorded).
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> matmul(TapeT<S>* tape, TensorT<S> a, TensorT<S> b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw std::invalid_argument("matmul shape mismatch: " + a.shape_string() + " x " +
                                    b.shape_string());
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    auto out = TensorT<S>::uninitialized({m, n});
    detail::gemm_nn_set(a.values().data(), b.values().data(), out.values().data(), m, k, n);
    detail::check_finite(out, "matmul");
    if (detail::want_grad(tape, {&a, &b})) {
        tape->record(out, [a, b, out, m, k, n]() mutable {
            if (out.grad_view().empty()) return;
            // dA += dC * B^T ; dB += A^T * dC
            if (a.requires_grad())
                detail::gemm_nt_acc(out.grad_view().data(), b.values().data(), a.grad().data(),
                                    m, n, k);
            if (b.requires_grad())
                detail::gemm_tn_acc(a.values().data(), out.grad_view().data(), b.grad().data(),
                                    m, k, n);
        });
    }
    return out;
}

// a * b^T without materializing the transpose (used for Q K^T).
template <typename S>
TensorT<S> matmul_nt(TapeT<S>* tape, TensorT<S> a, TensorT<S> b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1))
        throw std::invalid_argument("matmul_nt shape mismatch: " + a.shape_string() + " x " +
                                    b.shape_string() + "^T");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
    auto out = TensorT<S>::uninitialized({m, n});
    detail::gemm_nt_set(a.values().data(), b.values().data(), out.values().data(), m, k, n);
    detail::check_finite(out, "matmul_nt");
    if (detail::want_grad(tape, {&a, &b})) {
        tape->record(out, [a, b, out, m, k, n]() mutable {
            if (out.grad_view().empty()) return;
            // C = A B^T: dA += dC * B ; dB += dC^T * A
            if (a.requires_grad())
                detail::gemm_nn_acc(out.grad_view().data(), b.values().data(), a.grad().data(),
                                    m, n, k);
            if (b.requires_grad())
                detail::gemm_tn_acc(out.grad_view().data(), a.values().data(), b.grad().data(),
                                    m, n, k);
        });
    }
    return out;
}

namespace detail {
template <typename S>
void require_same_shape(const TensorT<S>& a, const TensorT<S>& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + " shape mismatch: " + a.shape_string() +
                                    " vs " + b.shape_string());
}
}  // namespace detail

template <typename S>
TensorT<S> add(TapeT<S>* tape, TensorT<S> a, TensorT<S> b) {
    detail::require_same_shape(a, b, "add");
    auto out = TensorT<S>::uninitialized(a.shape());
    auto ov = out.values();
    auto av = a.values();
    auto bv = b.values();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    if (detail::want_grad(tape, {&a, &b})) {
        tape->record(out, [a, b, out]() mutable {
            auto g = out.grad_view();
            if (g.empty()) return;
            if (a.requires_grad()) {
                auto ga = a.grad();
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

template <typename S>
TensorT<S> sub(TapeT<S>* tape, TensorT<S> a, TensorT<S> b) {
    detail::require_same_shape(a, b, "sub");
    auto out = TensorT<S>::uninitialized(a.shape());
    auto ov = out.values();
    auto av = a.values();
    auto bv = b.values();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
    if (detail::want_grad(tape, {&a, &b})) {
        tape->record(out, [a, b, out]() mutable {
            auto g = out.grad_view();
            if (g.empty()) return;
            if (a.requires_grad()) {
                auto ga = a.grad();
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
    }
    return out;
}

template <typename S>
TensorT<S> mul(TapeT<S>* tape, TensorT<S> a, TensorT<S> b) {
    detail::require_same_shape(a, b, "mul");
    auto out = TensorT<S>::uninitialized(a.shape());
    auto ov = out.values();
    auto av = a.values();
    auto bv = b.values();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    if (detail::want_grad(tape, {&a, &b})) {
        tape->record(out, [a, b, out]() mutable {
            auto g = out.grad_view();
            if (g.empty()) return;
            if (a.requires_grad()) {
                auto ga = a.grad();
                auto bv2 = b.values();
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                auto av2 = a.values();
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
            }
        });
    }
    return out;
}

template <typename S>
TensorT<S> scale(TapeT<S>* tape, TensorT<S> a, S c) {
    auto out = TensorT<S>::uninitialized(a.shape());
    auto ov = out.values();
    auto av = a.values();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
    if (detail::want_grad(tape, {&a})) {
        tape->record(out, [a, out, c]() mutable {
            auto g = out.grad_view();
            if (g.empty()) return;
            auto ga = a.grad();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
        });
    }
    return out;
}

// x[R x C] + b[C], broadcast over rows.
template <typename S>
TensorT<S> add_bias(TapeT<S>* tape, TensorT<S> x, TensorT<S> b) {
    if (x.ndim() != 2 || b.numel() != x.dim(1))
        throw std::invalid_argument("add_bias shape mismatch: " + x.shape_string() + " + " +
                                    b.shape_string());
    const int rows = x.dim(0), cols = x.dim(1);
    auto out = TensorT<S>::uninitialized(x.shape());
    auto ov = out.values();
    auto xv = x.values();
    auto bv = b.values();
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j)
            ov[static_cast<size_t>(i) * cols + j] = xv[static_cast<size_t>(i) * cols + j] + bv[j];
    if (detail::want_grad(tape, {&x, &b})) {
        tape->record(out, [x, b, out, rows, cols]() mutable {
            auto g = out.grad_view();
            if (g.empty()) return;
            if (x.requires_grad()) {
                auto gx = x.grad();
                for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < cols; ++j) gb[j] += g[static_cast<size_t>(i) * cols + j];
            }
        });
    }
    return out;
}

// Softmax along the last axis, max-subtracted for overflow safety.
template <typename S>
TensorT<S> softmax(TapeT<S>* tape, TensorT<S> x) {
    const int cols = x.dim(x.ndim() - 1);
    const int rows = static_cast<int>(x.numel() / cols);
    auto out = TensorT<S>::uninitialized(x.shape());
    auto ov = out.values();
    auto xv = x.values();
    for (int i = 0; i < rows; ++i) {
        const S* in = xv.data() + static_cast<size_t>(i) * cols;
        S* o = ov.data() + static_cast<size_t>(i) * cols;
        S mx = in[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, in[j]);
        S sum = S(0);
        for (int j = 0; j < cols; ++j) {
            o[j] = detail::op_exp(in[j] - mx);
            sum += o[j];
        }
        const S inv = S(1) / sum;
        for (int j = 0; j < cols; ++j) o[j] *= inv;
    }
    detail::check_finite(out, "softmax");
    if (detail::want_grad(tape, {&x})) {
        tape->record(out, [x, out, rows, cols]() mutable {
            auto g = out.grad_view();
            if (g.empty()) return;
            auto y = out.values();
            auto gx = x.grad();
            for (int i = 0; i < rows; ++i) {
                const size_t off = static_cast<size_t>(i) * cols;
                S dot = S(0);
                for (int j = 0; j < cols; ++j) dot += g[off + j] * y[off + j];
                for (int j = 0; j < cols; ++j) gx[off + j] += y[off + j] * (g[off + j] - dot);
            }
        });
    }
    return out;
}

// Per-row layer normalization with affine gain/bias over the last axis.
template <typename S>
TensorT<S> layernorm(TapeT<S>* tape, TensorT<S> x, TensorT<S> gain,
                     TensorT<S> bias, S eps = S(1e-5)) {
    const int cols = x.dim(x.ndim() - 1);
    if (gain.numel() != cols || bias.numel() != cols)
        throw std::invalid_argument("layernorm gain/bias must match last axis: " +
                                    x.shape_string() + " vs " + gain.shape_string() + ", " +
                                    bias.shape_string());
    const int rows = static_cast<int>(x.numel() / cols);
    auto out = TensorT<S>::uninitialized(x.shape());
    // Cache per-row inverse stddev and normalized values for backward.
    auto xhat = std::make_shared<std::vector<S>>(x.numel());
    auto inv_std = std::make_shared<std::vector<S>>(rows);
    auto xv = x.values();
    auto gv = gain.values();
    auto bv = bias.values();
    auto ov = out.values();
    for (int i = 0; i < rows; ++i) {
        const size_t off = static_cast<size_t>(i) * cols;
        S mean = S(0);
        for (int j = 0; j < cols; ++j) mean += xv[off + j];
        mean /= static_cast<S>(cols);
        S var = S(0);
        for (int j = 0; j < cols; ++j) {
            const S d = xv[off + j] - mean;
            var += d * d;
        }
        var /= static_cast<S>(cols);
        const S is = S(1) / std::sqrt(var + eps);
        (*inv_std)[i] = is;
        for (int j = 0; j < cols; ++j) {
            const S xh = (xv[off + j] - mean) * is;
            (*xhat)[off + j] = xh;
            ov[off + j] = xh * gv[j] + bv[j];
        }
    }
    detail::check_finite(out, "layernorm");
    if (detail::want_grad(tape, {&x, &gain, &bias})) {
        tape->record(out, [x, gain, bias, out, xhat, inv_std, rows, cols]() mutable {
            auto g = out.grad_view();
            if (g.empty()) return;
            auto gv2 = gain.values();
            for (int i = 0; i < rows; ++i) {
                const size_t off = static_cast<size_t>(i) * cols;
                if (gain.requires_grad()) {
                    auto gg = gain.grad();
                    for (int j = 0; j < cols; ++j) gg[j] += g[off + j] * (*xhat)[off + j];
                }
                if (bias.requires_grad()) {
                    auto gb = bias.grad();
                    for (int j = 0; j < cols; ++j) gb[j] += g[off + j];
                }
                if (x.requires_grad()) {
                    auto gx = x.grad();
                    S sum_gy = S(0), sum_gyx = S(0);
                    for (int j = 0; j < cols; ++j) {
                        const S gy = g[off + j] * gv2[j];
                        sum_gy += gy;
                        sum_gyx += gy * (*xhat)[off + j];
                    }
                    const S invn = S(1) / static_cast<S>(cols);
                    for (int j = 0; j < cols; ++j) {
                        const S gy = g[off + j] * gv2[j];
                        gx[off + j] += (*inv_std)[i] *
                                       (gy - invn * sum_gy - (*xhat)[off + j] * invn * sum_gyx);
                    }
                }
            }
        });
    }
    return out;
}

// Exact GELU, x * Phi(x) with the erf formulation.
template <typename S>
TensorT<S> gelu(TapeT<S>* tape, TensorT<S> x) {
    constexpr S kInvSqrt2 = S(0.70710678118654752440);
    constexpr S kInvSqrt2Pi = S(0.39894228040143267794);
    auto out = TensorT<S>::uninitialized(x.shape());
    auto ov = out.values();
    auto xv = x.values();
    for (size_t i = 0; i < ov.size(); ++i) {
        const S cdf = S(0.5) * (S(1) + detail::op_erf(xv[i] * kInvSqrt2));
        ov[i] = xv[i] * cdf;
    }
    if (detail::want_grad(tape, {&x})) {
        tape->record(out, [x, out]() mutable {
            constexpr S inv_sqrt2 = S(0.70710678118654752440);
            constexpr S inv_sqrt2pi = S(0.39894228040143267794);
            auto g = out.grad_view();
            if (g.empty()) return;
            auto gx = x.grad();
            auto xv2 = x.values();
            for (size_t i = 0; i < g.size(); ++i) {
                const S v = xv2[i];
                const S cdf = S(0.5) * (S(1) + detail::op_erf(v * inv_sqrt2));
                const S pdf = inv_sqrt2pi * detail::op_exp(S(-0.5) * v * v);
                gx[i] += g[i] * (cdf + v * pdf);
            }
        });
    }
    return out;
}

template <typename S>
TensorT<S> slice_cols(TapeT<S>* tape, TensorT<S> x, int c0, int c1) {
    if (x.ndim() != 2 || c0 < 0 || c1 > x.dim(1) || c0 >= c1)
        throw std::invalid_argument("slice_cols [" + std::to_string(c0) + "," +
                                    std::to_string(c1) + ") out of range for " + x.shape_string());
    const int rows = x.dim(0), cols = x.dim(1), w = c1 - c0;
    auto out = TensorT<S>::uninitialized({rows, w});
    auto ov = out.values();
    auto xv = x.values();
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < w; ++j)
            ov[static_cast<size_t>(i) * w + j] = xv[static_cast<size_t>(i) * cols + c0 + j];
    if (detail::want_grad(tape, {&x})) {
        tape->record(out, [x, out, rows, cols, w, c0]() mutable {
            auto g = out.grad_view();
            if (g.empty()) return;
            auto gx = x.grad();
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < w; ++j)
                    gx[static_cast<size_t>(i) * cols + c0 + j] += g[static_cast<size_t>(i) * w + j];
        });
    }
    return out;
}

template <typename S>
TensorT<S> slice_rows(TapeT<S>* tape, TensorT<S> x, int r0, int r1) {
    if (x.ndim() != 2 || r0 < 0 || r1 > x.dim(0) || r0 >= r1)
        throw std::invalid_argument("slice_rows [" + std::to_string(r0) + "," +
                                    std::to_string(r1) + ") out of range for " + x.shape_string());
    const int cols = x.dim(1), h = r1 - r0;
    auto out = TensorT<S>::uninitialized({h, cols});
    auto ov = out.values();
    auto xv = x.values();
    std::copy(xv.begin() + static_cast<size_t>(r0) * cols,
              xv.begin() + static_cast<size_t>(r1) * cols, ov.begin());
    if (detail::want_grad(tape, {&x})) {
        tape->record(out, [x, out, cols, r0, h]() mutable {
            auto g = out.grad_view();
            if (g.empty()) return;
            auto gx = x.grad();
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < cols; ++j)
                    gx[static_cast<size_t>(r0 + i) * cols + j] +=
                        g[static_cast<size_t>(i) * cols + j];
        });
    }
    return out;
}

template <typename S>
TensorT<S> concat_rows(TapeT<S>* tape, std::vector<TensorT<S>> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows of zero tensors");
    const int cols = parts[0].dim(1);
    int rows = 0;
    for (const auto& p : parts) {
        if (p.ndim() != 2 || p.dim(1) != cols)
            throw std::invalid_argument("concat_rows column mismatch: " + parts[0].shape_string() +
                                        " vs " + p.shape_string());
        rows += p.dim(0);
    }
    auto out = TensorT<S>::uninitialized({rows, cols});
    auto ov = out.values();
    size_t off = 0;
    for (const auto& p : parts) {
        auto pv = p.values();
        std::copy(pv.begin(), pv.end(), ov.begin() + off);
        off += pv.size();
    }
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (tape && any) {
        tape->record(out, [parts, out]() mutable {
            auto g = out.grad_view();
            if (g.empty()) return;
            size_t off2 = 0;
            for (auto& p : parts) {
                const size_t n = static_cast<size_t>(p.numel());
                if (p.requires_grad()) {
                    auto gp = p.grad();
                    for (size_t i = 0; i < n; ++i) gp[i] += g[off2 + i];
                }
                off2 += n;
            }
        });
    }
    return out;
}

template <typename S>
TensorT<S> concat_cols(TapeT<S>* tape, std::vector<TensorT<S>> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols of zero tensors");
    const int rows = parts[0].dim(0);
    int cols = 0;
    for (const auto& p : parts) {
        if (p.ndim() != 2 || p.dim(0) != rows)
            throw std::invalid_argument("concat_cols row mismatch: " + parts[0].shape_string() +
                                        " vs " + p.shape_string());
        cols += p.dim(1);
    }
    auto out = TensorT<S>::uninitialized({rows, cols});
    auto ov = out.values();
    int c0 = 0;
    for (const auto& p : parts) {
        const int w = p.dim(1);
        auto pv = p.values();
        for (int i = 0; i < rows; ++i)
            std::copy(pv.begin() + static_cast<size_t>(i) * w,
                      pv.begin() + static_cast<size_t>(i + 1) * w,
                      ov.begin() + static_cast<size_t>(i) * cols + c0);
        c0 += w;
    }
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (tape && any) {
        tape->record(out, [parts, out, rows, cols]() mutable {
            auto g = out.grad_view();
            if (g.empty()) return;
            int c1 = 0;
            for (auto& p : parts) {
                const int w = p.dim(1);
                if (p.requires_grad()) {
                    auto gp = p.grad();
                    for (int i = 0; i < rows; ++i)
                        for (int j = 0; j < w; ++j)
                            gp[static_cast<size_t>(i) * w + j] +=
                                g[static_cast<size_t>(i) * cols + c1 + j];
                }
                c1 += w;
            }
        });
    }
    return out;
}

// Fused scaled dot-product attention over all heads of one layer.
//
// qkv is [T x 3D] laid out [Q | K | V]; head h owns columns h*Dh..(h+1)*Dh of
// each block. Output is [T x D], the column-concatenation of A_h V_h with
// A_h = softmax(Q_h K_h^T * inv_scale). Row-stochastic A_h matrices land in
// *attn_out when requested. Heads are independent, so the head loop
// parallelizes without changing results.
namespace detail {

// Gather head column block [T x Dh] from the fused [T x 3D] buffer.
template <typename S>
void gather_head(const S* qkv, int t, int stride, int col0, int dh, S* dst) {
    for (int i = 0; i < t; ++i)
        std::copy(qkv + static_cast<size_t>(i) * stride + col0,
                  qkv + static_cast<size_t>(i) * stride + col0 + dh,
                  dst + static_cast<size_t>(i) * dh);
}

template <typename S>
void transpose(const S* src, int rows, int cols, S* dst) {
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j)
            dst[static_cast<size_t>(j) * rows + i] = src[static_cast<size_t>(i) * cols + j];
}

}  // namespace detail

template <typename S>
TensorT<S> multihead_attention(TapeT<S>* tape, TensorT<S> qkv, int num_heads, S inv_scale,
                               std::vector<std::vector<S>>* attn_out = nullptr) {
    if (qkv.ndim() != 2 || qkv.dim(1) % (3 * num_heads) != 0)
        throw std::invalid_argument("multihead_attention: qkv " + qkv.shape_string() +
                                    " incompatible with " + std::to_string(num_heads) + " heads");
    const int t = qkv.dim(0);
    const int d = qkv.dim(1) / 3;
    const int dh = d / num_heads;
    const int stride = 3 * d;
    auto out = TensorT<S>::uninitialized({t, d});
    // Attention matrices are stashed for the backward pass.
    auto attn = std::make_shared<std::vector<std::vector<S>>>(
        static_cast<size_t>(num_heads), std::vector<S>(static_cast<size_t>(t) * t));
    const S* qkv_v = qkv.values().data();
    S* out_v = out.values().data();
#pragma omp parallel for schedule(static) if (num_heads > 1 && t >= 256)
    for (int h = 0; h < num_heads; ++h) {
        const size_t td = static_cast<size_t>(t) * dh;
        std::vector<S> buf(4 * td);
        S* qc = buf.data();
        S* kc = qc + td;
        S* vc = kc + td;
        S* ktr = vc + td;  // [Dh x T]
        detail::gather_head(qkv_v, t, stride, h * dh, dh, qc);
        detail::gather_head(qkv_v, t, stride, d + h * dh, dh, kc);
        detail::gather_head(qkv_v, t, stride, 2 * d + h * dh, dh, vc);
        detail::transpose(kc, t, dh, ktr);
        S* a = (*attn)[static_cast<size_t>(h)].data();
        detail::gemm_nn_set(qc, ktr, a, t, dh, t);
        for (int i = 0; i < t; ++i) {
            S* arow = a + static_cast<size_t>(i) * t;
            S mx = arow[0];
            for (int j = 1; j < t; ++j) mx = std::max(mx, arow[j]);
            mx *= inv_scale;
            S sum = S(0);
            for (int j = 0; j < t; ++j) {
                arow[j] = detail::op_exp(arow[j] * inv_scale - mx);
                sum += arow[j];
            }
            const S inv = S(1) / sum;
            for (int j = 0; j < t; ++j) arow[j] *= inv;
        }
        // O_h = A V, written back into the fused output column block.
        std::vector<S> oc(td);
        detail::gemm_nn_set(a, vc, oc.data(), t, t, dh);
        for (int i = 0; i < t; ++i)
            std::copy(oc.begin() + static_cast<size_t>(i) * dh,
                      oc.begin() + static_cast<size_t>(i + 1) * dh,
                      out_v + static_cast<size_t>(i) * d + h * dh);
    }
    detail::check_finite(out, "multihead_attention");
    if (attn_out) *attn_out = *attn;
    if (detail::want_grad(tape, {&qkv})) {
        tape->record(out, [qkv, out, attn, num_heads, t, d, dh, stride, inv_scale]() mutable {
            auto og = out.grad_view();
            if (og.empty()) return;
            const S* qkv_v = qkv.values().data();
            S* gqkv = qkv.grad().data();
            const S* go = og.data();
#pragma omp parallel for schedule(static) if (num_heads > 1 && t >= 256)
            for (int h = 0; h < num_heads; ++h) {
                const size_t td = static_cast<size_t>(t) * dh;
                const size_t tt = static_cast<size_t>(t) * t;
                std::vector<S> buf(8 * td + tt);
                S* qc = buf.data();
                S* kc = qc + td;
                S* vc = kc + td;
                S* goc = vc + td;   // dO_h contiguous [T x Dh]
                S* vtr = goc + td;  // [Dh x T]
                S* gq = vtr + td;   // dQ_h [T x Dh]
                S* gk = gq + td;    // dK_h [T x Dh]
                S* da = gk + td;    // dA then dS [T x T]
                S* gv = da + tt;    // dV_h [T x Dh]
                detail::gather_head(qkv_v, t, stride, h * dh, dh, qc);
                detail::gather_head(qkv_v, t, stride, d + h * dh, dh, kc);
                detail::gather_head(qkv_v, t, stride, 2 * d + h * dh, dh, vc);
                detail::gather_head(go, t, d, h * dh, dh, goc);
                detail::transpose(vc, t, dh, vtr);
                const S* a = (*attn)[static_cast<size_t>(h)].data();
                // dA = dO V^T
                detail::gemm_nn_set(goc, vtr, da, t, dh, t);
                // dV = A^T dO
                detail::gemm_tn_set(a, goc, gv, t, t, dh);
                // dS = A o (dA - rowsum(dA o A)), then fold the scale.
                for (int i = 0; i < t; ++i) {
                    const S* arow = a + static_cast<size_t>(i) * t;
                    S* darow = da + static_cast<size_t>(i) * t;
                    S dot = S(0);
#pragma omp simd reduction(+ : dot)
                    for (int j = 0; j < t; ++j) dot += darow[j] * arow[j];
                    for (int j = 0; j < t; ++j)
                        darow[j] = arow[j] * (darow[j] - dot) * inv_scale;
                }
                // dQ = dS K ; dK = dS^T Q
                detail::gemm_nn_set(da, kc, gq, t, t, dh);
                detail::gemm_tn_set(da, qc, gk, t, t, dh);
                // Scatter head gradients into the fused [T x 3D] buffer.
                for (int i = 0; i < t; ++i) {
                    S* grow = gqkv + static_cast<size_t>(i) * stride;
                    const size_t off = static_cast<size_t>(i) * dh;
                    for (int p = 0; p < dh; ++p) {
                        grow[h * dh + p] += gq[off + p];
                        grow[d + h * dh + p] += gk[off + p];
                        grow[2 * d + h * dh + p] += gv[off + p];
                    }
                }
            }
        });
    }
    return out;
}

template <typename S>
TensorT<S> sum_all(TapeT<S>* tape, TensorT<S> x) {
    S acc = S(0);
    for (S v : x.values()) acc += v;
    auto out = TensorT<S>::scalar(acc);
    if (detail::want_grad(tape, {&x})) {
        tape->record(out, [x, out]() mutable {
            auto og = out.grad_view();
            if (og.empty()) return;
            const S g = og[0];
            auto gx = x.grad();
            for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
        });
    }
    return out;
}

template <typename S>
TensorT<S> mean_all(TapeT<S>* tape, TensorT<S> x) {
    return scale(tape, sum_all(tape, x), S(1) / static_cast<S>(x.numel()));
}

}  // namespace vitdrive
