// Dense row-major tensors with tape-based reverse-mode autodiff.
//
// A TensorT is a handle: a shape plus shared value/gradient buffers.
// Operations are pure — they allocate fresh outputs and never mutate their
// inputs. When a graph is recording and at least one input participates in
// differentiation, the op pushes a backward closure onto the tape;
// GraphT::backward runs the tape in reverse exactly once, then drops each
// closure so saved intermediates free as the tape unwinds.
//
// Scalar type is a template parameter: float for training, double for
// gradient verification against finite differences.
#pragma once

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <vector>

#include "hyseq/common.hpp"
#include "hyseq/rng.hpp"

namespace hyseq {

namespace detail {

template <typename S>
struct StorageT {
    std::vector<S> data;
    std::vector<S> grad;
    bool requires_grad = false;
    bool is_leaf = false;

    explicit StorageT(int64_t n) {
        data.assign(static_cast<size_t>(n), S(0));
        MemStats::add(n * static_cast<int64_t>(sizeof(S)));
    }
    ~StorageT() {
        MemStats::sub(static_cast<int64_t>(data.capacity() + grad.capacity()) *
                      static_cast<int64_t>(sizeof(S)));
    }
    StorageT(const StorageT&) = delete;
    StorageT& operator=(const StorageT&) = delete;

    S* ensure_grad() {
        if (grad.empty()) {
            grad.assign(data.size(), S(0));
            MemStats::add(static_cast<int64_t>(grad.capacity()) * static_cast<int64_t>(sizeof(S)));
        }
        return grad.data();
    }
    void release_grad() {
        if (!grad.empty()) {
            MemStats::sub(static_cast<int64_t>(grad.capacity()) * static_cast<int64_t>(sizeof(S)));
            grad.clear();
            grad.shrink_to_fit();
        }
    }
};

// Row-major GEMM on raw pointers; backs matmul and the fused layer nodes.
inline void gemm_raw(bool ta, bool tb, int64_t m, int64_t n, int64_t k, float alpha,
                     const float* a, int64_t lda, const float* b, int64_t ldb, float beta,
                     float* c, int64_t ldc) {
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
                static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}
inline void gemm_raw(bool ta, bool tb, int64_t m, int64_t n, int64_t k, double alpha,
                     const double* a, int64_t lda, const double* b, int64_t ldb, double beta,
                     double* c, int64_t ldc) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
                static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

// C[m,n] += alpha * op(A) op(B); transposed operands use their natural
// (stored) leading dimensions.
template <typename S>
void gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, S alpha, const S* a, const S* b,
          S beta, S* c) {
    gemm_raw(ta, tb, m, n, k, alpha, a, ta ? m : k, b, tb ? k : n, beta, c, n);
}

template <typename S>
void transpose_block(const S* src, int64_t rows, int64_t cols, S* dst) {
    constexpr int64_t T = 64;
    for (int64_t i0 = 0; i0 < rows; i0 += T)
        for (int64_t j0 = 0; j0 < cols; j0 += T) {
            const int64_t i1 = std::min(i0 + T, rows), j1 = std::min(j0 + T, cols);
            for (int64_t i = i0; i < i1; ++i)
                for (int64_t j = j0; j < j1; ++j) dst[j * rows + i] = src[i * cols + j];
        }
}

template <typename S>
S sigmoid(S x) {
    return S(1) / (S(1) + std::exp(-x));
}

template <typename S>
S gelu_fwd(S x) {
    const S c = S(0.7978845608028654);  // sqrt(2/pi)
    const S u = c * (x + S(0.044715) * x * x * x);
    return S(0.5) * x * (S(1) + std::tanh(u));
}

template <typename S>
S gelu_bwd(S x) {
    const S c = S(0.7978845608028654);
    const S u = c * (x + S(0.044715) * x * x * x);
    const S t = std::tanh(u);
    const S du = c * (S(1) + S(0.134145) * x * x);
    return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * du;
}

// Per-row layer norm over the last axis; writes mean and 1/sqrt(var+eps).
template <typename S>
void ln_fwd(const S* x, int64_t rows, int64_t d, const S* gain, const S* bias, S* out, S* mean,
            S* rstd) {
    for (int64_t r = 0; r < rows; ++r) {
        const S* xr = x + r * d;
        S mu = 0;
        for (int64_t j = 0; j < d; ++j) mu += xr[j];
        mu /= static_cast<S>(d);
        S var = 0;
        for (int64_t j = 0; j < d; ++j) {
            const S c = xr[j] - mu;
            var += c * c;
        }
        var /= static_cast<S>(d);
        const S rs = S(1) / std::sqrt(var + S(1e-5));
        mean[r] = mu;
        rstd[r] = rs;
        S* yr = out + r * d;
        for (int64_t j = 0; j < d; ++j) yr[j] = (xr[j] - mu) * rs * gain[j] + bias[j];
    }
}

template <typename S>
void ln_bwd(const S* x, const S* go, int64_t rows, int64_t d, const S* gain, const S* mean,
            const S* rstd, S* dx_accum, S* dgain_accum, S* dbias_accum) {
    for (int64_t r = 0; r < rows; ++r) {
        const S* xr = x + r * d;
        const S* gr = go + r * d;
        const S mu = mean[r], rs = rstd[r];
        S s1 = 0, s2 = 0;
        for (int64_t j = 0; j < d; ++j) {
            const S xh = (xr[j] - mu) * rs;
            const S dyh = gr[j] * gain[j];
            s1 += dyh;
            s2 += dyh * xh;
        }
        s1 /= static_cast<S>(d);
        s2 /= static_cast<S>(d);
        S* dxr = dx_accum ? dx_accum + r * d : nullptr;
        for (int64_t j = 0; j < d; ++j) {
            const S xh = (xr[j] - mu) * rs;
            if (dxr) dxr[j] += rs * (gr[j] * gain[j] - s1 - xh * s2);
            if (dgain_accum) dgain_accum[j] += gr[j] * xh;
            if (dbias_accum) dbias_accum[j] += gr[j];
        }
    }
}

// Depthwise causal width-3 convolution over each length-L segment.
// k is [D,3]: taps for lags 0, 1, 2.
template <typename S>
void sc3_fwd(const S* x, int64_t b, int64_t l, int64_t d, const S* k, const S* bias, S* out) {
    for (int64_t s = 0; s < b; ++s) {
        const S* xs = x + s * l * d;
        S* ys = out + s * l * d;
        for (int64_t t = 0; t < l; ++t) {
            const S* x0 = xs + t * d;
            const S* x1 = t >= 1 ? xs + (t - 1) * d : nullptr;
            const S* x2 = t >= 2 ? xs + (t - 2) * d : nullptr;
            S* y = ys + t * d;
            for (int64_t j = 0; j < d; ++j) {
                S v = k[j * 3 + 0] * x0[j];
                if (x1) v += k[j * 3 + 1] * x1[j];
                if (x2) v += k[j * 3 + 2] * x2[j];
                y[j] = v + bias[j];
            }
        }
    }
}

template <typename S>
void sc3_bwd(const S* x, const S* go, int64_t b, int64_t l, int64_t d, const S* k, S* dx_accum,
             S* dk_accum, S* dbias_accum) {
    for (int64_t s = 0; s < b; ++s) {
        const S* xs = x + s * l * d;
        const S* gs = go + s * l * d;
        S* dxs = dx_accum ? dx_accum + s * l * d : nullptr;
        for (int64_t t = 0; t < l; ++t) {
            const S* g = gs + t * d;
            for (int64_t j = 0; j < d; ++j) {
                const S gv = g[j];
                if (dbias_accum) dbias_accum[j] += gv;
                if (dk_accum) {
                    dk_accum[j * 3 + 0] += gv * xs[t * d + j];
                    if (t >= 1) dk_accum[j * 3 + 1] += gv * xs[(t - 1) * d + j];
                    if (t >= 2) dk_accum[j * 3 + 2] += gv * xs[(t - 2) * d + j];
                }
                if (dxs) {
                    dxs[t * d + j] += k[j * 3 + 0] * gv;
                    if (t >= 1) dxs[(t - 1) * d + j] += k[j * 3 + 1] * gv;
                    if (t >= 2) dxs[(t - 2) * d + j] += k[j * 3 + 2] * gv;
                }
            }
        }
    }
}

}  // namespace detail

template <typename S>
class TensorT {
  public:
    TensorT() = default;

    static TensorT zeros(std::vector<int64_t> shape, bool requires_grad = false) {
        TensorT t;
        t.shape_ = std::move(shape);
        int64_t n = 1;
        for (int64_t e : t.shape_) {
            HYSEQ_CHECK(e > 0, DimensionError, "tensor extents must be positive, got %lld",
                        static_cast<long long>(e));
            n *= e;
        }
        t.st_ = std::make_shared<detail::StorageT<S>>(n);
        t.st_->requires_grad = requires_grad;
        t.st_->is_leaf = requires_grad;
        return t;
    }
    static TensorT full(std::vector<int64_t> shape, S value, bool requires_grad = false) {
        TensorT t = zeros(std::move(shape), requires_grad);
        std::fill(t.st_->data.begin(), t.st_->data.end(), value);
        return t;
    }
    static TensorT from(std::vector<int64_t> shape, std::vector<S> values,
                        bool requires_grad = false) {
        TensorT t = zeros(std::move(shape), requires_grad);
        HYSEQ_CHECK(static_cast<int64_t>(values.size()) == t.numel(), DimensionError,
                    "value count %zu does not match shape (numel %lld)", values.size(),
                    static_cast<long long>(t.numel()));
        std::copy(values.begin(), values.end(), t.st_->data.begin());
        return t;
    }
    static TensorT scalar(S v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }
    static TensorT randn(std::vector<int64_t> shape, Rng& rng, S std_dev = S(1),
                         bool requires_grad = false) {
        TensorT t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.st_->data) v = static_cast<S>(rng.normal()) * std_dev;
        return t;
    }

    bool defined() const { return st_ != nullptr; }
    const std::vector<int64_t>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(st_->data.size()); }

    S* data() { return st_->data.data(); }
    const S* data() const { return st_->data.data(); }
    S item() const {
        HYSEQ_CHECK(numel() == 1, DimensionError, "item() on tensor with %lld elements",
                    static_cast<long long>(numel()));
        return st_->data[0];
    }

    bool requires_grad() const { return st_->requires_grad; }
    void set_requires_grad(bool v) { st_->requires_grad = v; }
    bool is_leaf() const { return st_->is_leaf; }

    S* ensure_grad() { return st_->ensure_grad(); }
    S* grad_data() { return st_->grad.empty() ? nullptr : st_->grad.data(); }
    const S* grad_data() const { return st_->grad.empty() ? nullptr : st_->grad.data(); }
    bool has_grad() const { return !st_->grad.empty(); }
    void zero_grad() {
        if (!st_->grad.empty()) std::fill(st_->grad.begin(), st_->grad.end(), S(0));
    }
    // Interior tensors drop their gradient buffer once the tape has
    // consumed it; leaf gradients stay for the optimizer.
    void release_grad_interior() {
        if (!st_->is_leaf) st_->release_grad();
    }

    // Metadata-only reshape sharing the same buffers.
    TensorT reshape(std::vector<int64_t> shape) const {
        int64_t n = 1;
        for (int64_t e : shape) n *= e;
        HYSEQ_CHECK(n == numel(), DimensionError, "reshape to %lld elements from %lld",
                    static_cast<long long>(n), static_cast<long long>(numel()));
        TensorT t = *this;
        t.shape_ = std::move(shape);
        return t;
    }

    // Deep copy of values; detached from any graph.
    TensorT clone() const {
        TensorT t = zeros(shape_);
        std::copy(st_->data.begin(), st_->data.end(), t.st_->data.begin());
        return t;
    }

    bool same_storage(const TensorT& o) const { return st_ == o.st_; }

  private:
    std::vector<int64_t> shape_;
    std::shared_ptr<detail::StorageT<S>> st_;
};

using Tensor = TensorT<float>;

template <typename S>
class GraphT {
  public:
    explicit GraphT(bool recording = true) : recording_(recording) {}
    GraphT(const GraphT&) = delete;
    GraphT& operator=(const GraphT&) = delete;

    bool recording() const { return recording_ && !consumed_; }
    void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
    size_t size() const { return nodes_.size(); }

    // Runs the tape in reverse, accumulating gradients into every
    // requires_grad leaf reachable from `loss`. A graph is consumed by
    // this; a second backward is a state error.
    void backward(TensorT<S> loss) {
        HYSEQ_CHECK(!consumed_, StateError, "backward called twice on the same graph");
        HYSEQ_CHECK(recording_, StateError, "backward on a non-recording graph");
        HYSEQ_CHECK(loss.defined() && loss.numel() == 1, DimensionError,
                    "backward requires a scalar loss");
        HYSEQ_CHECK(loss.requires_grad(), StateError,
                    "loss is not attached to a live graph (no grad path)");
        consumed_ = true;
        loss.ensure_grad()[0] = S(1);
        for (size_t i = nodes_.size(); i-- > 0;) {
            nodes_[i]();
            nodes_[i] = nullptr;  // frees saved tensors as the tape unwinds
        }
        nodes_.clear();
    }

  private:
    std::vector<std::function<void()>> nodes_;
    bool recording_ = true;
    bool consumed_ = false;
};

using Graph = GraphT<float>;

namespace detail {

template <typename S>
bool want_grad(GraphT<S>& g, std::initializer_list<const TensorT<S>*> ins) {
    if (!g.recording()) return false;
    for (const auto* t : ins)
        if (t->requires_grad()) return true;
    return false;
}

template <typename S>
void accum(S* dst, const S* src, int64_t n) {
    for (int64_t i = 0; i < n; ++i) dst[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul

// [M,K] x [K,N] -> [M,N]; with ta the stored a is [K,M] used transposed,
// with tb the stored b is [N,K] used transposed.
template <typename S>
TensorT<S> matmul_ex(GraphT<S>& g, const TensorT<S>& a, const TensorT<S>& b, bool ta, bool tb) {
    HYSEQ_CHECK(a.rank() == 2 && b.rank() == 2, DimensionError, "matmul expects rank-2 tensors");
    const int64_t m = ta ? a.dim(1) : a.dim(0);
    const int64_t ka = ta ? a.dim(0) : a.dim(1);
    const int64_t kb = tb ? b.dim(1) : b.dim(0);
    const int64_t n = tb ? b.dim(0) : b.dim(1);
    HYSEQ_CHECK(ka == kb, DimensionError, "matmul inner extents differ: %lld vs %lld",
                static_cast<long long>(ka), static_cast<long long>(kb));
    TensorT<S> out = TensorT<S>::zeros({m, n});
    detail::gemm<S>(ta, tb, m, n, ka, S(1), a.data(), b.data(), S(0), out.data());
    if (detail::want_grad(g, {&a, &b})) {
        out.set_requires_grad(true);
        g.record([a, b, out, ta, tb, m, n, ka]() mutable {
            const S* go = out.grad_data();
            if (go) {
                if (a.requires_grad()) {
                    S* ga = a.ensure_grad();
                    if (!ta)
                        detail::gemm<S>(false, !tb, m, ka, n, S(1), go, b.data(), S(1), ga);
                    else
                        detail::gemm<S>(tb, true, ka, m, n, S(1), b.data(), go, S(1), ga);
                }
                if (b.requires_grad()) {
                    S* gb = b.ensure_grad();
                    if (!tb)
                        detail::gemm<S>(!ta, false, ka, n, m, S(1), a.data(), go, S(1), gb);
                    else
                        detail::gemm<S>(true, ta, n, ka, m, S(1), go, a.data(), S(1), gb);
                }
            }
            out.release_grad_interior();
        });
    }
    return out;
}

template <typename S>
TensorT<S> matmul(GraphT<S>& g, const TensorT<S>& a, const TensorT<S>& b) {
    return matmul_ex(g, a, b, false, false);
}

// ---------------------------------------------------------------------------
// elementwise (equal-shape or scalar broadcast only)

namespace detail {

template <typename S>
void check_broadcast(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.numel() == 1 || b.numel() == 1) return;
    HYSEQ_CHECK(a.shape() == b.shape(), DimensionError,
                "elementwise shapes differ and neither is scalar");
}

}  // namespace detail

template <typename S>
TensorT<S> add(GraphT<S>& g, const TensorT<S>& a, const TensorT<S>& b) {
    detail::check_broadcast(a, b);
    const bool sa = a.numel() == 1 && b.numel() > 1;
    const bool sb = b.numel() == 1 && a.numel() > 1;
    const TensorT<S>& big = sa ? b : a;
    TensorT<S> out = TensorT<S>::zeros(big.shape());
    const int64_t n = out.numel();
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    for (int64_t i = 0; i < n; ++i) po[i] = (sa ? pa[0] : pa[i]) + (sb ? pb[0] : pb[i]);
    if (detail::want_grad(g, {&a, &b})) {
        out.set_requires_grad(true);
        g.record([a, b, out, sa, sb, n]() mutable {
            const S* go = out.grad_data();
            if (go) {
                if (a.requires_grad()) {
                    S* ga = a.ensure_grad();
                    if (sa)
                        for (int64_t i = 0; i < n; ++i) ga[0] += go[i];
                    else
                        detail::accum(ga, go, n);
                }
                if (b.requires_grad()) {
                    S* gb = b.ensure_grad();
                    if (sb)
                        for (int64_t i = 0; i < n; ++i) gb[0] += go[i];
                    else
                        detail::accum(gb, go, n);
                }
            }
            out.release_grad_interior();
        });
    }
    return out;
}

template <typename S>
TensorT<S> mul(GraphT<S>& g, const TensorT<S>& a, const TensorT<S>& b) {
    detail::check_broadcast(a, b);
    const bool sa = a.numel() == 1 && b.numel() > 1;
    const bool sb = b.numel() == 1 && a.numel() > 1;
    const TensorT<S>& big = sa ? b : a;
    TensorT<S> out = TensorT<S>::zeros(big.shape());
    const int64_t n = out.numel();
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    for (int64_t i = 0; i < n; ++i) po[i] = (sa ? pa[0] : pa[i]) * (sb ? pb[0] : pb[i]);
    if (detail::want_grad(g, {&a, &b})) {
        out.set_requires_grad(true);
        g.record([a, b, out, sa, sb, n]() mutable {
            const S* go = out.grad_data();
            if (go) {
                const S* pa2 = a.data();
                const S* pb2 = b.data();
                if (a.requires_grad()) {
                    S* ga = a.ensure_grad();
                    if (sa)
                        for (int64_t i = 0; i < n; ++i) ga[0] += go[i] * pb2[i];
                    else
                        for (int64_t i = 0; i < n; ++i) ga[i] += go[i] * (sb ? pb2[0] : pb2[i]);
                }
                if (b.requires_grad()) {
                    S* gb = b.ensure_grad();
                    if (sb)
                        for (int64_t i = 0; i < n; ++i) gb[0] += go[i] * pa2[i];
                    else
                        for (int64_t i = 0; i < n; ++i) gb[i] += go[i] * (sa ? pa2[0] : pa2[i]);
                }
            }
            out.release_grad_interior();
        });
    }
    return out;
}

template <typename S>
TensorT<S> scale(GraphT<S>& g, const TensorT<S>& a, S c) {
    return mul(g, a, TensorT<S>::scalar(c));
}

namespace detail {

template <typename S, typename F, typename DF>
TensorT<S> unary_op(GraphT<S>& g, const TensorT<S>& a, F f, DF dfdx) {
    TensorT<S> out = TensorT<S>::zeros(a.shape());
    const int64_t n = a.numel();
    const S* pa = a.data();
    S* po = out.data();
    for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i]);
    if (want_grad(g, {&a})) {
        out.set_requires_grad(true);
        g.record([a, out, n, dfdx]() mutable {
            const S* go = out.grad_data();
            if (go && a.requires_grad()) {
                S* ga = a.ensure_grad();
                const S* pa2 = a.data();
                for (int64_t i = 0; i < n; ++i) ga[i] += go[i] * dfdx(pa2[i]);
            }
            out.release_grad_interior();
        });
    }
    return out;
}

}  // namespace detail

template <typename S>
TensorT<S> silu(GraphT<S>& g, const TensorT<S>& a) {
    return detail::unary_op(
        g, a, [](S x) { return x * detail::sigmoid(x); },
        [](S x) {
            const S s = detail::sigmoid(x);
            return s * (S(1) + x * (S(1) - s));
        });
}

template <typename S>
TensorT<S> gelu(GraphT<S>& g, const TensorT<S>& a) {
    return detail::unary_op(
        g, a, [](S x) { return detail::gelu_fwd(x); }, [](S x) { return detail::gelu_bwd(x); });
}

template <typename S>
TensorT<S> exp_elem(GraphT<S>& g, const TensorT<S>& a) {
    return detail::unary_op(
        g, a, [](S x) { return std::exp(x); }, [](S x) { return std::exp(x); });
}

template <typename S>
TensorT<S> sin_elem(GraphT<S>& g, const TensorT<S>& a) {
    return detail::unary_op(
        g, a, [](S x) { return std::sin(x); }, [](S x) { return std::cos(x); });
}

template <typename S>
TensorT<S> sum(GraphT<S>& g, const TensorT<S>& a) {
    TensorT<S> out = TensorT<S>::zeros({1});
    const int64_t n = a.numel();
    const S* pa = a.data();
    S acc = 0;
    for (int64_t i = 0; i < n; ++i) acc += pa[i];
    out.data()[0] = acc;
    if (detail::want_grad(g, {&a})) {
        out.set_requires_grad(true);
        g.record([a, out, n]() mutable {
            const S* go = out.grad_data();
            if (go && a.requires_grad()) {
                S* ga = a.ensure_grad();
                for (int64_t i = 0; i < n; ++i) ga[i] += go[0];
            }
            out.release_grad_interior();
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// row-vector helpers for dense layers

template <typename S>
TensorT<S> add_rowvec(GraphT<S>& g, const TensorT<S>& a, const TensorT<S>& v) {
    HYSEQ_CHECK(a.rank() == 2 && v.numel() == a.dim(1), DimensionError,
                "add_rowvec expects [N,D] and [D]");
    const int64_t n = a.dim(0), d = a.dim(1);
    TensorT<S> out = TensorT<S>::zeros(a.shape());
    const S* pa = a.data();
    const S* pv = v.data();
    S* po = out.data();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) po[i * d + j] = pa[i * d + j] + pv[j];
    if (detail::want_grad(g, {&a, &v})) {
        out.set_requires_grad(true);
        g.record([a, v, out, n, d]() mutable {
            const S* go = out.grad_data();
            if (go) {
                if (a.requires_grad()) detail::accum(a.ensure_grad(), go, n * d);
                if (v.requires_grad()) {
                    S* gv = v.ensure_grad();
                    for (int64_t i = 0; i < n; ++i)
                        for (int64_t j = 0; j < d; ++j) gv[j] += go[i * d + j];
                }
            }
            out.release_grad_interior();
        });
    }
    return out;
}

template <typename S>
TensorT<S> scale_cols(GraphT<S>& g, const TensorT<S>& a, const TensorT<S>& s) {
    HYSEQ_CHECK(a.rank() == 2 && s.numel() == a.dim(1), DimensionError,
                "scale_cols expects [N,D] and [D]");
    const int64_t n = a.dim(0), d = a.dim(1);
    TensorT<S> out = TensorT<S>::zeros(a.shape());
    const S* pa = a.data();
    const S* ps = s.data();
    S* po = out.data();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) po[i * d + j] = pa[i * d + j] * ps[j];
    if (detail::want_grad(g, {&a, &s})) {
        out.set_requires_grad(true);
        g.record([a, s, out, n, d]() mutable {
            const S* go = out.grad_data();
            if (go) {
                const S* pa2 = a.data();
                const S* ps2 = s.data();
                if (a.requires_grad()) {
                    S* ga = a.ensure_grad();
                    for (int64_t i = 0; i < n; ++i)
                        for (int64_t j = 0; j < d; ++j) ga[i * d + j] += go[i * d + j] * ps2[j];
                }
                if (s.requires_grad()) {
                    S* gs = s.ensure_grad();
                    for (int64_t i = 0; i < n; ++i)
                        for (int64_t j = 0; j < d; ++j) gs[j] += go[i * d + j] * pa2[i * d + j];
                }
            }
            out.release_grad_interior();
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax over rows of [R,C], stabilized by row-max subtraction

template <typename S>
TensorT<S> softmax_rows(GraphT<S>& g, const TensorT<S>& a) {
    HYSEQ_CHECK(a.rank() == 2, DimensionError, "softmax_rows expects rank-2");
    const int64_t r = a.dim(0), c = a.dim(1);
    TensorT<S> out = TensorT<S>::zeros(a.shape());
    const S* pa = a.data();
    S* po = out.data();
    for (int64_t i = 0; i < r; ++i) {
        const S* x = pa + i * c;
        S* y = po + i * c;
        S mx = x[0];
        for (int64_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
        S z = 0;
        for (int64_t j = 0; j < c; ++j) {
            y[j] = std::exp(x[j] - mx);
            z += y[j];
        }
        const S inv = S(1) / z;
        for (int64_t j = 0; j < c; ++j) y[j] *= inv;
    }
    if (detail::want_grad(g, {&a})) {
        out.set_requires_grad(true);
        g.record([a, out, r, c]() mutable {
            const S* go = out.grad_data();
            if (go && a.requires_grad()) {
                S* ga = a.ensure_grad();
                const S* p = out.data();
                for (int64_t i = 0; i < r; ++i) {
                    S dot = 0;
                    for (int64_t j = 0; j < c; ++j) dot += go[i * c + j] * p[i * c + j];
                    for (int64_t j = 0; j < c; ++j)
                        ga[i * c + j] += p[i * c + j] * (go[i * c + j] - dot);
                }
            }
            out.release_grad_interior();
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// layer norm over the last axis with affine gain/bias (epsilon 1e-5)

template <typename S>
TensorT<S> layer_norm(GraphT<S>& g, const TensorT<S>& a, const TensorT<S>& gain,
                      const TensorT<S>& bias) {
    HYSEQ_CHECK(a.rank() >= 1, DimensionError, "layer_norm expects rank >= 1");
    const int64_t d = a.dim(a.rank() - 1);
    HYSEQ_CHECK(gain.numel() == d && bias.numel() == d, DimensionError,
                "layer_norm gain/bias must have %lld elements", static_cast<long long>(d));
    const int64_t rows = a.numel() / d;
    TensorT<S> out = TensorT<S>::zeros(a.shape());
    std::vector<S> mean(static_cast<size_t>(rows)), rstd(static_cast<size_t>(rows));
    detail::ln_fwd(a.data(), rows, d, gain.data(), bias.data(), out.data(), mean.data(),
                   rstd.data());
    if (detail::want_grad(g, {&a, &gain, &bias})) {
        out.set_requires_grad(true);
        g.record([a, gain, bias, out, rows, d, mean = std::move(mean),
                  rstd = std::move(rstd)]() mutable {
            const S* go = out.grad_data();
            if (go) {
                detail::ln_bwd(a.data(), go, rows, d, gain.data(), mean.data(), rstd.data(),
                               a.requires_grad() ? a.ensure_grad() : nullptr,
                               gain.requires_grad() ? gain.ensure_grad() : nullptr,
                               bias.requires_grad() ? bias.ensure_grad() : nullptr);
            }
            out.release_grad_interior();
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// cross entropy: mean NLL over non-ignored rows of [N,V] logits;
// backward is softmax(logits) - onehot on the kept rows

template <typename S>
TensorT<S> cross_entropy(GraphT<S>& g, const TensorT<S>& logits,
                         const std::vector<int32_t>& targets, int32_t ignore_index = -1) {
    HYSEQ_CHECK(logits.rank() == 2, DimensionError, "cross_entropy expects [N,V] logits");
    const int64_t n = logits.dim(0), v = logits.dim(1);
    HYSEQ_CHECK(static_cast<int64_t>(targets.size()) == n, DimensionError,
                "cross_entropy: %zu targets for %lld rows", targets.size(),
                static_cast<long long>(n));
    for (int64_t i = 0; i < n; ++i) {
        const int32_t t = targets[static_cast<size_t>(i)];
        HYSEQ_CHECK(t == ignore_index || (t >= 0 && t < v), IndexError,
                    "target id %d out of range [0,%lld)", t, static_cast<long long>(v));
    }
    auto probs = std::make_shared<std::vector<S>>(static_cast<size_t>(n * v));
    const S* pl = logits.data();
    S loss_sum = 0;
    int64_t kept = 0;
    for (int64_t i = 0; i < n; ++i) {
        const S* x = pl + i * v;
        S* p = probs->data() + i * v;
        S mx = x[0];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, x[j]);
        S z = 0;
        for (int64_t j = 0; j < v; ++j) {
            p[j] = std::exp(x[j] - mx);
            z += p[j];
        }
        const S inv = S(1) / z;
        for (int64_t j = 0; j < v; ++j) p[j] *= inv;
        const int32_t t = targets[static_cast<size_t>(i)];
        if (t == ignore_index) continue;
        loss_sum += -(x[t] - mx - std::log(z));
        ++kept;
    }
    TensorT<S> out = TensorT<S>::scalar(kept > 0 ? loss_sum / static_cast<S>(kept) : S(0));
    if (detail::want_grad(g, {&logits}) && kept > 0) {
        out.set_requires_grad(true);
        auto tgt = std::make_shared<std::vector<int32_t>>(targets);
        g.record([logits, out, probs, tgt, n, v, kept, ignore_index]() mutable {
            const S* go = out.grad_data();
            if (go && logits.requires_grad()) {
                S* gl = logits.ensure_grad();
                const S w = go[0] / static_cast<S>(kept);
                for (int64_t i = 0; i < n; ++i) {
                    const int32_t t = (*tgt)[static_cast<size_t>(i)];
                    if (t == ignore_index) continue;
                    const S* p = probs->data() + i * v;
                    for (int64_t j = 0; j < v; ++j) gl[i * v + j] += w * p[j];
                    gl[i * v + t] -= w;
                }
            }
            out.release_grad_interior();
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// embedding lookup: table [V,D], ids -> [N,D]

template <typename S>
TensorT<S> embedding(GraphT<S>& g, const TensorT<S>& table, const std::vector<int32_t>& ids) {
    HYSEQ_CHECK(table.rank() == 2, DimensionError, "embedding table must be [V,D]");
    const int64_t v = table.dim(0), d = table.dim(1);
    const int64_t n = static_cast<int64_t>(ids.size());
    HYSEQ_CHECK(n > 0, DimensionError, "embedding needs at least one id");
    for (int32_t id : ids)
        HYSEQ_CHECK(id >= 0 && id < v, IndexError, "token id %d out of range [0,%lld)", id,
                    static_cast<long long>(v));
    TensorT<S> out = TensorT<S>::zeros({n, d});
    const S* pt = table.data();
    S* po = out.data();
    for (int64_t i = 0; i < n; ++i)
        std::memcpy(po + i * d, pt + static_cast<int64_t>(ids[static_cast<size_t>(i)]) * d,
                    static_cast<size_t>(d) * sizeof(S));
    if (detail::want_grad(g, {&table})) {
        out.set_requires_grad(true);
        auto idv = std::make_shared<std::vector<int32_t>>(ids);
        g.record([table, out, idv, n, d]() mutable {
            const S* go = out.grad_data();
            if (go && table.requires_grad()) {
                S* gt = table.ensure_grad();
                for (int64_t i = 0; i < n; ++i) {
                    S* row = gt + static_cast<int64_t>((*idv)[static_cast<size_t>(i)]) * d;
                    detail::accum(row, go + i * d, d);
                }
            }
            out.release_grad_interior();
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// dropout (train-time); consumes one draw per element from `rng`

template <typename S>
TensorT<S> dropout(GraphT<S>& g, const TensorT<S>& a, double p, Rng& rng) {
    HYSEQ_CHECK(p >= 0.0 && p < 1.0, ConfigError, "dropout rate %g outside [0,1)", p);
    if (p == 0.0) return a;
    const int64_t n = a.numel();
    auto mask = std::make_shared<std::vector<S>>(static_cast<size_t>(n));
    const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
    for (int64_t i = 0; i < n; ++i)
        (*mask)[static_cast<size_t>(i)] = rng.uniform() < p ? S(0) : keep_scale;
    TensorT<S> out = TensorT<S>::zeros(a.shape());
    const S* pa = a.data();
    S* po = out.data();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * (*mask)[static_cast<size_t>(i)];
    if (detail::want_grad(g, {&a})) {
        out.set_requires_grad(true);
        g.record([a, out, mask, n]() mutable {
            const S* go = out.grad_data();
            if (go && a.requires_grad()) {
                S* ga = a.ensure_grad();
                for (int64_t i = 0; i < n; ++i) ga[i] += go[i] * (*mask)[static_cast<size_t>(i)];
            }
            out.release_grad_interior();
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// row concatenation and pooling

template <typename S>
TensorT<S> concat_rows(GraphT<S>& g, const TensorT<S>& a, const TensorT<S>& b) {
    HYSEQ_CHECK(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1), DimensionError,
                "concat_rows expects [Na,D] and [Nb,D]");
    const int64_t na = a.dim(0), nb = b.dim(0), d = a.dim(1);
    TensorT<S> out = TensorT<S>::zeros({na + nb, d});
    std::memcpy(out.data(), a.data(), static_cast<size_t>(na * d) * sizeof(S));
    std::memcpy(out.data() + na * d, b.data(), static_cast<size_t>(nb * d) * sizeof(S));
    if (detail::want_grad(g, {&a, &b})) {
        out.set_requires_grad(true);
        g.record([a, b, out, na, nb, d]() mutable {
            const S* go = out.grad_data();
            if (go) {
                if (a.requires_grad()) detail::accum(a.ensure_grad(), go, na * d);
                if (b.requires_grad()) detail::accum(b.ensure_grad(), go + na * d, nb * d);
            }
            out.release_grad_interior();
        });
    }
    return out;
}

// mean over each length-L segment of [B*L, D] -> [B, D]
template <typename S>
TensorT<S> mean_pool_segments(GraphT<S>& g, const TensorT<S>& a, int64_t b, int64_t l) {
    HYSEQ_CHECK(a.rank() == 2 && a.dim(0) == b * l, DimensionError,
                "mean_pool_segments expects [B*L, D]");
    const int64_t d = a.dim(1);
    TensorT<S> out = TensorT<S>::zeros({b, d});
    const S* pa = a.data();
    S* po = out.data();
    const S inv = S(1) / static_cast<S>(l);
    for (int64_t s = 0; s < b; ++s)
        for (int64_t t = 0; t < l; ++t)
            for (int64_t j = 0; j < d; ++j) po[s * d + j] += pa[(s * l + t) * d + j] * inv;
    if (detail::want_grad(g, {&a})) {
        out.set_requires_grad(true);
        g.record([a, out, b, l, d, inv]() mutable {
            const S* go = out.grad_data();
            if (go && a.requires_grad()) {
                S* ga = a.ensure_grad();
                for (int64_t s = 0; s < b; ++s)
                    for (int64_t t = 0; t < l; ++t)
                        for (int64_t j = 0; j < d; ++j)
                            ga[(s * l + t) * d + j] += go[s * d + j] * inv;
            }
            out.release_grad_interior();
        });
    }
    return out;
}

// row b*L + idx[b] from each segment -> [B, D]
template <typename S>
TensorT<S> select_pool_segments(GraphT<S>& g, const TensorT<S>& a, int64_t b, int64_t l,
                                const std::vector<int64_t>& idx) {
    HYSEQ_CHECK(a.rank() == 2 && a.dim(0) == b * l, DimensionError,
                "select_pool_segments expects [B*L, D]");
    HYSEQ_CHECK(static_cast<int64_t>(idx.size()) == b, DimensionError,
                "select_pool_segments needs one index per segment");
    for (int64_t i : idx)
        HYSEQ_CHECK(i >= 0 && i < l, IndexError, "segment index %lld out of range",
                    static_cast<long long>(i));
    const int64_t d = a.dim(1);
    TensorT<S> out = TensorT<S>::zeros({b, d});
    for (int64_t s = 0; s < b; ++s)
        std::memcpy(out.data() + s * d, a.data() + (s * l + idx[static_cast<size_t>(s)]) * d,
                    static_cast<size_t>(d) * sizeof(S));
    if (detail::want_grad(g, {&a})) {
        out.set_requires_grad(true);
        auto iv = std::make_shared<std::vector<int64_t>>(idx);
        g.record([a, out, iv, b, l, d]() mutable {
            const S* go = out.grad_data();
            if (go && a.requires_grad()) {
                S* ga = a.ensure_grad();
                for (int64_t s = 0; s < b; ++s)
                    detail::accum(ga + (s * l + (*iv)[static_cast<size_t>(s)]) * d, go + s * d, d);
            }
            out.release_grad_interior();
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// depthwise causal width-3 convolution along each length-L segment

template <typename S>
TensorT<S> short_conv3(GraphT<S>& g, const TensorT<S>& x, const TensorT<S>& k,
                       const TensorT<S>& bias, int64_t b, int64_t l) {
    HYSEQ_CHECK(x.rank() == 2 && x.dim(0) == b * l, DimensionError, "short_conv3 expects [B*L, D]");
    const int64_t d = x.dim(1);
    HYSEQ_CHECK(k.rank() == 2 && k.dim(0) == d && k.dim(1) == 3, DimensionError,
                "short_conv3 kernel must be [D,3]");
    HYSEQ_CHECK(bias.numel() == d, DimensionError, "short_conv3 bias must be [D]");
    TensorT<S> out = TensorT<S>::zeros(x.shape());
    detail::sc3_fwd(x.data(), b, l, d, k.data(), bias.data(), out.data());
    if (detail::want_grad(g, {&x, &k, &bias})) {
        out.set_requires_grad(true);
        g.record([x, k, bias, out, b, l, d]() mutable {
            const S* go = out.grad_data();
            if (go) {
                detail::sc3_bwd(x.data(), go, b, l, d, k.data(),
                                x.requires_grad() ? x.ensure_grad() : nullptr,
                                k.requires_grad() ? k.ensure_grad() : nullptr,
                                bias.requires_grad() ? bias.ensure_grad() : nullptr);
            }
            out.release_grad_interior();
        });
    }
    return out;
}

}  // namespace hyseq
