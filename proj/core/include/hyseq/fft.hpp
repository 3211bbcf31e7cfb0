// Radix-2 FFT for power-of-two sizes (Stockham autosort, split re/im) with
// real-signal wrappers. Callers pad to a power of two; anything else is a
// dimension error. Twiddle tables are cached per size.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <vector>

#include "hyseq/common.hpp"
#include "hyseq/tensor.hpp"

namespace hyseq {
namespace fft {

inline bool is_pow2(int64_t n) { return n >= 1 && (n & (n - 1)) == 0; }

inline int64_t next_pow2(int64_t n) {
    int64_t p = 1;
    while (p < n) p <<= 1;
    return p;
}

namespace detail {

// Twiddles for a complex transform of size n plus the untangling table for
// a real transform of size 2n.
template <typename S>
struct PlanT {
    int64_t n = 0;                // complex size
    std::vector<S> wre, wim;      // w[k] = exp(-2*pi*i*k/n), k < max(n/2, 1)
    std::vector<S> ure, uim;      // u[k] = exp(-2*pi*i*k/(2n)), k <= n

    explicit PlanT(int64_t size) : n(size) {
        const int64_t half = std::max<int64_t>(n / 2, 1);
        wre.resize(static_cast<size_t>(half));
        wim.resize(static_cast<size_t>(half));
        for (int64_t k = 0; k < half; ++k) {
            const double a = -2.0 * M_PI * static_cast<double>(k) / static_cast<double>(n);
            wre[static_cast<size_t>(k)] = static_cast<S>(std::cos(a));
            wim[static_cast<size_t>(k)] = static_cast<S>(std::sin(a));
        }
        ure.resize(static_cast<size_t>(n + 1));
        uim.resize(static_cast<size_t>(n + 1));
        for (int64_t k = 0; k <= n; ++k) {
            const double a = -2.0 * M_PI * static_cast<double>(k) / static_cast<double>(2 * n);
            ure[static_cast<size_t>(k)] = static_cast<S>(std::cos(a));
            uim[static_cast<size_t>(k)] = static_cast<S>(std::sin(a));
        }
    }
};

template <typename S>
const PlanT<S>& plan_for(int64_t n) {
    static std::map<int64_t, std::unique_ptr<PlanT<S>>> cache;
    static std::mutex mu;
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find(n);
    if (it == cache.end()) it = cache.emplace(n, std::make_unique<PlanT<S>>(n)).first;
    return *it->second;
}

// In-place-result Stockham: data in (re,im), scratch in (tr,ti); result in (re,im).
template <typename S>
void cfft_pow2(int64_t n, S* re, S* im, S* tr, S* ti, const PlanT<S>& plan, bool inverse) {
    if (n == 1) return;
    S* sr = re;
    S* si = im;
    S* dr = tr;
    S* di = ti;
    int64_t s = 1;
    for (int64_t len = n; len > 1; len >>= 1) {
        const int64_t m = len >> 1;
        const int64_t tw = n / len;
        for (int64_t p = 0; p < m; ++p) {
            const S wr = plan.wre[static_cast<size_t>(p * tw)];
            const S wi = inverse ? -plan.wim[static_cast<size_t>(p * tw)]
                                 : plan.wim[static_cast<size_t>(p * tw)];
            const S* ar = sr + s * p;
            const S* ai = si + s * p;
            const S* br = sr + s * (p + m);
            const S* bi = si + s * (p + m);
            S* er = dr + s * 2 * p;
            S* ei = di + s * 2 * p;
            S* fr = dr + s * (2 * p + 1);
            S* fi = di + s * (2 * p + 1);
            for (int64_t q = 0; q < s; ++q) {
                const S arq = ar[q], aiq = ai[q], brq = br[q], biq = bi[q];
                er[q] = arq + brq;
                ei[q] = aiq + biq;
                const S xr = arq - brq, xi = aiq - biq;
                fr[q] = xr * wr - xi * wi;
                fi[q] = xr * wi + xi * wr;
            }
        }
        std::swap(sr, dr);
        std::swap(si, di);
        s <<= 1;
    }
    if (sr != re) {
        std::copy(sr, sr + n, re);
        std::copy(si, si + n, im);
    }
    if (inverse) {
        const S inv = S(1) / static_cast<S>(n);
        for (int64_t i = 0; i < n; ++i) {
            re[i] *= inv;
            im[i] *= inv;
        }
    }
}

}  // namespace detail

// Reusable buffers for one transform size at a time.
template <typename S>
struct ScratchT {
    std::vector<S> a, b, c, d;
    void ensure(int64_t m) {
        if (static_cast<int64_t>(a.size()) < m) {
            a.resize(static_cast<size_t>(m));
            b.resize(static_cast<size_t>(m));
            c.resize(static_cast<size_t>(m));
            d.resize(static_cast<size_t>(m));
        }
    }
};

// Forward real FFT: x[n] -> spectrum of length n/2+1 (packed into two
// half-size complex transforms via the even/odd untangling identity).
template <typename S>
void rfft_raw(const S* x, int64_t n, S* out_re, S* out_im, ScratchT<S>& ws) {
    HYSEQ_CHECK(is_pow2(n), DimensionError, "rfft length %lld is not a power of two",
                static_cast<long long>(n));
    if (n == 1) {
        out_re[0] = x[0];
        out_im[0] = S(0);
        return;
    }
    const int64_t m = n / 2;
    const auto& plan = detail::plan_for<S>(m);
    ws.ensure(m);
    S* zr = ws.a.data();
    S* zi = ws.b.data();
    for (int64_t t = 0; t < m; ++t) {
        zr[t] = x[2 * t];
        zi[t] = x[2 * t + 1];
    }
    detail::cfft_pow2(m, zr, zi, ws.c.data(), ws.d.data(), plan, false);
    for (int64_t k = 0; k <= m; ++k) {
        const int64_t kr = k % m;          // Z index
        const int64_t kc = (m - k) % m;    // conj partner
        const S er = S(0.5) * (zr[kr] + zr[kc]);
        const S ei = S(0.5) * (zi[kr] - zi[kc]);
        const S or_ = S(0.5) * (zi[kr] + zi[kc]);
        const S oi = S(-0.5) * (zr[kr] - zr[kc]);
        const S ur = plan.ure[static_cast<size_t>(k)];
        const S ui = plan.uim[static_cast<size_t>(k)];
        out_re[k] = er + or_ * ur - oi * ui;
        out_im[k] = ei + or_ * ui + oi * ur;
    }
}

// Inverse real FFT: spectrum of length n/2+1 -> x[n].
template <typename S>
void irfft_raw(const S* in_re, const S* in_im, int64_t n, S* x, ScratchT<S>& ws) {
    HYSEQ_CHECK(is_pow2(n), DimensionError, "irfft length %lld is not a power of two",
                static_cast<long long>(n));
    if (n == 1) {
        x[0] = in_re[0];
        return;
    }
    const int64_t m = n / 2;
    const auto& plan = detail::plan_for<S>(m);
    ws.ensure(m);
    S* zr = ws.a.data();
    S* zi = ws.b.data();
    for (int64_t k = 0; k < m; ++k) {
        const int64_t kc = m - k;  // uses the stored X[m-k]
        const S er = S(0.5) * (in_re[k] + in_re[kc]);
        const S ei = S(0.5) * (in_im[k] - in_im[kc]);
        // O_k = (X_k - conj(X_{m-k})) * conj(u_k) / 2 with u_k = exp(-2pi i k/n)
        const S dr = S(0.5) * (in_re[k] - in_re[kc]);
        const S di = S(0.5) * (in_im[k] + in_im[kc]);
        const S ur = plan.ure[static_cast<size_t>(k)];
        const S ui = -plan.uim[static_cast<size_t>(k)];
        const S or_ = dr * ur - di * ui;
        const S oi = dr * ui + di * ur;
        // Z_k = E_k + i O_k
        zr[k] = er - oi;
        zi[k] = ei + or_;
    }
    detail::cfft_pow2(m, zr, zi, ws.c.data(), ws.d.data(), plan, true);
    for (int64_t t = 0; t < m; ++t) {
        x[2 * t] = zr[t];
        x[2 * t + 1] = zi[t];
    }
}

// Half-complex spectrum of a real signal: re/im arrays of length n/2+1.
template <typename S>
struct SpectrumT {
    int64_t signal_len = 0;
    std::vector<S> re, im;
};

template <typename S>
SpectrumT<S> rfft(const TensorT<S>& a) {
    HYSEQ_CHECK(a.rank() == 1, DimensionError, "rfft expects a rank-1 tensor");
    const int64_t n = a.dim(0);
    SpectrumT<S> s;
    s.signal_len = n;
    s.re.resize(static_cast<size_t>(n / 2 + 1));
    s.im.resize(static_cast<size_t>(n / 2 + 1));
    ScratchT<S> ws;
    rfft_raw(a.data(), n, s.re.data(), s.im.data(), ws);
    return s;
}

template <typename S>
TensorT<S> irfft(const SpectrumT<S>& s) {
    const int64_t n = s.signal_len;
    HYSEQ_CHECK(static_cast<int64_t>(s.re.size()) == n / 2 + 1 &&
                    s.re.size() == s.im.size(),
                DimensionError, "spectrum length must be n/2+1");
    TensorT<S> out = TensorT<S>::zeros({n});
    ScratchT<S> ws;
    irfft_raw(s.re.data(), s.im.data(), n, out.data(), ws);
    return out;
}

}  // namespace fft
}  // namespace hyseq
