#pragma once

// Dense row-major tensors plus the eager kernels the rest of the engine is
// built from. Everything is templated on the scalar type: float is the
// default arithmetic, double is the verification mode used by the gradient
// checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <vector>

#include "p2g/common.hpp"

namespace p2g {

template <class T>
struct TensorT {
    std::vector<int> shape;
    std::vector<T> data;

    TensorT() = default;
    explicit TensorT(std::vector<int> s) : shape(std::move(s)), data(size_t(numel_of(shape)), T(0)) {}
    TensorT(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (int64_t(data.size()) != numel_of(shape)) throw ShapeError("tensor data/shape mismatch");
    }

    static int64_t numel_of(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) {
            if (d < 0) throw ShapeError("negative dimension");
            n *= d;
        }
        return n;
    }

    static TensorT zeros(std::vector<int> s) { return TensorT(std::move(s)); }

    static TensorT full(std::vector<int> s, T v) {
        TensorT t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static TensorT randn(std::vector<int> s, Rng& rng, T stddev = T(1)) {
        TensorT t(std::move(s));
        for (auto& x : t.data) x = T(rng.normal()) * stddev;
        return t;
    }

    static TensorT row(std::vector<T> d) {
        int n = int(d.size());
        return TensorT({1, n}, std::move(d));
    }

    static TensorT vec(std::vector<T> d) {
        int n = int(d.size());
        return TensorT({n}, std::move(d));
    }

    int64_t numel() const { return int64_t(data.size()); }
    int ndim() const { return int(shape.size()); }

    int rows() const {
        if (shape.size() == 1) return 1;
        if (shape.size() != 2) throw ShapeError("rows(): not a matrix");
        return shape[0];
    }
    int cols() const {
        if (shape.size() == 1) return shape[0];
        if (shape.size() != 2) throw ShapeError("cols(): not a matrix");
        return shape[1];
    }

    T& at(int r, int c) { return data[size_t(r) * size_t(cols()) + size_t(c)]; }
    T at(int r, int c) const { return data[size_t(r) * size_t(cols()) + size_t(c)]; }
    T& operator[](size_t i) { return data[i]; }
    T operator[](size_t i) const { return data[i]; }

    const T* row_ptr(int r) const { return data.data() + size_t(r) * size_t(cols()); }
    T* row_ptr(int r) { return data.data() + size_t(r) * size_t(cols()); }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(double(v))) return false;
        return true;
    }

    void require_finite(const char* what) const {
        if (!all_finite()) throw ValueError(std::string(what) + ": non-finite entries");
    }

    template <class U>
    TensorT<U> cast() const {
        TensorT<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = U(data[i]);
        return out;
    }
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

// Pre-softmax fill for disallowed attention entries. A large negative constant
// rather than -inf: exp() underflows to exactly 0 without producing NaN.
template <class T>
constexpr T mask_fill_value() {
    return T(-1e9);
}

// ---------------------------------------------------------------------------
// Eager kernels. Loop order is fixed everywhere; runs are bit-reproducible.

template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
    const int m = a.rows(), k = a.cols(), n = b.cols();
    TensorT<T> out({m, n});
    for (int i = 0; i < m; ++i) {
        const T* ar = a.row_ptr(i);
        T* or_ = out.row_ptr(i);
        for (int p = 0; p < k; ++p) {
            const T av = ar[p];
            const T* br = b.row_ptr(p);
            for (int j = 0; j < n; ++j) or_[j] += av * br[j];
        }
    }
    return out;
}

// a @ b^T
template <class T>
TensorT<T> matmul_nt(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.cols() != b.cols()) throw ShapeError("matmul_nt: inner dimensions differ");
    const int m = a.rows(), k = a.cols(), n = b.rows();
    TensorT<T> out({m, n});
    for (int i = 0; i < m; ++i) {
        const T* ar = a.row_ptr(i);
        T* or_ = out.row_ptr(i);
        for (int j = 0; j < n; ++j) {
            const T* br = b.row_ptr(j);
            T acc = 0;
            for (int p = 0; p < k; ++p) acc += ar[p] * br[p];
            or_[j] = acc;
        }
    }
    return out;
}

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    if (!a.same_shape(b)) throw ShapeError("add: shape mismatch");
    TensorT<T> out = a;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
    return out;
}

template <class T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    if (!a.same_shape(b)) throw ShapeError("sub: shape mismatch");
    TensorT<T> out = a;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.data[i];
    return out;
}

template <class T>
TensorT<T> scale(const TensorT<T>& a, T s) {
    TensorT<T> out = a;
    for (auto& v : out.data) v *= s;
    return out;
}

// X [n x d] + bias broadcast over rows; bias is [1 x d] or [d]
template <class T>
TensorT<T> add_rowvec(const TensorT<T>& x, const TensorT<T>& b) {
    const int n = x.rows(), d = x.cols();
    if (int(b.data.size()) != d) throw ShapeError("add_rowvec: bias width mismatch");
    TensorT<T> out = x;
    for (int i = 0; i < n; ++i) {
        T* r = out.row_ptr(i);
        for (int j = 0; j < d; ++j) r[j] += b.data[size_t(j)];
    }
    return out;
}

template <class T>
void softmax_row_inplace(T* row, int n) {
    T m = row[0];
    for (int j = 1; j < n; ++j) m = std::max(m, row[j]);
    T sum = 0;
    for (int j = 0; j < n; ++j) {
        row[j] = std::exp(row[j] - m);
        sum += row[j];
    }
    const T inv = T(1) / sum;
    for (int j = 0; j < n; ++j) row[j] *= inv;
}

template <class T>
TensorT<T> softmax_rows(const TensorT<T>& x) {
    TensorT<T> out = x;
    for (int i = 0; i < out.rows(); ++i) softmax_row_inplace(out.row_ptr(i), out.cols());
    return out;
}

template <class T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta, T eps = T(1e-5)) {
    const int n = x.rows(), d = x.cols();
    if (int(gamma.data.size()) != d || int(beta.data.size()) != d) throw ShapeError("layer_norm: affine width mismatch");
    TensorT<T> out({n, d});
    for (int i = 0; i < n; ++i) {
        const T* r = x.row_ptr(i);
        T mean = 0;
        for (int j = 0; j < d; ++j) mean += r[j];
        mean /= T(d);
        T var = 0;
        for (int j = 0; j < d; ++j) {
            const T c = r[j] - mean;
            var += c * c;
        }
        var /= T(d);
        const T inv = T(1) / std::sqrt(var + eps);
        T* o = out.row_ptr(i);
        for (int j = 0; j < d; ++j) o[j] = (r[j] - mean) * inv * gamma.data[size_t(j)] + beta.data[size_t(j)];
    }
    return out;
}

template <class T>
T gelu_scalar(T x) {
    return x * T(0.5) * (T(1) + std::erf(x * T(0.70710678118654752440)));
}

template <class T>
TensorT<T> gelu(const TensorT<T>& x) {
    TensorT<T> out = x;
    for (auto& v : out.data) v = gelu_scalar(v);
    return out;
}

template <class T>
T l2_norm(const TensorT<T>& v) {
    T s = 0;
    for (T x : v.data) s += x * x;
    return std::sqrt(s);
}

template <class T>
TensorT<T> normalize_rows(const TensorT<T>& x) {
    TensorT<T> out = x;
    const int n = x.rows(), d = x.cols();
    for (int i = 0; i < n; ++i) {
        T* r = out.row_ptr(i);
        T s = 0;
        for (int j = 0; j < d; ++j) s += r[j] * r[j];
        const T norm = std::sqrt(s);
        if (norm == T(0)) throw ValueError("normalize_rows: zero-norm row");
        const T inv = T(1) / norm;
        for (int j = 0; j < d; ++j) r[j] *= inv;
    }
    return out;
}

// cosine similarity of two equally sized vectors; errors on zero norm
template <class T>
T cosine_sim(const TensorT<T>& u, const TensorT<T>& v) {
    if (u.data.size() != v.data.size()) throw ShapeError("cosine_sim: length mismatch");
    T dot = 0, nu = 0, nv = 0;
    for (size_t i = 0; i < u.data.size(); ++i) {
        dot += u.data[i] * v.data[i];
        nu += u.data[i] * u.data[i];
        nv += v.data[i] * v.data[i];
    }
    if (nu == T(0) || nv == T(0)) throw ValueError("cosine_sim: zero-norm input");
    return dot / (std::sqrt(nu) * std::sqrt(nv));
}

template <class T>
TensorT<T> slice_rows(const TensorT<T>& x, int begin, int count) {
    if (begin < 0 || count < 0 || begin + count > x.rows()) throw ShapeError("slice_rows: out of range");
    TensorT<T> out({count, x.cols()});
    std::copy(x.row_ptr(begin), x.row_ptr(begin) + size_t(count) * size_t(x.cols()), out.data.begin());
    return out;
}

template <class T>
TensorT<T> concat_rows(std::span<const TensorT<T>> parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const int d = parts[0].cols();
    int n = 0;
    for (const auto& p : parts) {
        if (p.cols() != d) throw ShapeError("concat_rows: width mismatch");
        n += p.rows();
    }
    TensorT<T> out({n, d});
    size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.data.begin(), p.data.end(), out.data.begin() + off);
        off += p.data.size();
    }
    return out;
}

template <class T>
T max_abs_diff(const TensorT<T>& a, const TensorT<T>& b) {
    if (!a.same_shape(b)) throw ShapeError("max_abs_diff: shape mismatch");
    T m = 0;
    for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

// ---------------------------------------------------------------------------
// Attention masking. Masks come only from all_allowed() or
// build_readonly_mask(); every query row is guaranteed at least one key.

class AttentionMask {
public:
    AttentionMask(int n_query, int n_key, bool allow_all)
        : n_q_(n_query), n_k_(n_key), allow_(size_t(n_query) * size_t(n_key), allow_all ? 1 : 0) {
        if (n_query < 1 || n_key < 1) throw ShapeError("mask: empty dimensions");
    }

    static AttentionMask all_allowed(int n) { return AttentionMask(n, n, true); }
    static AttentionMask all_allowed(int n_query, int n_key) { return AttentionMask(n_query, n_key, true); }

    int n_query() const { return n_q_; }
    int n_key() const { return n_k_; }

    bool allowed(int q, int k) const { return allow_[size_t(q) * size_t(n_k_) + size_t(k)] != 0; }

    void set(int q, int k, bool v) { allow_[size_t(q) * size_t(n_k_) + size_t(k)] = v ? 1 : 0; }

    int row_count(int q) const {
        int c = 0;
        for (int k = 0; k < n_k_; ++k) c += allowed(q, k) ? 1 : 0;
        return c;
    }

    void require_valid() const {
        for (int q = 0; q < n_q_; ++q)
            if (row_count(q) == 0) throw ValueError("attention mask: fully masked query row");
    }

    // Intersection; used to compose the read-only structure with a causal
    // restriction on the original tokens.
    AttentionMask intersect(const AttentionMask& o) const {
        if (n_q_ != o.n_q_ || n_k_ != o.n_k_) throw ShapeError("mask intersect: shape mismatch");
        AttentionMask m(n_q_, n_k_, false);
        for (size_t i = 0; i < allow_.size(); ++i) m.allow_[i] = allow_[i] & o.allow_[i];
        return m;
    }

private:
    int n_q_, n_k_;
    std::vector<uint8_t> allow_;
};

// Sequence layout is [task-1 prompts, ..., task-T prompts, originals].
// Original tokens attend only to originals; prompt token (k, i) attends to
// every original plus itself, never to any other prompt token.
inline AttentionMask build_readonly_mask(int n_orig, int T, int L) {
    if (n_orig < 1 || T < 0 || L < 0) throw ShapeError("build_readonly_mask: bad arguments");
    const int np = T * L;
    const int n = np + n_orig;
    AttentionMask m(n, n, false);
    for (int q = 0; q < np; ++q) {
        m.set(q, q, true);
        for (int k = np; k < n; ++k) m.set(q, k, true);
    }
    for (int q = np; q < n; ++q)
        for (int k = np; k < n; ++k) m.set(q, k, true);
    return m;
}

// Scaled dot-product attention with masking; disallowed entries receive the
// mask fill value pre-softmax and underflow to an exact zero weight.
template <class T>
TensorT<T> attention_masked(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                            const AttentionMask& mask) {
    if (q.cols() != k.cols()) throw ShapeError("attention_masked: q/k head dim mismatch");
    if (k.rows() != v.rows()) throw ShapeError("attention_masked: k/v row mismatch");
    if (mask.n_query() != q.rows() || mask.n_key() != k.rows())
        throw ShapeError("attention_masked: mask dimension mismatch");
    mask.require_valid();

    const int nq = q.rows(), nk = k.rows(), d = q.cols(), dv = v.cols();
    const T inv_sqrt_d = T(1) / std::sqrt(T(d));
    TensorT<T> out({nq, dv});
    std::vector<T> scores(static_cast<size_t>(nk));
    for (int i = 0; i < nq; ++i) {
        const T* qi = q.row_ptr(i);
        for (int j = 0; j < nk; ++j) {
            const T* kj = k.row_ptr(j);
            T acc = 0;
            for (int p = 0; p < d; ++p) acc += qi[p] * kj[p];
            scores[size_t(j)] = acc * inv_sqrt_d + (mask.allowed(i, j) ? T(0) : mask_fill_value<T>());
        }
        softmax_row_inplace(scores.data(), nk);
        T* oi = out.row_ptr(i);
        for (int j = 0; j < nk; ++j) {
            const T w = scores[size_t(j)];
            const T* vj = v.row_ptr(j);
            for (int p = 0; p < dv; ++p) oi[p] += w * vj[p];
        }
    }
    return out;
}

}  // namespace p2g
