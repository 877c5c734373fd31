#pragma once

// Tape-based reverse-mode differentiation over TensorT. Nodes are appended in
// forward order, so the tape index order is already topological; backward is
// one reverse sweep. Gradient buffers exist only for nodes something actually
// flows into, which keeps frozen subgraphs (requires_grad == false) free.

#include <array>
#include <cmath>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "p2g/tensor.hpp"

namespace p2g {

enum class Op : uint8_t {
    Constant,
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddRowVec,
    MatMul,
    MatMulNT,
    MulScalarNode,
    ConcatRows,
    ConcatCols,
    SliceRows,
    SliceCols,
    RowwiseDot,
    ColScale,
    LayerNorm,
    Gelu,
    SoftmaxRows,
    MaskBias,
    EmbedRows,
    CosineRows,
    NormalizeRows,
    MeanAll,
    Softplus,
    Exp,
    ContrastiveCE,
};

template <class T>
class GraphT {
public:
    using Id = int;

    struct Node {
        Op op;
        bool requires_grad = false;
        std::vector<Id> in;
        TensorT<T> value;
        TensorT<T> grad;  // empty until something accumulates into it
        // op-specific extras
        int i0 = 0, i1 = 0;
        T alpha = T(0);
        std::shared_ptr<const AttentionMask> mask;
        std::vector<int> ids;
    };

    GraphT() { nodes_.reserve(256); }

    int size() const { return int(nodes_.size()); }
    const TensorT<T>& value(Id n) const { return nodes_[size_t(n)].value; }
    bool requires_grad(Id n) const { return nodes_[size_t(n)].requires_grad; }
    bool is_leaf(Id n) const { return nodes_[size_t(n)].op == Op::Leaf; }

    const TensorT<T>& grad(Id n) const {
        const Node& nd = nodes_[size_t(n)];
        if (!nd.requires_grad) throw ValueError("grad(): node does not track gradients");
        if (nd.grad.data.empty()) {
            zero_like_ = TensorT<T>(nd.value.shape);
            return zero_like_;
        }
        return nd.grad;
    }

    Id constant(TensorT<T> v) { return push(Op::Constant, {}, std::move(v), false); }

    Id leaf(TensorT<T> v) { return push(Op::Leaf, {}, std::move(v), true); }

    // Tracked boundary input: gradients are collectable but the node is not a
    // trainable leaf. Used to stitch per-sample tapes to shared text tapes.
    Id input(TensorT<T> v) {
        Id n = push(Op::Leaf, {}, std::move(v), true);
        return n;
    }

    Id add(Id a, Id b) { return push(Op::Add, {a, b}, p2g::add(val(a), val(b))); }
    Id sub(Id a, Id b) { return push(Op::Sub, {a, b}, p2g::sub(val(a), val(b))); }

    Id mul(Id a, Id b) {
        if (!val(a).same_shape(val(b))) throw ShapeError("mul: shape mismatch");
        TensorT<T> out = val(a);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= val(b).data[i];
        return push(Op::Mul, {a, b}, std::move(out));
    }

    Id scale(Id a, T s) {
        Id n = push(Op::Scale, {a}, p2g::scale(val(a), s));
        nodes_[size_t(n)].alpha = s;
        return n;
    }

    Id add_rowvec(Id x, Id b) { return push(Op::AddRowVec, {x, b}, p2g::add_rowvec(val(x), val(b))); }

    Id matmul(Id a, Id b) { return push(Op::MatMul, {a, b}, p2g::matmul(val(a), val(b))); }
    Id matmul_nt(Id a, Id b) { return push(Op::MatMulNT, {a, b}, p2g::matmul_nt(val(a), val(b))); }

    // matrix times a scalar-valued node ([1] tensor)
    Id mul_scalar_node(Id a, Id s) {
        if (val(s).numel() != 1) throw ShapeError("mul_scalar_node: scalar operand must have one entry");
        return push(Op::MulScalarNode, {a, s}, p2g::scale(val(a), val(s).data[0]));
    }

    Id concat_rows(std::span<const Id> parts) {
        std::vector<TensorT<T>> vs;
        vs.reserve(parts.size());
        for (Id p : parts) vs.push_back(val(p));
        TensorT<T> out = p2g::concat_rows<T>(std::span<const TensorT<T>>(vs));
        return push(Op::ConcatRows, std::vector<Id>(parts.begin(), parts.end()), std::move(out));
    }
    Id concat_rows(std::initializer_list<Id> parts) { return concat_rows(std::span<const Id>(parts.begin(), parts.size())); }

    Id concat_cols(std::span<const Id> parts) {
        if (parts.empty()) throw ShapeError("concat_cols: no inputs");
        const int n = val(parts[0]).rows();
        int d = 0;
        for (Id p : parts) {
            if (val(p).rows() != n) throw ShapeError("concat_cols: row mismatch");
            d += val(p).cols();
        }
        TensorT<T> out({n, d});
        int off = 0;
        for (Id p : parts) {
            const auto& v = val(p);
            for (int i = 0; i < n; ++i)
                std::copy(v.row_ptr(i), v.row_ptr(i) + v.cols(), out.row_ptr(i) + off);
            off += v.cols();
        }
        return push(Op::ConcatCols, std::vector<Id>(parts.begin(), parts.end()), std::move(out));
    }
    Id concat_cols(std::initializer_list<Id> parts) { return concat_cols(std::span<const Id>(parts.begin(), parts.size())); }

    Id slice_rows(Id x, int begin, int count) {
        Id n = push(Op::SliceRows, {x}, p2g::slice_rows(val(x), begin, count));
        nodes_[size_t(n)].i0 = begin;
        nodes_[size_t(n)].i1 = count;
        return n;
    }

    Id slice_cols(Id x, int begin, int count) {
        const auto& v = val(x);
        if (begin < 0 || count < 0 || begin + count > v.cols()) throw ShapeError("slice_cols: out of range");
        TensorT<T> out({v.rows(), count});
        for (int i = 0; i < v.rows(); ++i)
            std::copy(v.row_ptr(i) + begin, v.row_ptr(i) + begin + count, out.row_ptr(i));
        Id n = push(Op::SliceCols, {x}, std::move(out));
        nodes_[size_t(n)].i0 = begin;
        nodes_[size_t(n)].i1 = count;
        return n;
    }

    // out[i] = a_i . b_i, shape [n x 1]
    Id rowwise_dot(Id a, Id b) {
        const auto& av = val(a);
        const auto& bv = val(b);
        if (!av.same_shape(bv)) throw ShapeError("rowwise_dot: shape mismatch");
        TensorT<T> out({av.rows(), 1});
        for (int i = 0; i < av.rows(); ++i) {
            T acc = 0;
            const T* ar = av.row_ptr(i);
            const T* br = bv.row_ptr(i);
            for (int j = 0; j < av.cols(); ++j) acc += ar[j] * br[j];
            out.data[size_t(i)] = acc;
        }
        return push(Op::RowwiseDot, {a, b}, std::move(out));
    }

    // out_i = s_i * v_i with s of shape [n x 1]
    Id col_scale(Id v, Id s) {
        const auto& vv = val(v);
        const auto& sv = val(s);
        if (sv.rows() != vv.rows() || sv.cols() != 1) throw ShapeError("col_scale: scale must be [n x 1]");
        TensorT<T> out = vv;
        for (int i = 0; i < vv.rows(); ++i) {
            const T c = sv.data[size_t(i)];
            T* r = out.row_ptr(i);
            for (int j = 0; j < vv.cols(); ++j) r[j] *= c;
        }
        return push(Op::ColScale, {v, s}, std::move(out));
    }

    Id layer_norm(Id x, Id gamma, Id beta, T eps = T(1e-5)) {
        Id n = push(Op::LayerNorm, {x, gamma, beta}, p2g::layer_norm(val(x), val(gamma), val(beta), eps));
        nodes_[size_t(n)].alpha = eps;
        return n;
    }

    Id gelu(Id x) { return push(Op::Gelu, {x}, p2g::gelu(val(x))); }

    Id softmax_rows(Id x) { return push(Op::SoftmaxRows, {x}, p2g::softmax_rows(val(x))); }

    // adds mask_fill_value at disallowed entries (additive constant, so the
    // gradient passes through unchanged)
    Id mask_bias(Id x, std::shared_ptr<const AttentionMask> mask) {
        const auto& v = val(x);
        if (mask->n_query() != v.rows() || mask->n_key() != v.cols())
            throw ShapeError("mask_bias: mask dimension mismatch");
        TensorT<T> out = v;
        for (int i = 0; i < v.rows(); ++i)
            for (int j = 0; j < v.cols(); ++j)
                if (!mask->allowed(i, j)) out.at(i, j) += mask_fill_value<T>();
        Id n = push(Op::MaskBias, {x}, std::move(out));
        nodes_[size_t(n)].mask = std::move(mask);
        return n;
    }

    Id embed_rows(Id table, std::vector<int> ids) {
        const auto& tv = val(table);
        TensorT<T> out({int(ids.size()), tv.cols()});
        for (size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || ids[i] >= tv.rows()) throw ShapeError("embed_rows: id out of range");
            std::copy(tv.row_ptr(ids[i]), tv.row_ptr(ids[i]) + tv.cols(), out.row_ptr(int(i)));
        }
        Id n = push(Op::EmbedRows, {table}, std::move(out));
        nodes_[size_t(n)].ids = std::move(ids);
        return n;
    }

    // c_i = cos(a_i, b_i), shape [n x 1]
    Id cosine_rows(Id a, Id b) {
        const auto& av = val(a);
        const auto& bv = val(b);
        if (!av.same_shape(bv)) throw ShapeError("cosine_rows: shape mismatch");
        TensorT<T> out({av.rows(), 1});
        for (int i = 0; i < av.rows(); ++i) {
            TensorT<T> ar({1, av.cols()});
            TensorT<T> br({1, av.cols()});
            std::copy(av.row_ptr(i), av.row_ptr(i) + av.cols(), ar.data.begin());
            std::copy(bv.row_ptr(i), bv.row_ptr(i) + bv.cols(), br.data.begin());
            out.data[size_t(i)] = cosine_sim(ar, br);
        }
        return push(Op::CosineRows, {a, b}, std::move(out));
    }

    Id normalize_rows(Id x) { return push(Op::NormalizeRows, {x}, p2g::normalize_rows(val(x))); }

    Id mean_all(Id x) {
        const auto& v = val(x);
        T acc = 0;
        for (T e : v.data) acc += e;
        TensorT<T> out({1});
        out.data[0] = acc / T(v.numel());
        return push(Op::MeanAll, {x}, std::move(out));
    }

    Id softplus(Id x) {
        TensorT<T> out = val(x);
        for (auto& v : out.data) v = softplus_scalar(v);
        return push(Op::Softplus, {x}, std::move(out));
    }

    Id exp(Id x) {
        TensorT<T> out = val(x);
        for (auto& v : out.data) v = std::exp(v);
        return push(Op::Exp, {x}, std::move(out));
    }

    // Symmetric contrastive cross-entropy over a square logit matrix with
    // matching pairs on the diagonal: (row CE + column CE) / 2, batch-averaged.
    Id contrastive_ce(Id logits) {
        const auto& lv = val(logits);
        if (lv.rows() != lv.cols()) throw ShapeError("contrastive_ce: logits must be square");
        const int b = lv.rows();
        T loss = 0;
        for (int i = 0; i < b; ++i) {
            loss += T(0.5) * (logsumexp_row(lv, i) - lv.at(i, i));
            loss += T(0.5) * (logsumexp_col(lv, i) - lv.at(i, i));
        }
        TensorT<T> out({1});
        out.data[0] = loss / T(b);
        return push(Op::ContrastiveCE, {logits}, std::move(out));
    }

    // -----------------------------------------------------------------------

    void backward(Id loss_node) {
        if (value(loss_node).numel() != 1) throw ValueError("backward: loss node is not scalar");
        TensorT<T> seed({1});
        seed.data[0] = T(1);
        std::pair<Id, TensorT<T>> s{loss_node, std::move(seed)};
        backward_seeded(std::span<const std::pair<Id, TensorT<T>>>(&s, 1));
    }

    // Reverse sweep with explicit output gradients; enables cross-tape
    // checkpointed backward (vector-Jacobian products).
    void backward_seeded(std::span<const std::pair<Id, TensorT<T>>> seeds) {
        Id top = -1;
        for (const auto& [n, g] : seeds) {
            if (!nodes_[size_t(n)].requires_grad)
                throw ValueError("backward: seeded node does not track gradients");
            if (!g.same_shape(nodes_[size_t(n)].value)) throw ShapeError("backward: seed shape mismatch");
            accumulate(n, g);
            top = std::max(top, n);
        }
        for (Id n = top; n >= 0; --n) {
            Node& nd = nodes_[size_t(n)];
            if (!nd.requires_grad || nd.grad.data.empty()) continue;
            dispatch_backward(nd);
        }
    }

    // Convenience used by the spec-level API: gradients for a set of
    // registered leaves after a scalar-loss backward.
    std::vector<TensorT<T>> backward_leaves(Id loss_node, std::span<const Id> leaves) {
        for (Id l : leaves)
            if (!is_leaf(l)) throw ValueError("backward: id is not a registered leaf");
        backward(loss_node);
        std::vector<TensorT<T>> out;
        out.reserve(leaves.size());
        for (Id l : leaves) out.push_back(grad(l));
        return out;
    }

private:
    std::vector<Node> nodes_;
    mutable TensorT<T> zero_like_;

    const TensorT<T>& val(Id n) const { return nodes_[size_t(n)].value; }

    Id push(Op op, std::vector<Id> in, TensorT<T> value, bool force_rg = false) {
        Node nd;
        nd.op = op;
        nd.in = std::move(in);
        nd.value = std::move(value);
        nd.requires_grad = force_rg;
        for (Id i : nd.in) nd.requires_grad = nd.requires_grad || nodes_[size_t(i)].requires_grad;
        nodes_.push_back(std::move(nd));
        return Id(nodes_.size() - 1);
    }

    void accumulate(Id n, const TensorT<T>& g) {
        Node& nd = nodes_[size_t(n)];
        if (!nd.requires_grad) return;
        if (nd.grad.data.empty()) nd.grad = TensorT<T>(nd.value.shape);
        for (size_t i = 0; i < g.data.size(); ++i) nd.grad.data[i] += g.data[i];
    }

    static T softplus_scalar(T x) {
        if (x > T(30)) return x;
        if (x < T(-30)) return std::exp(x);
        return std::log1p(std::exp(x));
    }

    static T logsumexp_row(const TensorT<T>& m, int i) {
        T mx = m.at(i, 0);
        for (int j = 1; j < m.cols(); ++j) mx = std::max(mx, m.at(i, j));
        T s = 0;
        for (int j = 0; j < m.cols(); ++j) s += std::exp(m.at(i, j) - mx);
        return mx + std::log(s);
    }

    static T logsumexp_col(const TensorT<T>& m, int j) {
        T mx = m.at(0, j);
        for (int i = 1; i < m.rows(); ++i) mx = std::max(mx, m.at(i, j));
        T s = 0;
        for (int i = 0; i < m.rows(); ++i) s += std::exp(m.at(i, j) - mx);
        return mx + std::log(s);
    }

    void dispatch_backward(Node& nd) {
        const TensorT<T>& g = nd.grad;
        switch (nd.op) {
            case Op::Constant:
            case Op::Leaf:
                break;
            case Op::Add: {
                accumulate(nd.in[0], g);
                accumulate(nd.in[1], g);
                break;
            }
            case Op::Sub: {
                accumulate(nd.in[0], g);
                if (nodes_[size_t(nd.in[1])].requires_grad) accumulate(nd.in[1], p2g::scale(g, T(-1)));
                break;
            }
            case Op::Mul: {
                if (nodes_[size_t(nd.in[0])].requires_grad) {
                    TensorT<T> ga = g;
                    const auto& b = val(nd.in[1]);
                    for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] *= b.data[i];
                    accumulate(nd.in[0], ga);
                }
                if (nodes_[size_t(nd.in[1])].requires_grad) {
                    TensorT<T> gb = g;
                    const auto& a = val(nd.in[0]);
                    for (size_t i = 0; i < gb.data.size(); ++i) gb.data[i] *= a.data[i];
                    accumulate(nd.in[1], gb);
                }
                break;
            }
            case Op::Scale: {
                if (nodes_[size_t(nd.in[0])].requires_grad) accumulate(nd.in[0], p2g::scale(g, nd.alpha));
                break;
            }
            case Op::AddRowVec: {
                accumulate(nd.in[0], g);
                if (nodes_[size_t(nd.in[1])].requires_grad) {
                    TensorT<T> gb(val(nd.in[1]).shape);
                    for (int i = 0; i < g.rows(); ++i)
                        for (int j = 0; j < g.cols(); ++j) gb.data[size_t(j)] += g.at(i, j);
                    accumulate(nd.in[1], gb);
                }
                break;
            }
            case Op::MatMul: {
                const auto& a = val(nd.in[0]);
                const auto& b = val(nd.in[1]);
                if (nodes_[size_t(nd.in[0])].requires_grad) accumulate(nd.in[0], p2g::matmul_nt(g, b));
                if (nodes_[size_t(nd.in[1])].requires_grad) {
                    // b_grad = a^T g
                    TensorT<T> gb(b.shape);
                    for (int p = 0; p < a.rows(); ++p) {
                        const T* ar = a.row_ptr(p);
                        const T* gr = g.row_ptr(p);
                        for (int i = 0; i < a.cols(); ++i) {
                            const T av = ar[i];
                            T* br = gb.row_ptr(i);
                            for (int j = 0; j < g.cols(); ++j) br[j] += av * gr[j];
                        }
                    }
                    accumulate(nd.in[1], gb);
                }
                break;
            }
            case Op::MatMulNT: {
                // out = a b^T
                const auto& a = val(nd.in[0]);
                const auto& b = val(nd.in[1]);
                if (nodes_[size_t(nd.in[0])].requires_grad) accumulate(nd.in[0], p2g::matmul(g, b));
                if (nodes_[size_t(nd.in[1])].requires_grad) {
                    // b_grad = g^T a
                    TensorT<T> gb(b.shape);
                    for (int i = 0; i < g.rows(); ++i) {
                        const T* gr = g.row_ptr(i);
                        const T* ar = a.row_ptr(i);
                        for (int j = 0; j < g.cols(); ++j) {
                            const T gv = gr[j];
                            T* br = gb.row_ptr(j);
                            for (int p = 0; p < a.cols(); ++p) br[p] += gv * ar[p];
                        }
                    }
                    accumulate(nd.in[1], gb);
                }
                break;
            }
            case Op::MulScalarNode: {
                const auto& a = val(nd.in[0]);
                const T s = val(nd.in[1]).data[0];
                if (nodes_[size_t(nd.in[0])].requires_grad) accumulate(nd.in[0], p2g::scale(g, s));
                if (nodes_[size_t(nd.in[1])].requires_grad) {
                    T acc = 0;
                    for (size_t i = 0; i < g.data.size(); ++i) acc += g.data[i] * a.data[i];
                    TensorT<T> gs({1});
                    gs.data[0] = acc;
                    accumulate(nd.in[1], gs);
                }
                break;
            }
            case Op::ConcatRows: {
                int off = 0;
                for (Id in : nd.in) {
                    const int r = val(in).rows();
                    if (nodes_[size_t(in)].requires_grad) accumulate(in, p2g::slice_rows(g, off, r));
                    off += r;
                }
                break;
            }
            case Op::ConcatCols: {
                int off = 0;
                for (Id in : nd.in) {
                    const auto& v = val(in);
                    if (nodes_[size_t(in)].requires_grad) {
                        TensorT<T> gi(v.shape);
                        for (int i = 0; i < v.rows(); ++i)
                            std::copy(g.row_ptr(i) + off, g.row_ptr(i) + off + v.cols(), gi.row_ptr(i));
                        accumulate(in, gi);
                    }
                    off += v.cols();
                }
                break;
            }
            case Op::SliceRows: {
                if (nodes_[size_t(nd.in[0])].requires_grad) {
                    TensorT<T> gi(val(nd.in[0]).shape);
                    std::copy(g.data.begin(), g.data.end(),
                              gi.data.begin() + size_t(nd.i0) * size_t(gi.cols()));
                    accumulate(nd.in[0], gi);
                }
                break;
            }
            case Op::SliceCols: {
                if (nodes_[size_t(nd.in[0])].requires_grad) {
                    TensorT<T> gi(val(nd.in[0]).shape);
                    for (int i = 0; i < g.rows(); ++i)
                        std::copy(g.row_ptr(i), g.row_ptr(i) + g.cols(), gi.row_ptr(i) + nd.i0);
                    accumulate(nd.in[0], gi);
                }
                break;
            }
            case Op::RowwiseDot: {
                const auto& a = val(nd.in[0]);
                const auto& b = val(nd.in[1]);
                for (int slot = 0; slot < 2; ++slot) {
                    Id in = nd.in[size_t(slot)];
                    if (!nodes_[size_t(in)].requires_grad) continue;
                    const auto& other = slot == 0 ? b : a;
                    TensorT<T> gi(val(in).shape);
                    for (int i = 0; i < a.rows(); ++i) {
                        const T gv = g.data[size_t(i)];
                        const T* orow = other.row_ptr(i);
                        T* grow = gi.row_ptr(i);
                        for (int j = 0; j < a.cols(); ++j) grow[j] = gv * orow[j];
                    }
                    accumulate(in, gi);
                }
                break;
            }
            case Op::ColScale: {
                const auto& v = val(nd.in[0]);
                const auto& s = val(nd.in[1]);
                if (nodes_[size_t(nd.in[0])].requires_grad) {
                    TensorT<T> gv = g;
                    for (int i = 0; i < v.rows(); ++i) {
                        const T c = s.data[size_t(i)];
                        T* r = gv.row_ptr(i);
                        for (int j = 0; j < v.cols(); ++j) r[j] *= c;
                    }
                    accumulate(nd.in[0], gv);
                }
                if (nodes_[size_t(nd.in[1])].requires_grad) {
                    TensorT<T> gs(s.shape);
                    for (int i = 0; i < v.rows(); ++i) {
                        T acc = 0;
                        const T* gr = g.row_ptr(i);
                        const T* vr = v.row_ptr(i);
                        for (int j = 0; j < v.cols(); ++j) acc += gr[j] * vr[j];
                        gs.data[size_t(i)] = acc;
                    }
                    accumulate(nd.in[1], gs);
                }
                break;
            }
            case Op::LayerNorm:
                backward_layer_norm(nd, g);
                break;
            case Op::Gelu: {
                if (nodes_[size_t(nd.in[0])].requires_grad) {
                    const auto& x = val(nd.in[0]);
                    TensorT<T> gi = g;
                    for (size_t i = 0; i < gi.data.size(); ++i) {
                        const T xv = x.data[i];
                        const T phi = T(0.5) * (T(1) + std::erf(xv * T(0.70710678118654752440)));
                        const T pdf = std::exp(T(-0.5) * xv * xv) * T(0.39894228040143267794);
                        gi.data[i] *= phi + xv * pdf;
                    }
                    accumulate(nd.in[0], gi);
                }
                break;
            }
            case Op::SoftmaxRows: {
                if (nodes_[size_t(nd.in[0])].requires_grad) {
                    const auto& y = nd.value;
                    TensorT<T> gi(y.shape);
                    for (int i = 0; i < y.rows(); ++i) {
                        const T* yr = y.row_ptr(i);
                        const T* gr = g.row_ptr(i);
                        T dot = 0;
                        for (int j = 0; j < y.cols(); ++j) dot += gr[j] * yr[j];
                        T* o = gi.row_ptr(i);
                        for (int j = 0; j < y.cols(); ++j) o[j] = yr[j] * (gr[j] - dot);
                    }
                    accumulate(nd.in[0], gi);
                }
                break;
            }
            case Op::MaskBias: {
                accumulate(nd.in[0], g);  // additive constant
                break;
            }
            case Op::EmbedRows: {
                if (nodes_[size_t(nd.in[0])].requires_grad) {
                    TensorT<T> gt(val(nd.in[0]).shape);
                    for (size_t i = 0; i < nd.ids.size(); ++i) {
                        T* dst = gt.row_ptr(nd.ids[i]);
                        const T* src = g.row_ptr(int(i));
                        for (int j = 0; j < g.cols(); ++j) dst[j] += src[j];
                    }
                    accumulate(nd.in[0], gt);
                }
                break;
            }
            case Op::CosineRows:
                backward_cosine_rows(nd, g);
                break;
            case Op::NormalizeRows: {
                if (nodes_[size_t(nd.in[0])].requires_grad) {
                    const auto& x = val(nd.in[0]);
                    const auto& y = nd.value;
                    TensorT<T> gi(x.shape);
                    for (int i = 0; i < x.rows(); ++i) {
                        const T* xr = x.row_ptr(i);
                        const T* yr = y.row_ptr(i);
                        const T* gr = g.row_ptr(i);
                        T norm = 0;
                        for (int j = 0; j < x.cols(); ++j) norm += xr[j] * xr[j];
                        norm = std::sqrt(norm);
                        T dot = 0;
                        for (int j = 0; j < x.cols(); ++j) dot += gr[j] * yr[j];
                        T* o = gi.row_ptr(i);
                        for (int j = 0; j < x.cols(); ++j) o[j] = (gr[j] - yr[j] * dot) / norm;
                    }
                    accumulate(nd.in[0], gi);
                }
                break;
            }
            case Op::MeanAll: {
                if (nodes_[size_t(nd.in[0])].requires_grad) {
                    const auto& x = val(nd.in[0]);
                    accumulate(nd.in[0], TensorT<T>::full(x.shape, g.data[0] / T(x.numel())));
                }
                break;
            }
            case Op::Softplus: {
                if (nodes_[size_t(nd.in[0])].requires_grad) {
                    const auto& x = val(nd.in[0]);
                    TensorT<T> gi = g;
                    for (size_t i = 0; i < gi.data.size(); ++i)
                        gi.data[i] *= T(1) / (T(1) + std::exp(-x.data[i]));
                    accumulate(nd.in[0], gi);
                }
                break;
            }
            case Op::Exp: {
                if (nodes_[size_t(nd.in[0])].requires_grad) {
                    TensorT<T> gi = g;
                    for (size_t i = 0; i < gi.data.size(); ++i) gi.data[i] *= nd.value.data[i];
                    accumulate(nd.in[0], gi);
                }
                break;
            }
            case Op::ContrastiveCE: {
                if (nodes_[size_t(nd.in[0])].requires_grad) {
                    const auto& l = val(nd.in[0]);
                    const int b = l.rows();
                    TensorT<T> p_row = p2g::softmax_rows(l);
                    TensorT<T> gi(l.shape);
                    // column softmax
                    for (int j = 0; j < b; ++j) {
                        T mx = l.at(0, j);
                        for (int i = 1; i < b; ++i) mx = std::max(mx, l.at(i, j));
                        T s = 0;
                        for (int i = 0; i < b; ++i) s += std::exp(l.at(i, j) - mx);
                        for (int i = 0; i < b; ++i) gi.at(i, j) = std::exp(l.at(i, j) - mx) / s;
                    }
                    const T go = g.data[0] / (T(2) * T(b));
                    for (int i = 0; i < b; ++i)
                        for (int j = 0; j < b; ++j) {
                            T v = gi.at(i, j) + p_row.at(i, j);
                            if (i == j) v -= T(2);
                            gi.at(i, j) = v * go;
                        }
                    accumulate(nd.in[0], gi);
                }
                break;
            }
        }
    }

    void backward_layer_norm(Node& nd, const TensorT<T>& g) {
        const auto& x = val(nd.in[0]);
        const auto& gamma = val(nd.in[1]);
        const T eps = nd.alpha;
        const int n = x.rows(), d = x.cols();
        const bool need_x = nodes_[size_t(nd.in[0])].requires_grad;
        const bool need_g = nodes_[size_t(nd.in[1])].requires_grad;
        const bool need_b = nodes_[size_t(nd.in[2])].requires_grad;
        TensorT<T> gx, gg, gb;
        if (need_x) gx = TensorT<T>(x.shape);
        if (need_g) gg = TensorT<T>(val(nd.in[1]).shape);
        if (need_b) gb = TensorT<T>(val(nd.in[2]).shape);
        std::vector<T> xhat(static_cast<size_t>(d));
        for (int i = 0; i < n; ++i) {
            const T* xr = x.row_ptr(i);
            const T* gr = g.row_ptr(i);
            T mean = 0;
            for (int j = 0; j < d; ++j) mean += xr[j];
            mean /= T(d);
            T var = 0;
            for (int j = 0; j < d; ++j) {
                const T c = xr[j] - mean;
                var += c * c;
            }
            var /= T(d);
            const T inv = T(1) / std::sqrt(var + eps);
            for (int j = 0; j < d; ++j) xhat[size_t(j)] = (xr[j] - mean) * inv;
            if (need_g || need_b) {
                for (int j = 0; j < d; ++j) {
                    if (need_g) gg.data[size_t(j)] += gr[j] * xhat[size_t(j)];
                    if (need_b) gb.data[size_t(j)] += gr[j];
                }
            }
            if (need_x) {
                T sum_gy = 0, sum_gyx = 0;
                for (int j = 0; j < d; ++j) {
                    const T gy = gr[j] * gamma.data[size_t(j)];
                    sum_gy += gy;
                    sum_gyx += gy * xhat[size_t(j)];
                }
                T* o = gx.row_ptr(i);
                for (int j = 0; j < d; ++j) {
                    const T gy = gr[j] * gamma.data[size_t(j)];
                    o[j] = (gy - sum_gy / T(d) - xhat[size_t(j)] * sum_gyx / T(d)) * inv;
                }
            }
        }
        if (need_x) accumulate(nd.in[0], gx);
        if (need_g) accumulate(nd.in[1], gg);
        if (need_b) accumulate(nd.in[2], gb);
    }

    void backward_cosine_rows(Node& nd, const TensorT<T>& g) {
        const auto& a = val(nd.in[0]);
        const auto& b = val(nd.in[1]);
        const auto& c = nd.value;
        const int n = a.rows(), d = a.cols();
        const bool need_a = nodes_[size_t(nd.in[0])].requires_grad;
        const bool need_b2 = nodes_[size_t(nd.in[1])].requires_grad;
        TensorT<T> ga, gb;
        if (need_a) ga = TensorT<T>(a.shape);
        if (need_b2) gb = TensorT<T>(b.shape);
        for (int i = 0; i < n; ++i) {
            const T* ar = a.row_ptr(i);
            const T* br = b.row_ptr(i);
            T na2 = 0, nb2 = 0;
            for (int j = 0; j < d; ++j) {
                na2 += ar[j] * ar[j];
                nb2 += br[j] * br[j];
            }
            const T na = std::sqrt(na2), nb = std::sqrt(nb2);
            const T ci = c.data[size_t(i)];
            const T gi = g.data[size_t(i)];
            if (need_a) {
                T* o = ga.row_ptr(i);
                for (int j = 0; j < d; ++j) o[j] = gi * (br[j] / (na * nb) - ci * ar[j] / na2);
            }
            if (need_b2) {
                T* o = gb.row_ptr(i);
                for (int j = 0; j < d; ++j) o[j] = gi * (ar[j] / (na * nb) - ci * br[j] / nb2);
            }
        }
        if (need_a) accumulate(nd.in[0], ga);
        if (need_b2) accumulate(nd.in[1], gb);
    }
};

using Graph = GraphT<float>;
using Graph64 = GraphT<double>;

// -----------------------------------------------------------------------
// Central finite differences; the verification oracle for backward().

template <class T, class F>
TensorT<T> finite_diff_grad(F&& f, const TensorT<T>& x, T eps) {
    if (eps <= T(0)) throw ValueError("finite_diff_grad: eps must be positive");
    TensorT<T> g(x.shape);
    TensorT<T> w = x;
    for (size_t i = 0; i < x.data.size(); ++i) {
        const T orig = w.data[i];
        w.data[i] = orig + eps;
        const T fp = f(w);
        w.data[i] = orig - eps;
        const T fm = f(w);
        w.data[i] = orig;
        if (!std::isfinite(double(fp)) || !std::isfinite(double(fm)))
            throw ValueError("finite_diff_grad: non-finite function value");
        g.data[i] = (fp - fm) / (T(2) * eps);
    }
    return g;
}

}  // namespace p2g
