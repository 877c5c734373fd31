#pragma once

// Full-sequence reference forward: prompts of every task are physically
// prepended to the token sequence and the whole block runs through
// attention_masked with build_readonly_mask. Slower than the production
// split-row path and kept deliberately independent of it; tests compare the
// two.

#include <span>

#include "p2g/encoder.hpp"
#include "p2g/tensor.hpp"

namespace p2g {

namespace detail {

template <class T>
EncodeOutputT<T> reference_tower(const TowerT<T>& tw, const EncoderArch& arch,
                                 const TensorT<T>& x_orig,
                                 std::span<const TensorT<T>> prompt_groups, int summary_row,
                                 bool causal) {
    const int n_orig = x_orig.rows();
    const int t_count = int(prompt_groups.size());
    int prompt_len = 0;
    if (t_count > 0) {
        prompt_len = prompt_groups[0].rows();
        for (const auto& p : prompt_groups)
            if (p.rows() != prompt_len) throw ShapeError("reference forward: unequal prompt lengths");
    }
    const int np = t_count * prompt_len;

    std::vector<TensorT<T>> parts(prompt_groups.begin(), prompt_groups.end());
    parts.push_back(x_orig);
    TensorT<T> x = concat_rows<T>(std::span<const TensorT<T>>(parts));

    AttentionMask mask = build_readonly_mask(n_orig, t_count, prompt_len);
    if (causal) {
        for (int i = 0; i < n_orig; ++i)
            for (int j = i + 1; j < n_orig; ++j) mask.set(np + i, np + j, false);
    }

    const int d = x.cols();
    const int dh = d / arch.heads;
    for (const auto& l : tw.layers) {
        TensorT<T> ln = layer_norm(x, l.ln1_g, l.ln1_b);
        TensorT<T> q = add_rowvec(matmul(ln, l.wq), l.bq);
        TensorT<T> k = add_rowvec(matmul(ln, l.wk), l.bk);
        TensorT<T> v = add_rowvec(matmul(ln, l.wv), l.bv);
        TensorT<T> attn({x.rows(), d});
        for (int h = 0; h < arch.heads; ++h) {
            auto take = [&](const TensorT<T>& m) {
                TensorT<T> out({m.rows(), dh});
                for (int i = 0; i < m.rows(); ++i)
                    std::copy(m.row_ptr(i) + h * dh, m.row_ptr(i) + (h + 1) * dh, out.row_ptr(i));
                return out;
            };
            TensorT<T> oh = attention_masked(take(q), take(k), take(v), mask);
            for (int i = 0; i < x.rows(); ++i)
                std::copy(oh.row_ptr(i), oh.row_ptr(i) + dh, attn.row_ptr(i) + h * dh);
        }
        x = add(x, add_rowvec(matmul(attn, l.wo), l.bo));
        TensorT<T> m1 = gelu(add_rowvec(matmul(layer_norm(x, l.ln2_g, l.ln2_b), l.w1), l.b1));
        x = add(x, add_rowvec(matmul(m1, l.w2), l.b2));
    }

    EncodeOutputT<T> out;
    TensorT<T> summary = layer_norm(slice_rows(x, np + summary_row, 1), tw.final_g, tw.final_b);
    out.joint_feature = normalize_rows(matmul(summary, tw.proj));
    out.joint_feature.shape = {arch.d_joint};
    for (int t = 0; t < t_count; ++t) {
        TensorT<T> rows = layer_norm(slice_rows(x, t * prompt_len, prompt_len), tw.final_g, tw.final_b);
        out.prompt_outputs.push_back(matmul(rows, tw.proj));
    }
    return out;
}

}  // namespace detail

template <class T>
EncodeOutputT<T> reference_encode_image(const DualEncoderWeightsT<T>& w, const TensorT<T>& image,
                                        std::span<const TensorT<T>> prompt_groups) {
    int rows = 0;
    for (const auto& p : prompt_groups) rows += p.rows();
    check_vision_capacity<T>(w.arch, rows);
    TensorT<T> emb = add_rowvec(matmul(patchify(image, w.arch), w.patch_w), w.patch_b);
    std::vector<TensorT<T>> seq = {w.cls_token, emb};
    TensorT<T> x = add(concat_rows<T>(std::span<const TensorT<T>>(seq)), w.pos_vision);
    return detail::reference_tower(w.vision, w.arch, x, prompt_groups, 0, false);
}

template <class T>
EncodeOutputT<T> reference_encode_text(const DualEncoderWeightsT<T>& w, const std::string& text,
                                       std::span<const TensorT<T>> prompt_groups,
                                       const Vocabulary& vocab) {
    int rows = 0;
    for (const auto& p : prompt_groups) rows += p.rows();
    check_text_capacity<T>(w.arch, rows);
    auto ids = tokenize(text, vocab);
    TensorT<T> x({int(ids.size()), w.arch.d_text});
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy(w.token_emb.row_ptr(ids[i]), w.token_emb.row_ptr(ids[i]) + w.arch.d_text,
                  x.row_ptr(int(i)));
    x = add(x, w.pos_text);
    return detail::reference_tower(w.text, w.arch, x, prompt_groups, eot_position(ids, vocab),
                                   w.arch.text_causal);
}

}  // namespace p2g
