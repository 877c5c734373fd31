#pragma once

// Frozen dual encoder: a vision patch transformer and a word-level text
// transformer with joint-space projections, both supporting prepended
// read-only prompt tokens. Prompt rows read the original tokens (and
// themselves) but are structurally unable to write into them or into other
// prompts, so the backbone representation of the original tokens is the same
// with or without prompts.
//
// Two forward implementations exist:
//   * the production path used everywhere, which keeps original tokens and
//     each task's prompt rows as separate graph nodes (the read-only
//     constraint by construction, and no wasted backward work on the frozen
//     part), and
//   * reference_encode_* in reference.hpp, a full-sequence forward driven by
//     build_readonly_mask + attention_masked, used as the oracle in tests.

#include <atomic>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "p2g/autodiff.hpp"
#include "p2g/tensor.hpp"

namespace p2g {

// ---------------------------------------------------------------------------
// Forward instrumentation. classify_image must cost exactly one image-encoder
// forward per image no matter how many tasks are mounted; tests assert this.

struct ForwardStats {
    static std::atomic<long>& image_forwards() {
        static std::atomic<long> n{0};
        return n;
    }
    static std::atomic<long>& text_forwards() {
        static std::atomic<long> n{0};
        return n;
    }
    static void reset() {
        image_forwards() = 0;
        text_forwards() = 0;
    }
};

// ---------------------------------------------------------------------------

struct EncoderArch {
    int image_size = 32;
    int patch = 8;
    int channels = 3;
    int d_vision = 64;
    int d_text = 64;
    int d_joint = 64;
    int layers = 4;
    int heads = 4;
    int mlp_ratio = 4;
    int text_context = 16;   // original text tokens per sequence (SOT..PAD)
    int max_seq_vision = 64; // capacity including prompt tokens
    int max_seq_text = 64;
    bool text_causal = false; // originals attend bidirectionally by default
    int vocab_size = 0;

    int n_patches() const { return (image_size / patch) * (image_size / patch); }
    int n_vision_orig() const { return n_patches() + 1; }

    void validate() const {
        if (image_size <= 0 || patch <= 0 || image_size % patch != 0)
            throw ConfigError("encoder: image_size must be a positive multiple of patch");
        if (d_vision <= 0 || d_text <= 0 || d_joint <= 0) throw ConfigError("encoder: bad dims");
        if (d_vision % heads != 0 || d_text % heads != 0)
            throw ConfigError("encoder: head count must divide embedding dims");
        if (layers <= 0 || heads <= 0 || mlp_ratio <= 0) throw ConfigError("encoder: bad depth/heads");
        if (text_context < 3) throw ConfigError("encoder: text_context must be >= 3");
        if (max_seq_vision < n_vision_orig()) throw ConfigError("encoder: vision capacity below originals");
        if (max_seq_text < text_context) throw ConfigError("encoder: text capacity below context");
        if (vocab_size < 4) throw ConfigError("encoder: vocabulary not set");
    }

    bool operator==(const EncoderArch&) const = default;
};

// ---------------------------------------------------------------------------
// Vocabulary: toy word-level tokenizer. File format: one token per line.

struct Vocabulary {
    std::vector<std::string> tokens;  // full id space, specials first
    int pad_id = 0;
    int sot_id = 1;
    int eot_id = 2;
    int context_length = 16;
    std::unordered_map<std::string, int> index;

    static Vocabulary from_words(std::vector<std::string> words, int context = 16) {
        Vocabulary v;
        v.context_length = context;
        v.tokens = {"<pad>", "<sot>", "<eot>"};
        v.tokens.insert(v.tokens.end(), words.begin(), words.end());
        for (size_t i = 0; i < v.tokens.size(); ++i) {
            if (!v.index.emplace(v.tokens[i], int(i)).second)
                throw ConfigError("vocabulary: duplicate token '" + v.tokens[i] + "'");
        }
        if (v.context_length < 3) throw ConfigError("vocabulary: context_length must be >= 3");
        return v;
    }

    // Template words plus the synthetic shape classes.
    static Vocabulary shapes_preset(int context = 16) {
        return from_words({"a", "photo", "of", "real", "fake", "circle", "square", "triangle",
                           "cross", "ring", "stripe"},
                          context);
    }

    // Adds the handcrafted face-class words so the faces6 class set tokenizes.
    static Vocabulary union_preset(int context = 16) {
        return from_words({"a", "photo", "of", "real", "fake", "circle", "square", "triangle",
                           "cross", "ring", "stripe", "young", "middle-aged", "old", "male",
                           "female"},
                          context);
    }

    static Vocabulary load(const std::string& path, int context = 16) {
        std::ifstream is(path);
        if (!is) throw IoError("vocabulary: cannot open " + path);
        std::vector<std::string> words;
        std::string line;
        while (std::getline(is, line)) {
            while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
            if (!line.empty()) words.push_back(line);
        }
        if (words.empty()) throw FormatError("vocabulary: empty file " + path);
        return from_words(std::move(words), context);
    }

    void save(const std::string& path) const {
        std::ofstream os(path);
        if (!os) throw IoError("vocabulary: cannot write " + path);
        for (size_t i = 3; i < tokens.size(); ++i) os << tokens[i] << "\n";
    }

    int size() const { return int(tokens.size()); }

    int word_id(const std::string& w) const {
        auto it = index.find(w);
        if (it == index.end()) throw OutOfVocabulary("out-of-vocabulary word: '" + w + "'");
        return it->second;
    }
};

inline std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab) {
    std::vector<int> ids;
    ids.push_back(vocab.sot_id);
    std::istringstream ss(text);
    std::string word;
    while (ss >> word) ids.push_back(vocab.word_id(word));
    ids.push_back(vocab.eot_id);
    if (int(ids.size()) > vocab.context_length)
        throw TokenLengthExceeded("text of " + std::to_string(ids.size() - 2) +
                                  " words exceeds context_length " + std::to_string(vocab.context_length));
    ids.resize(size_t(vocab.context_length), vocab.pad_id);
    return ids;
}

inline int eot_position(const std::vector<int>& ids, const Vocabulary& vocab) {
    for (size_t i = 0; i < ids.size(); ++i)
        if (ids[i] == vocab.eot_id) return int(i);
    throw ValueError("token sequence has no EOT");
}

// ---------------------------------------------------------------------------
// Weights

template <class T>
struct TransformerLayerT {
    TensorT<T> ln1_g, ln1_b;
    TensorT<T> wq, bq, wk, bk, wv, bv, wo, bo;
    TensorT<T> ln2_g, ln2_b;
    TensorT<T> w1, b1, w2, b2;
};

template <class T>
struct TowerT {
    std::vector<TransformerLayerT<T>> layers;
    TensorT<T> final_g, final_b;
    TensorT<T> proj;  // d_tower -> d_joint
};

template <class T>
struct DualEncoderWeightsT {
    EncoderArch arch;

    TensorT<T> patch_w;     // [patch*patch*channels x d_vision]
    TensorT<T> patch_b;     // [d_vision]
    TensorT<T> cls_token;   // [1 x d_vision]
    TensorT<T> pos_vision;  // [1+n_patches x d_vision]
    TowerT<T> vision;

    TensorT<T> token_emb;  // [vocab x d_text]
    TensorT<T> pos_text;   // [text_context x d_text]
    TowerT<T> text;

    TensorT<T> log_logit_scale;  // [1]

    bool frozen = false;
    uint32_t checksum = 0;

    T logit_scale() const {
        T s = std::exp(log_logit_scale.data[0]);
        return std::min(s, T(100));
    }

    template <class F>
    void for_each_tensor(F&& f) {
        f("patch_w", patch_w);
        f("patch_b", patch_b);
        f("cls_token", cls_token);
        f("pos_vision", pos_vision);
        for_tower(vision, "v", f);
        f("token_emb", token_emb);
        f("pos_text", pos_text);
        for_tower(text, "t", f);
        f("log_logit_scale", log_logit_scale);
    }

    template <class F>
    void for_each_tensor(F&& f) const {
        const_cast<DualEncoderWeightsT*>(this)->for_each_tensor(
            [&](const char* name, TensorT<T>& t) { f(name, const_cast<const TensorT<T>&>(t)); });
    }

    uint32_t compute_checksum() const {
        uint32_t crc = 0;
        for_each_tensor([&](const char*, const TensorT<T>& t) {
            crc = crc32_update(crc, t.data.data(), t.data.size() * sizeof(T));
        });
        return crc;
    }

    void freeze() {
        frozen = true;
        checksum = compute_checksum();
    }

    void verify_checksum() const {
        if (!frozen) return;
        if (compute_checksum() != checksum)
            throw ChecksumMismatch("encoder weights changed after freeze");
    }

    static DualEncoderWeightsT random_init(EncoderArch arch, uint64_t seed) {
        arch.validate();
        DualEncoderWeightsT w;
        w.arch = arch;
        Rng rng(derive_seed(seed, 0x0e11c0de));
        const T emb_std = T(0.02);
        auto xavier = [&](int fan_in, int fan_out) {
            return TensorT<T>::randn({fan_in, fan_out}, rng, T(std::sqrt(2.0 / double(fan_in + fan_out))));
        };
        w.patch_w = xavier(arch.patch * arch.patch * arch.channels, arch.d_vision);
        w.patch_b = TensorT<T>::zeros({arch.d_vision});
        w.cls_token = TensorT<T>::randn({1, arch.d_vision}, rng, emb_std);
        w.pos_vision = TensorT<T>::randn({arch.n_vision_orig(), arch.d_vision}, rng, emb_std);
        init_tower(w.vision, arch.d_vision, arch, rng);
        w.token_emb = TensorT<T>::randn({arch.vocab_size, arch.d_text}, rng, emb_std);
        w.pos_text = TensorT<T>::randn({arch.text_context, arch.d_text}, rng, emb_std);
        init_tower(w.text, arch.d_text, arch, rng);
        w.log_logit_scale = TensorT<T>::vec({T(std::log(1.0 / 0.07))});
        return w;
    }

    template <class U>
    DualEncoderWeightsT<U> cast() const {
        DualEncoderWeightsT<U> out;
        out.arch = arch;
        out.frozen = frozen;
        std::vector<const TensorT<T>*> src;
        for_each_tensor([&](const char*, const TensorT<T>& t) { src.push_back(&t); });
        size_t i = 0;
        out.for_each_tensor([&](const char*, TensorT<U>& t) { t = src[i++]->template cast<U>(); });
        out.checksum = out.compute_checksum();
        return out;
    }

private:
    template <class F>
    static void for_tower(TowerT<T>& tw, const char*, F&& f) {
        for (auto& l : tw.layers) {
            f("ln1_g", l.ln1_g);
            f("ln1_b", l.ln1_b);
            f("wq", l.wq);
            f("bq", l.bq);
            f("wk", l.wk);
            f("bk", l.bk);
            f("wv", l.wv);
            f("bv", l.bv);
            f("wo", l.wo);
            f("bo", l.bo);
            f("ln2_g", l.ln2_g);
            f("ln2_b", l.ln2_b);
            f("w1", l.w1);
            f("b1", l.b1);
            f("w2", l.w2);
            f("b2", l.b2);
        }
        f("final_g", tw.final_g);
        f("final_b", tw.final_b);
        f("proj", tw.proj);
    }

    static void init_tower(TowerT<T>& tw, int d, const EncoderArch& arch, Rng& rng) {
        auto xavier = [&](int fi, int fo) {
            return TensorT<T>::randn({fi, fo}, rng, T(std::sqrt(2.0 / double(fi + fo))));
        };
        tw.layers.resize(size_t(arch.layers));
        for (auto& l : tw.layers) {
            l.ln1_g = TensorT<T>::full({d}, T(1));
            l.ln1_b = TensorT<T>::zeros({d});
            l.wq = xavier(d, d);
            l.bq = TensorT<T>::zeros({d});
            l.wk = xavier(d, d);
            l.bk = TensorT<T>::zeros({d});
            l.wv = xavier(d, d);
            l.bv = TensorT<T>::zeros({d});
            l.wo = xavier(d, d);
            l.bo = TensorT<T>::zeros({d});
            l.ln2_g = TensorT<T>::full({d}, T(1));
            l.ln2_b = TensorT<T>::zeros({d});
            l.w1 = xavier(d, d * arch.mlp_ratio);
            l.b1 = TensorT<T>::zeros({d * arch.mlp_ratio});
            l.w2 = xavier(d * arch.mlp_ratio, d);
            l.b2 = TensorT<T>::zeros({d});
        }
        tw.final_g = TensorT<T>::full({d}, T(1));
        tw.final_b = TensorT<T>::zeros({d});
        tw.proj = xavier(d, arch.d_joint);
    }
};

using DualEncoderWeights = DualEncoderWeightsT<float>;

// ---------------------------------------------------------------------------
// Patch extraction. Pixels in [0,1] are shifted to [-1,1] before the linear
// patch embedding.

struct ImageTokensT {
    int n_patches = 0;
};

template <class T>
TensorT<T> patchify(const TensorT<T>& image, const EncoderArch& arch) {
    if (image.ndim() != 3 || image.shape[0] != arch.channels || image.shape[1] != arch.image_size ||
        image.shape[2] != arch.image_size)
        throw ShapeError("patchify: image does not match configured resolution");
    const int p = arch.patch;
    const int grid = arch.image_size / p;
    TensorT<T> out({grid * grid, p * p * arch.channels});
    const int hw = arch.image_size * arch.image_size;
    for (int gy = 0; gy < grid; ++gy)
        for (int gx = 0; gx < grid; ++gx) {
            T* row = out.row_ptr(gy * grid + gx);
            int idx = 0;
            for (int c = 0; c < arch.channels; ++c)
                for (int py = 0; py < p; ++py)
                    for (int px = 0; px < p; ++px) {
                        const int y = gy * p + py, x = gx * p + px;
                        row[idx++] = image.data[size_t(c * hw + y * arch.image_size + x)] * T(2) - T(1);
                    }
        }
    return out;
}

// ---------------------------------------------------------------------------
// Graph-side forward. Weight tensors are bound to graph nodes once per tape;
// bind as constants for inference / prompt training, as leaves for
// pre-alignment.

template <class T>
struct LayerNodes {
    using Id = typename GraphT<T>::Id;
    Id ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
};

template <class T>
struct TowerNodes {
    using Id = typename GraphT<T>::Id;
    std::vector<LayerNodes<T>> layers;
    Id final_g, final_b, proj;
};

template <class T>
struct EncoderNodes {
    using Id = typename GraphT<T>::Id;
    Id patch_w, patch_b, cls_token, pos_vision;
    TowerNodes<T> vision;
    Id token_emb, pos_text;
    TowerNodes<T> text;
    Id log_logit_scale;

    std::vector<Id> all() const {
        std::vector<Id> ids = {patch_w, patch_b, cls_token, pos_vision};
        auto add_tower = [&](const TowerNodes<T>& tw) {
            for (const auto& l : tw.layers)
                for (Id id : {l.ln1_g, l.ln1_b, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo,
                              l.ln2_g, l.ln2_b, l.w1, l.b1, l.w2, l.b2})
                    ids.push_back(id);
            ids.push_back(tw.final_g);
            ids.push_back(tw.final_b);
            ids.push_back(tw.proj);
        };
        add_tower(vision);
        ids.push_back(token_emb);
        ids.push_back(pos_text);
        add_tower(text);
        ids.push_back(log_logit_scale);
        return ids;
    }
};

template <class T>
EncoderNodes<T> bind_encoder(GraphT<T>& g, const DualEncoderWeightsT<T>& w, bool as_leaves) {
    EncoderNodes<T> n;
    auto bind = [&](const TensorT<T>& t) { return as_leaves ? g.leaf(t) : g.constant(t); };
    auto bind_tower = [&](const TowerT<T>& tw, TowerNodes<T>& out) {
        out.layers.resize(tw.layers.size());
        for (size_t i = 0; i < tw.layers.size(); ++i) {
            const auto& l = tw.layers[i];
            auto& o = out.layers[i];
            o.ln1_g = bind(l.ln1_g);
            o.ln1_b = bind(l.ln1_b);
            o.wq = bind(l.wq);
            o.bq = bind(l.bq);
            o.wk = bind(l.wk);
            o.bk = bind(l.bk);
            o.wv = bind(l.wv);
            o.bv = bind(l.bv);
            o.wo = bind(l.wo);
            o.bo = bind(l.bo);
            o.ln2_g = bind(l.ln2_g);
            o.ln2_b = bind(l.ln2_b);
            o.w1 = bind(l.w1);
            o.b1 = bind(l.b1);
            o.w2 = bind(l.w2);
            o.b2 = bind(l.b2);
        }
        out.final_g = bind(tw.final_g);
        out.final_b = bind(tw.final_b);
        out.proj = bind(tw.proj);
    };
    n.patch_w = bind(w.patch_w);
    n.patch_b = bind(w.patch_b);
    n.cls_token = bind(w.cls_token);
    n.pos_vision = bind(w.pos_vision);
    bind_tower(w.vision, n.vision);
    n.token_emb = bind(w.token_emb);
    n.pos_text = bind(w.pos_text);
    bind_tower(w.text, n.text);
    n.log_logit_scale = bind(w.log_logit_scale);
    return n;
}

namespace detail {

// Plain multi-head self-attention over the original tokens. `causal`
// restricts key j <= query i (text tower option); prompts are unaffected.
template <class T>
typename GraphT<T>::Id originals_block(GraphT<T>& g, const LayerNodes<T>& l,
                                       typename GraphT<T>::Id x, int heads, bool causal) {
    using Id = typename GraphT<T>::Id;
    const int n = g.value(x).rows();
    const int d = g.value(x).cols();
    const int dh = d / heads;
    Id ln = g.layer_norm(x, l.ln1_g, l.ln1_b);
    Id q = g.add_rowvec(g.matmul(ln, l.wq), l.bq);
    Id k = g.add_rowvec(g.matmul(ln, l.wk), l.bk);
    Id v = g.add_rowvec(g.matmul(ln, l.wv), l.bv);
    std::shared_ptr<const AttentionMask> cm;
    if (causal) {
        AttentionMask m(n, n, false);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j <= i; ++j) m.set(i, j, true);
        cm = std::make_shared<const AttentionMask>(std::move(m));
    }
    std::vector<Id> head_out;
    head_out.reserve(size_t(heads));
    for (int h = 0; h < heads; ++h) {
        Id qh = g.slice_cols(q, h * dh, dh);
        Id kh = g.slice_cols(k, h * dh, dh);
        Id vh = g.slice_cols(v, h * dh, dh);
        Id s = g.scale(g.matmul_nt(qh, kh), T(1) / std::sqrt(T(dh)));
        if (cm) s = g.mask_bias(s, cm);
        head_out.push_back(g.matmul(g.softmax_rows(s), vh));
    }
    Id attn = g.add_rowvec(g.matmul(g.concat_cols(std::span<const Id>(head_out)), l.wo), l.bo);
    x = g.add(x, attn);
    Id ln2 = g.layer_norm(x, l.ln2_g, l.ln2_b);
    Id m1 = g.gelu(g.add_rowvec(g.matmul(ln2, l.w1), l.b1));
    Id m2 = g.add_rowvec(g.matmul(m1, l.w2), l.b2);
    return g.add(x, m2);
}

// One task's prompt rows for one layer. Each row attends to itself (first
// score column, matching the prepended key order of the masked reference)
// and to the original tokens' cached K/V.
template <class T>
typename GraphT<T>::Id prompt_block(GraphT<T>& g, const LayerNodes<T>& l,
                                    typename GraphT<T>::Id p, typename GraphT<T>::Id k_orig,
                                    typename GraphT<T>::Id v_orig, int heads) {
    using Id = typename GraphT<T>::Id;
    const int d = g.value(p).cols();
    const int dh = d / heads;
    Id ln = g.layer_norm(p, l.ln1_g, l.ln1_b);
    Id q = g.add_rowvec(g.matmul(ln, l.wq), l.bq);
    Id k = g.add_rowvec(g.matmul(ln, l.wk), l.bk);
    Id v = g.add_rowvec(g.matmul(ln, l.wv), l.bv);
    std::vector<Id> head_out;
    head_out.reserve(size_t(heads));
    for (int h = 0; h < heads; ++h) {
        Id qh = g.slice_cols(q, h * dh, dh);
        Id kh = g.slice_cols(k, h * dh, dh);
        Id vh = g.slice_cols(v, h * dh, dh);
        Id koh = g.slice_cols(k_orig, h * dh, dh);
        Id voh = g.slice_cols(v_orig, h * dh, dh);
        Id s_self = g.rowwise_dot(qh, kh);
        Id s = g.scale(g.concat_cols({s_self, g.matmul_nt(qh, koh)}), T(1) / std::sqrt(T(dh)));
        Id probs = g.softmax_rows(s);
        const int n_orig = g.value(koh).rows();
        Id out = g.add(g.col_scale(vh, g.slice_cols(probs, 0, 1)),
                       g.matmul(g.slice_cols(probs, 1, n_orig), voh));
        head_out.push_back(out);
    }
    Id attn = g.add_rowvec(g.matmul(g.concat_cols(std::span<const Id>(head_out)), l.wo), l.bo);
    p = g.add(p, attn);
    Id ln2 = g.layer_norm(p, l.ln2_g, l.ln2_b);
    Id m1 = g.gelu(g.add_rowvec(g.matmul(ln2, l.w1), l.b1));
    Id m2 = g.add_rowvec(g.matmul(m1, l.w2), l.b2);
    return g.add(p, m2);
}

// K/V of the original tokens at a layer, shared by every prompt group.
template <class T>
std::pair<typename GraphT<T>::Id, typename GraphT<T>::Id> originals_kv(
    GraphT<T>& g, const LayerNodes<T>& l, typename GraphT<T>::Id x) {
    auto ln = g.layer_norm(x, l.ln1_g, l.ln1_b);
    return {g.add_rowvec(g.matmul(ln, l.wk), l.bk), g.add_rowvec(g.matmul(ln, l.wv), l.bv)};
}

}  // namespace detail

template <class T>
struct TowerForward {
    using Id = typename GraphT<T>::Id;
    Id joint;                      // [1 x d_joint], unit norm
    std::vector<Id> prompt_out;    // per task, [L x d_joint]
};

// Runs one tower over originals plus per-task prompt groups. `summary_row` is
// the index of the row whose projection becomes the joint feature (CLS for
// vision, EOT for text).
template <class T>
TowerForward<T> tower_forward(GraphT<T>& g, const TowerNodes<T>& tw,
                              typename GraphT<T>::Id x_orig,
                              std::span<const typename GraphT<T>::Id> prompt_groups, int heads,
                              int summary_row, bool causal) {
    using Id = typename GraphT<T>::Id;
    Id x = x_orig;
    std::vector<Id> prompts(prompt_groups.begin(), prompt_groups.end());
    for (const auto& l : tw.layers) {
        if (!prompts.empty()) {
            auto [k_orig, v_orig] = detail::originals_kv(g, l, x);
            for (auto& p : prompts) p = detail::prompt_block(g, l, p, k_orig, v_orig, heads);
        }
        x = detail::originals_block(g, l, x, heads, causal);
    }
    TowerForward<T> out;
    Id summary = g.slice_rows(x, summary_row, 1);
    summary = g.layer_norm(summary, tw.final_g, tw.final_b);
    out.joint = g.normalize_rows(g.matmul(summary, tw.proj));
    for (Id p : prompts) {
        Id lp = g.layer_norm(p, tw.final_g, tw.final_b);
        out.prompt_out.push_back(g.matmul(lp, tw.proj));
    }
    return out;
}

template <class T>
void check_vision_capacity(const EncoderArch& arch, int total_prompt_rows) {
    if (arch.n_vision_orig() + total_prompt_rows > arch.max_seq_vision)
        throw TokenLengthExceeded("vision sequence " +
                                  std::to_string(arch.n_vision_orig() + total_prompt_rows) +
                                  " exceeds capacity " + std::to_string(arch.max_seq_vision));
}

template <class T>
void check_text_capacity(const EncoderArch& arch, int total_prompt_rows) {
    if (arch.text_context + total_prompt_rows > arch.max_seq_text)
        throw TokenLengthExceeded("text sequence " +
                                  std::to_string(arch.text_context + total_prompt_rows) +
                                  " exceeds capacity " + std::to_string(arch.max_seq_text));
}

// Vision forward on an existing tape. `patches` must come from patchify().
template <class T>
TowerForward<T> vision_forward(GraphT<T>& g, const EncoderNodes<T>& n, const EncoderArch& arch,
                               typename GraphT<T>::Id patches,
                               std::span<const typename GraphT<T>::Id> prompt_groups) {
    int prompt_rows = 0;
    for (auto p : prompt_groups) {
        if (g.value(p).cols() != arch.d_vision) throw ShapeError("vision prompt width mismatch");
        prompt_rows += g.value(p).rows();
    }
    check_vision_capacity<T>(arch, prompt_rows);
    ForwardStats::image_forwards()++;
    auto emb = g.add_rowvec(g.matmul(patches, n.patch_w), n.patch_b);
    auto x = g.add(g.concat_rows({n.cls_token, emb}), n.pos_vision);
    return tower_forward(g, n.vision, x, prompt_groups, arch.heads, 0, false);
}

template <class T>
TowerForward<T> text_forward(GraphT<T>& g, const EncoderNodes<T>& n, const EncoderArch& arch,
                             const std::vector<int>& token_ids,
                             std::span<const typename GraphT<T>::Id> prompt_groups,
                             const Vocabulary& vocab) {
    if (int(token_ids.size()) != arch.text_context) throw ShapeError("text_forward: bad token count");
    int prompt_rows = 0;
    for (auto p : prompt_groups) {
        if (g.value(p).cols() != arch.d_text) throw ShapeError("text prompt width mismatch");
        prompt_rows += g.value(p).rows();
    }
    check_text_capacity<T>(arch, prompt_rows);
    ForwardStats::text_forwards()++;
    auto x = g.add(g.embed_rows(n.token_emb, token_ids), n.pos_text);
    return tower_forward(g, n.text, x, prompt_groups, arch.heads, eot_position(token_ids, vocab),
                         arch.text_causal);
}

// ---------------------------------------------------------------------------
// Eager wrappers (value-level API)

template <class T>
struct EncodeOutputT {
    TensorT<T> joint_feature;                // unit-norm, R^{d_joint}
    std::vector<TensorT<T>> prompt_outputs;  // per task, [L x d_joint]
};

using EncodeOutput = EncodeOutputT<float>;

template <class T>
EncodeOutputT<T> encode_image(const DualEncoderWeightsT<T>& w, const TensorT<T>& image,
                              std::span<const TensorT<T>> prompt_groups) {
    GraphT<T> g;
    auto nodes = bind_encoder(g, w, false);
    auto patches = g.constant(patchify(image, w.arch));
    std::vector<typename GraphT<T>::Id> pg;
    pg.reserve(prompt_groups.size());
    for (const auto& p : prompt_groups) pg.push_back(g.constant(p));
    auto fwd = vision_forward(g, nodes, w.arch, patches, std::span<const typename GraphT<T>::Id>(pg));
    EncodeOutputT<T> out;
    out.joint_feature = g.value(fwd.joint);
    out.joint_feature.shape = {w.arch.d_joint};
    for (auto id : fwd.prompt_out) out.prompt_outputs.push_back(g.value(id));
    out.joint_feature.require_finite("encode_image joint feature");
    return out;
}

template <class T>
EncodeOutputT<T> encode_text(const DualEncoderWeightsT<T>& w, const std::string& text,
                             std::span<const TensorT<T>> prompt_groups, const Vocabulary& vocab) {
    if (vocab.size() != w.arch.vocab_size) throw ConfigError("encode_text: vocabulary size mismatch");
    if (vocab.context_length != w.arch.text_context)
        throw ConfigError("encode_text: vocabulary context mismatch");
    auto ids = tokenize(text, vocab);
    GraphT<T> g;
    auto nodes = bind_encoder(g, w, false);
    std::vector<typename GraphT<T>::Id> pg;
    pg.reserve(prompt_groups.size());
    for (const auto& p : prompt_groups) pg.push_back(g.constant(p));
    auto fwd = text_forward(g, nodes, w.arch, ids, std::span<const typename GraphT<T>::Id>(pg), vocab);
    EncodeOutputT<T> out;
    out.joint_feature = g.value(fwd.joint);
    out.joint_feature.shape = {w.arch.d_joint};
    for (auto id : fwd.prompt_out) out.prompt_outputs.push_back(g.value(id));
    out.joint_feature.require_finite("encode_text joint feature");
    return out;
}

// ---------------------------------------------------------------------------
// Frozen text activations: per-layer original-token K/V plus the joint EOT
// feature. The frozen half of a text forward does not depend on prompt
// values, so during prompt training it is computed once per distinct text.

template <class T>
struct FrozenTextActivationsT {
    std::vector<TensorT<T>> k_orig;  // per layer [context x d_text]
    std::vector<TensorT<T>> v_orig;
    TensorT<T> joint;  // [d_joint]
};

template <class T>
FrozenTextActivationsT<T> compute_frozen_text(const DualEncoderWeightsT<T>& w,
                                              const std::vector<int>& token_ids,
                                              const Vocabulary& vocab) {
    GraphT<T> g;
    auto nodes = bind_encoder(g, w, false);
    FrozenTextActivationsT<T> out;
    auto x = g.add(g.embed_rows(nodes.token_emb, token_ids), nodes.pos_text);
    for (const auto& l : nodes.text.layers) {
        auto [k, v] = detail::originals_kv(g, l, x);
        out.k_orig.push_back(g.value(k));
        out.v_orig.push_back(g.value(v));
        x = detail::originals_block(g, l, x, w.arch.heads, w.arch.text_causal);
    }
    auto summary = g.slice_rows(x, eot_position(token_ids, vocab), 1);
    summary = g.layer_norm(summary, nodes.text.final_g, nodes.text.final_b);
    auto joint = g.normalize_rows(g.matmul(summary, nodes.text.proj));
    out.joint = g.value(joint);
    out.joint.shape = {w.arch.d_joint};
    return out;
}

// Prompt rows only, reading cached frozen activations. Exactly equivalent to
// the corresponding rows of a full text_forward.
template <class T>
std::vector<typename GraphT<T>::Id> text_prompt_forward(
    GraphT<T>& g, const EncoderNodes<T>& n, const EncoderArch& arch,
    const FrozenTextActivationsT<T>& frozen,
    std::span<const typename GraphT<T>::Id> prompt_groups) {
    int prompt_rows = 0;
    for (auto p : prompt_groups) prompt_rows += g.value(p).rows();
    check_text_capacity<T>(arch, prompt_rows);
    std::vector<typename GraphT<T>::Id> prompts(prompt_groups.begin(), prompt_groups.end());
    for (size_t li = 0; li < n.text.layers.size(); ++li) {
        auto k_orig = g.constant(frozen.k_orig[li]);
        auto v_orig = g.constant(frozen.v_orig[li]);
        for (auto& p : prompts)
            p = detail::prompt_block(g, n.text.layers[li], p, k_orig, v_orig, arch.heads);
    }
    std::vector<typename GraphT<T>::Id> out;
    out.reserve(prompts.size());
    for (auto p : prompts) {
        auto lp = g.layer_norm(p, n.text.final_g, n.text.final_b);
        out.push_back(g.matmul(lp, n.text.proj));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint format "P2G-ENC": header (magic, version, hyperparameters,
// payload checksum) followed by float32 little-endian arrays in
// for_each_tensor order.

inline constexpr char kEncoderMagic[8] = {'P', '2', 'G', '-', 'E', 'N', 'C', '\0'};
inline constexpr uint32_t kEncoderVersion = 1;

template <class T>
void save_encoder(const DualEncoderWeightsT<T>& w, const std::string& path) {
    // payload serialized as float32 regardless of the working precision
    std::vector<float> payload;
    w.for_each_tensor([&](const char*, const TensorT<T>& t) {
        for (T v : t.data) payload.push_back(float(v));
    });
    const uint32_t crc = crc32(payload.data(), payload.size() * sizeof(float));

    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("save_encoder: cannot open " + path);
    write_bytes(os, kEncoderMagic, sizeof(kEncoderMagic));
    write_pod(os, kEncoderVersion);
    const auto& a = w.arch;
    for (int v : {a.image_size, a.patch, a.channels, a.d_vision, a.d_text, a.d_joint, a.layers,
                  a.heads, a.mlp_ratio, a.text_context, a.max_seq_vision, a.max_seq_text,
                  a.text_causal ? 1 : 0, a.vocab_size})
        write_pod(os, int32_t(v));
    write_pod(os, crc);
    write_bytes(os, payload.data(), payload.size() * sizeof(float));
}

template <class T = float>
DualEncoderWeightsT<T> load_encoder(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("load_encoder: cannot open " + path);
    char magic[8];
    read_bytes(is, magic, sizeof(magic));
    if (std::memcmp(magic, kEncoderMagic, sizeof(magic)) != 0)
        throw FormatError("load_encoder: bad magic");
    if (read_pod<uint32_t>(is) != kEncoderVersion) throw FormatError("load_encoder: version mismatch");
    EncoderArch a;
    a.image_size = read_pod<int32_t>(is);
    a.patch = read_pod<int32_t>(is);
    a.channels = read_pod<int32_t>(is);
    a.d_vision = read_pod<int32_t>(is);
    a.d_text = read_pod<int32_t>(is);
    a.d_joint = read_pod<int32_t>(is);
    a.layers = read_pod<int32_t>(is);
    a.heads = read_pod<int32_t>(is);
    a.mlp_ratio = read_pod<int32_t>(is);
    a.text_context = read_pod<int32_t>(is);
    a.max_seq_vision = read_pod<int32_t>(is);
    a.max_seq_text = read_pod<int32_t>(is);
    a.text_causal = read_pod<int32_t>(is) != 0;
    a.vocab_size = read_pod<int32_t>(is);
    const uint32_t want_crc = read_pod<uint32_t>(is);

    DualEncoderWeightsT<T> w = DualEncoderWeightsT<T>::random_init(a, 0);
    std::vector<float> payload;
    w.for_each_tensor([&](const char*, const TensorT<T>& t) {
        payload.resize(payload.size() + t.data.size());
    });
    read_bytes(is, payload.data(), payload.size() * sizeof(float));
    if (crc32(payload.data(), payload.size() * sizeof(float)) != want_crc)
        throw ChecksumMismatch("load_encoder: payload checksum mismatch");
    size_t off = 0;
    w.for_each_tensor([&](const char*, TensorT<T>& t) {
        for (auto& v : t.data) v = T(payload[off++]);
    });
    w.freeze();
    return w;
}

}  // namespace p2g
