#pragma once

// Per-task optimization of the read-only prompt pair. The encoder stays
// frozen; the contrastive cross-entropy over averaged prompt similarities is
// the only training signal, optimized with plain SGD under a one-epoch
// constant warm-up followed by cosine annealing.
//
// Step layout (all reductions in fixed index order, so thread count never
// changes the result):
//   A. per-sample tapes: augment, image forward with the task's visual
//      prompt, zero-shot ranking off the (prompt-invariant) CLS feature
//   B. union of conditioned texts needed by the batch
//   C. per-text tapes: prompt-only text forward over cached frozen
//      activations
//   D. per-sample loss + backward; gradients w.r.t. text outputs collected
//   E. per-text backward seeded with the collected output gradients

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "p2g/conditioning.hpp"
#include "p2g/encoder.hpp"
#include "p2g/prompt_bank.hpp"
#include "p2g/synthetic_data.hpp"

namespace p2g {

struct AugmentConfig {
    bool enabled = true;
    float flip_prob = 0.5f;
    int pad = 4;          // pad-and-crop jitter radius; 0 disables cropping
    float jitter = 0.1f;  // +-10% brightness/contrast per channel
};

struct TrainConfig {
    float lr = 0.01f;
    int epochs_per_task = 20;
    int warmup_epochs = 1;
    int L = 7;
    int c = 5;
    int batch = 32;
    enum class ScaleMode { Encoder, Fixed } scale_mode = ScaleMode::Encoder;
    float fixed_scale = 10.0f;
    bool condition = true;
    uint64_t seed = 1;
    int threads = 0;
    AugmentConfig aug;

    void validate() const {
        if (lr <= 0) throw ConfigError("train: lr must be positive");
        if (epochs_per_task < 0) throw ConfigError("train: negative epochs");
        if (warmup_epochs >= std::max(1, epochs_per_task) && epochs_per_task > 0)
            throw ConfigError("train: warmup_epochs must be below epochs_per_task");
        if (L < 1) throw ConfigError("train: L must be >= 1");
        if (c < 1) throw ConfigError("train: c must be >= 1");
        if (batch < 1) throw ConfigError("train: batch must be >= 1");
    }
};

// Constant warm-up then cosine annealing to zero over the remaining steps.
inline float lr_at(int global_step, int total_steps, const TrainConfig& cfg) {
    if (global_step < 0 || global_step >= total_steps) throw ConfigError("lr_at: step out of range");
    const int warm = int(int64_t(total_steps) * cfg.warmup_epochs / std::max(1, cfg.epochs_per_task));
    if (global_step < warm) return cfg.lr;
    const float t = float(global_step - warm) / float(std::max(1, total_steps - warm));
    return 0.5f * cfg.lr * (1.0f + std::cos(3.14159265358979323846f * t));
}

// ---------------------------------------------------------------------------
// Eq-level scalar helpers (eager)

template <class T>
T averaged_similarity(const TensorT<T>& v, const TensorT<T>& t) {
    if (!v.same_shape(t)) throw ShapeError("averaged_similarity: shape mismatch");
    T acc = 0;
    for (int i = 0; i < v.rows(); ++i) {
        TensorT<T> a({1, v.cols()});
        TensorT<T> b({1, v.cols()});
        std::copy(v.row_ptr(i), v.row_ptr(i) + v.cols(), a.data.begin());
        std::copy(t.row_ptr(i), t.row_ptr(i) + t.cols(), b.data.begin());
        acc += cosine_sim(a, b);
    }
    return acc / T(v.rows());
}

template <class T>
T stable_softplus(T x) {
    if (x > T(30)) return x;
    if (x < T(-30)) return std::exp(x);
    return std::log1p(std::exp(x));
}

template <class T>
struct PromptTripleT {
    TensorT<T> v;                 // [L x D]
    std::vector<TensorT<T>> r;    // c tensors [L x D]
    std::vector<TensorT<T>> f;
};

using PromptTriple = PromptTripleT<float>;

// Cross-entropy over the two class scores (real vs fake), each the c-averaged
// mean cosine similarity between visual and text prompt outputs.
template <class T>
T contrastive_cce_loss(const PromptTripleT<T>& triple, Label label, T logit_scale) {
    if (triple.r.empty() || triple.r.size() != triple.f.size())
        throw ShapeError("contrastive_cce_loss: class counts differ");
    if (logit_scale <= T(0)) throw ConfigError("contrastive_cce_loss: logit scale must be positive");
    T s_r = 0, s_f = 0;
    for (size_t ci = 0; ci < triple.r.size(); ++ci) {
        s_r += averaged_similarity(triple.v, triple.r[ci]);
        s_f += averaged_similarity(triple.v, triple.f[ci]);
    }
    s_r /= T(triple.r.size());
    s_f /= T(triple.f.size());
    if (!std::isfinite(double(s_r)) || !std::isfinite(double(s_f)))
        throw ValueError("contrastive_cce_loss: non-finite similarity");
    const T s_y = label == Label::Real ? s_r : s_f;
    const T s_o = label == Label::Real ? s_f : s_r;
    return stable_softplus(logit_scale * (s_o - s_y));
}

// ---------------------------------------------------------------------------
// Augmentation: flip, pad-and-crop, channel-wise brightness/contrast jitter.
// Draw order is fixed so a seed fully determines the view.

template <class T>
TensorT<T> hflip(const TensorT<T>& img) {
    const int H = img.shape[1], W = img.shape[2];
    TensorT<T> out = img;
    for (int c = 0; c < img.shape[0]; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                out.data[size_t((c * H + y) * W + x)] = img.data[size_t((c * H + y) * W + (W - 1 - x))];
    return out;
}

inline Tensor augment(const Tensor& image, const AugmentConfig& cfg, uint64_t seed) {
    if (!cfg.enabled) return image;
    Rng rng(derive_seed(seed, 0xa76));
    Tensor out = image;
    const int H = image.shape[1], W = image.shape[2];

    const bool flip = rng.next_float() < cfg.flip_prob;
    if (flip) out = hflip(out);

    if (cfg.pad > 0) {
        const int dx = rng.uniform_int(2 * cfg.pad + 1) - cfg.pad;
        const int dy = rng.uniform_int(2 * cfg.pad + 1) - cfg.pad;
        Tensor shifted = out;
        for (int c = 0; c < image.shape[0]; ++c)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    const int sy = std::clamp(y + dy, 0, H - 1);  // replicate edges
                    const int sx = std::clamp(x + dx, 0, W - 1);
                    shifted.data[size_t((c * H + y) * W + x)] = out.data[size_t((c * H + sy) * W + sx)];
                }
        out = std::move(shifted);
    }

    if (cfg.jitter > 0) {
        const int hw = H * W;
        for (int c = 0; c < image.shape[0]; ++c) {
            const float contrast = 1.0f + cfg.jitter * (2.0f * rng.next_float() - 1.0f);
            const float bright = cfg.jitter * (2.0f * rng.next_float() - 1.0f);
            for (int i = 0; i < hw; ++i) {
                float& v = out.data[size_t(c * hw + i)];
                v = std::clamp((v - 0.5f) * contrast + 0.5f + bright, 0.0f, 1.0f);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Conditioned-text table: token ids + frozen activations for every candidate
// text, computed once per task (the frozen half never changes during
// training).

template <class T>
struct ConditionedTextTable {
    // index = 2*class + (0 real | 1 fake); unconditioned mode has exactly 2
    std::vector<std::string> texts;
    std::vector<FrozenTextActivationsT<T>> frozen;

    static ConditionedTextTable build(const DualEncoderWeightsT<T>& w, const ClassSet& cs,
                                      const Vocabulary& vocab, bool condition) {
        ConditionedTextTable t;
        if (condition) {
            auto cp = build_conditioned_prompts(cs.names);
            for (size_t i = 0; i < cs.names.size(); ++i) {
                t.texts.push_back(cp.real_texts[i]);
                t.texts.push_back(cp.fake_texts[i]);
            }
        } else {
            auto up = build_unconditioned_prompts();
            t.texts.push_back(up.real_texts[0]);
            t.texts.push_back(up.fake_texts[0]);
        }
        for (const auto& text : t.texts)
            t.frozen.push_back(compute_frozen_text(w, tokenize(text, vocab), vocab));
        return t;
    }
};

// ---------------------------------------------------------------------------
// Single-tape loss for one sample: the verification route used by the
// gradient checks (and by tests comparing against the batched pipeline).

template <class T>
struct SingleSampleLoss {
    T loss;
    TensorT<T> grad_v, grad_t;
};

template <class T>
SingleSampleLoss<T> prompt_loss_single(const DualEncoderWeightsT<T>& w, const TensorT<T>& image,
                                       const std::vector<std::vector<int>>& real_ids,
                                       const std::vector<std::vector<int>>& fake_ids,
                                       const TensorT<T>& pv, const TensorT<T>& pt, Label label,
                                       T sigma, const Vocabulary& vocab, bool want_grads) {
    GraphT<T> g;
    auto nodes = bind_encoder(g, w, false);
    auto pv_leaf = g.leaf(pv);
    auto pt_leaf = g.leaf(pt);
    auto patches = g.constant(patchify(image, w.arch));
    typename GraphT<T>::Id pv_arr[] = {pv_leaf};
    auto vis = vision_forward(g, nodes, w.arch, patches, std::span<const typename GraphT<T>::Id>(pv_arr, 1));
    auto v_out = vis.prompt_out[0];

    auto text_out = [&](const std::vector<int>& ids) {
        typename GraphT<T>::Id pt_arr[] = {pt_leaf};
        auto fwd = text_forward(g, nodes, w.arch, ids, std::span<const typename GraphT<T>::Id>(pt_arr, 1), vocab);
        return fwd.prompt_out[0];
    };

    const int c = int(real_ids.size());
    typename GraphT<T>::Id s_r = -1, s_f = -1;
    for (int ci = 0; ci < c; ++ci) {
        auto sr_ci = g.mean_all(g.cosine_rows(v_out, text_out(real_ids[size_t(ci)])));
        auto sf_ci = g.mean_all(g.cosine_rows(v_out, text_out(fake_ids[size_t(ci)])));
        s_r = ci == 0 ? sr_ci : g.add(s_r, sr_ci);
        s_f = ci == 0 ? sf_ci : g.add(s_f, sf_ci);
    }
    s_r = g.scale(s_r, T(1) / T(c));
    s_f = g.scale(s_f, T(1) / T(c));
    auto margin = label == Label::Real ? g.sub(s_f, s_r) : g.sub(s_r, s_f);
    auto loss = g.softplus(g.scale(margin, sigma));

    SingleSampleLoss<T> out;
    out.loss = g.value(loss).data[0];
    if (want_grads) {
        g.backward(loss);
        out.grad_v = g.grad(pv_leaf);
        out.grad_t = g.grad(pt_leaf);
    }
    return out;
}

// ---------------------------------------------------------------------------

struct EpochLog {
    int task_id = 0;
    int epoch = 0;
    double mean_loss = 0.0;
    float lr = 0.0f;
};

struct TaskTrainResult {
    TaskPrompts prompts;
    std::vector<EpochLog> epochs;
};

inline TaskTrainResult train_task(const std::vector<SampleRecord>& train_data,
                                  const PromptBank& bank, const DualEncoderWeights& weights,
                                  const ClassSet& class_set, const Vocabulary& vocab,
                                  const TrainConfig& cfg) {
    cfg.validate();
    if (!weights.frozen) throw ValueError("train_task: encoder is not frozen");
    weights.verify_checksum();
    bank.verify_fingerprints();
    const int task_id = bank.size() + 1;

    bool has_real = false, has_fake = false;
    for (const auto& r : train_data) (r.label == Label::Real ? has_real : has_fake) = true;
    if (!has_real || !has_fake) throw ValueError("train_task: dataset must contain both labels");
    if (cfg.condition && cfg.c > class_set.size())
        throw ConfigError("train_task: c exceeds class set size");

    const auto bank_fps = bank.fingerprints();
    const float sigma = cfg.scale_mode == TrainConfig::ScaleMode::Encoder ? weights.logit_scale()
                                                                          : cfg.fixed_scale;

    TaskPrompts prompts = init_task_prompts(task_id, cfg.L, weights.arch.d_vision,
                                            weights.arch.d_text, cfg.seed);
    TaskTrainResult result;

    if (cfg.epochs_per_task > 0 && !train_data.empty()) {
        const auto table = ConditionedTextTable<float>::build(weights, class_set, vocab, cfg.condition);
        const auto class_feats = ClassTextFeatures::compute(weights, class_set, vocab);
        const int c_eff = cfg.condition ? cfg.c : 1;

        const int n = int(train_data.size());
        const int steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
        const int total_steps = steps_per_epoch * cfg.epochs_per_task;
        int global_step = 0;

        std::vector<int> order(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) order[size_t(i)] = i;

        struct SampleWork {
            Graph g;
            Graph::Id pv_leaf = -1;
            Graph::Id v_out = -1;
            std::vector<int> text_keys;  // 2c entries: real/fake interleaved per class
            std::vector<Graph::Id> text_inputs;
            float loss = 0.0f;
        };

        for (int epoch = 0; epoch < cfg.epochs_per_task; ++epoch) {
            Rng shuffle_rng(derive_seed(cfg.seed, 0xe90c4, uint64_t(task_id), uint64_t(epoch)));
            shuffle_rng.shuffle(order.begin(), order.end());
            double loss_sum = 0.0;
            float last_lr = 0.0f;

            for (int step = 0; step < steps_per_epoch; ++step) {
                const int begin = step * cfg.batch;
                const int b = std::min(cfg.batch, n - begin);
                std::vector<SampleWork> work(static_cast<size_t>(b));

                // phase A: image forwards + ranking
                parallel_for(b, cfg.threads, [&](int i) {
                    auto& wk = work[size_t(i)];
                    const auto& rec = train_data[size_t(order[size_t(begin + i)])];
                    const uint64_t aug_seed =
                        derive_seed(cfg.seed, uint64_t(task_id), uint64_t(epoch) * 1000003ull +
                                                                      uint64_t(order[size_t(begin + i)]));
                    Tensor view = augment(rec.image, cfg.aug, aug_seed);
                    auto nodes = bind_encoder(wk.g, weights, false);
                    wk.pv_leaf = wk.g.leaf(prompts.p_v);
                    auto patches = wk.g.constant(patchify(view, weights.arch));
                    Graph::Id pv_arr[] = {wk.pv_leaf};
                    auto fwd = vision_forward(wk.g, nodes, weights.arch, patches,
                                              std::span<const Graph::Id>(pv_arr, 1));
                    wk.v_out = fwd.prompt_out[0];
                    if (cfg.condition) {
                        Tensor cls = wk.g.value(fwd.joint);
                        cls.shape = {weights.arch.d_joint};
                        for (int ci : rank_classes(cls, class_feats, cfg.c)) {
                            wk.text_keys.push_back(2 * ci);
                            wk.text_keys.push_back(2 * ci + 1);
                        }
                    } else {
                        wk.text_keys = {0, 1};
                    }
                });

                // phase B: union of texts used this step
                std::set<int> used_set;
                for (const auto& wk : work) used_set.insert(wk.text_keys.begin(), wk.text_keys.end());
                const std::vector<int> used(used_set.begin(), used_set.end());
                std::vector<int> key_to_slot(table.texts.size(), -1);
                for (size_t s = 0; s < used.size(); ++s) key_to_slot[size_t(used[s])] = int(s);

                // phase C: per-text prompt forwards
                struct TextWork {
                    Graph g;
                    Graph::Id pt_leaf = -1;
                    Graph::Id out = -1;
                };
                std::vector<TextWork> text_work(used.size());
                parallel_for(int(used.size()), cfg.threads, [&](int s) {
                    auto& tw = text_work[size_t(s)];
                    auto nodes = bind_encoder(tw.g, weights, false);
                    tw.pt_leaf = tw.g.leaf(prompts.p_t);
                    Graph::Id pt_arr[] = {tw.pt_leaf};
                    auto outs = text_prompt_forward(tw.g, nodes, weights.arch,
                                                    table.frozen[size_t(used[size_t(s)])],
                                                    std::span<const Graph::Id>(pt_arr, 1));
                    tw.out = outs[0];
                });

                // phase D: per-sample loss + backward
                const float inv_b = 1.0f / float(b);
                parallel_for(b, cfg.threads, [&](int i) {
                    auto& wk = work[size_t(i)];
                    const auto& rec = train_data[size_t(order[size_t(begin + i)])];
                    Graph::Id s_r = -1, s_f = -1;
                    for (int ci = 0; ci < c_eff; ++ci) {
                        const int rk = wk.text_keys[size_t(2 * ci)];
                        const int fk = wk.text_keys[size_t(2 * ci + 1)];
                        auto r_in = wk.g.input(
                            text_work[size_t(key_to_slot[size_t(rk)])].g.value(
                                text_work[size_t(key_to_slot[size_t(rk)])].out));
                        auto f_in = wk.g.input(
                            text_work[size_t(key_to_slot[size_t(fk)])].g.value(
                                text_work[size_t(key_to_slot[size_t(fk)])].out));
                        wk.text_inputs.push_back(r_in);
                        wk.text_inputs.push_back(f_in);
                        auto sr_ci = wk.g.mean_all(wk.g.cosine_rows(wk.v_out, r_in));
                        auto sf_ci = wk.g.mean_all(wk.g.cosine_rows(wk.v_out, f_in));
                        s_r = ci == 0 ? sr_ci : wk.g.add(s_r, sr_ci);
                        s_f = ci == 0 ? sf_ci : wk.g.add(s_f, sf_ci);
                    }
                    s_r = wk.g.scale(s_r, 1.0f / float(c_eff));
                    s_f = wk.g.scale(s_f, 1.0f / float(c_eff));
                    auto margin = rec.label == Label::Real ? wk.g.sub(s_f, s_r) : wk.g.sub(s_r, s_f);
                    auto loss = wk.g.softplus(wk.g.scale(margin, sigma));
                    wk.loss = wk.g.value(loss).data[0];
                    auto scaled = wk.g.scale(loss, inv_b);
                    wk.g.backward(scaled);
                });

                // phase E: reduce and step
                Tensor grad_v(prompts.p_v.shape);
                std::vector<Tensor> text_grads(used.size());
                for (auto& tg : text_grads) tg = Tensor({cfg.L, weights.arch.d_joint});
                for (int i = 0; i < b; ++i) {
                    const auto& wk = work[size_t(i)];
                    const auto& gv = wk.g.grad(wk.pv_leaf);
                    for (size_t j = 0; j < grad_v.data.size(); ++j) grad_v.data[j] += gv.data[j];
                    for (int ci = 0; ci < c_eff; ++ci)
                        for (int pol = 0; pol < 2; ++pol) {
                            const int key = wk.text_keys[size_t(2 * ci + pol)];
                            const auto& gt = wk.g.grad(wk.text_inputs[size_t(2 * ci + pol)]);
                            auto& acc = text_grads[size_t(key_to_slot[size_t(key)])];
                            for (size_t j = 0; j < acc.data.size(); ++j) acc.data[j] += gt.data[j];
                        }
                    loss_sum += double(wk.loss);
                }
                parallel_for(int(used.size()), cfg.threads, [&](int s) {
                    auto& tw = text_work[size_t(s)];
                    std::pair<Graph::Id, Tensor> seed{tw.out, text_grads[size_t(s)]};
                    tw.g.backward_seeded(std::span<const std::pair<Graph::Id, Tensor>>(&seed, 1));
                });
                Tensor grad_t(prompts.p_t.shape);
                for (size_t s = 0; s < used.size(); ++s) {
                    const auto& gt = text_work[s].g.grad(text_work[s].pt_leaf);
                    for (size_t j = 0; j < grad_t.data.size(); ++j) grad_t.data[j] += gt.data[j];
                }

                const float lr = lr_at(global_step, total_steps, cfg);
                last_lr = lr;
                for (size_t j = 0; j < prompts.p_v.data.size(); ++j)
                    prompts.p_v.data[j] -= lr * grad_v.data[j];
                for (size_t j = 0; j < prompts.p_t.data.size(); ++j)
                    prompts.p_t.data[j] -= lr * grad_t.data[j];
                ++global_step;
            }

            result.epochs.push_back({task_id, epoch, loss_sum / double(n), last_lr});
        }
    }

    weights.verify_checksum();
    bank.verify_fingerprints();
    for (size_t i = 0; i < bank_fps.size(); ++i)
        if (bank.fingerprints()[i] != bank_fps[i])
            throw ChecksumMismatch("train_task: earlier task prompts changed");
    prompts.trained = true;
    prompts.p_v.require_finite("trained visual prompts");
    prompts.p_t.require_finite("trained text prompts");
    result.prompts = std::move(prompts);
    return result;
}

}  // namespace p2g
