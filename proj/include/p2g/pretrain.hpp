#pragma once

// Contrastive pre-alignment of the dual encoder on (image, caption) pairs.
// Stands in for an externally pre-trained backbone: after this the weights
// are frozen for good and only prompts are ever trained.
//
// Batches are built one-image-per-caption-class so the in-batch contrastive
// targets have no false negatives. Per-sample forward/backward runs on
// separate tapes stitched through the joint-feature boundary, which keeps
// multi-threaded runs bit-identical to serial ones (fixed reduction order).

#include <algorithm>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "p2g/encoder.hpp"
#include "p2g/synthetic_data.hpp"

namespace p2g {

struct PretrainConfig {
    int epochs = 12;
    int batch = 6;  // must not exceed the number of caption classes
    float lr = 2e-3f;
    float warmup_frac = 0.05f;  // linear ramp over the first fraction of steps
    float beta1 = 0.9f;
    float beta2 = 0.98f;
    float adam_eps = 1e-8f;
    uint64_t seed = 1;
    float holdout_frac = 0.1f;
    int threads = 0;
};

struct PretrainResult {
    DualEncoderWeights weights;
    float holdout_loss_init = 0.0f;
    float holdout_loss_final = 0.0f;
    int steps = 0;
};

namespace detail {

struct AdamState {
    std::vector<Tensor> m, v;
    long t = 0;
};

// joint features for one batch, one tape per sample (phase 1/3 of the
// checkpointed step)
struct SampleTape {
    Graph g;
    EncoderNodes<float> nodes;
    Graph::Id joint = -1;
};

inline void forward_sample(SampleTape& tape, const DualEncoderWeights& w, const Tensor& image) {
    tape.nodes = bind_encoder(tape.g, w, true);
    auto patches = tape.g.constant(patchify(image, w.arch));
    auto fwd = vision_forward(tape.g, tape.nodes, w.arch, patches, {});
    tape.joint = fwd.joint;
}

inline void forward_caption(SampleTape& tape, const DualEncoderWeights& w,
                            const std::vector<int>& ids, const Vocabulary& vocab) {
    tape.nodes = bind_encoder(tape.g, w, true);
    auto fwd = text_forward(tape.g, tape.nodes, w.arch, ids, {}, vocab);
    tape.joint = fwd.joint;
}

}  // namespace detail

// Loss of one batch without touching the weights (used for holdout probes).
inline float alignment_loss(const DualEncoderWeights& w,
                            const std::vector<std::pair<Tensor, std::string>>& batch,
                            const Vocabulary& vocab) {
    const int b = int(batch.size());
    Graph g;
    auto nodes = bind_encoder(g, w, false);
    std::vector<Graph::Id> img_feats, txt_feats;
    for (const auto& [img, cap] : batch) {
        auto patches = g.constant(patchify(img, w.arch));
        img_feats.push_back(vision_forward(g, nodes, w.arch, patches, {}).joint);
        txt_feats.push_back(text_forward(g, nodes, w.arch, tokenize(cap, vocab), {}, vocab).joint);
    }
    auto fi = g.concat_rows(std::span<const Graph::Id>(img_feats));
    auto ft = g.concat_rows(std::span<const Graph::Id>(txt_feats));
    auto logits = g.mul_scalar_node(g.matmul_nt(fi, ft), g.exp(nodes.log_logit_scale));
    auto loss = g.contrastive_ce(logits);
    (void)b;
    return g.value(loss).data[0];
}

inline PretrainResult pretrain_dual_encoder(const std::vector<std::pair<Tensor, std::string>>& pairs,
                                            const Vocabulary& vocab, const EncoderArch& arch,
                                            const PretrainConfig& cfg) {
    // group by caption
    std::map<std::string, std::vector<int>> by_caption;
    for (size_t i = 0; i < pairs.size(); ++i) by_caption[pairs[i].second].push_back(int(i));
    if (by_caption.size() < 2) throw ValueError("pretrain: degenerate dataset (single caption class)");
    if (cfg.batch < 2) throw ConfigError("pretrain: batch size must be >= 2");
    if (cfg.batch > int(by_caption.size()))
        throw ConfigError("pretrain: batch exceeds caption class count");

    PretrainResult res;
    res.weights = DualEncoderWeights::random_init(arch, cfg.seed);
    auto& w = res.weights;

    // holdout: tail fraction of each class
    std::vector<std::vector<int>> groups;
    std::vector<int> holdout;
    for (auto& [cap, idx] : by_caption) {
        const int keep = std::max(1, int(float(idx.size()) * (1.0f - cfg.holdout_frac)));
        groups.emplace_back(idx.begin(), idx.begin() + keep);
        for (size_t i = size_t(keep); i < idx.size(); ++i) holdout.push_back(idx[i]);
    }
    std::vector<std::pair<Tensor, std::string>> holdout_batch;
    for (size_t gi = 0; gi < groups.size() && int(holdout_batch.size()) < cfg.batch; ++gi) {
        // first holdout member of each class, falling back to the train split
        int pick = -1;
        for (int h : holdout)
            if (pairs[size_t(h)].second == pairs[size_t(groups[gi][0])].second) {
                pick = h;
                break;
            }
        holdout_batch.push_back(pairs[size_t(pick >= 0 ? pick : groups[gi][0])]);
    }
    res.holdout_loss_init = alignment_loss(w, holdout_batch, vocab);
    res.holdout_loss_final = res.holdout_loss_init;

    if (cfg.epochs <= 0) {
        w.freeze();
        return res;
    }

    // tokenize captions once
    std::vector<std::vector<int>> caption_ids(pairs.size());
    for (size_t i = 0; i < pairs.size(); ++i) caption_ids[i] = tokenize(pairs[i].second, vocab);

    // Adam over every tensor
    detail::AdamState adam;
    w.for_each_tensor([&](const char*, Tensor& t) {
        adam.m.push_back(Tensor(t.shape));
        adam.v.push_back(Tensor(t.shape));
    });

    Rng shuffle_rng(derive_seed(cfg.seed, 0x5u));
    const int steps_per_epoch = int(groups[0].size());

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (auto& grp : groups) shuffle_rng.shuffle(grp.begin(), grp.end());
        for (int step = 0; step < steps_per_epoch; ++step) {
            // batch: one sample from each of cfg.batch classes, rotating which
            // classes participate when there are more classes than the batch
            std::vector<int> batch_idx;
            for (int bi = 0; bi < cfg.batch; ++bi) {
                const auto& grp = groups[size_t((step + bi) % groups.size())];
                batch_idx.push_back(grp[size_t(step % grp.size())]);
            }
            const int b = int(batch_idx.size());

            // phase 1: per-sample tapes (parallel)
            std::vector<detail::SampleTape> img_tapes(static_cast<size_t>(b)), txt_tapes(static_cast<size_t>(b));
            parallel_for(2 * b, cfg.threads, [&](int slot) {
                const int i = slot / 2;
                if (slot % 2 == 0)
                    detail::forward_sample(img_tapes[size_t(i)], w, pairs[size_t(batch_idx[size_t(i)])].first);
                else
                    detail::forward_caption(txt_tapes[size_t(i)], w, caption_ids[size_t(batch_idx[size_t(i)])],
                                            vocab);
            });

            // phase 2: loss tape over the feature matrix
            Graph loss_g;
            std::vector<Graph::Id> fi_in, ft_in;
            for (int i = 0; i < b; ++i) {
                fi_in.push_back(loss_g.input(img_tapes[size_t(i)].g.value(img_tapes[size_t(i)].joint)));
                ft_in.push_back(loss_g.input(txt_tapes[size_t(i)].g.value(txt_tapes[size_t(i)].joint)));
            }
            auto scale_leaf = loss_g.leaf(w.log_logit_scale);
            auto fi = loss_g.concat_rows(std::span<const Graph::Id>(fi_in));
            auto ft = loss_g.concat_rows(std::span<const Graph::Id>(ft_in));
            auto logits = loss_g.mul_scalar_node(loss_g.matmul_nt(fi, ft), loss_g.exp(scale_leaf));
            auto loss = loss_g.contrastive_ce(logits);
            loss_g.backward(loss);

            // phase 3: seed per-sample tapes with feature gradients (parallel)
            parallel_for(2 * b, cfg.threads, [&](int slot) {
                const int i = slot / 2;
                auto& tape = (slot % 2 == 0) ? img_tapes[size_t(i)] : txt_tapes[size_t(i)];
                const auto seed_grad =
                    loss_g.grad((slot % 2 == 0) ? fi_in[size_t(i)] : ft_in[size_t(i)]);
                std::pair<Graph::Id, Tensor> s{tape.joint, seed_grad};
                tape.g.backward_seeded(std::span<const std::pair<Graph::Id, Tensor>>(&s, 1));
            });

            // reduce gradients in fixed order and take an Adam step
            adam.t++;
            const long total = long(steps_per_epoch) * cfg.epochs;
            const long warm = std::max(1l, long(cfg.warmup_frac * float(total)));
            const float lr_now = adam.t < warm ? cfg.lr * float(adam.t) / float(warm) : cfg.lr;
            const float bc1 = 1.0f - std::pow(cfg.beta1, float(adam.t));
            const float bc2 = 1.0f - std::pow(cfg.beta2, float(adam.t));
            std::vector<std::vector<Graph::Id>> ids_img(static_cast<size_t>(b)), ids_txt(static_cast<size_t>(b));
            for (int i = 0; i < b; ++i) {
                ids_img[size_t(i)] = img_tapes[size_t(i)].nodes.all();
                ids_txt[size_t(i)] = txt_tapes[size_t(i)].nodes.all();
            }
            size_t ti = 0;
            w.for_each_tensor([&](const char* name, Tensor& t) {
                Tensor g(t.shape);
                for (int i = 0; i < b; ++i) {
                    const auto& gi = img_tapes[size_t(i)].g.grad(ids_img[size_t(i)][ti]);
                    const auto& gt = txt_tapes[size_t(i)].g.grad(ids_txt[size_t(i)][ti]);
                    for (size_t j = 0; j < g.data.size(); ++j) g.data[j] += gi.data[j] + gt.data[j];
                }
                const bool is_scale = std::string(name) == "log_logit_scale";
                if (is_scale) g.data[0] += loss_g.grad(scale_leaf).data[0];
                auto& m = adam.m[ti];
                auto& v = adam.v[ti];
                for (size_t j = 0; j < g.data.size(); ++j) {
                    m.data[j] = cfg.beta1 * m.data[j] + (1.0f - cfg.beta1) * g.data[j];
                    v.data[j] = cfg.beta2 * v.data[j] + (1.0f - cfg.beta2) * g.data[j] * g.data[j];
                    const float mh = m.data[j] / bc1;
                    const float vh = v.data[j] / bc2;
                    t.data[j] -= lr_now * mh / (std::sqrt(vh) + cfg.adam_eps);
                }
                ++ti;
            });
            // keep the temperature in a sane range
            w.log_logit_scale.data[0] = std::clamp(w.log_logit_scale.data[0], 0.0f, std::log(100.0f));
            res.steps++;
        }
    }

    res.holdout_loss_final = alignment_loss(w, holdout_batch, vocab);
    w.freeze();
    return res;
}

}  // namespace p2g
