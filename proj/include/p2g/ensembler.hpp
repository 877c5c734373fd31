#pragma once

// Inference: a single image forward carrying every task's visual prompts,
// per-task real/fake scores, posterior weighting, and the max-&-mean rule.
// Also the hard-selection baseline (pick one task by posterior argmax) and
// its multi-forward loop variant for efficiency comparisons.

#include <map>
#include <span>
#include <string>
#include <vector>

#include "p2g/conditioning.hpp"
#include "p2g/domain_classifier.hpp"
#include "p2g/encoder.hpp"
#include "p2g/prompt_bank.hpp"
#include "p2g/trainer.hpp"

namespace p2g {

struct ScorePair {
    std::vector<float> s_r, s_f;
    float s_r_star = 0, s_f_star = 0;  // maxima
    float s_r_bar = 0, s_f_bar = 0;    // means

    static ScorePair make(std::vector<float> sr, std::vector<float> sf) {
        if (sr.size() != sf.size() || sr.empty()) throw ShapeError("ScorePair: length mismatch");
        ScorePair p;
        p.s_r = std::move(sr);
        p.s_f = std::move(sf);
        p.s_r_star = p.s_r[0];
        p.s_f_star = p.s_f[0];
        double ar = 0, af = 0;
        for (size_t i = 0; i < p.s_r.size(); ++i) {
            if (!std::isfinite(p.s_r[i]) || !std::isfinite(p.s_f[i]))
                throw ValueError("ScorePair: non-finite score");
            p.s_r_star = std::max(p.s_r_star, p.s_r[i]);
            p.s_f_star = std::max(p.s_f_star, p.s_f[i]);
            ar += p.s_r[i];
            af += p.s_f[i];
        }
        p.s_r_bar = float(ar / double(p.s_r.size()));
        p.s_f_bar = float(af / double(p.s_f.size()));
        return p;
    }
};

enum class Branch { Max, Mean };
enum class EnsembleMode { MaxAndMean, MaxOnly, MeanOnly };

struct Decision {
    Label y_hat = Label::Real;
    Branch branch = Branch::Max;
    std::vector<float> s_r, s_f;  // raw per-task scores
    std::vector<float> w;         // domain posterior
    ScorePair weighted;           // scores after posterior weighting
    std::vector<int> top_classes;
};

// exact ties resolve to fake (conservative for a detector)
inline Label argmax_label(float score_real, float score_fake) {
    return score_real > score_fake ? Label::Real : Label::Fake;
}

inline Decision decide(const ScorePair& pair, EnsembleMode mode = EnsembleMode::MaxAndMean) {
    Decision d;
    d.weighted = pair;
    const float max_margin = std::abs(pair.s_r_star - pair.s_f_star);
    const float mean_margin = std::abs(pair.s_r_bar - pair.s_f_bar);
    bool use_max = false;
    switch (mode) {
        case EnsembleMode::MaxAndMean: use_max = max_margin >= mean_margin; break;
        case EnsembleMode::MaxOnly: use_max = true; break;
        case EnsembleMode::MeanOnly: use_max = false; break;
    }
    d.branch = use_max ? Branch::Max : Branch::Mean;
    d.y_hat = use_max ? argmax_label(pair.s_r_star, pair.s_f_star)
                      : argmax_label(pair.s_r_bar, pair.s_f_bar);
    return d;
}

inline std::vector<float> weight_scores(const std::vector<float>& s, const DomainPosterior& w) {
    if (s.size() != w.w.size()) throw ShapeError("weight_scores: length mismatch");
    std::vector<float> out(s.size());
    for (size_t i = 0; i < s.size(); ++i) out[i] = s[i] * w.w[i];
    return out;
}

// Hard selection on UNweighted scores of the posterior-argmax task.
inline Decision hard_select_baseline(const std::vector<float>& s_r, const std::vector<float>& s_f,
                                     const DomainPosterior& w) {
    if (s_r.size() != s_f.size() || s_r.size() != w.w.size())
        throw ShapeError("hard_select_baseline: length mismatch");
    const int k = w.argmax();
    Decision d;
    d.s_r = s_r;
    d.s_f = s_f;
    d.w = w.w;
    d.branch = Branch::Max;
    d.y_hat = argmax_label(s_r[size_t(k)], s_f[size_t(k)]);
    d.weighted = ScorePair::make({s_r[size_t(k)]}, {s_f[size_t(k)]});
    return d;
}

// s_r[k] = mean over classes and prompt rows of cos(v^k_i, r^{k,c}_i)
inline std::pair<std::vector<float>, std::vector<float>> task_scores(
    std::span<const Tensor> v_outputs, const std::vector<std::vector<Tensor>>& r_outputs,
    const std::vector<std::vector<Tensor>>& f_outputs) {
    const size_t T = v_outputs.size();
    if (r_outputs.size() != T || f_outputs.size() != T) throw ShapeError("task_scores: T mismatch");
    std::vector<float> s_r(T), s_f(T);
    for (size_t k = 0; k < T; ++k) {
        const size_t c = r_outputs[k].size();
        if (c == 0 || f_outputs[k].size() != c) throw ShapeError("task_scores: class count mismatch");
        float ar = 0, af = 0;
        for (size_t ci = 0; ci < c; ++ci) {
            ar += averaged_similarity(v_outputs[k], r_outputs[k][ci]);
            af += averaged_similarity(v_outputs[k], f_outputs[k][ci]);
        }
        s_r[k] = ar / float(c);
        s_f[k] = af / float(c);
    }
    return {std::move(s_r), std::move(s_f)};
}

// ---------------------------------------------------------------------------
// Classification context: owns the per-text prompt-output cache (text
// outputs depend only on (text, bank), not on the image) and the class text
// features. One image-encoder forward per classify() call, always.

struct ClassifyConfig {
    int c = 5;
    bool condition = true;
    EnsembleMode mode = EnsembleMode::MaxAndMean;
};

class ClassifyContext {
public:
    ClassifyContext(const DualEncoderWeights& weights, const PromptBank& bank,
                    const DomainCentroidBank& centroids, const ClassSet& class_set,
                    const Vocabulary& vocab, ClassifyConfig cfg)
        : w_(weights),
          bank_(bank),
          centroids_(centroids),
          class_set_(class_set),
          vocab_(vocab),
          cfg_(cfg),
          class_feats_(ClassTextFeatures::compute(weights, class_set, vocab)) {
        if (bank.empty()) throw ValueError("classify: prompt bank is empty");
        if (centroids.size() != bank.size())
            throw ValueError("classify: prompt bank and centroid bank disagree");
        if (cfg_.condition && (cfg_.c < 1 || cfg_.c > class_set.size()))
            throw ConfigError("classify: c out of range");
        pv_ = bank.visual_prompts();
        pt_ = bank.text_prompts();
    }

    // Text prompt outputs for one conditioned text, all tasks; cached.
    const std::vector<Tensor>& text_outputs(const std::string& text) {
        auto it = text_cache_.find(text);
        if (it != text_cache_.end()) return it->second;
        auto out = encode_text<float>(w_, text, pt_, vocab_);
        return text_cache_.emplace(text, std::move(out.prompt_outputs)).first->second;
    }

    Decision classify(const Tensor& image) {
        // the one image forward: CLS feature + every task's v^k
        auto img = encode_image<float>(w_, image, pv_);

        std::vector<int> top_classes;
        ConditionedPrompts texts;
        if (cfg_.condition) {
            top_classes = rank_classes(img.joint_feature, class_feats_, cfg_.c);
            std::vector<std::string> names;
            names.reserve(top_classes.size());
            for (int ci : top_classes) names.push_back(class_set_.names[size_t(ci)]);
            texts = build_conditioned_prompts(names);
        } else {
            texts = build_unconditioned_prompts();
        }
        const auto& real_texts = texts.real_texts;
        const auto& fake_texts = texts.fake_texts;

        const size_t T = size_t(bank_.size());
        std::vector<std::vector<Tensor>> r_outputs(T), f_outputs(T);
        for (const auto& text : real_texts) {
            const auto& outs = text_outputs(text);
            for (size_t k = 0; k < T; ++k) r_outputs[k].push_back(outs[k]);
        }
        for (const auto& text : fake_texts) {
            const auto& outs = text_outputs(text);
            for (size_t k = 0; k < T; ++k) f_outputs[k].push_back(outs[k]);
        }

        auto [s_r, s_f] = task_scores(std::span<const Tensor>(img.prompt_outputs), r_outputs, f_outputs);
        auto post = domain_posterior(img.joint_feature, centroids_);
        auto pair = ScorePair::make(weight_scores(s_r, post), weight_scores(s_f, post));
        Decision out = decide(pair, cfg_.mode);
        out.s_r = std::move(s_r);
        out.s_f = std::move(s_f);
        out.w = post.w;
        out.top_classes = std::move(top_classes);
        return out;
    }

    const ClassTextFeatures& class_features() const { return class_feats_; }
    const ClassSet& class_set() const { return class_set_; }

private:
    const DualEncoderWeights& w_;
    const PromptBank& bank_;
    const DomainCentroidBank& centroids_;
    ClassSet class_set_;
    const Vocabulary& vocab_;
    ClassifyConfig cfg_;
    ClassTextFeatures class_feats_;
    std::vector<Tensor> pv_, pt_;
    std::map<std::string, std::vector<Tensor>> text_cache_;
};

// One-shot form of the spec operation.
inline Decision classify_image(const Tensor& image, const DualEncoderWeights& weights,
                               const PromptBank& bank, const DomainCentroidBank& centroids,
                               const ClassSet& class_set, const Vocabulary& vocab,
                               const ClassifyConfig& cfg = {}) {
    ClassifyContext ctx(weights, bank, centroids, class_set, vocab, cfg);
    return ctx.classify(image);
}

// Reference path for the selection baselines: one image forward PER TASK
// (the expensive loop the ensembling design avoids). Returns per-task raw
// scores computed from independent single-task forwards.
inline std::pair<std::vector<float>, std::vector<float>> loop_task_scores(
    const Tensor& image, const DualEncoderWeights& weights, const PromptBank& bank,
    const std::vector<std::string>& real_texts, const std::vector<std::string>& fake_texts,
    const Vocabulary& vocab) {
    const int T = bank.size();
    std::vector<float> s_r(static_cast<size_t>(T)), s_f(static_cast<size_t>(T));
    for (int k = 1; k <= T; ++k) {
        const auto& task = bank.task(k);
        auto img = encode_image<float>(weights, image, std::span<const Tensor>(&task.p_v, 1));
        float ar = 0, af = 0;
        for (const auto& text : real_texts) {
            auto out = encode_text<float>(weights, text, std::span<const Tensor>(&task.p_t, 1), vocab);
            ar += averaged_similarity(img.prompt_outputs[0], out.prompt_outputs[0]);
        }
        for (const auto& text : fake_texts) {
            auto out = encode_text<float>(weights, text, std::span<const Tensor>(&task.p_t, 1), vocab);
            af += averaged_similarity(img.prompt_outputs[0], out.prompt_outputs[0]);
        }
        s_r[size_t(k - 1)] = ar / float(real_texts.size());
        s_f[size_t(k - 1)] = af / float(fake_texts.size());
    }
    return {std::move(s_r), std::move(s_f)};
}

}  // namespace p2g
