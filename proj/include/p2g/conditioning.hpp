#pragma once

// Zero-shot class inference and construction of the real/fake conditioned
// text prompts. The detector text prompts name the object so the learned
// prompts can attend to artifacts instead of content.

#include <algorithm>
#include <fstream>
#include <string>
#include <vector>

#include "p2g/encoder.hpp"
#include "p2g/synthetic_data.hpp"

namespace p2g {

struct ClassSet {
    std::vector<std::string> names;
    std::string preset;  // shapes | faces6 | file

    int size() const { return int(names.size()); }
};

inline ClassSet build_class_set(const std::string& preset_or_path) {
    ClassSet cs;
    if (preset_or_path == "shapes") {
        cs.preset = "shapes";
        cs.names = shape_classes();
        return cs;
    }
    if (preset_or_path == "faces6") {
        cs.preset = "faces6";
        for (const char* age : {"young", "middle-aged", "old"})
            for (const char* sex : {"male", "female"}) cs.names.push_back(std::string(age) + " " + sex);
        return cs;
    }
    std::ifstream is(preset_or_path);
    if (!is) throw ConfigError("class set: unknown preset or unreadable file '" + preset_or_path + "'");
    cs.preset = "file";
    std::string line;
    while (std::getline(is, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
        if (!line.empty()) cs.names.push_back(line);
    }
    if (cs.names.empty()) throw EmptyClasses("class set file is empty: " + preset_or_path);
    return cs;
}

struct ConditionedPrompts {
    std::vector<std::string> classes;  // top-c, ranked
    std::vector<std::string> real_texts;
    std::vector<std::string> fake_texts;
};

inline ConditionedPrompts build_conditioned_prompts(const std::vector<std::string>& classes) {
    if (classes.empty()) throw EmptyClasses("build_conditioned_prompts: no classes");
    ConditionedPrompts out;
    out.classes = classes;
    for (const auto& c : classes) {
        out.real_texts.push_back("a real photo of a " + c);
        out.fake_texts.push_back("a fake photo of a " + c);
    }
    return out;
}

// The unconditioned template used by the conditioning-off ablation.
inline ConditionedPrompts build_unconditioned_prompts() {
    ConditionedPrompts out;
    out.classes = {};
    out.real_texts = {"a real photo"};
    out.fake_texts = {"a fake photo"};
    return out;
}

// Joint text features of "a photo of a {CLS}" per class, computed once per
// frozen encoder (prompt-free, so they never change).
struct ClassTextFeatures {
    std::vector<Tensor> feats;  // unit-norm, [d_joint]

    static ClassTextFeatures compute(const DualEncoderWeights& w, const ClassSet& cs,
                                     const Vocabulary& vocab) {
        ClassTextFeatures out;
        out.feats.reserve(cs.names.size());
        for (const auto& name : cs.names)
            out.feats.push_back(encode_text<float>(w, "a photo of a " + name, {}, vocab).joint_feature);
        return out;
    }
};

// Ranks class indices by cosine similarity against a (unit-norm or not) image
// feature; ties break toward the lower class index.
inline std::vector<int> rank_classes(const Tensor& image_feature, const ClassTextFeatures& feats,
                                     int c) {
    if (c < 1 || c > int(feats.feats.size())) throw ConfigError("rank_classes: c out of range");
    std::vector<std::pair<float, int>> scored;
    scored.reserve(feats.feats.size());
    for (size_t i = 0; i < feats.feats.size(); ++i)
        scored.emplace_back(cosine_sim(image_feature, feats.feats[i]), int(i));
    std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    std::vector<int> out;
    out.reserve(size_t(c));
    for (int i = 0; i < c; ++i) out.push_back(scored[size_t(i)].second);
    return out;
}

// One-shot zero-shot top-c prediction (encodes the image itself; pipelines
// reuse the joint feature of an existing forward instead).
inline std::vector<std::string> zero_shot_topc(const Tensor& image, const ClassSet& class_set, int c,
                                               const DualEncoderWeights& weights,
                                               const Vocabulary& vocab) {
    if (c < 1 || c > class_set.size()) throw ConfigError("zero_shot_topc: c out of range");
    auto feats = ClassTextFeatures::compute(weights, class_set, vocab);
    auto img = encode_image<float>(weights, image, {});
    auto idx = rank_classes(img.joint_feature, feats, c);
    std::vector<std::string> out;
    out.reserve(idx.size());
    for (int i : idx) out.push_back(class_set.names[size_t(i)]);
    return out;
}

}  // namespace p2g
