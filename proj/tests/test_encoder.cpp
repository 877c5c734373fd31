#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "p2g/encoder.hpp"
#include "p2g/prompt_bank.hpp"
#include "p2g/reference.hpp"

using namespace p2g;

namespace {

EncoderArch micro_arch(int vocab_size) {
    EncoderArch a;
    a.image_size = 16;
    a.patch = 8;
    a.d_vision = 32;
    a.d_text = 32;
    a.d_joint = 32;
    a.layers = 2;
    a.heads = 4;
    a.text_context = 12;
    a.max_seq_vision = 48;
    a.max_seq_text = 48;
    a.vocab_size = vocab_size;
    return a;
}

Tensor random_image(const EncoderArch& a, uint64_t seed) {
    Rng rng(seed);
    Tensor img({a.channels, a.image_size, a.image_size});
    for (auto& v : img.data) v = rng.next_float();
    return img;
}

std::vector<Tensor> random_prompts(int T, int L, int d, uint64_t seed) {
    std::vector<Tensor> out;
    for (int t = 0; t < T; ++t) {
        Rng rng(derive_seed(seed, uint64_t(t)));
        out.push_back(Tensor::randn({L, d}, rng, 0.05f));
    }
    return out;
}

}  // namespace

TEST_CASE("tokenize") {
    auto vocab = Vocabulary::shapes_preset(10);

    SECTION("empty text gives [SOT, EOT, PAD...]") {
        auto ids = tokenize("", vocab);
        REQUIRE(int(ids.size()) == 10);
        REQUIRE(ids[0] == vocab.sot_id);
        REQUIRE(ids[1] == vocab.eot_id);
        for (size_t i = 2; i < ids.size(); ++i) REQUIRE(ids[i] == vocab.pad_id);
    }

    SECTION("six-word caption framed by SOT/EOT") {
        auto ids = tokenize("a real photo of a circle", vocab);
        REQUIRE(ids[0] == vocab.sot_id);
        REQUIRE(ids[7] == vocab.eot_id);
        REQUIRE(ids[1] == vocab.word_id("a"));
        REQUIRE(ids[2] == vocab.word_id("real"));
        REQUIRE(ids[6] == vocab.word_id("circle"));
        REQUIRE(eot_position(ids, vocab) == 7);
    }

    SECTION("too many words raises TokenLengthExceeded") {
        std::string text = "a";
        for (int i = 0; i < 9; ++i) text += " a";  // 10 words, context 10 -> 12 tokens
        REQUIRE_THROWS_AS(tokenize(text, vocab), TokenLengthExceeded);
        // exactly at capacity: context-2 words is fine
        std::string ok = "a";
        for (int i = 0; i < 7; ++i) ok += " a";
        REQUIRE_NOTHROW(tokenize(ok, vocab));
    }

    SECTION("out-of-vocabulary word") {
        REQUIRE_THROWS_AS(tokenize("a photo of a dog", vocab), OutOfVocabulary);
    }
}

TEST_CASE("encode_image basics") {
    auto vocab = Vocabulary::shapes_preset(12);
    auto arch = micro_arch(vocab.size());
    auto w = DualEncoderWeights::random_init(arch, 42);
    w.freeze();
    auto img = random_image(arch, 7);

    SECTION("no prompts: CLS feature only") {
        auto out = encode_image<float>(w, img, {});
        REQUIRE(out.prompt_outputs.empty());
        REQUIRE(out.joint_feature.numel() == arch.d_joint);
        REQUIRE(std::abs(l2_norm(out.joint_feature) - 1.0f) < 1e-5f);
    }

    SECTION("joint feature is invariant to prompts") {
        auto base = encode_image<float>(w, img, {});
        for (int T = 1; T <= 3; ++T) {
            auto prompts = random_prompts(T, 5, arch.d_vision, 99 + uint64_t(T));
            auto out = encode_image<float>(w, img, prompts);
            REQUIRE(int(out.prompt_outputs.size()) == T);
            REQUIRE(max_abs_diff(out.joint_feature, base.joint_feature) <= 1e-6f);
        }
    }

    SECTION("task outputs are independent of other tasks in the forward") {
        auto prompts = random_prompts(2, 5, arch.d_vision, 123);
        auto both = encode_image<float>(w, img, prompts);
        auto alone = encode_image<float>(w, img, std::span<const Tensor>(&prompts[0], 1));
        REQUIRE(max_abs_diff(both.prompt_outputs[0], alone.prompt_outputs[0]) <= 1e-6f);
    }

    SECTION("capacity overflow raises TokenLengthExceeded") {
        auto prompts = random_prompts(7, 5, arch.d_vision, 5);  // 35 + 5 originals > 48... 7*5+5=40 ok
        // originals = 4 patches + cls = 5; capacity 48 -> prompts can be up to 43 rows
        auto too_many = random_prompts(9, 5, arch.d_vision, 5);  // 45 + 5 > 48
        REQUIRE_THROWS_AS(encode_image<float>(w, img, too_many), TokenLengthExceeded);
    }
}

TEST_CASE("encode_text basics") {
    auto vocab = Vocabulary::shapes_preset(12);
    auto arch = micro_arch(vocab.size());
    auto w = DualEncoderWeights::random_init(arch, 43);
    w.freeze();

    SECTION("no prompts: unit-norm EOT feature") {
        auto out = encode_text<float>(w, "a photo of a circle", {}, vocab);
        REQUIRE(out.prompt_outputs.empty());
        REQUIRE(std::abs(l2_norm(out.joint_feature) - 1.0f) < 1e-5f);
    }

    SECTION("EOT feature unchanged by prompts from 3 tasks") {
        auto base = encode_text<float>(w, "a photo of a circle", {}, vocab);
        auto prompts = random_prompts(3, 4, arch.d_text, 11);
        auto out = encode_text<float>(w, "a photo of a circle", prompts, vocab);
        REQUIRE(out.prompt_outputs.size() == 3);
        REQUIRE(max_abs_diff(out.joint_feature, base.joint_feature) <= 1e-6f);
    }

    SECTION("real/fake outputs differ when only the polarity word differs") {
        auto prompts = random_prompts(1, 4, arch.d_text, 12);
        auto r = encode_text<float>(w, "a real photo of a circle", prompts, vocab);
        auto f = encode_text<float>(w, "a fake photo of a circle", prompts, vocab);
        REQUIRE(max_abs_diff(r.prompt_outputs[0], f.prompt_outputs[0]) > 0.0f);
    }
}

TEST_CASE("production forward matches the masked-attention reference") {
    auto vocab = Vocabulary::shapes_preset(12);
    auto arch = micro_arch(vocab.size());

    // float32: bounded by accumulation-order noise only
    for (uint64_t seed = 0; seed < 4; ++seed) {
        auto w = DualEncoderWeights::random_init(arch, 1000 + seed);
        auto img = random_image(arch, 2000 + seed);
        const int T = 1 + int(seed % 3);
        auto pv = random_prompts(T, 3, arch.d_vision, 3000 + seed);
        auto pt = random_prompts(T, 3, arch.d_text, 4000 + seed);

        auto prod_i = encode_image<float>(w, img, pv);
        auto ref_i = reference_encode_image<float>(w, img, pv);
        REQUIRE(max_abs_diff(prod_i.joint_feature, ref_i.joint_feature) <= 2e-5f);
        for (int t = 0; t < T; ++t)
            REQUIRE(max_abs_diff(prod_i.prompt_outputs[size_t(t)], ref_i.prompt_outputs[size_t(t)]) <= 2e-5f);

        auto prod_t = encode_text<float>(w, "a fake photo of a square", pt, vocab);
        auto ref_t = reference_encode_text<float>(w, "a fake photo of a square", pt, vocab);
        REQUIRE(max_abs_diff(prod_t.joint_feature, ref_t.joint_feature) <= 2e-5f);
        for (int t = 0; t < T; ++t)
            REQUIRE(max_abs_diff(prod_t.prompt_outputs[size_t(t)], ref_t.prompt_outputs[size_t(t)]) <= 2e-5f);
    }

    // float64: the two compositions agree to rounding error
    {
        auto w = DualEncoderWeightsT<double>::random_init(arch, 1009);
        Rng rng(2009);
        Tensor64 img({arch.channels, arch.image_size, arch.image_size});
        for (auto& v : img.data) v = rng.next_double();
        std::vector<Tensor64> pv, pt;
        for (int t = 0; t < 3; ++t) {
            Rng pr(derive_seed(3009, uint64_t(t)));
            pv.push_back(Tensor64::randn({3, arch.d_vision}, pr, 0.05));
            pt.push_back(Tensor64::randn({3, arch.d_text}, pr, 0.05));
        }
        auto prod_i = encode_image<double>(w, img, pv);
        auto ref_i = reference_encode_image<double>(w, img, pv);
        REQUIRE(max_abs_diff(prod_i.joint_feature, ref_i.joint_feature) <= 1e-10);
        for (int t = 0; t < 3; ++t)
            REQUIRE(max_abs_diff(prod_i.prompt_outputs[size_t(t)], ref_i.prompt_outputs[size_t(t)]) <= 1e-10);
        auto prod_t = encode_text<double>(w, "a fake photo of a square", pt, vocab);
        auto ref_t = reference_encode_text<double>(w, "a fake photo of a square", pt, vocab);
        for (int t = 0; t < 3; ++t)
            REQUIRE(max_abs_diff(prod_t.prompt_outputs[size_t(t)], ref_t.prompt_outputs[size_t(t)]) <= 1e-10);
    }
}

TEST_CASE("causal text flag keeps the read-only property") {
    auto vocab = Vocabulary::shapes_preset(12);
    auto arch = micro_arch(vocab.size());
    arch.text_causal = true;
    auto w = DualEncoderWeights::random_init(arch, 77);
    auto pt = random_prompts(2, 4, arch.d_text, 78);
    auto base = encode_text<float>(w, "a photo of a ring", {}, vocab);
    auto out = encode_text<float>(w, "a photo of a ring", pt, vocab);
    REQUIRE(max_abs_diff(out.joint_feature, base.joint_feature) <= 1e-6f);
    auto ref = reference_encode_text<float>(w, "a photo of a ring", pt, vocab);
    REQUIRE(max_abs_diff(out.joint_feature, ref.joint_feature) <= 1e-6f);
    REQUIRE(max_abs_diff(out.prompt_outputs[1], ref.prompt_outputs[1]) <= 2e-5f);
}

TEST_CASE("permutation consistency of prompt groups") {
    auto vocab = Vocabulary::shapes_preset(12);
    auto arch = micro_arch(vocab.size());
    auto w = DualEncoderWeights::random_init(arch, 55);
    auto img = random_image(arch, 56);
    auto prompts = random_prompts(3, 4, arch.d_vision, 57);

    auto fwd = encode_image<float>(w, img, prompts);
    std::vector<Tensor> permuted = {prompts[2], prompts[0], prompts[1]};
    auto fwd_p = encode_image<float>(w, img, permuted);
    REQUIRE(max_abs_diff(fwd_p.prompt_outputs[0], fwd.prompt_outputs[2]) <= 1e-6f);
    REQUIRE(max_abs_diff(fwd_p.prompt_outputs[1], fwd.prompt_outputs[0]) <= 1e-6f);
    REQUIRE(max_abs_diff(fwd_p.prompt_outputs[2], fwd.prompt_outputs[1]) <= 1e-6f);
    for (const auto& p : fwd_p.prompt_outputs) REQUIRE(p.all_finite());
}

TEST_CASE("frozen text activations match the full forward") {
    auto vocab = Vocabulary::shapes_preset(12);
    auto arch = micro_arch(vocab.size());
    auto w = DualEncoderWeights::random_init(arch, 60);
    auto pt = random_prompts(2, 4, arch.d_text, 61);
    const std::string text = "a real photo of a triangle";

    auto full = encode_text<float>(w, text, pt, vocab);

    auto ids = tokenize(text, vocab);
    auto frozen = compute_frozen_text(w, ids, vocab);
    REQUIRE(max_abs_diff(frozen.joint, full.joint_feature) <= 1e-6f);

    Graph g;
    auto nodes = bind_encoder(g, w, false);
    std::vector<Graph::Id> pg;
    for (const auto& p : pt) pg.push_back(g.constant(p));
    auto outs = text_prompt_forward(g, nodes, arch, frozen, std::span<const Graph::Id>(pg));
    for (size_t t = 0; t < outs.size(); ++t)
        REQUIRE(max_abs_diff(g.value(outs[t]), full.prompt_outputs[t]) <= 1e-6f);
}

TEST_CASE("encoder checkpoint round trip") {
    auto vocab = Vocabulary::shapes_preset(12);
    auto arch = micro_arch(vocab.size());
    auto w = DualEncoderWeights::random_init(arch, 90);
    w.freeze();

    auto path = std::filesystem::temp_directory_path() / "p2g_enc_test.bin";
    save_encoder(w, path.string());
    auto w2 = load_encoder<float>(path.string());
    REQUIRE(w2.arch == w.arch);
    REQUIRE(w2.compute_checksum() == w.compute_checksum());

    // flip one payload byte -> checksum mismatch on load
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(-8, std::ios::end);
        char b;
        f.seekg(-8, std::ios::end);
        f.read(&b, 1);
        f.seekp(-8, std::ios::end);
        b = char(b ^ 0x40);
        f.write(&b, 1);
    }
    REQUIRE_THROWS_AS(load_encoder<float>(path.string()), ChecksumMismatch);
    std::filesystem::remove(path);
}

TEST_CASE("random init is deterministic in the seed") {
    auto vocab = Vocabulary::shapes_preset(12);
    auto arch = micro_arch(vocab.size());
    auto a = DualEncoderWeights::random_init(arch, 1234);
    auto b = DualEncoderWeights::random_init(arch, 1234);
    REQUIRE(a.compute_checksum() == b.compute_checksum());
    auto c = DualEncoderWeights::random_init(arch, 1235);
    REQUIRE(a.compute_checksum() != c.compute_checksum());
}

TEST_CASE("frozen weights verify their checksum") {
    auto vocab = Vocabulary::shapes_preset(12);
    auto arch = micro_arch(vocab.size());
    auto w = DualEncoderWeights::random_init(arch, 4);
    w.freeze();
    REQUIRE_NOTHROW(w.verify_checksum());
    w.patch_w.data[0] += 1.0f;
    REQUIRE_THROWS_AS(w.verify_checksum(), ChecksumMismatch);
}
