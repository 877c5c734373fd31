// scratch: calibrate pretraining fixture sizes
#include <chrono>
#include <cstdio>

#include "p2g/conditioning.hpp"
#include "p2g/pretrain.hpp"

using namespace p2g;

int main(int argc, char** argv) {
    int layers = argc > 1 ? std::atoi(argv[1]) : 2;
    int d = argc > 2 ? std::atoi(argv[2]) : 48;
    int per_class = argc > 3 ? std::atoi(argv[3]) : 120;
    int epochs = argc > 4 ? std::atoi(argv[4]) : 6;

    auto vocab = Vocabulary::shapes_preset(16);
    EncoderArch arch;
    arch.layers = layers;
    arch.d_vision = d;
    arch.d_text = d;
    arch.d_joint = d;
    arch.heads = 4;
    arch.vocab_size = vocab.size();

    auto pairs = make_prealignment_pairs(shape_classes(), per_class, 11);
    PretrainConfig cfg;
    cfg.epochs = epochs;
    cfg.seed = 3;
    cfg.threads = 2;

    auto t0 = std::chrono::steady_clock::now();
    auto res = pretrain_dual_encoder(pairs, vocab, arch, cfg);
    auto t1 = std::chrono::steady_clock::now();
    double secs = std::chrono::duration<double>(t1 - t0).count();
    std::printf("layers=%d d=%d per_class=%d epochs=%d steps=%d time=%.1fs\n", layers, d, per_class,
                epochs, res.steps, secs);
    std::printf("holdout loss: init=%.4f final=%.4f (ln6=%.4f)\n", res.holdout_loss_init,
                res.holdout_loss_final, std::log(6.0));
    std::printf("logit scale: %.3f\n", res.weights.logit_scale());

    // zero-shot accuracy on held-out renders
    auto cs = build_class_set("shapes");
    auto feats = ClassTextFeatures::compute(res.weights, cs, vocab);
    int correct = 0, total = 0;
    int circle_correct = 0, circle_total = 0;
    for (size_t ci = 0; ci < cs.names.size(); ++ci)
        for (int i = 0; i < 50; ++i) {
            auto img = render_content(cs.names[ci], derive_seed(999, ci, uint64_t(i)));
            auto out = encode_image<float>(res.weights, img, {});
            auto top = rank_classes(out.joint_feature, feats, 1);
            const bool ok = top[0] == int(ci);
            correct += ok;
            total++;
            if (cs.names[ci] == "circle") {
                circle_correct += ok;
                circle_total++;
            }
        }
    std::printf("zero-shot top-1: %.1f%% (circles: %.1f%%)\n", 100.0 * correct / total,
                100.0 * circle_correct / circle_total);
    return 0;
}
