// scratch: calibrate prompt training cost and single-task accuracy
#include <chrono>
#include <cstdio>
#include <filesystem>

#include "p2g/ensembler.hpp"
#include "p2g/pretrain.hpp"
#include "p2g/trainer.hpp"

using namespace p2g;

int main(int argc, char** argv) {
    const int n_train = argc > 1 ? std::atoi(argv[1]) : 1000;
    const int epochs = argc > 2 ? std::atoi(argv[2]) : 20;
    const int batch = argc > 3 ? std::atoi(argv[3]) : 32;
    const int c = argc > 4 ? std::atoi(argv[4]) : 5;
    const float sig = argc > 5 ? float(std::atof(argv[5])) : -1.0f;

    auto vocab = Vocabulary::shapes_preset(16);
    EncoderArch arch;
    arch.vocab_size = vocab.size();

    const std::string cache = "/tmp/p2g_scratch_enc_4x64.bin";
    DualEncoderWeights w;
    if (std::filesystem::exists(cache)) {
        w = load_encoder<float>(cache);
        std::printf("loaded cached encoder\n");
    } else {
        auto pairs = make_prealignment_pairs(shape_classes(), 300, 11);
        PretrainConfig pcfg;
        pcfg.epochs = 8;
        pcfg.seed = 3;
        pcfg.threads = 2;
        auto t0 = std::chrono::steady_clock::now();
        auto res = pretrain_dual_encoder(pairs, vocab, arch, pcfg);
        auto t1 = std::chrono::steady_clock::now();
        std::printf("pretrain: %.1fs\n", std::chrono::duration<double>(t1 - t0).count());
        w = std::move(res.weights);
        save_encoder(w, cache);
    }

    DomainSpec spec;
    spec.domain_id = 1;
    spec.kind = ArtifactKind::SinusoidalGrid;
    spec.n_train = n_train;
    spec.n_test = 400;
    spec.seed = 101;
    auto data = generate_domain(spec);

    auto cs = build_class_set("shapes");
    TrainConfig cfg;
    cfg.epochs_per_task = epochs;
    cfg.batch = batch;
    cfg.c = c;
    cfg.seed = 7;
    if (sig > 0) { cfg.scale_mode = TrainConfig::ScaleMode::Fixed; cfg.fixed_scale = sig; }
    cfg.threads = 2;

    PromptBank bank;
    auto t0 = std::chrono::steady_clock::now();
    auto result = train_task(data.train, bank, w, cs, vocab, cfg);
    auto t1 = std::chrono::steady_clock::now();
    std::printf("train_task: %.1fs for %d epochs x %d samples (sigma=%.2f)\n",
                std::chrono::duration<double>(t1 - t0).count(), epochs, n_train, w.logit_scale());
    for (const auto& e : result.epochs)
        if (e.epoch % 4 == 0 || e.epoch == epochs - 1)
            std::printf("  epoch %2d: loss=%.4f lr=%.5f\n", e.epoch, e.mean_loss, e.lr);

    bank.append_task(result.prompts);

    // centroids on train features
    Tensor feats({int(data.train.size()), arch.d_joint});
    for (size_t i = 0; i < data.train.size(); ++i) {
        auto out = encode_image<float>(w, data.train[i].image, {});
        std::copy(out.joint_feature.data.begin(), out.joint_feature.data.end(), feats.row_ptr(int(i)));
    }
    DomainCentroidBank cents(5);
    cents.append(fit_centroids(feats, 5, 1));

    ClassifyConfig ccfg;
    ccfg.c = c;
    ClassifyContext ctx(w, bank, cents, cs, vocab, ccfg);
    int correct = 0;
    auto t2 = std::chrono::steady_clock::now();
    for (const auto& rec : data.test) {
        auto d = ctx.classify(rec.image);
        correct += d.y_hat == rec.label ? 1 : 0;
    }
    auto t3 = std::chrono::steady_clock::now();
    std::printf("eval: %.1fs, accuracy %.2f%% (%d/%zu)\n",
                std::chrono::duration<double>(t3 - t2).count(), 100.0 * correct / double(data.test.size()),
                correct, data.test.size());
    return 0;
}
