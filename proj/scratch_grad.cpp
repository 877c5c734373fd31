// scratch: probe gradient flow through the prompt loss
#include <cstdio>

#include "p2g/pretrain.hpp"
#include "p2g/trainer.hpp"

using namespace p2g;

int main(int argc, char** argv) {
    const int n_steps = argc > 1 ? std::atoi(argv[1]) : 120;
    const float sigma_arg = argc > 2 ? float(std::atof(argv[2])) : -1.0f;
    const float lr_arg = argc > 3 ? float(std::atof(argv[3])) : 0.01f;
    auto vocab = Vocabulary::shapes_preset(16);
    EncoderArch arch;
    arch.vocab_size = vocab.size();
    auto w = load_encoder<float>("/tmp/p2g_scratch_enc_4x64.bin");

    DomainSpec spec;
    spec.n_train = 16;
    spec.n_test = 0;
    spec.kind = ArtifactKind::SinusoidalGrid;
    auto data = generate_domain(spec);

    auto real_ids = std::vector<std::vector<int>>{tokenize("a real photo of a circle", vocab)};
    auto fake_ids = std::vector<std::vector<int>>{tokenize("a fake photo of a circle", vocab)};

    auto prompts = init_task_prompts(1, 7, arch.d_vision, arch.d_text, 7);
    Tensor pv = prompts.p_v, pt = prompts.p_t;
    const float sigma = sigma_arg > 0 ? sigma_arg : w.logit_scale();

    // can the loss overfit a pair of samples?
    for (int step = 0; step < n_steps; ++step) {
        float loss_sum = 0;
        Tensor gv(pv.shape), gt(pt.shape);
        for (int i = 0; i < 2; ++i) {
            auto out = prompt_loss_single<float>(w, data.train[size_t(i)].image, real_ids, fake_ids,
                                                 pv, pt, data.train[size_t(i)].label, sigma, vocab, true);
            loss_sum += out.loss;
            for (size_t j = 0; j < gv.data.size(); ++j) gv.data[j] += out.grad_v.data[j] * 0.5f;
            for (size_t j = 0; j < gt.data.size(); ++j) gt.data[j] += out.grad_t.data[j] * 0.5f;
        }
        if (step % (n_steps / 6) == 0 || step == n_steps - 1) {
            float nv = 0, nt = 0, npv = 0;
            for (float v : gv.data) nv += v * v;
            for (float v : gt.data) nt += v * v;
            for (float v : pv.data) npv += v * v;
            std::printf("step %3d loss=%.5f |gv|=%.6f |gt|=%.6f |pv|=%.4f\n", step, loss_sum / 2,
                        std::sqrt(nv), std::sqrt(nt), std::sqrt(npv));
        }
        for (size_t j = 0; j < pv.data.size(); ++j) pv.data[j] -= 0.01f * gv.data[j];
        for (size_t j = 0; j < pt.data.size(); ++j) pt.data[j] -= 0.01f * gt.data[j];
    }
    return 0;
}
