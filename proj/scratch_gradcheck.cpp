// scratch: Eq-level gradient check in double precision
#include <cstdio>

#include "p2g/trainer.hpp"

using namespace p2g;

int main() {
    auto vocab = Vocabulary::shapes_preset(12);
    for (uint64_t seed = 0; seed < 5; ++seed) {
        EncoderArch arch;
        arch.image_size = 16;
        arch.patch = 8;
        arch.d_vision = 16;
        arch.d_text = 16;
        arch.d_joint = 16;
        arch.layers = 2;
        arch.heads = 2;
        arch.text_context = 12;
        arch.max_seq_vision = 32;
        arch.max_seq_text = 32;
        arch.vocab_size = vocab.size();
        auto w = DualEncoderWeightsT<double>::random_init(arch, 100 + seed);

        Rng rng(200 + seed);
        Tensor64 img({3, 16, 16});
        for (auto& v : img.data) v = rng.next_double();

        const int L = 2;
        Tensor64 pv = Tensor64::randn({L, arch.d_vision}, rng, 0.05);
        Tensor64 pt = Tensor64::randn({L, arch.d_text}, rng, 0.05);

        std::vector<std::vector<int>> rids = {tokenize("a real photo of a circle", vocab),
                                              tokenize("a real photo of a square", vocab)};
        std::vector<std::vector<int>> fids = {tokenize("a fake photo of a circle", vocab),
                                              tokenize("a fake photo of a square", vocab)};
        const Label label = seed % 2 == 0 ? Label::Real : Label::Fake;
        const double sigma = 7.5;

        auto ad = prompt_loss_single<double>(w, img, rids, fids, pv, pt, label, sigma, vocab, true);

        auto loss_of = [&](const Tensor64& pv2, const Tensor64& pt2) {
            return prompt_loss_single<double>(w, img, rids, fids, pv2, pt2, label, sigma, vocab, false)
                .loss;
        };
        auto fd_v = finite_diff_grad<double>(
            [&](const Tensor64& x) { return loss_of(x, pt); }, pv, 1e-5);
        auto fd_t = finite_diff_grad<double>(
            [&](const Tensor64& x) { return loss_of(pv, x); }, pt, 1e-5);

        double worst = 0;
        for (size_t i = 0; i < fd_v.data.size(); ++i)
            worst = std::max(worst, std::abs(ad.grad_v.data[i] - fd_v.data[i]) /
                                        (std::abs(fd_v.data[i]) + 1e-6));
        for (size_t i = 0; i < fd_t.data.size(); ++i)
            worst = std::max(worst, std::abs(ad.grad_t.data[i] - fd_t.data[i]) /
                                        (std::abs(fd_t.data[i]) + 1e-6));
        std::printf("seed %llu label=%s loss=%.6f max rel err=%.3e\n",
                    (unsigned long long)seed, label == Label::Real ? "real" : "fake", ad.loss, worst);
    }
    return 0;
}
