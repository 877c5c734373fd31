#include <catch2/catch_amalgamated.hpp>

#include "p2g/ensembler.hpp"

using namespace p2g;

namespace {

// Brute-force re-derivation of the max-&-mean rule, independent of decide().
Label brute_force_decide(const std::vector<float>& sr, const std::vector<float>& sf) {
    float rs = sr[0], fs = sf[0];
    for (float v : sr) rs = std::max(rs, v);
    for (float v : sf) fs = std::max(fs, v);
    double rb = 0, fb = 0;
    for (float v : sr) rb += v;
    for (float v : sf) fb += v;
    rb /= double(sr.size());
    fb /= double(sf.size());
    if (std::abs(rs - fs) >= std::abs(rb - fb)) return rs > fs ? Label::Real : Label::Fake;
    return rb > fb ? Label::Real : Label::Fake;
}

}  // namespace

TEST_CASE("task_scores") {
    Rng rng(1);
    SECTION("T=1, c=1 reduces to averaged_similarity") {
        auto v = Tensor::randn({4, 8}, rng);
        auto r = Tensor::randn({4, 8}, rng);
        auto f = Tensor::randn({4, 8}, rng);
        auto [sr, sf] = task_scores(std::span<const Tensor>(&v, 1), {{r}}, {{f}});
        REQUIRE(sr[0] == Catch::Approx(averaged_similarity(v, r)).margin(1e-6));
        REQUIRE(sf[0] == Catch::Approx(averaged_similarity(v, f)).margin(1e-6));
    }

    SECTION("identical outputs across tasks give constant vectors") {
        auto v = Tensor::randn({4, 8}, rng);
        auto r = Tensor::randn({4, 8}, rng);
        auto f = Tensor::randn({4, 8}, rng);
        std::vector<Tensor> vs = {v, v, v};
        auto [sr, sf] = task_scores(std::span<const Tensor>(vs), {{r}, {r}, {r}}, {{f}, {f}, {f}});
        REQUIRE(sr[0] == sr[1]);
        REQUIRE(sr[1] == sr[2]);
        REQUIRE(sf[0] == sf[2]);
    }

    SECTION("random T=3, c=2 matches the scalar loop oracle") {
        std::vector<Tensor> vs;
        std::vector<std::vector<Tensor>> rs(3), fs(3);
        for (int k = 0; k < 3; ++k) {
            vs.push_back(Tensor::randn({5, 6}, rng));
            for (int ci = 0; ci < 2; ++ci) {
                rs[size_t(k)].push_back(Tensor::randn({5, 6}, rng));
                fs[size_t(k)].push_back(Tensor::randn({5, 6}, rng));
            }
        }
        auto [sr, sf] = task_scores(std::span<const Tensor>(vs), rs, fs);
        for (int k = 0; k < 3; ++k) {
            double acc_r = 0, acc_f = 0;
            for (int ci = 0; ci < 2; ++ci)
                for (int i = 0; i < 5; ++i) {
                    auto row = [&](const Tensor& m) {
                        Tensor out({1, 6});
                        std::copy(m.row_ptr(i), m.row_ptr(i) + 6, out.data.begin());
                        return out;
                    };
                    acc_r += cosine_sim(row(vs[size_t(k)]), row(rs[size_t(k)][size_t(ci)]));
                    acc_f += cosine_sim(row(vs[size_t(k)]), row(fs[size_t(k)][size_t(ci)]));
                }
            REQUIRE(sr[size_t(k)] == Catch::Approx(acc_r / 10.0).margin(1e-5));
            REQUIRE(sf[size_t(k)] == Catch::Approx(acc_f / 10.0).margin(1e-5));
        }
    }
}

TEST_CASE("weight_scores") {
    SECTION("one-hot posterior zeroes all but one entry") {
        DomainPosterior w{{0.0f, 1.0f, 0.0f}};
        auto out = weight_scores({0.5f, 0.25f, -0.5f}, w);
        REQUIRE(out[0] == 0.0f);
        REQUIRE(out[1] == 0.25f);
        REQUIRE(out[2] == 0.0f);
    }

    SECTION("uniform posterior preserves the argmax") {
        DomainPosterior w{{0.5f, 0.5f}};
        auto out = weight_scores({0.4f, 0.6f}, w);
        REQUIRE(out[0] == 0.2f);
        REQUIRE(out[1] == Catch::Approx(0.3).margin(1e-7));
        REQUIRE(out[1] > out[0]);
    }

    SECTION("elementwise product") {
        DomainPosterior w{{0.9f, 0.1f}};
        auto out = weight_scores({0.4f, 0.6f}, w);
        REQUIRE(out[0] == Catch::Approx(0.36).margin(1e-7));
        REQUIRE(out[1] == Catch::Approx(0.06).margin(1e-7));
    }

    SECTION("length mismatch") {
        DomainPosterior w{{1.0f}};
        REQUIRE_THROWS_AS(weight_scores({0.1f, 0.2f}, w), ShapeError);
    }
}

TEST_CASE("decide") {
    SECTION("clear max-branch real decision") {
        auto p = ScorePair::make({0.9f, 0.1f}, {0.2f, 0.3f});
        auto d = decide(p);
        REQUIRE(d.branch == Branch::Max);  // |0.9-0.3| = 0.6 >= |0.5-0.25|
        REQUIRE(d.y_hat == Label::Real);
    }

    SECTION("max branch with fake outcome") {
        auto p = ScorePair::make({0.4f, 0.4f}, {0.3f, 0.5f});
        auto d = decide(p);
        // maxima margin |0.4-0.5| = 0.1, means margin |0.4-0.4| = 0
        REQUIRE(d.branch == Branch::Max);
        REQUIRE(d.y_hat == Label::Fake);
    }

    SECTION("T=1: max and mean coincide") {
        auto p = ScorePair::make({0.2f}, {0.7f});
        auto d = decide(p);
        REQUIRE(d.y_hat == Label::Fake);
        REQUIRE(p.s_r_star == p.s_r_bar);
    }

    SECTION("exact tie resolves to fake") {
        auto p = ScorePair::make({0.5f}, {0.5f});
        REQUIRE(decide(p).y_hat == Label::Fake);
    }

    SECTION("mean branch when the mean margin dominates") {
        auto p = ScorePair::make({0.5f, 0.5f, 0.5f}, {0.52f, 0.1f, 0.1f});
        auto d = decide(p);
        // max margin |0.5-0.52|=0.02 < mean margin |0.5-0.24|=0.26
        REQUIRE(d.branch == Branch::Mean);
        REQUIRE(d.y_hat == Label::Real);
    }

    SECTION("1000 random pairs match the brute-force rule exactly") {
        Rng rng(99);
        for (int trial = 0; trial < 1000; ++trial) {
            const int T = 1 + rng.uniform_int(6);
            std::vector<float> sr(static_cast<size_t>(T)), sf(static_cast<size_t>(T));
            for (int k = 0; k < T; ++k) {
                sr[size_t(k)] = 2.0f * rng.next_float() - 1.0f;
                sf[size_t(k)] = 2.0f * rng.next_float() - 1.0f;
            }
            auto d = decide(ScorePair::make(sr, sf));
            REQUIRE(d.y_hat == brute_force_decide(sr, sf));
        }
    }
}

TEST_CASE("ensemble mode variants") {
    // conflicting aggregates: max says real, mean says fake
    auto p = ScorePair::make({0.9f, 0.0f, 0.0f}, {0.35f, 0.35f, 0.35f});
    auto main = decide(p, EnsembleMode::MaxAndMean);
    auto mean_only = decide(p, EnsembleMode::MeanOnly);
    auto max_only = decide(p, EnsembleMode::MaxOnly);
    REQUIRE(main.branch == Branch::Max);
    REQUIRE(main.y_hat == Label::Real);
    REQUIRE(max_only.y_hat == Label::Real);
    REQUIRE(mean_only.y_hat == Label::Fake);
    REQUIRE(mean_only.y_hat != main.y_hat);
}

TEST_CASE("hard_select_baseline") {
    SECTION("one-hot posterior uses that task's scores") {
        DomainPosterior w{{0.0f, 1.0f}};
        auto d = hard_select_baseline({0.9f, 0.1f}, {0.2f, 0.6f}, w);
        REQUIRE(d.y_hat == Label::Fake);
    }

    SECTION("uniform posterior breaks ties toward task 1") {
        DomainPosterior w{{0.5f, 0.5f}};
        auto d = hard_select_baseline({0.9f, 0.1f}, {0.2f, 0.6f}, w);
        REQUIRE(d.y_hat == Label::Real);  // task 1 selected: 0.9 > 0.2
    }

    SECTION("fixture where hard selection errs but the weighted rule is right") {
        // posterior slightly prefers task 1, whose prompts vote real; the
        // weighted mean sides with fake
        std::vector<float> s_r = {0.5f, 0.0f};
        std::vector<float> s_f = {0.4f, 0.9f};
        DomainPosterior w{{0.55f, 0.45f}};
        auto hard = hard_select_baseline(s_r, s_f, w);
        REQUIRE(hard.y_hat == Label::Real);
        auto pair = ScorePair::make(weight_scores(s_r, w), weight_scores(s_f, w));
        auto ens = decide(pair);
        REQUIRE(ens.y_hat == Label::Fake);
        REQUIRE(ens.y_hat != hard.y_hat);
    }
}
