#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "p2g/domain_classifier.hpp"

using namespace p2g;

namespace {

Tensor blob(int n, int d, const std::vector<float>& center, float sigma, uint64_t seed) {
    Rng rng(seed);
    Tensor out({n, d});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
            out.at(i, j) = center[size_t(j)] + sigma * float(rng.normal());
    return out;
}

// Independent Lloyd oracle with random restarts; only the final SSE is
// compared.
double oracle_kmeans_sse(const Tensor& features, int K, uint64_t seed) {
    const int n = features.rows(), d = features.cols();
    double best_sse = std::numeric_limits<double>::max();
    for (int restart = 0; restart < 5; ++restart) {
        Rng rng(derive_seed(seed, uint64_t(restart)));
        Tensor cents({K, d});
        std::vector<int> picked;
        while (int(picked.size()) < K) {
            int p = rng.uniform_int(n);
            bool dup = false;
            for (int q : picked) dup = dup || q == p;
            if (!dup) picked.push_back(p);
        }
        for (int c = 0; c < K; ++c)
            std::copy(features.row_ptr(picked[size_t(c)]), features.row_ptr(picked[size_t(c)]) + d,
                      cents.row_ptr(c));
        for (int iter = 0; iter < 200; ++iter) {
            std::vector<int> assign(static_cast<size_t>(n));
            for (int i = 0; i < n; ++i) {
                float best = std::numeric_limits<float>::max();
                for (int c = 0; c < K; ++c) {
                    float acc = 0;
                    for (int j = 0; j < d; ++j) {
                        float diff = features.at(i, j) - cents.at(c, j);
                        acc += diff * diff;
                    }
                    if (acc < best) {
                        best = acc;
                        assign[size_t(i)] = c;
                    }
                }
            }
            Tensor sums({K, d});
            std::vector<int> counts(size_t(K), 0);
            for (int i = 0; i < n; ++i) {
                counts[size_t(assign[size_t(i)])]++;
                for (int j = 0; j < d; ++j) sums.at(assign[size_t(i)], j) += features.at(i, j);
            }
            for (int c = 0; c < K; ++c)
                if (counts[size_t(c)] > 0)
                    for (int j = 0; j < d; ++j) cents.at(c, j) = sums.at(c, j) / float(counts[size_t(c)]);
        }
        best_sse = std::min(best_sse, kmeans_sse(features, cents));
    }
    return best_sse;
}

}  // namespace

TEST_CASE("fit_centroids") {
    SECTION("K=1 gives the feature mean") {
        Rng rng(3);
        Tensor feats = Tensor::randn({20, 4}, rng);
        auto c = fit_centroids(feats, 1, 1);
        for (int j = 0; j < 4; ++j) {
            float mean = 0;
            for (int i = 0; i < 20; ++i) mean += feats.at(i, j);
            mean /= 20.0f;
            REQUIRE(c.at(0, j) == Catch::Approx(mean).margin(1e-5));
        }
    }

    SECTION("two point masses recover both locations exactly") {
        Tensor feats({8, 2});
        for (int i = 0; i < 4; ++i) {
            feats.at(i, 0) = 1.0f;
            feats.at(i, 1) = 2.0f;
        }
        for (int i = 4; i < 8; ++i) {
            feats.at(i, 0) = -3.0f;
            feats.at(i, 1) = 5.0f;
        }
        auto c = fit_centroids(feats, 2, 9);
        const bool order_a = c.at(0, 0) == 1.0f;
        const int ia = order_a ? 0 : 1, ib = order_a ? 1 : 0;
        REQUIRE(c.at(ia, 0) == 1.0f);
        REQUIRE(c.at(ia, 1) == 2.0f);
        REQUIRE(c.at(ib, 0) == -3.0f);
        REQUIRE(c.at(ib, 1) == 5.0f);
    }

    SECTION("N < K errors") {
        Tensor feats({2, 3});
        REQUIRE_THROWS_AS(fit_centroids(feats, 3, 1), ValueError);
    }

    SECTION("three separated blobs: SSE within 1% of the Lloyd oracle") {
        std::vector<std::vector<float>> centers = {{0, 0, 0, 0}, {4, 4, 0, 0}, {0, 4, 4, 0}};
        std::vector<Tensor> blobs;
        for (size_t b = 0; b < 3; ++b) blobs.push_back(blob(40, 4, centers[b], 0.1f, 100 + b));
        Tensor all({120, 4});
        for (int b = 0; b < 3; ++b)
            std::copy(blobs[size_t(b)].data.begin(), blobs[size_t(b)].data.end(),
                      all.data.begin() + b * 160);
        std::vector<double> trace;
        auto c = fit_centroids(all, 3, 5, 100, &trace);
        const double sse = kmeans_sse(all, c);
        const double oracle = oracle_kmeans_sse(all, 3, 77);
        REQUIRE(sse <= oracle * 1.01);
        // SSE non-increasing across Lloyd iterations
        for (size_t i = 1; i < trace.size(); ++i) REQUIRE(trace[i] <= trace[i - 1] + 1e-9);
    }

    SECTION("deterministic in seed") {
        Rng rng(8);
        Tensor feats = Tensor::randn({50, 6}, rng);
        auto a = fit_centroids(feats, 4, 123);
        auto b = fit_centroids(feats, 4, 123);
        REQUIRE(max_abs_diff(a, b) == 0.0f);
    }
}

TEST_CASE("domain_posterior") {
    SECTION("single task gives [1.0]") {
        DomainCentroidBank bank(1);
        bank.append(Tensor({1, 2}, {0.0f, 0.0f}));
        auto post = domain_posterior(Tensor::vec({5.0f, -2.0f}), bank);
        REQUIRE(post.w.size() == 1);
        REQUIRE(post.w[0] == 1.0f);
    }

    SECTION("equidistant feature gives [0.5, 0.5]") {
        DomainCentroidBank bank(1);
        bank.append(Tensor({1, 2}, {1.0f, 0.0f}));
        bank.append(Tensor({1, 2}, {-1.0f, 0.0f}));
        auto post = domain_posterior(Tensor::vec({0.0f, 3.0f}), bank);
        REQUIRE(post.w[0] == Catch::Approx(0.5).margin(1e-6));
        REQUIRE(post.w[1] == Catch::Approx(0.5).margin(1e-6));
    }

    SECTION("tiny tau saturates to one-hot") {
        DomainCentroidBank bank(1);
        bank.append(Tensor({1, 1}, {0.0f}));
        bank.append(Tensor({1, 1}, {1.0f}));
        bank.set_tau(1e-3);
        auto post = domain_posterior(Tensor::vec({0.0f}), bank);
        REQUIRE(post.w[0] == 1.0f);
        REQUIRE(post.w[1] == 0.0f);  // underflows and clamps to exactly zero
    }

    SECTION("invariant to a constant added to all distances; argmax matches argmin distance") {
        DomainCentroidBank bank(1);
        bank.append(Tensor({1, 1}, {0.0f}));
        bank.append(Tensor({1, 1}, {2.0f}));
        bank.append(Tensor({1, 1}, {5.0f}));
        bank.set_tau(2.0);
        auto post = domain_posterior(Tensor::vec({1.9f}), bank);
        double sum = 0;
        for (float v : post.w) sum += v;
        REQUIRE(sum == Catch::Approx(1.0).margin(1e-6));
        REQUIRE(post.argmax() == 1);
        // shifting the feature shifts all distances but not the argmax
        auto post2 = domain_posterior(Tensor::vec({2.1f}), bank);
        REQUIRE(post2.argmax() == 1);
    }

    SECTION("empty bank errors") {
        DomainCentroidBank bank(1);
        REQUIRE_THROWS_AS(domain_posterior(Tensor::vec({0.0f}), bank), ValueError);
    }
}

TEST_CASE("centroid bank serialization") {
    DomainCentroidBank bank(2);
    Rng rng(4);
    bank.append(Tensor::randn({2, 3}, rng));
    bank.append(Tensor::randn({2, 3}, rng));
    auto tmp = std::filesystem::temp_directory_path() / "p2g_km_test.bin";
    save_centroid_bank(bank, tmp.string());
    auto loaded = load_centroid_bank(tmp.string());
    REQUIRE(loaded.size() == 2);
    REQUIRE(loaded.K() == 2);
    REQUIRE(loaded.tau() == bank.tau());
    for (int t = 1; t <= 2; ++t) REQUIRE(max_abs_diff(loaded.task(t), bank.task(t)) == 0.0f);
    std::filesystem::remove(tmp);
}
