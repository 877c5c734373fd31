#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "p2g/autodiff.hpp"
#include "p2g/tensor.hpp"

using namespace p2g;

namespace {

// Naive dense attention reference: materializes the full score matrix.
// Kept independent of attention_masked on purpose.
template <class T>
TensorT<T> naive_attention(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                           const AttentionMask* mask) {
    const int nq = q.rows(), nk = k.rows(), d = q.cols();
    TensorT<T> scores({nq, nk});
    for (int i = 0; i < nq; ++i)
        for (int j = 0; j < nk; ++j) {
            T acc = 0;
            for (int p = 0; p < d; ++p) acc += q.at(i, p) * k.at(j, p);
            acc /= std::sqrt(T(d));
            if (mask && !mask->allowed(i, j)) acc += mask_fill_value<T>();
            scores.at(i, j) = acc;
        }
    TensorT<T> probs = softmax_rows(scores);
    TensorT<T> out({nq, v.cols()});
    for (int i = 0; i < nq; ++i)
        for (int j = 0; j < nk; ++j)
            for (int p = 0; p < v.cols(); ++p) out.at(i, p) += probs.at(i, j) * v.at(j, p);
    return out;
}

}  // namespace

TEST_CASE("attention_masked basics") {
    SECTION("single token, all allowed: output equals the value row") {
        Rng rng(1);
        auto q = Tensor::randn({1, 4}, rng);
        auto k = Tensor::randn({1, 4}, rng);
        auto v = Tensor::randn({1, 4}, rng);
        auto out = attention_masked(q, k, v, AttentionMask::all_allowed(1));
        REQUIRE(max_abs_diff(out, v) == 0.0f);
    }

    SECTION("original-token rows under a read-only mask match the prompt-free rows") {
        Rng rng(2);
        const int n_orig = 5, T = 2, L = 3, d = 8;
        auto full_q = Tensor::randn({T * L + n_orig, d}, rng);
        auto full_k = Tensor::randn({T * L + n_orig, d}, rng);
        auto full_v = Tensor::randn({T * L + n_orig, d}, rng);
        auto mask = build_readonly_mask(n_orig, T, L);
        auto full_out = attention_masked(full_q, full_k, full_v, mask);

        auto oq = slice_rows(full_q, T * L, n_orig);
        auto ok = slice_rows(full_k, T * L, n_orig);
        auto ov = slice_rows(full_v, T * L, n_orig);
        auto plain = attention_masked(oq, ok, ov, AttentionMask::all_allowed(n_orig));
        auto full_orig = slice_rows(full_out, T * L, n_orig);
        REQUIRE(max_abs_diff(full_orig, plain) < 1e-6f);
    }

    SECTION("random 6-token case matches the naive dense reference") {
        for (uint64_t seed = 0; seed < 8; ++seed) {
            Rng rng(100 + seed);
            auto q = Tensor::randn({6, 8}, rng);
            auto k = Tensor::randn({6, 8}, rng);
            auto v = Tensor::randn({6, 5}, rng);
            auto mask = build_readonly_mask(4, 1, 2);
            REQUIRE(max_abs_diff(attention_masked(q, k, v, mask), naive_attention(q, k, v, &mask)) < 1e-6f);
        }
    }

    SECTION("all-allowed mask equals the unmasked naive reference exactly") {
        Rng rng(7);
        auto q = Tensor::randn({5, 6}, rng);
        auto k = Tensor::randn({5, 6}, rng);
        auto v = Tensor::randn({5, 6}, rng);
        auto masked = attention_masked(q, k, v, AttentionMask::all_allowed(5));
        auto naive = naive_attention<float>(q, k, v, nullptr);
        for (size_t i = 0; i < masked.data.size(); ++i) REQUIRE(masked.data[i] == naive.data[i]);
    }

    SECTION("errors") {
        Rng rng(3);
        auto q = Tensor::randn({2, 4}, rng);
        auto k = Tensor::randn({3, 4}, rng);
        auto v = Tensor::randn({3, 4}, rng);
        REQUIRE_THROWS_AS(attention_masked(q, k, v, AttentionMask::all_allowed(2)), ShapeError);
        AttentionMask bad(2, 3, false);
        bad.set(0, 0, true);  // row 1 fully masked
        REQUIRE_THROWS_AS(attention_masked(q, k, v, bad), ValueError);
    }
}

TEST_CASE("build_readonly_mask structure") {
    SECTION("T=0 gives the all-allowed mask") {
        auto m = build_readonly_mask(4, 0, 7);
        REQUIRE(m.n_query() == 4);
        for (int i = 0; i < 4; ++i) REQUIRE(m.row_count(i) == 4);
    }

    SECTION("T=1, L=1, n_orig=2: prompt row allows both originals and itself") {
        auto m = build_readonly_mask(2, 1, 1);
        REQUIRE(m.n_query() == 3);
        REQUIRE(m.allowed(0, 0));
        REQUIRE(m.allowed(0, 1));
        REQUIRE(m.allowed(0, 2));
        REQUIRE(m.row_count(0) == 3);
        for (int q = 1; q < 3; ++q) {
            REQUIRE_FALSE(m.allowed(q, 0));
            REQUIRE(m.row_count(q) == 2);
        }
    }

    SECTION("T=3, L=7, n_orig=50: row sums and zero prompt-to-prompt block") {
        const int n_orig = 50, T = 3, L = 7;
        auto m = build_readonly_mask(n_orig, T, L);
        for (int q = 0; q < T * L; ++q) REQUIRE(m.row_count(q) == n_orig + 1);
        for (int q = T * L; q < T * L + n_orig; ++q) REQUIRE(m.row_count(q) == n_orig);
        for (int q = 0; q < T * L; ++q)
            for (int k = 0; k < T * L; ++k) REQUIRE(m.allowed(q, k) == (q == k));
    }
}

TEST_CASE("cosine_sim") {
    Rng rng(4);
    auto u = Tensor::randn({6}, rng);
    REQUIRE(cosine_sim(u, u) == Catch::Approx(1.0).margin(1e-6));
    REQUIRE(cosine_sim(u, scale(u, -1.0f)) == Catch::Approx(-1.0).margin(1e-6));
    auto a = Tensor::vec({1.0f, 0.0f});
    auto b = Tensor::vec({1.0f, 1.0f});
    REQUIRE(cosine_sim(a, b) == Catch::Approx(0.70710678).margin(1e-6));
    REQUIRE(cosine_sim(a, b) == cosine_sim(b, a));
    REQUIRE(cosine_sim(scale(a, 3.0f), scale(b, 0.25f)) == Catch::Approx(0.70710678).margin(1e-6));
    REQUIRE_THROWS_AS(cosine_sim(a, Tensor::vec({0.0f, 0.0f})), ValueError);
}

TEST_CASE("backward basics") {
    SECTION("f(x) = x*x at x=3 gives gradient 6") {
        Graph g;
        auto x = g.leaf(Tensor::vec({3.0f}));
        auto y = g.mul(x, x);
        g.backward(y);
        REQUIRE(g.grad(x).data[0] == Catch::Approx(6.0).margin(1e-6));
    }

    SECTION("loss independent of a leaf gives a zero gradient") {
        Graph g;
        auto x = g.leaf(Tensor::vec({2.0f}));
        auto unused = g.leaf(Tensor::vec({5.0f, 5.0f}));
        auto y = g.mul(x, x);
        Graph::Id leaves[] = {x, unused};
        auto grads = g.backward_leaves(y, leaves);
        REQUIRE(grads[0].data[0] == Catch::Approx(4.0).margin(1e-6));
        REQUIRE(grads[1].data[0] == 0.0f);
        REQUIRE(grads[1].data[1] == 0.0f);
    }

    SECTION("loss must be scalar; leaves must be registered") {
        Graph g;
        auto x = g.leaf(Tensor::vec({1.0f, 2.0f}));
        auto y = g.mul(x, x);
        REQUIRE_THROWS_AS(g.backward(y), ValueError);
        auto s = g.mean_all(y);
        Graph::Id leaves[] = {y};  // not a leaf
        REQUIRE_THROWS_AS(g.backward_leaves(s, leaves), ValueError);
    }
}

TEST_CASE("finite_diff_grad") {
    SECTION("sum of squares") {
        auto f = [](const Tensor64& t) {
            double s = 0;
            for (double v : t.data) s += v * v;
            return s;
        };
        auto g = finite_diff_grad<double>(f, Tensor64::vec({1.0, 2.0}), 1e-5);
        REQUIRE(g.data[0] == Catch::Approx(2.0).margin(1e-6));
        REQUIRE(g.data[1] == Catch::Approx(4.0).margin(1e-6));
    }

    SECTION("constant function gives zero") {
        auto g = finite_diff_grad<double>([](const Tensor64&) { return 3.5; }, Tensor64::vec({1.0, -2.0, 0.5}), 1e-5);
        for (double v : g.data) REQUIRE(v == 0.0);
    }

    SECTION("eps must be positive") {
        REQUIRE_THROWS_AS(
            finite_diff_grad<double>([](const Tensor64&) { return 0.0; }, Tensor64::vec({1.0}), 0.0),
            ValueError);
    }
}

namespace {

// Random small graphs over the op mix; loss = mean of the final node.
double random_graph_check(uint64_t seed) {
    Rng rng(seed);
    const int n = 3 + rng.uniform_int(3);
    const int d = 4 + rng.uniform_int(3);
    Tensor64 x0 = Tensor64::randn({n, d}, rng, 0.8);

    auto build = [&](const Tensor64& leaf_val, Graph64& g, Graph64::Id& leaf_out) {
        Rng local(seed ^ 0xabcdULL);
        auto x = g.leaf(leaf_val);
        leaf_out = x;
        auto h = x;
        for (int step = 0; step < 4; ++step) {
            switch (local.uniform_int(5)) {
                case 0: {
                    Rng wr(seed + 17 * uint64_t(step) + 1);
                    auto w = g.constant(Tensor64::randn({g.value(h).cols(), d}, wr, 0.5));
                    h = g.matmul(h, w);
                    break;
                }
                case 1: {
                    Rng wr(seed + 17 * uint64_t(step) + 2);
                    auto gamma = g.constant(Tensor64::randn({g.value(h).cols()}, wr, 0.2));
                    auto one = g.constant(Tensor64::full({g.value(h).cols()}, 1.0));
                    auto beta = g.constant(Tensor64::randn({g.value(h).cols()}, wr, 0.1));
                    h = g.layer_norm(h, g.add(gamma, one), beta);
                    break;
                }
                case 2:
                    h = g.gelu(h);
                    break;
                case 3:
                    h = g.softmax_rows(h);
                    break;
                case 4: {
                    Rng wr(seed + 17 * uint64_t(step) + 3);
                    const int rows = g.value(h).rows();
                    auto k = g.constant(Tensor64::randn({rows, g.value(h).cols()}, wr, 0.5));
                    auto v = g.constant(Tensor64::randn({rows, g.value(h).cols()}, wr, 0.5));
                    auto mask = std::make_shared<AttentionMask>(
                        build_readonly_mask(rows - 1, 1, 1));
                    auto scores = g.scale(g.matmul_nt(h, k), 1.0 / std::sqrt(double(g.value(h).cols())));
                    auto probs = g.softmax_rows(g.mask_bias(scores, mask));
                    h = g.matmul(probs, v);
                    break;
                }
            }
        }
        return g.mean_all(h);
    };

    Graph64 g;
    Graph64::Id leaf;
    auto loss = build(x0, g, leaf);
    g.backward(loss);
    Tensor64 ad = g.grad(leaf);

    auto f = [&](const Tensor64& xv) {
        Graph64 g2;
        Graph64::Id l2;
        auto loss2 = build(xv, g2, l2);
        return g2.value(loss2).data[0];
    };
    Tensor64 fd = finite_diff_grad<double>(f, x0, 1e-5);

    double worst = 0;
    for (size_t i = 0; i < ad.data.size(); ++i) {
        double rel = std::abs(ad.data[i] - fd.data[i]) / (std::abs(fd.data[i]) + 1e-6);
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace

TEST_CASE("gradients match finite differences on random graphs") {
    for (uint64_t seed = 1; seed <= 100; ++seed) {
        INFO("seed " << seed);
        REQUIRE(random_graph_check(seed) < 1e-4);
    }
}

TEST_CASE("read-only masking invariance under random prompt counts") {
    // For random frozen Q/K/V, original rows are unchanged by prepended
    // prompt rows.
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(500 + seed);
        const int n_orig = 3 + rng.uniform_int(5);
        const int T = rng.uniform_int(4);
        const int L = 1 + rng.uniform_int(7);
        const int d = 8;
        auto q = Tensor::randn({T * L + n_orig, d}, rng);
        auto k = Tensor::randn({T * L + n_orig, d}, rng);
        auto v = Tensor::randn({T * L + n_orig, d}, rng);
        auto out = attention_masked(q, k, v, build_readonly_mask(n_orig, T, L));
        auto plain = attention_masked(slice_rows(q, T * L, n_orig), slice_rows(k, T * L, n_orig),
                                      slice_rows(v, T * L, n_orig), AttentionMask::all_allowed(n_orig));
        REQUIRE(max_abs_diff(slice_rows(out, T * L, n_orig), plain) <= 1e-6f);
    }
}

TEST_CASE("graph ops match eager kernels") {
    Rng rng(11);
    auto a = Tensor::randn({3, 4}, rng);
    auto b = Tensor::randn({4, 5}, rng);
    Graph g;
    auto na = g.constant(a);
    auto nb = g.constant(b);
    REQUIRE(max_abs_diff(g.value(g.matmul(na, nb)), matmul(a, b)) == 0.0f);
    auto c = Tensor::randn({3, 4}, rng);
    auto nc = g.constant(c);
    REQUIRE(max_abs_diff(g.value(g.add(na, nc)), add(a, c)) == 0.0f);
    auto gamma = Tensor::full({4}, 1.0f);
    auto beta = Tensor::zeros({4});
    REQUIRE(max_abs_diff(g.value(g.layer_norm(na, g.constant(gamma), g.constant(beta))),
                         layer_norm(a, gamma, beta)) == 0.0f);
}
