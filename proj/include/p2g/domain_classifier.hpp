#pragma once

// Per-task k-means over frozen CLS features and the distance-to-posterior
// map used to weight task scores. k-means++ seeding, Lloyd iterations to an
// assignment fixpoint, empty clusters reseeded to the globally farthest
// point. Deterministic in the seed.

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "p2g/tensor.hpp"

namespace p2g {

namespace detail {

template <class T>
T sq_dist(const T* a, const T* b, int d) {
    T acc = 0;
    for (int i = 0; i < d; ++i) {
        const T c = a[i] - b[i];
        acc += c * c;
    }
    return acc;
}

}  // namespace detail

inline double kmeans_sse(const Tensor& features, const Tensor& centroids) {
    const int n = features.rows(), d = features.cols(), k = centroids.rows();
    double sse = 0;
    for (int i = 0; i < n; ++i) {
        float best = std::numeric_limits<float>::max();
        for (int c = 0; c < k; ++c)
            best = std::min(best, detail::sq_dist(features.row_ptr(i), centroids.row_ptr(c), d));
        sse += double(best);
    }
    return sse;
}

inline Tensor fit_centroids(const Tensor& features, int K, uint64_t seed, int max_iters = 100,
                            std::vector<double>* sse_trace = nullptr) {
    const int n = features.rows(), d = features.cols();
    if (K < 1) throw ConfigError("fit_centroids: K must be >= 1");
    if (n < K) throw ValueError("fit_centroids: fewer points than centroids");
    features.require_finite("fit_centroids features");

    Rng rng(derive_seed(seed, 0x4a3a));
    Tensor centroids({K, d});

    // k-means++ seeding
    std::vector<float> dist2(size_t(n), std::numeric_limits<float>::max());
    int first = rng.uniform_int(n);
    std::copy(features.row_ptr(first), features.row_ptr(first) + d, centroids.row_ptr(0));
    for (int c = 1; c < K; ++c) {
        double total = 0;
        for (int i = 0; i < n; ++i) {
            const float d2 = detail::sq_dist(features.row_ptr(i), centroids.row_ptr(c - 1), d);
            dist2[size_t(i)] = std::min(dist2[size_t(i)], d2);
            total += double(dist2[size_t(i)]);
        }
        int pick = 0;
        if (total > 0) {
            const double target = rng.next_double() * total;
            double acc = 0;
            pick = n - 1;
            for (int i = 0; i < n; ++i) {
                acc += double(dist2[size_t(i)]);
                if (acc >= target) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = rng.uniform_int(n);
        }
        std::copy(features.row_ptr(pick), features.row_ptr(pick) + d, centroids.row_ptr(c));
    }

    // Lloyd iterations
    std::vector<int> assign(size_t(n), -1);
    for (int iter = 0; iter < max_iters; ++iter) {
        bool changed = false;
        for (int i = 0; i < n; ++i) {
            float best = std::numeric_limits<float>::max();
            int arg = 0;
            for (int c = 0; c < K; ++c) {
                const float d2 = detail::sq_dist(features.row_ptr(i), centroids.row_ptr(c), d);
                if (d2 < best) {
                    best = d2;
                    arg = c;
                }
            }
            if (assign[size_t(i)] != arg) {
                assign[size_t(i)] = arg;
                changed = true;
            }
        }
        if (sse_trace) sse_trace->push_back(kmeans_sse(features, centroids));
        if (!changed && iter > 0) break;

        Tensor sums({K, d});
        std::vector<int> counts(size_t(K), 0);
        for (int i = 0; i < n; ++i) {
            const int c = assign[size_t(i)];
            counts[size_t(c)]++;
            const float* f = features.row_ptr(i);
            float* s = sums.row_ptr(c);
            for (int j = 0; j < d; ++j) s[j] += f[j];
        }
        for (int c = 0; c < K; ++c) {
            if (counts[size_t(c)] > 0) {
                float* cr = centroids.row_ptr(c);
                const float* s = sums.row_ptr(c);
                for (int j = 0; j < d; ++j) cr[j] = s[j] / float(counts[size_t(c)]);
            } else {
                // reseed to the point farthest from its assigned centroid
                float worst = -1.0f;
                int pick = 0;
                for (int i = 0; i < n; ++i) {
                    const float d2 = detail::sq_dist(features.row_ptr(i),
                                                     centroids.row_ptr(assign[size_t(i)]), d);
                    if (d2 > worst) {
                        worst = d2;
                        pick = i;
                    }
                }
                std::copy(features.row_ptr(pick), features.row_ptr(pick) + d, centroids.row_ptr(c));
            }
        }
    }
    centroids.require_finite("fit_centroids result");
    return centroids;
}

// ---------------------------------------------------------------------------

struct DomainPosterior {
    std::vector<float> w;

    int argmax() const {
        int best = 0;
        for (size_t i = 1; i < w.size(); ++i)
            if (w[i] > w[size_t(best)]) best = int(i);
        return best;  // ties keep the lowest index
    }
};

class DomainCentroidBank {
public:
    explicit DomainCentroidBank(int K = 5) : K_(K) {}

    int size() const { return int(per_task_.size()); }
    int K() const { return K_; }
    double tau() const { return tau_; }
    void set_tau(double t) {
        if (t <= 0) throw ConfigError("centroid bank: tau must be positive");
        tau_override_ = true;
        tau_ = t;
    }
    const Tensor& task(int task_id) const { return per_task_.at(size_t(task_id - 1)); }
    const std::vector<Tensor>& all() const { return per_task_; }

    void append(Tensor centroids) {
        if (centroids.rows() != K_) throw ShapeError("centroid bank: wrong K");
        if (!per_task_.empty() && centroids.cols() != per_task_.front().cols())
            throw ShapeError("centroid bank: dimension mismatch");
        per_task_.push_back(std::move(centroids));
        if (!tau_override_) refresh_tau();
    }

    // tau defaults to the median pairwise squared distance over all stored
    // centroids; scale-adaptive and parameter-free.
    void refresh_tau() {
        std::vector<const float*> ptrs;
        int d = 0;
        for (const auto& c : per_task_) {
            d = c.cols();
            for (int i = 0; i < c.rows(); ++i) ptrs.push_back(c.row_ptr(i));
        }
        std::vector<double> dists;
        for (size_t i = 0; i < ptrs.size(); ++i)
            for (size_t j = i + 1; j < ptrs.size(); ++j)
                dists.push_back(double(detail::sq_dist(ptrs[i], ptrs[j], d)));
        if (dists.empty()) {
            tau_ = 1.0;
            return;
        }
        std::sort(dists.begin(), dists.end());
        const double med = dists[dists.size() / 2];
        tau_ = med > 1e-12 ? med : 1.0;
    }

    friend DomainCentroidBank load_centroid_bank(const std::string& path);

private:
    int K_;
    double tau_ = 1.0;
    bool tau_override_ = false;
    std::vector<Tensor> per_task_;
};

inline DomainPosterior domain_posterior(const Tensor& cls_feature, const DomainCentroidBank& bank) {
    if (bank.size() == 0) throw ValueError("domain_posterior: empty centroid bank");
    const int T = bank.size();
    const int d = bank.task(1).cols();
    if (int(cls_feature.data.size()) != d) throw ShapeError("domain_posterior: feature dim mismatch");

    std::vector<double> dist(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t) {
        const auto& c = bank.task(t + 1);
        double best = std::numeric_limits<double>::max();
        for (int i = 0; i < c.rows(); ++i)
            best = std::min(best, double(detail::sq_dist(cls_feature.data.data(), c.row_ptr(i), d)));
        dist[size_t(t)] = best;
    }
    // softmax(-d / tau), shifted by the max for stability; far-off tasks
    // underflow to an exact zero
    double m = -std::numeric_limits<double>::max();
    for (double v : dist) m = std::max(m, -v / bank.tau());
    double sum = 0;
    DomainPosterior post;
    post.w.resize(size_t(T));
    for (int t = 0; t < T; ++t) {
        const double e = std::exp(-dist[size_t(t)] / bank.tau() - m);
        post.w[size_t(t)] = float(e);
        sum += e;
    }
    for (auto& v : post.w) v = float(double(v) / sum);
    return post;
}

// ---------------------------------------------------------------------------
// File format "P2G-KM": magic, version, T, K, D, tau, float32 blocks, CRC.

inline constexpr char kCentroidMagic[8] = {'P', '2', 'G', '-', 'K', 'M', '\0', '\0'};
inline constexpr uint32_t kCentroidVersion = 1;

inline void save_centroid_bank(const DomainCentroidBank& bank, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("save_centroid_bank: cannot open " + path);
    write_bytes(os, kCentroidMagic, sizeof(kCentroidMagic));
    write_pod(os, kCentroidVersion);
    write_pod(os, uint32_t(bank.size()));
    write_pod(os, uint32_t(bank.K()));
    const uint32_t d = bank.size() > 0 ? uint32_t(bank.task(1).cols()) : 0;
    write_pod(os, d);
    write_pod(os, double(bank.tau()));
    uint32_t crc = 0;
    for (int t = 1; t <= bank.size(); ++t) {
        const auto& c = bank.task(t);
        write_bytes(os, c.data.data(), c.data.size() * sizeof(float));
        crc = crc32_update(crc, c.data.data(), c.data.size() * sizeof(float));
    }
    write_pod(os, crc);
}

inline DomainCentroidBank load_centroid_bank(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("load_centroid_bank: cannot open " + path);
    char magic[8];
    read_bytes(is, magic, sizeof(magic));
    if (std::memcmp(magic, kCentroidMagic, sizeof(magic)) != 0)
        throw FormatError("load_centroid_bank: bad magic");
    if (read_pod<uint32_t>(is) != kCentroidVersion)
        throw FormatError("load_centroid_bank: version mismatch");
    const auto T = read_pod<uint32_t>(is);
    const auto K = read_pod<uint32_t>(is);
    const auto d = read_pod<uint32_t>(is);
    const auto tau = read_pod<double>(is);
    DomainCentroidBank bank{int(K)};
    uint32_t crc = 0;
    for (uint32_t t = 0; t < T; ++t) {
        Tensor c({int(K), int(d)});
        read_bytes(is, c.data.data(), c.data.size() * sizeof(float));
        crc = crc32_update(crc, c.data.data(), c.data.size() * sizeof(float));
        bank.per_task_.push_back(std::move(c));
    }
    if (read_pod<uint32_t>(is) != crc) throw ChecksumMismatch("load_centroid_bank: checksum mismatch");
    bank.tau_ = tau;
    bank.tau_override_ = true;
    return bank;
}

}  // namespace p2g
