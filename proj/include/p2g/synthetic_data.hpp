#pragma once

// Procedural domain-incremental benchmark. "Real" images are rendered shapes;
// each domain's "fake" images carry that domain's generator artifact on top
// of the same content channel, so the label distribution is fixed while the
// input distribution shifts from domain to domain.

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "p2g/png.hpp"
#include "p2g/tensor.hpp"

namespace p2g {

inline const std::vector<std::string>& shape_classes() {
    static const std::vector<std::string> names = {"circle", "square", "triangle",
                                                   "cross",  "ring",   "stripe"};
    return names;
}

enum class ArtifactKind {
    SinusoidalGrid,
    CheckerboardUpsample,
    BlurBlock,
    RingSpectrum,
    NoiseTint,
};

inline const char* artifact_name(ArtifactKind k) {
    switch (k) {
        case ArtifactKind::SinusoidalGrid: return "sinusoidal-grid";
        case ArtifactKind::CheckerboardUpsample: return "checkerboard-upsample";
        case ArtifactKind::BlurBlock: return "blur-block";
        case ArtifactKind::RingSpectrum: return "ring-spectrum";
        case ArtifactKind::NoiseTint: return "noise-tint";
    }
    throw ConfigError("unknown artifact kind");
}

inline ArtifactKind artifact_from_name(const std::string& s) {
    for (ArtifactKind k : {ArtifactKind::SinusoidalGrid, ArtifactKind::CheckerboardUpsample,
                           ArtifactKind::BlurBlock, ArtifactKind::RingSpectrum,
                           ArtifactKind::NoiseTint})
        if (s == artifact_name(k)) return k;
    throw ConfigError("unknown artifact kind: " + s);
}

struct ArtifactParams {
    float amplitude = 0.25f;
    float freq = 8.0f;  // cycles per image (grid / ring artifacts)
};

struct DomainSpec {
    int domain_id = 1;
    ArtifactKind kind = ArtifactKind::SinusoidalGrid;
    ArtifactParams params;
    std::vector<std::string> classes = shape_classes();
    int n_train = 1000;
    int n_test = 400;
    uint64_t seed = 1;
    int image_size = 32;
};

enum class Label : int { Real = 0, Fake = 1 };

struct SampleRecord {
    Tensor image;  // [3 x H x W], values in [0,1]
    Label label = Label::Real;
    std::string class_name;
    int domain_id = 0;
    uint64_t uid = 0;
};

struct DomainDataset {
    DomainSpec spec;
    std::vector<SampleRecord> train;
    std::vector<SampleRecord> test;
};

// ---------------------------------------------------------------------------
// Content rendering

namespace detail {

struct ShapeTest {
    int kind;  // index into shape_classes()
    float cx, cy, r;
    float stripe_angle;

    bool inside(float x, float y) const {
        const float dx = x - cx, dy = y - cy;
        switch (kind) {
            case 0:  // circle
                return dx * dx + dy * dy <= r * r;
            case 1:  // square
                return std::abs(dx) <= r * 0.82f && std::abs(dy) <= r * 0.82f;
            case 2: {  // upward triangle
                if (dy < -r || dy > r * 0.8f) return false;
                const float t = (dy + r) / (r * 1.8f);  // 0 at apex
                return std::abs(dx) <= t * r * 0.95f;
            }
            case 3:  // cross
                return (std::abs(dx) <= r * 0.3f && std::abs(dy) <= r) ||
                       (std::abs(dy) <= r * 0.3f && std::abs(dx) <= r);
            case 4: {  // ring
                const float d2 = dx * dx + dy * dy;
                return d2 <= r * r && d2 >= r * r * 0.45f;
            }
            case 5: {  // stripe: full-width band through the center
                const float ca = std::cos(stripe_angle), sa = std::sin(stripe_angle);
                return std::abs(dx * sa - dy * ca) <= r * 0.38f;
            }
            default:
                return false;
        }
    }
};

}  // namespace detail

inline Tensor render_content(const std::string& class_name, uint64_t seed, int image_size = 32) {
    int kind = -1;
    for (size_t i = 0; i < shape_classes().size(); ++i)
        if (shape_classes()[i] == class_name) kind = int(i);
    if (kind < 0) throw ConfigError("render_content: unknown class '" + class_name + "'");

    Rng rng(derive_seed(seed, 0xc011 + uint64_t(kind)));
    const float s = float(image_size);
    detail::ShapeTest shape;
    shape.kind = kind;
    shape.cx = s * 0.5f + float(rng.next_double() * 0.25 - 0.125) * s;
    shape.cy = s * 0.5f + float(rng.next_double() * 0.25 - 0.125) * s;
    shape.r = s * (0.21f + 0.13f * rng.next_float());
    shape.stripe_angle = float(rng.uniform_int(4)) * 0.78539816f;  // multiples of 45 deg

    float bg[3], fg[3];
    for (int c = 0; c < 3; ++c) bg[c] = 0.08f + 0.35f * rng.next_float();
    for (int c = 0; c < 3; ++c) {
        fg[c] = 0.45f + 0.55f * rng.next_float();
        if (fg[c] - bg[c] < 0.3f) fg[c] = std::min(1.0f, bg[c] + 0.3f + 0.2f * rng.next_float());
    }

    Tensor img({3, image_size, image_size});
    const int hw = image_size * image_size;
    for (int y = 0; y < image_size; ++y)
        for (int x = 0; x < image_size; ++x) {
            // 2x2 supersampled coverage for soft edges
            int hits = 0;
            for (int sy = 0; sy < 2; ++sy)
                for (int sx = 0; sx < 2; ++sx)
                    if (shape.inside(float(x) + 0.25f + 0.5f * float(sx),
                                     float(y) + 0.25f + 0.5f * float(sy)))
                        ++hits;
            const float cov = float(hits) * 0.25f;
            for (int c = 0; c < 3; ++c)
                img.data[size_t(c * hw + y * image_size + x)] = bg[c] + (fg[c] - bg[c]) * cov;
        }
    return img;
}

// ---------------------------------------------------------------------------
// Generator artifacts

inline Tensor apply_artifact(const Tensor& image, ArtifactKind kind, const ArtifactParams& p,
                             uint64_t seed) {
    const int H = image.shape[1], W = image.shape[2];
    const int hw = H * W;
    Tensor out = image;
    Rng rng(derive_seed(seed, 0xa27f, uint64_t(kind)));
    const float a = p.amplitude;

    switch (kind) {
        case ArtifactKind::SinusoidalGrid: {
            const float phx = float(rng.next_double() * 6.2831853);
            const float phy = float(rng.next_double() * 6.2831853);
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    const float v = 0.5f * a *
                                    (std::sin(6.2831853f * p.freq * float(x) / float(W) + phx) +
                                     std::sin(6.2831853f * p.freq * float(y) / float(H) + phy));
                    for (int c = 0; c < 3; ++c) out.data[size_t(c * hw + y * W + x)] += v;
                }
            break;
        }
        case ArtifactKind::CheckerboardUpsample: {
            // 2x downsample + nearest upsample, blended in, plus a parity
            // modulation -- the classic deconvolution checkerboard pattern.
            for (int c = 0; c < 3; ++c)
                for (int y = 0; y < H; y += 2)
                    for (int x = 0; x < W; x += 2) {
                        float m = 0;
                        for (int dy = 0; dy < 2; ++dy)
                            for (int dx = 0; dx < 2; ++dx)
                                m += image.data[size_t(c * hw + (y + dy) * W + (x + dx))];
                        m *= 0.25f;
                        for (int dy = 0; dy < 2; ++dy)
                            for (int dx = 0; dx < 2; ++dx) {
                                const size_t i = size_t(c * hw + (y + dy) * W + (x + dx));
                                const float checker = ((dx + dy) % 2 == 0) ? 1.0f : -1.0f;
                                out.data[i] = (1.0f - a) * image.data[i] + a * m + 0.6f * a * checker;
                            }
                    }
            break;
        }
        case ArtifactKind::BlurBlock: {
            // box blur inside a random block covering about half the image
            const int bw = W / 2 + rng.uniform_int(W / 4);
            const int bh = H / 2 + rng.uniform_int(H / 4);
            const int bx = rng.uniform_int(W - bw + 1);
            const int by = rng.uniform_int(H - bh + 1);
            const int rad = 2;
            for (int c = 0; c < 3; ++c)
                for (int y = by; y < by + bh; ++y)
                    for (int x = bx; x < bx + bw; ++x) {
                        float acc = 0;
                        int cnt = 0;
                        for (int dy = -rad; dy <= rad; ++dy)
                            for (int dx = -rad; dx <= rad; ++dx) {
                                const int yy = std::clamp(y + dy, 0, H - 1);
                                const int xx = std::clamp(x + dx, 0, W - 1);
                                acc += image.data[size_t(c * hw + yy * W + xx)];
                                ++cnt;
                            }
                        const size_t i = size_t(c * hw + y * W + x);
                        out.data[i] = (1.0f - a * 2.0f) * image.data[i] + a * 2.0f * acc / float(cnt);
                    }
            break;
        }
        case ArtifactKind::RingSpectrum: {
            const float cx = float(W) * (0.3f + 0.4f * rng.next_float());
            const float cy = float(H) * (0.3f + 0.4f * rng.next_float());
            const float ph = float(rng.next_double() * 6.2831853);
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    const float dx = (float(x) - cx) / float(W);
                    const float dy = (float(y) - cy) / float(H);
                    const float rho = std::sqrt(dx * dx + dy * dy);
                    const float v = a * std::cos(6.2831853f * p.freq * rho + ph);
                    for (int c = 0; c < 3; ++c) out.data[size_t(c * hw + y * W + x)] += v;
                }
            break;
        }
        case ArtifactKind::NoiseTint: {
            const int tint_channel = rng.uniform_int(3);
            for (int c = 0; c < 3; ++c)
                for (int i = 0; i < hw; ++i) {
                    float v = a * (2.0f * rng.next_float() - 1.0f);
                    if (c == tint_channel) v += 0.5f * a;
                    out.data[size_t(c * hw + i)] += v;
                }
            break;
        }
    }
    for (auto& v : out.data) v = std::clamp(v, 0.0f, 1.0f);
    return out;
}

inline Tensor apply_artifact(const Tensor& image, const DomainSpec& spec, uint64_t seed) {
    return apply_artifact(image, spec.kind, spec.params, seed);
}

// ---------------------------------------------------------------------------

inline std::string caption(const SampleRecord& rec) { return "a photo of a " + rec.class_name; }

namespace detail {

inline std::vector<SampleRecord> generate_split(const DomainSpec& spec, int n, int split_tag) {
    if (!spec.classes.empty()) {
        for (const auto& c : spec.classes)
            (void)render_content(c, 0, 2);  // validates class names early (tiny render)
    }
    std::vector<SampleRecord> out;
    out.reserve(size_t(n));
    const int n_classes = int(spec.classes.size());
    for (int i = 0; i < n; ++i) {
        SampleRecord rec;
        rec.domain_id = spec.domain_id;
        // label alternates, class advances every two records: every class is
        // seen with both labels
        rec.class_name = spec.classes[size_t((i / 2) % n_classes)];
        rec.label = (i % 2 == 0) ? Label::Real : Label::Fake;
        const uint64_t rec_seed = derive_seed(spec.seed, uint64_t(split_tag), uint64_t(i));
        rec.uid = uint64_t(spec.domain_id) * 1000000ull + uint64_t(split_tag) * 100000ull + uint64_t(i);
        rec.image = render_content(rec.class_name, rec_seed, spec.image_size);
        if (rec.label == Label::Fake)
            rec.image = apply_artifact(rec.image, spec, derive_seed(rec_seed, 0xfa4e));
        out.push_back(std::move(rec));
    }
    return out;
}

}  // namespace detail

inline DomainDataset generate_domain(const DomainSpec& spec) {
    if (spec.classes.empty()) throw ConfigError("domain spec has no classes");
    DomainDataset d;
    d.spec = spec;
    d.train = detail::generate_split(spec, spec.n_train, 0);
    d.test = detail::generate_split(spec, spec.n_test, 1);
    return d;
}

inline std::vector<DomainDataset> generate_sequence(const std::vector<DomainSpec>& specs) {
    if (specs.empty()) throw ConfigError("generate_sequence: no domain specs");
    for (size_t i = 0; i < specs.size(); ++i)
        for (size_t j = i + 1; j < specs.size(); ++j)
            if (specs[i].kind == specs[j].kind)
                throw ConfigError("generate_sequence: duplicate artifact kind across domains");
    std::vector<DomainDataset> out;
    out.reserve(specs.size());
    for (const auto& s : specs) out.push_back(generate_domain(s));
    return out;
}

// Pre-alignment pairs: class-rendered images captioned with the zero-shot
// template. Real images only by default; fakes can be mixed in so artifact
// statistics are in-distribution for the feature space.
inline std::vector<std::pair<Tensor, std::string>> make_prealignment_pairs(
    const std::vector<std::string>& classes, int per_class, uint64_t seed,
    const std::vector<DomainSpec>* artifact_specs = nullptr, float fake_fraction = 0.0f,
    int image_size = 32) {
    if (classes.empty()) throw ConfigError("make_prealignment_pairs: no classes");
    std::vector<std::pair<Tensor, std::string>> pairs;
    pairs.reserve(classes.size() * size_t(per_class));
    for (size_t ci = 0; ci < classes.size(); ++ci)
        for (int i = 0; i < per_class; ++i) {
            const uint64_t s = derive_seed(seed, ci, uint64_t(i));
            Tensor img = render_content(classes[ci], s, image_size);
            if (artifact_specs && !artifact_specs->empty()) {
                Rng rng(derive_seed(s, 0x9a1e));
                if (rng.next_float() < fake_fraction) {
                    const auto& spec =
                        (*artifact_specs)[size_t(rng.uniform_int(int(artifact_specs->size())))];
                    img = apply_artifact(img, spec, derive_seed(s, 0xfa4e));
                }
            }
            pairs.emplace_back(std::move(img), "a photo of a " + classes[ci]);
        }
    return pairs;
}

// ---------------------------------------------------------------------------
// Export: one directory per domain with PNGs and a manifest CSV
// (path,label,class,domain).

inline void export_dataset(const std::vector<DomainDataset>& datasets, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    for (const auto& d : datasets) {
        const fs::path ddir = fs::path(dir) / ("domain_" + std::to_string(d.spec.domain_id));
        fs::create_directories(ddir);
        std::ofstream manifest(ddir / "manifest.csv");
        if (!manifest) throw IoError("export_dataset: cannot write manifest");
        manifest << "path,label,class,domain\n";
        auto dump = [&](const std::vector<SampleRecord>& recs, const char* split) {
            for (size_t i = 0; i < recs.size(); ++i) {
                const auto& r = recs[i];
                const int H = r.image.shape[1], W = r.image.shape[2];
                std::vector<uint8_t> rgb(size_t(H) * size_t(W) * 3);
                const int hw = H * W;
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x)
                        for (int c = 0; c < 3; ++c)
                            rgb[size_t((y * W + x) * 3 + c)] = uint8_t(
                                std::lround(std::clamp(r.image.data[size_t(c * hw + y * W + x)], 0.0f, 1.0f) * 255.0f));
                char name[64];
                std::snprintf(name, sizeof(name), "%s_%05zu.png", split, i);
                write_png_rgb((ddir / name).string(), W, H, rgb);
                manifest << name << "," << int(r.label) << "," << r.class_name << ","
                         << r.domain_id << "\n";
            }
        };
        dump(d.train, "train");
        dump(d.test, "test");
    }
}

}  // namespace p2g
