#pragma once

// Per-task read-only prompt storage. Prompts are the only parameters learned
// per task; once trained they are frozen for the lifetime of the bank, and
// the bank stores nothing else (no images, no features) -- the serialized
// size is exactly header + prompt floats + CRC table.

#include <span>
#include <string>
#include <vector>

#include "p2g/tensor.hpp"

namespace p2g {

struct TaskPrompts {
    int task_id = 0;
    Tensor p_v;  // [L x d_vision]
    Tensor p_t;  // [L x d_text]
    bool trained = false;

    int length() const { return p_v.rows(); }

    uint32_t fingerprint() const {
        uint32_t crc = crc32(p_v.data.data(), p_v.data.size() * sizeof(float));
        return crc32_update(crc, p_t.data.data(), p_t.data.size() * sizeof(float));
    }
};

inline TaskPrompts init_task_prompts(int task_id, int L, int d_vision, int d_text, uint64_t seed) {
    if (L < 1) throw ConfigError("init_task_prompts: L must be >= 1");
    TaskPrompts p;
    p.task_id = task_id;
    Rng rng(derive_seed(seed, 0x9c0a9c0a, uint64_t(task_id)));
    p.p_v = Tensor::randn({L, d_vision}, rng, 0.02f);
    p.p_t = Tensor::randn({L, d_text}, rng, 0.02f);
    p.trained = false;
    return p;
}

class PromptBank {
public:
    int size() const { return int(entries_.size()); }
    bool empty() const { return entries_.empty(); }
    const TaskPrompts& task(int task_id) const { return entries_.at(size_t(task_id - 1)); }
    const std::vector<TaskPrompts>& entries() const { return entries_; }
    const std::vector<uint32_t>& fingerprints() const { return fingerprints_; }

    std::vector<Tensor> visual_prompts() const {
        std::vector<Tensor> out;
        out.reserve(entries_.size());
        for (const auto& e : entries_) out.push_back(e.p_v);
        return out;
    }

    std::vector<Tensor> text_prompts() const {
        std::vector<Tensor> out;
        out.reserve(entries_.size());
        for (const auto& e : entries_) out.push_back(e.p_t);
        return out;
    }

    void append_task(TaskPrompts prompts) {
        if (!prompts.trained) throw ValueError("append_task: prompts are not trained");
        if (prompts.task_id <= size()) throw DuplicateTask("append_task: task id already present");
        if (prompts.task_id != size() + 1) throw TaskIdGap("append_task: task id gap");
        if (!entries_.empty()) {
            if (prompts.p_v.rows() != entries_.front().p_v.rows() ||
                prompts.p_v.cols() != entries_.front().p_v.cols() ||
                prompts.p_t.cols() != entries_.front().p_t.cols())
                throw ShapeError("append_task: prompt shape differs from bank");
        }
        prompts.p_v.require_finite("task visual prompts");
        prompts.p_t.require_finite("task text prompts");
        fingerprints_.push_back(prompts.fingerprint());
        entries_.push_back(std::move(prompts));
    }

    // Frozen-prompt contract: fingerprints recorded at append time must match
    // the current contents.
    void verify_fingerprints() const {
        for (size_t i = 0; i < entries_.size(); ++i)
            if (entries_[i].fingerprint() != fingerprints_[i])
                throw ChecksumMismatch("prompt bank: task " + std::to_string(i + 1) +
                                       " mutated after append");
    }

private:
    std::vector<TaskPrompts> entries_;
    std::vector<uint32_t> fingerprints_;
};

// ---------------------------------------------------------------------------
// File format "P2G-PB":
//   magic[8] | version u32 | T u32 | L u32 | d_v u32 | d_t u32
//   T blocks of float32 (p_v then p_t, row-major)
//   T CRC-32 entries (one per task)

inline constexpr char kBankMagic[8] = {'P', '2', 'G', '-', 'P', 'B', '\0', '\0'};
inline constexpr uint32_t kBankVersion = 1;

inline size_t bank_file_size(int T, int L, int d_v, int d_t) {
    return sizeof(kBankMagic) + 5 * sizeof(uint32_t) +
           size_t(T) * size_t(L) * size_t(d_v + d_t) * sizeof(float) + size_t(T) * sizeof(uint32_t);
}

inline void save_bank(const PromptBank& bank, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("save_bank: cannot open " + path);
    const int T = bank.size();
    const int L = T > 0 ? bank.task(1).p_v.rows() : 0;
    const int d_v = T > 0 ? bank.task(1).p_v.cols() : 0;
    const int d_t = T > 0 ? bank.task(1).p_t.cols() : 0;
    write_bytes(os, kBankMagic, sizeof(kBankMagic));
    write_pod(os, kBankVersion);
    write_pod(os, uint32_t(T));
    write_pod(os, uint32_t(L));
    write_pod(os, uint32_t(d_v));
    write_pod(os, uint32_t(d_t));
    for (int t = 1; t <= T; ++t) {
        const auto& e = bank.task(t);
        write_bytes(os, e.p_v.data.data(), e.p_v.data.size() * sizeof(float));
        write_bytes(os, e.p_t.data.data(), e.p_t.data.size() * sizeof(float));
    }
    for (int t = 1; t <= T; ++t) write_pod(os, bank.task(t).fingerprint());
}

inline PromptBank load_bank(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("load_bank: cannot open " + path);
    char magic[8];
    read_bytes(is, magic, sizeof(magic));
    if (std::memcmp(magic, kBankMagic, sizeof(magic)) != 0) throw FormatError("load_bank: bad magic");
    if (read_pod<uint32_t>(is) != kBankVersion) throw FormatError("load_bank: version mismatch");
    const auto T = read_pod<uint32_t>(is);
    const auto L = read_pod<uint32_t>(is);
    const auto d_v = read_pod<uint32_t>(is);
    const auto d_t = read_pod<uint32_t>(is);
    std::vector<TaskPrompts> loaded;
    for (uint32_t t = 1; t <= T; ++t) {
        TaskPrompts e;
        e.task_id = int(t);
        e.trained = true;
        e.p_v = Tensor({int(L), int(d_v)});
        e.p_t = Tensor({int(L), int(d_t)});
        read_bytes(is, e.p_v.data.data(), e.p_v.data.size() * sizeof(float));
        read_bytes(is, e.p_t.data.data(), e.p_t.data.size() * sizeof(float));
        loaded.push_back(std::move(e));
    }
    PromptBank bank;
    for (uint32_t t = 0; t < T; ++t) {
        const uint32_t want = read_pod<uint32_t>(is);
        if (loaded[t].fingerprint() != want)
            throw ChecksumMismatch("load_bank: task " + std::to_string(t + 1) + " checksum mismatch");
        bank.append_task(std::move(loaded[t]));
    }
    return bank;
}

// Serialized bytes of a single task entry; the harness snapshots these to
// prove tasks stay bit-identical across later training.
inline std::vector<uint8_t> serialize_task(const TaskPrompts& e) {
    std::vector<uint8_t> out(e.p_v.data.size() * sizeof(float) + e.p_t.data.size() * sizeof(float));
    std::memcpy(out.data(), e.p_v.data.data(), e.p_v.data.size() * sizeof(float));
    std::memcpy(out.data() + e.p_v.data.size() * sizeof(float), e.p_t.data.data(),
                e.p_t.data.size() * sizeof(float));
    return out;
}

}  // namespace p2g
