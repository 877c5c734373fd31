#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "p2g/prompt_bank.hpp"

using namespace p2g;

namespace {

TaskPrompts trained_prompts(int task_id, uint64_t seed, int L = 7, int dv = 16, int dt = 16) {
    auto p = init_task_prompts(task_id, L, dv, dt, seed);
    p.trained = true;
    return p;
}

}  // namespace

TEST_CASE("init_task_prompts") {
    SECTION("deterministic in the seed") {
        auto a = init_task_prompts(1, 7, 64, 64, 5);
        auto b = init_task_prompts(1, 7, 64, 64, 5);
        REQUIRE(a.fingerprint() == b.fingerprint());
        auto c = init_task_prompts(1, 7, 64, 64, 6);
        REQUIRE(a.fingerprint() != c.fingerprint());
    }

    SECTION("shape contract: L=7 rows") {
        auto p = init_task_prompts(2, 7, 64, 48, 1);
        REQUIRE(p.p_v.shape == std::vector<int>{7, 64});
        REQUIRE(p.p_t.shape == std::vector<int>{7, 48});
        REQUIRE_FALSE(p.trained);
    }

    SECTION("init scale is small") {
        auto p = init_task_prompts(1, 7, 64, 64, 9);
        float mx = 0;
        for (float v : p.p_v.data) mx = std::max(mx, std::abs(v));
        REQUIRE(mx < 0.2f);
        REQUIRE(mx > 0.0f);
    }
}

TEST_CASE("append_task contract") {
    PromptBank bank;

    SECTION("append to empty bank") {
        bank.append_task(trained_prompts(1, 10));
        REQUIRE(bank.size() == 1);
    }

    SECTION("untrained prompts are rejected") {
        auto p = init_task_prompts(1, 7, 16, 16, 1);
        REQUIRE_THROWS_AS(bank.append_task(p), ValueError);
    }

    SECTION("duplicate id and id gaps are rejected") {
        bank.append_task(trained_prompts(1, 10));
        REQUIRE_THROWS_AS(bank.append_task(trained_prompts(1, 11)), DuplicateTask);
        REQUIRE_THROWS_AS(bank.append_task(trained_prompts(3, 12)), TaskIdGap);
    }

    SECTION("appending leaves earlier checksums unchanged") {
        bank.append_task(trained_prompts(1, 10));
        bank.append_task(trained_prompts(2, 20));
        const auto fp1 = bank.fingerprints()[0];
        const auto fp2 = bank.fingerprints()[1];
        bank.append_task(trained_prompts(3, 30));
        REQUIRE(bank.fingerprints()[0] == fp1);
        REQUIRE(bank.fingerprints()[1] == fp2);
        REQUIRE_NOTHROW(bank.verify_fingerprints());
    }
}

TEST_CASE("bank serialization") {
    auto tmp = std::filesystem::temp_directory_path() / "p2g_bank_test.bin";

    SECTION("round trip is bit exact") {
        PromptBank bank;
        bank.append_task(trained_prompts(1, 1));
        bank.append_task(trained_prompts(2, 2));
        save_bank(bank, tmp.string());
        auto loaded = load_bank(tmp.string());
        REQUIRE(loaded.size() == 2);
        for (int t = 1; t <= 2; ++t) {
            REQUIRE(serialize_task(loaded.task(t)) == serialize_task(bank.task(t)));
            REQUIRE(loaded.fingerprints()[size_t(t - 1)] == bank.fingerprints()[size_t(t - 1)]);
        }
    }

    SECTION("serialized size is exactly header + prompts + CRC table") {
        PromptBank bank;
        bank.append_task(trained_prompts(1, 1));
        bank.append_task(trained_prompts(2, 2));
        bank.append_task(trained_prompts(3, 3));
        save_bank(bank, tmp.string());
        REQUIRE(std::filesystem::file_size(tmp) == bank_file_size(3, 7, 16, 16));
    }

    SECTION("corrupted byte raises ChecksumMismatch") {
        PromptBank bank;
        bank.append_task(trained_prompts(1, 1));
        save_bank(bank, tmp.string());
        {
            std::fstream f(tmp, std::ios::in | std::ios::out | std::ios::binary);
            f.seekp(40);
            char b = 0x5a;
            f.write(&b, 1);
        }
        REQUIRE_THROWS_AS(load_bank(tmp.string()), ChecksumMismatch);
    }

    SECTION("empty bank round trips") {
        PromptBank bank;
        save_bank(bank, tmp.string());
        auto loaded = load_bank(tmp.string());
        REQUIRE(loaded.size() == 0);
        REQUIRE(std::filesystem::file_size(tmp) == bank_file_size(0, 0, 0, 0));
    }

    std::filesystem::remove(tmp);
}
