#pragma once

#include <functional>
#include <string>
#include <vector>

#include "iqvic/pipeline.hpp"

namespace iqvic {

struct EvalOptions {
    int max_new_tokens = 4;
    int n_threads = 1;  // samples are independent; results fold in index order
};

// One method's line in the benchmark: exact-match quality plus the memory
// accounting that makes the numbers comparable across methods.
struct MethodReport {
    std::string method;
    int n_samples = 0;
    int n_correct = 0;
    double accuracy = 0.0;    // percent of exact matches
    double mean_score = 0.0;  // 0-5 scale; exact-match grading gives 5 * accuracy / 100
    int context_tokens = 0;   // C rows kept per frame
    int memory_capacity = 0;  // L resident entries
    int patch_tokens = 0;     // P rows entering compression
    int memory_tokens = 0;    // L * C rows handed to the decoder at most
    double compression_ratio = 0.0;  // percent of per-frame rows kept

    nlohmann::json to_json() const;
};

// Answers one sample; lets tests swap in oracles or guessers for the harness.
using AnswerFn = std::function<TokenSequence(const QASample&)>;

MethodReport evaluate(const AnswerFn& answer, const std::vector<QASample>& eval_set,
                      const std::string& method, int memory_capacity, int context_tokens,
                      int patch_tokens, const EvalOptions& opts = {});
MethodReport evaluate_system(const QaSystem& sys, const std::vector<QASample>& eval_set,
                             const EvalOptions& opts = {});

struct BenchReport {
    std::vector<MethodReport> rows;
    std::uint64_t seed = 0;
    std::string config_digest;  // hex tag of the resolved configuration

    // Re-derives every derived figure; contract_error if a row is inconsistent.
    void validate_accounting() const;
    std::string to_text() const;  // fixed-format table, no timestamps
    nlohmann::json to_json() const;
};

// Hex digest for tagging reports with the configuration that produced them.
std::string config_digest_of(const nlohmann::json& config);

}  // namespace iqvic
