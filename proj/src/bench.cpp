#include "iqvic/bench.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <thread>

#include "iqvic/error.hpp"

namespace iqvic {

MethodReport evaluate(const AnswerFn& answer, const std::vector<QASample>& eval_set,
                      const std::string& method, int memory_capacity, int context_tokens,
                      int patch_tokens, const EvalOptions& opts) {
    if (!answer) throw contract_error("evaluate: answer function is empty");
    if (eval_set.empty()) throw contract_error("evaluate: eval set is empty");
    const int n = static_cast<int>(eval_set.size());
    const int n_threads = std::max(1, std::min(opts.n_threads, n));

    std::vector<std::uint8_t> correct(static_cast<std::size_t>(n), 0);
    std::atomic<int> next{0};
    std::atomic<bool> failed{false};
    std::exception_ptr first_error;
    std::mutex error_mu;

    auto worker = [&] {
        for (;;) {
            if (failed.load()) return;
            const int i = next.fetch_add(1);
            if (i >= n) return;
            try {
                correct[static_cast<std::size_t>(i)] = answer(eval_set[i]) == eval_set[i].answer;
            } catch (...) {
                std::lock_guard<std::mutex> lk(error_mu);
                if (!first_error) first_error = std::current_exception();
                failed.store(true);
                return;
            }
        }
    };
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(n_threads));
        for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    if (first_error) std::rethrow_exception(first_error);

    MethodReport r;
    r.method = method;
    r.n_samples = n;
    for (std::uint8_t c : correct) r.n_correct += c;
    r.accuracy = 100.0 * r.n_correct / r.n_samples;
    r.mean_score = 5.0 * r.n_correct / r.n_samples;
    r.context_tokens = context_tokens;
    r.memory_capacity = memory_capacity;
    r.patch_tokens = patch_tokens;
    r.memory_tokens = memory_capacity * context_tokens;
    r.compression_ratio = compression_ratio_percent(context_tokens, patch_tokens);
    return r;
}

MethodReport evaluate_system(const QaSystem& sys, const std::vector<QASample>& eval_set,
                             const EvalOptions& opts) {
    StreamOptions so;
    so.max_new_tokens = opts.max_new_tokens;
    AnswerFn answer = [&sys, so](const QASample& s) {
        return sys.answer_stream(s, so).final_answer.tokens;
    };
    return evaluate(answer, eval_set, method_name(sys.cfg.method), sys.cfg.memory_capacity,
                    sys.cfg.context_tokens, sys.cfg.patch_tokens(), opts);
}

nlohmann::json MethodReport::to_json() const {
    return nlohmann::json{{"method", method},
                          {"n_samples", n_samples},
                          {"n_correct", n_correct},
                          {"accuracy", accuracy},
                          {"mean_score", mean_score},
                          {"context_tokens", context_tokens},
                          {"memory_capacity", memory_capacity},
                          {"patch_tokens", patch_tokens},
                          {"memory_tokens", memory_tokens},
                          {"compression_ratio", compression_ratio}};
}

void BenchReport::validate_accounting() const {
    for (const MethodReport& r : rows) {
        auto fail = [&](const std::string& what) {
            throw contract_error("report row '" + r.method + "': " + what);
        };
        if (r.n_samples <= 0) fail("no samples");
        if (r.n_correct < 0 || r.n_correct > r.n_samples) fail("correct count out of range");
        if (r.context_tokens <= 0 || r.memory_capacity <= 0 || r.patch_tokens <= 0)
            fail("non-positive accounting inputs");
        if (r.memory_tokens != r.memory_capacity * r.context_tokens)
            fail("memory_tokens != memory_capacity * context_tokens");
        const double ratio = compression_ratio_percent(r.context_tokens, r.patch_tokens);
        if (std::abs(r.compression_ratio - ratio) > 1e-12) fail("compression ratio mismatch");
        if (std::abs(r.accuracy - 100.0 * r.n_correct / r.n_samples) > 1e-9)
            fail("accuracy does not match counts");
        if (std::abs(r.mean_score - 5.0 * r.n_correct / r.n_samples) > 1e-9)
            fail("mean score does not match counts");
    }
}

std::string BenchReport::to_text() const {
    std::string out;
    char buf[192];
    std::snprintf(buf, sizeof(buf), "%-10s %13s %10s %9s %8s %8s\n", "method", "memory_tokens",
                  "keep_ratio", "accuracy", "score/5", "samples");
    out += buf;
    for (const MethodReport& r : rows) {
        char acc[32];
        std::snprintf(acc, sizeof(acc), "%.1f%%", r.accuracy);
        char score[32];
        std::snprintf(score, sizeof(score), "%.2f", r.mean_score);
        std::snprintf(buf, sizeof(buf), "%-10s %13d %10s %9s %8s %8d\n", r.method.c_str(),
                      r.memory_tokens, format_percent(r.compression_ratio).c_str(), acc, score,
                      r.n_samples);
        out += buf;
    }
    std::snprintf(buf, sizeof(buf), "seed=%llu config=%s\n",
                  static_cast<unsigned long long>(seed), config_digest.c_str());
    out += buf;
    return out;
}

nlohmann::json BenchReport::to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const MethodReport& r : rows) arr.push_back(r.to_json());
    return nlohmann::json{{"rows", arr}, {"seed", seed}, {"config_digest", config_digest}};
}

std::string config_digest_of(const nlohmann::json& config) {
    const std::string dump = config.dump();
    const std::uint64_t h =
        fnv1a_bytes(reinterpret_cast<const unsigned char*>(dump.data()), dump.size());
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace iqvic
