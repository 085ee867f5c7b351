#pragma once

#include <optional>
#include <string>
#include <vector>

#include "iqvic/checkpoint.hpp"
#include "iqvic/compressor.hpp"
#include "iqvic/decoder.hpp"
#include "iqvic/task.hpp"

namespace iqvic {

enum class Method { iqvic, avgpool, truncate };

Method method_from_string(const std::string& s);  // config_error on unknown
std::string method_name(Method m);

// Question-agnostic baselines over projected frame rows [P, d_e] -> [C, d_e].
// avgpool averages C balanced contiguous windows; truncate keeps the first C
// rows. Both require C <= P.
Tensor avgpool_rows(const Tensor& e_v, int c);
Tensor truncate_rows(const Tensor& e_v, int c);

struct SystemConfig {
    TransformerConfig model;  // shared architecture for compressor and decoder
    int grid = 4;
    int d_f = 32;
    FrameAlphabet alphabet;
    // Flagship-geometry budgets by default; walkthroughs override to desk scale.
    int context_tokens = 64;   // C: rows kept per frame
    int memory_capacity = 10;  // L: entries resident in memory
    Method method = Method::iqvic;
    std::uint64_t seed = 0;

    int patch_tokens() const { return grid * grid; }
    // Smallest max_positions that fits both the compressor input and the
    // decoder prefix plus a short answer.
    int min_positions() const;
    // Returns a copy with max_positions auto-sized when left at the default 0.
    SystemConfig resolved() const;
    void validate() const;                  // config_error on hard problems
    std::vector<std::string> warnings() const;  // legal-but-odd combinations

    nlohmann::json to_json() const;
    static SystemConfig from_json(const nlohmann::json& j);
};

// Everything one method needs to answer stream questions. Baselines carry no
// transformer compressor or slot lookup; the projector and featurizer are
// common to all methods.
struct QaSystem {
    SystemConfig cfg;
    Vocab vocab;
    FrameFeaturizer featurizer;
    FrameProjector projector;
    std::optional<TransformerModel> compressor;
    std::optional<ContextTokenLookup> lookup;
    TransformerModel decoder;

    static QaSystem create(const SystemConfig& cfg);

    // One frame -> one memory entry under the given question.
    ContextEmbedding compress_one(const SymbolicFrame& f, const TokenSequence& question,
                                  const TrainContext* tc = nullptr) const;
    // Question-bound hook for run_stream.
    CompressFn make_compress(const TokenSequence& question) const;

    StreamResult answer_stream(const QASample& s, const StreamOptions& opts = {}) const;

    // Stable inventory of every parameter and frozen table, checkpoint-ready.
    std::vector<std::pair<std::string, Tensor>> named_tensors();

    static std::string compressor_path(const std::string& dir) { return dir + "/compressor.ckpt"; }
    static std::string decoder_path(const std::string& dir) { return dir + "/decoder.ckpt"; }
    void save(const std::string& dir) const;
    static QaSystem load(const std::string& dir);
};

}  // namespace iqvic
