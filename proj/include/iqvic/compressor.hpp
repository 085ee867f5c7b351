#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "iqvic/frame.hpp"
#include "iqvic/transformer.hpp"

namespace iqvic {

// Learned query slots appended to the compressor input. The transformer's
// outputs at these trailing positions are the frame's compressed form.
struct ContextTokenLookup {
    Tensor table;  // [C, d_e]

    ContextTokenLookup(int context_tokens, int d_e, std::uint64_t seed);

    int context_tokens() const { return table.rows(); }
    int embed_dim() const { return table.cols(); }

    std::vector<std::pair<std::string, Tensor>> named_parameters();
    void set_trainable(bool trainable);
    void zero_grads();
};

// A frame distilled to C rows under one question. question_hash tags which
// question conditioned the compression so memories cannot silently mix state
// from different questions.
struct ContextEmbedding {
    Tensor tokens;  // [C, d_e]
    int source_index = 0;
    std::uint64_t question_hash = 0;
};

// [question rows ; frame rows ; slot rows] -> [K + P + C, d_e].
Tensor assemble_compressor_input(const Tensor& e_q, const Tensor& e_v, const Tensor& e_c0);

// Runs the compressor over the assembled sequence and keeps only the final C
// rows. Gradients (when a tape is active) flow into the lookup, the projector
// behind frame.tokens, and the compressor's trainable parameters.
ContextEmbedding compress_frame(const TransformerModel& compressor, const TokenSequence& question,
                                const FrameEmbedding& frame, const ContextTokenLookup& lookup,
                                const TrainContext* tc = nullptr);

// 100 * C / P: how much of the per-frame token budget survives compression.
double compression_ratio_percent(int context_tokens, int patch_tokens);
// Display rule: one decimal under 10 percent, whole percents above.
std::string format_percent(double pct);

}  // namespace iqvic
