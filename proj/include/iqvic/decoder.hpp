#pragma once

#include <functional>
#include <string>
#include <vector>

#include "iqvic/memory.hpp"
#include "iqvic/transformer.hpp"

namespace iqvic {

// Order of the question and memory blocks in the decoder prefix.
// question_first is the default; memory_first stays available as an ablation.
enum class ConcatOrder { question_first, memory_first };

struct DecoderInput {
    Tensor prefix;  // [K + token_count, d_e]
    TokenSequence question;
    std::uint64_t question_hash = 0;
};

// Embeds the question with the decoder's token table and stacks it with the
// memory's entries. contract_error on empty memory; consistency_error if the
// memory was built under a different question.
DecoderInput build_decoder_input(const TransformerModel& decoder, const TokenSequence& question,
                                 const ContextMemory& memory,
                                 ConcatOrder order = ConcatOrder::question_first);

struct Answer {
    TokenSequence tokens;
    std::string text;
};

Answer decode_answer(const TransformerModel& decoder, const DecoderInput& input,
                     int max_new_tokens, const Vocab& vocab);

// Per-frame compression hook; the question is already bound inside.
using CompressFn = std::function<ContextEmbedding(const SymbolicFrame&)>;

struct StreamOptions {
    int max_new_tokens = 8;
    bool incremental = false;  // also answer after every frame, from snapshots
    ConcatOrder order = ConcatOrder::question_first;
};

struct StreamStats {
    int frames = 0;
    int entries = 0;
    int token_count = 0;
    int merges = 0;
};

struct StreamResult {
    Answer final_answer;
    std::vector<Answer> incremental;
    StreamStats stats;
    ContextMemory memory;
};

// Feeds every frame through compress into a capacity-bounded memory, then
// answers from the final state. Memory construction and response generation
// stay decoupled: incremental answers read snapshots, never the live object.
StreamResult run_stream(const CompressFn& compress, const TransformerModel& decoder,
                        const std::vector<SymbolicFrame>& frames, const TokenSequence& question,
                        int memory_capacity, const Vocab& vocab, const StreamOptions& opts = {});

}  // namespace iqvic
