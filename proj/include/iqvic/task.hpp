#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "iqvic/frame.hpp"
#include "iqvic/tokenizer.hpp"

namespace iqvic {

// One supervised example. Single-frame samples (frames.size() == 1) train the
// compressor's selective readout; stream samples exercise the memory path.
struct QASample {
    std::vector<SymbolicFrame> frames;
    TokenSequence question;
    TokenSequence answer;  // gold tokens, eos excluded
    int sample_index = 0;
};

// Knobs shared by the generators. Frames put key/value pairs in fixed adjacent
// cells (pair j occupies cells 2j and 2j+1), then noise_cells distractor
// symbols, then blanks.
struct TaskOptions {
    int grid = 4;
    FrameAlphabet alphabet;
    int noise_cells = 4;
};

// Stream retrieval: t_len frames, each showing one distinct key with its own
// distinct value; the question names one of the shown keys, the answer is that
// key's value. Sample i depends only on (seed, i), so counts can grow without
// reshuffling existing samples.
std::vector<QASample> gen_kv_stream(int n, int t_len, const Vocab& vocab, const TaskOptions& opt,
                                    std::uint64_t seed);

// Single-frame QA: 1..max_pairs distinct pairs in one frame. The question asks
// about a present key (answer: the paired value) or, with probability
// none_fraction, an absent key (answer: "none"). The absent case is what makes
// compression question-conditioned rather than a fixed frame summary.
std::vector<QASample> gen_single_frame(int n, int max_pairs, double none_fraction,
                                       const Vocab& vocab, const TaskOptions& opt,
                                       std::uint64_t seed);

// JSONL container: one header line with format/task metadata and the
// vocabulary, then one sample per line with frames as cell arrays and
// question/answer as plain text.
struct Dataset {
    static constexpr const char* format_version = "iqvic-qa-v1";

    std::string kind;  // "single_frame" or "stream"
    int grid = 4;
    FrameAlphabet alphabet;
    Vocab vocab;
    std::uint64_t seed = 0;
    std::vector<QASample> samples;
};

void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);  // data_error on malformed input

}  // namespace iqvic
