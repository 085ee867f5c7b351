#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "iqvic/tensor.hpp"

namespace iqvic {

// Symbol alphabet for grid-world frames:
// 0 = blank, 1..K = key symbols, K+1..K+V = value symbols, then D distractors.
struct FrameAlphabet {
    static constexpr int blank = 0;

    int n_keys = 16;
    int n_values = 16;
    int n_distract = 8;

    int size() const { return 1 + n_keys + n_values + n_distract; }
    int key_symbol(int k) const;
    int value_symbol(int v) const;
    int distract_symbol(int i) const;
    bool is_value(int sym) const { return sym > n_keys && sym <= n_keys + n_values; }
    int value_of(int sym) const;  // inverse of value_symbol
};

// One observation: a G x G grid of symbol ids, row-major.
struct SymbolicFrame {
    int grid = 4;
    std::vector<int> cells;
    int source_index = 0;
};

// Frozen random feature tables standing in for a pretrained visual encoder.
// Patch p of a frame maps to sym_table[cells[p]] + cell_table[p], giving each
// (symbol, position) pair a distinct fixed signature. Never trained.
class FrameFeaturizer {
public:
    FrameFeaturizer(int grid, int alphabet_size, int d_f, std::uint64_t seed);

    int grid() const { return grid_; }
    int alphabet_size() const { return alphabet_; }
    int patch_tokens() const { return grid_ * grid_; }  // P
    int feature_dim() const { return d_f_; }

    // [P, d_f] constant features; validates grid size, cell count and symbols.
    Tensor encode(const SymbolicFrame& f) const;

    Tensor sym_table;   // [alphabet, d_f]
    Tensor cell_table;  // [P, d_f]

private:
    int grid_, alphabet_, d_f_;
};

// Trainable two-layer MLP lifting encoder features into the shared embedding
// space: gelu(x W1 + b1) W2 + b2, widths d_f -> d_e -> d_e.
struct FrameProjector {
    Tensor w1, b1, w2, b2;

    FrameProjector(int d_f, int d_e, std::uint64_t seed);

    int feature_dim() const { return w1.rows(); }
    int embed_dim() const { return w1.cols(); }

    Tensor apply(const Tensor& features) const;  // [P, d_f] -> [P, d_e]

    std::vector<std::pair<std::string, Tensor>> named_parameters();
    void set_trainable(bool trainable);
    void zero_grads();
};

// Projected frame content, tagged with its position in the stream.
struct FrameEmbedding {
    Tensor tokens;  // [P, d_e]
    int source_index = 0;
};

FrameEmbedding embed_frame(const FrameFeaturizer& fe, const FrameProjector& proj,
                           const SymbolicFrame& frame);

}  // namespace iqvic
