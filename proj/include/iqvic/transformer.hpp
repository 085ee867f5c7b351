#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "iqvic/tensor.hpp"
#include "iqvic/tokenizer.hpp"

namespace iqvic {

struct TransformerConfig {
    int d_model = 64;
    int n_heads = 4;
    int n_layers = 2;
    int d_ff = 256;
    int vocab_size = 128;
    int max_positions = 256;
    int lora_rank = 4;  // 0 disables adapters
    double lora_alpha = 16.0;
    double lora_dropout = 0.05;
    double ln_eps = 1e-5;

    void validate() const;  // config_error on bad values
    int head_dim() const { return d_model / n_heads; }
};

// Per-call training knobs. Inference passes nullptr: no dropout, no rng.
struct TrainContext {
    double dropout_p = 0.0;
    std::mt19937_64* rng = nullptr;
};

struct LoraAdapter {
    Tensor a;  // [d, r]
    Tensor b;  // [r, d]; zero at init so the adapted map equals the base map
};

struct TransformerLayer {
    Tensor ln1_g, ln1_b;
    Tensor wq, wk, wv, wo;  // [d, d], no bias
    std::optional<LoraAdapter> lora_q, lora_v;
    Tensor ln2_g, ln2_b;
    Tensor w_ff1, b_ff1;  // [d, d_ff], [d_ff]
    Tensor w_ff2, b_ff2;  // [d_ff, d], [d]
};

enum class AttentionMask { causal, full };

// Pre-norm causal transformer over continuous input rows. Token ids only enter
// through embed_tokens; every forward works on [n, d_model] rows, so questions,
// frame tokens and memory entries mix freely in one sequence. The readout is
// weight-tied to the token embedding.
class TransformerModel {
public:
    TransformerModel(TransformerConfig cfg, std::uint64_t seed);

    const TransformerConfig& config() const { return cfg_; }

    // [K, d] rows of the token table; positions are not added here.
    Tensor embed_tokens(const TokenSequence& ids) const;

    // rows [n, d_model] with 1 <= n <= max_positions (capacity_error otherwise).
    // Adds learned absolute positions for offsets 0..n-1, then runs all blocks
    // and the final norm. Output [n, d_model].
    Tensor forward_embeddings(const Tensor& rows, AttentionMask mask,
                              const TrainContext* tc = nullptr) const;

    Tensor logits(const Tensor& hidden) const;  // hidden x token_embedding^T

    // Greedy continuation conditioned on continuous prefix rows. Appends the
    // argmax token (smallest index wins ties) until stop_id or the budget;
    // stop_id is not part of the result.
    TokenSequence greedy_decode(const Tensor& prefix_rows, int max_new_tokens, int stop_id) const;

    std::vector<std::pair<std::string, Tensor>> named_parameters();
    std::vector<Tensor> adapter_parameters();
    std::vector<Tensor> base_parameters();
    // frozen: base weights stop accumulating gradient; adapters keep training.
    void set_frozen_base(bool frozen);
    bool frozen_base() const { return frozen_base_; }
    void set_all_trainable(bool trainable);
    void zero_grads();

    Tensor token_embedding;     // [vocab_size, d_model]
    Tensor position_embedding;  // [max_positions, d_model]
    std::vector<TransformerLayer> layers;
    Tensor lnf_g, lnf_b;

private:
    TransformerConfig cfg_;
    bool frozen_base_ = false;
};

// Index of the largest entry in a row; the smallest index wins ties.
int argmax_row(const Tensor& t, int row);

}  // namespace iqvic
