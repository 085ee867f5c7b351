#include "iqvic/transformer.hpp"

#include <cmath>

namespace iqvic {

void TransformerConfig::validate() const {
    if (d_model <= 0) throw config_error("d_model must be positive");
    if (n_heads <= 0) throw config_error("n_heads must be positive");
    if (d_model % n_heads != 0)
        throw config_error("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                           std::to_string(n_heads));
    if (n_layers <= 0) throw config_error("n_layers must be positive");
    if (d_ff <= 0) throw config_error("d_ff must be positive");
    if (vocab_size < 2) throw config_error("vocab_size must be at least 2");
    if (max_positions <= 0) throw config_error("max_positions must be positive");
    if (lora_rank < 0) throw config_error("lora_rank must be non-negative");
    if (lora_rank > 0 && lora_alpha <= 0.0) throw config_error("lora_alpha must be positive");
    if (lora_dropout < 0.0 || lora_dropout >= 1.0)
        throw config_error("lora_dropout must be in [0,1)");
    if (ln_eps <= 0.0) throw config_error("ln_eps must be positive");
}

namespace {

Tensor init_linear(int d_in, int d_out, std::mt19937_64& rng) {
    return Tensor::randn({d_in, d_out}, rng, 1.0 / std::sqrt((double)d_in));
}

LoraAdapter init_adapter(int d, int r, std::mt19937_64& rng) {
    // A is small-random, B is zero: the adapted projection starts exactly equal
    // to the base projection.
    return LoraAdapter{Tensor::randn({d, r}, rng, 0.02), Tensor::zeros({r, d})};
}

Tensor project(const Tensor& x, const Tensor& w, const std::optional<LoraAdapter>& ad,
               const TransformerConfig& cfg, const TrainContext* tc) {
    if (!ad) return matmul(x, w);
    double p = tc ? tc->dropout_p : 0.0;
    return apply_lora(x, w, ad->a, ad->b, cfg.lora_alpha, cfg.lora_rank, p, tc ? tc->rng : nullptr);
}

}  // namespace

TransformerModel::TransformerModel(TransformerConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    int d = cfg_.d_model;
    // Fixed draw order; changing it would silently change every seeded run.
    token_embedding = Tensor::randn({cfg_.vocab_size, d}, rng, 0.08);
    position_embedding = Tensor::randn({cfg_.max_positions, d}, rng, 0.08);
    layers.resize(cfg_.n_layers);
    for (TransformerLayer& L : layers) {
        L.ln1_g = Tensor::full({d}, 1.0);
        L.ln1_b = Tensor::zeros({d});
        L.wq = init_linear(d, d, rng);
        L.wk = init_linear(d, d, rng);
        L.wv = init_linear(d, d, rng);
        L.wo = init_linear(d, d, rng);
        L.ln2_g = Tensor::full({d}, 1.0);
        L.ln2_b = Tensor::zeros({d});
        L.w_ff1 = init_linear(d, cfg_.d_ff, rng);
        L.b_ff1 = Tensor::zeros({cfg_.d_ff});
        L.w_ff2 = init_linear(cfg_.d_ff, d, rng);
        L.b_ff2 = Tensor::zeros({d});
        if (cfg_.lora_rank > 0) {
            L.lora_q = init_adapter(d, cfg_.lora_rank, rng);
            L.lora_v = init_adapter(d, cfg_.lora_rank, rng);
        }
    }
    lnf_g = Tensor::full({d}, 1.0);
    lnf_b = Tensor::zeros({d});
}

Tensor TransformerModel::embed_tokens(const TokenSequence& ids) const {
    if (ids.empty()) throw contract_error("embed_tokens: empty token sequence");
    return embedding_rows(token_embedding, ids);
}

Tensor TransformerModel::forward_embeddings(const Tensor& rows, AttentionMask mask,
                                            const TrainContext* tc) const {
    if (!rows.defined() || rows.shape().size() != 2 || rows.cols() != cfg_.d_model)
        throw dim_error("forward_embeddings: input must be [n," + std::to_string(cfg_.d_model) +
                        "], got " + (rows.defined() ? shape_str(rows.shape()) : "undefined"));
    int n = rows.rows();
    if (n > cfg_.max_positions)
        throw capacity_error("sequence of " + std::to_string(n) + " rows exceeds max_positions " +
                             std::to_string(cfg_.max_positions));
    Tensor x = add(rows, slice_rows(position_embedding, 0, n));
    int dh = cfg_.head_dim();
    double inv_sqrt_dh = 1.0 / std::sqrt((double)dh);
    for (const TransformerLayer& L : layers) {
        Tensor h = layer_norm(x, L.ln1_g, L.ln1_b, cfg_.ln_eps);
        Tensor q = project(h, L.wq, L.lora_q, cfg_, tc);
        Tensor k = matmul(h, L.wk);
        Tensor v = project(h, L.wv, L.lora_v, cfg_, tc);
        std::vector<Tensor> head_ctx;
        head_ctx.reserve(cfg_.n_heads);
        for (int hd = 0; hd < cfg_.n_heads; ++hd) {
            Tensor qh = slice_cols(q, hd * dh, (hd + 1) * dh);
            Tensor kh = slice_cols(k, hd * dh, (hd + 1) * dh);
            Tensor vh = slice_cols(v, hd * dh, (hd + 1) * dh);
            Tensor s = scale(matmul_nt(qh, kh), inv_sqrt_dh);
            if (mask == AttentionMask::causal) s = causal_mask_fill(s);
            Tensor p = softmax_lastdim(s);
            head_ctx.push_back(matmul(p, vh));
        }
        Tensor attn = matmul(concat_cols(head_ctx), L.wo);
        x = add(x, attn);
        Tensor h2 = layer_norm(x, L.ln2_g, L.ln2_b, cfg_.ln_eps);
        Tensor m = gelu(add_row_bias(matmul(h2, L.w_ff1), L.b_ff1));
        Tensor mlp = add_row_bias(matmul(m, L.w_ff2), L.b_ff2);
        x = add(x, mlp);
    }
    return layer_norm(x, lnf_g, lnf_b, cfg_.ln_eps);
}

Tensor TransformerModel::logits(const Tensor& hidden) const {
    return matmul_nt(hidden, token_embedding);
}

TokenSequence TransformerModel::greedy_decode(const Tensor& prefix_rows, int max_new_tokens,
                                              int stop_id) const {
    if (max_new_tokens < 0) throw contract_error("greedy_decode: negative token budget");
    if (stop_id < 0 || stop_id >= cfg_.vocab_size)
        throw index_error("greedy_decode: stop_id " + std::to_string(stop_id) +
                          " outside vocabulary of size " + std::to_string(cfg_.vocab_size));
    if (!prefix_rows.defined() || prefix_rows.shape().size() != 2 || prefix_rows.rows() < 1)
        throw contract_error("greedy_decode: prefix must have at least one row");
    if (prefix_rows.rows() + max_new_tokens > cfg_.max_positions)
        throw capacity_error("greedy_decode: prefix of " + std::to_string(prefix_rows.rows()) +
                             " rows plus budget " + std::to_string(max_new_tokens) +
                             " exceeds max_positions " + std::to_string(cfg_.max_positions));
    TokenSequence out;
    Tensor cur = prefix_rows;
    for (int step = 0; step < max_new_tokens; ++step) {
        Tensor h = forward_embeddings(cur, AttentionMask::causal);
        Tensor lg = logits(slice_rows(h, cur.rows() - 1, cur.rows()));
        int tok = argmax_row(lg, 0);
        if (tok == stop_id) break;
        out.push_back(tok);
        cur = concat_rows({cur, embedding_rows(token_embedding, {tok})});
    }
    return out;
}

std::vector<std::pair<std::string, Tensor>> TransformerModel::named_parameters() {
    std::vector<std::pair<std::string, Tensor>> ps;
    ps.emplace_back("token_embedding", token_embedding);
    ps.emplace_back("position_embedding", position_embedding);
    for (std::size_t i = 0; i < layers.size(); ++i) {
        std::string p = "layer" + std::to_string(i) + ".";
        TransformerLayer& L = layers[i];
        ps.emplace_back(p + "ln1_g", L.ln1_g);
        ps.emplace_back(p + "ln1_b", L.ln1_b);
        ps.emplace_back(p + "wq", L.wq);
        ps.emplace_back(p + "wk", L.wk);
        ps.emplace_back(p + "wv", L.wv);
        ps.emplace_back(p + "wo", L.wo);
        if (L.lora_q) {
            ps.emplace_back(p + "lora_q.a", L.lora_q->a);
            ps.emplace_back(p + "lora_q.b", L.lora_q->b);
        }
        if (L.lora_v) {
            ps.emplace_back(p + "lora_v.a", L.lora_v->a);
            ps.emplace_back(p + "lora_v.b", L.lora_v->b);
        }
        ps.emplace_back(p + "ln2_g", L.ln2_g);
        ps.emplace_back(p + "ln2_b", L.ln2_b);
        ps.emplace_back(p + "w_ff1", L.w_ff1);
        ps.emplace_back(p + "b_ff1", L.b_ff1);
        ps.emplace_back(p + "w_ff2", L.w_ff2);
        ps.emplace_back(p + "b_ff2", L.b_ff2);
    }
    ps.emplace_back("lnf_g", lnf_g);
    ps.emplace_back("lnf_b", lnf_b);
    return ps;
}

std::vector<Tensor> TransformerModel::adapter_parameters() {
    std::vector<Tensor> ps;
    for (TransformerLayer& L : layers) {
        if (L.lora_q) {
            ps.push_back(L.lora_q->a);
            ps.push_back(L.lora_q->b);
        }
        if (L.lora_v) {
            ps.push_back(L.lora_v->a);
            ps.push_back(L.lora_v->b);
        }
    }
    return ps;
}

std::vector<Tensor> TransformerModel::base_parameters() {
    std::vector<Tensor> ps;
    for (auto& [name, t] : named_parameters())
        if (name.find("lora") == std::string::npos) ps.push_back(t);
    return ps;
}

void TransformerModel::set_frozen_base(bool frozen) {
    for (Tensor& t : base_parameters()) t.set_requires_grad(!frozen);
    for (Tensor& t : adapter_parameters()) t.set_requires_grad(true);
    frozen_base_ = frozen;
}

void TransformerModel::set_all_trainable(bool trainable) {
    for (auto& [name, t] : named_parameters()) t.set_requires_grad(trainable);
    frozen_base_ = false;
}

void TransformerModel::zero_grads() {
    for (auto& [name, t] : named_parameters()) t.zero_grad();
}

int argmax_row(const Tensor& t, int row) {
    if (t.shape().size() != 2) throw dim_error("argmax_row needs a rank-2 tensor");
    if (row < 0 || row >= t.rows()) throw index_error("argmax_row: row out of range");
    int best = 0;
    double best_v = t.at(row, 0);
    for (int c = 1; c < t.cols(); ++c) {
        if (t.at(row, c) > best_v) {
            best_v = t.at(row, c);
            best = c;
        }
    }
    return best;
}

}  // namespace iqvic
