#include "iqvic/compressor.hpp"

#include <cmath>
#include <cstdio>

namespace iqvic {

ContextTokenLookup::ContextTokenLookup(int context_tokens, int d_e, std::uint64_t seed) {
    if (context_tokens <= 0) throw config_error("context_tokens must be positive");
    if (d_e <= 0) throw config_error("lookup embed dim must be positive");
    std::mt19937_64 rng(seed);
    table = Tensor::randn({context_tokens, d_e}, rng, 0.02);
}

std::vector<std::pair<std::string, Tensor>> ContextTokenLookup::named_parameters() {
    return {{"lookup.table", table}};
}

void ContextTokenLookup::set_trainable(bool trainable) { table.set_requires_grad(trainable); }

void ContextTokenLookup::zero_grads() { table.zero_grad(); }

Tensor assemble_compressor_input(const Tensor& e_q, const Tensor& e_v, const Tensor& e_c0) {
    if (!e_q.defined() || !e_v.defined() || !e_c0.defined())
        throw contract_error("assemble_compressor_input: all three parts are required");
    if (e_q.shape().size() != 2 || e_v.shape().size() != 2 || e_c0.shape().size() != 2 ||
        e_q.cols() != e_v.cols() || e_q.cols() != e_c0.cols())
        throw dim_error("assemble_compressor_input: widths differ: " + shape_str(e_q.shape()) +
                        ", " + shape_str(e_v.shape()) + ", " + shape_str(e_c0.shape()));
    return concat_rows({e_q, e_v, e_c0});
}

ContextEmbedding compress_frame(const TransformerModel& compressor, const TokenSequence& question,
                                const FrameEmbedding& frame, const ContextTokenLookup& lookup,
                                const TrainContext* tc) {
    if (question.empty()) throw contract_error("compress_frame: empty question");
    Tensor e_q = compressor.embed_tokens(question);
    Tensor in = assemble_compressor_input(e_q, frame.tokens, lookup.table);
    int k = e_q.rows(), p = frame.tokens.rows(), c = lookup.context_tokens();
    Tensor h = compressor.forward_embeddings(in, AttentionMask::causal, tc);
    Tensor out = slice_rows(h, k + p, k + p + c);
    return ContextEmbedding{out, frame.source_index, fnv1a(question)};
}

double compression_ratio_percent(int context_tokens, int patch_tokens) {
    if (context_tokens <= 0 || patch_tokens <= 0)
        throw contract_error("compression ratio needs positive token counts");
    return 100.0 * (double)context_tokens / (double)patch_tokens;
}

std::string format_percent(double pct) {
    char buf[32];
    if (pct >= 10.0)
        std::snprintf(buf, sizeof buf, "%.0f%%", pct);
    else
        std::snprintf(buf, sizeof buf, "%.1f%%", pct);
    return buf;
}

}  // namespace iqvic
