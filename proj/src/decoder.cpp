#include "iqvic/decoder.hpp"

namespace iqvic {

DecoderInput build_decoder_input(const TransformerModel& decoder, const TokenSequence& question,
                                 const ContextMemory& memory, ConcatOrder order) {
    if (question.empty()) throw contract_error("build_decoder_input: empty question");
    if (memory.empty()) throw contract_error("build_decoder_input: memory is empty");
    std::uint64_t qh = fnv1a(question);
    if (memory.question_hash() != qh)
        throw consistency_error("build_decoder_input: memory was built under a different question");
    Tensor e_q = decoder.embed_tokens(question);
    Tensor e_m = memory.as_decoder_input();
    if (e_m.cols() != e_q.cols())
        throw dim_error("build_decoder_input: memory width " + std::to_string(e_m.cols()) +
                        " does not match decoder width " + std::to_string(e_q.cols()));
    Tensor prefix = order == ConcatOrder::question_first ? concat_rows({e_q, e_m})
                                                         : concat_rows({e_m, e_q});
    return DecoderInput{prefix, question, qh};
}

Answer decode_answer(const TransformerModel& decoder, const DecoderInput& input,
                     int max_new_tokens, const Vocab& vocab) {
    TokenSequence toks = decoder.greedy_decode(input.prefix, max_new_tokens, Vocab::eos_id);
    return Answer{toks, vocab.decode(toks)};
}

StreamResult run_stream(const CompressFn& compress, const TransformerModel& decoder,
                        const std::vector<SymbolicFrame>& frames, const TokenSequence& question,
                        int memory_capacity, const Vocab& vocab, const StreamOptions& opts) {
    if (frames.empty()) throw contract_error("run_stream: no frames");
    StreamResult res{Answer{}, {}, StreamStats{}, ContextMemory(memory_capacity)};
    for (const SymbolicFrame& f : frames) {
        res.memory.insert(compress(f));
        if (opts.incremental) {
            ContextMemory snap = res.memory.snapshot();
            DecoderInput in = build_decoder_input(decoder, question, snap, opts.order);
            res.incremental.push_back(decode_answer(decoder, in, opts.max_new_tokens, vocab));
        }
    }
    DecoderInput in = build_decoder_input(decoder, question, res.memory, opts.order);
    res.final_answer = decode_answer(decoder, in, opts.max_new_tokens, vocab);
    res.stats.frames = (int)frames.size();
    res.stats.entries = res.memory.size();
    res.stats.token_count = res.memory.token_count();
    res.stats.merges = (int)res.memory.merge_log().size();
    return res;
}

}  // namespace iqvic
