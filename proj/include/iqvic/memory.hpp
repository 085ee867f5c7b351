#pragma once

#include <cstdint>
#include <mutex>
#include <vector>

#include "iqvic/compressor.hpp"
#include "json.hpp"

namespace iqvic {

struct MergeEvent {
    int insert_step;    // 1-based count of the insert that overflowed
    int merged_index;   // 0-based position of the surviving (left) neighbor
    double similarity;  // cosine between the merged neighbors
};

// Cosine over flattened entry contents: the merge criterion.
double entry_similarity(const ContextEmbedding& a, const ContextEmbedding& b);

// Fixed-capacity, order-preserving store of compressed frames. Inserting into
// a full memory merges the most similar adjacent pair (elementwise average,
// smallest index on ties) so length never exceeds capacity while coarse
// temporal order survives. Entries are detached copies: plain values, never
// part of any gradient graph. Single writer; snapshot() is safe from other
// threads.
class ContextMemory {
public:
    explicit ContextMemory(int capacity);
    ContextMemory(const ContextMemory& o);
    ContextMemory& operator=(const ContextMemory& o);

    int capacity() const { return capacity_; }
    int size() const;
    bool empty() const { return size() == 0; }
    int insert_count() const;

    // All entries must share the entry shape (dim_error) and the conditioning
    // question hash (consistency_error).
    void insert(const ContextEmbedding& e);

    const ContextEmbedding& entry(int i) const;
    ContextMemory snapshot() const;
    std::vector<MergeEvent> merge_log() const;
    std::uint64_t question_hash() const;  // contract_error when empty

    int token_count() const;  // total rows over all entries
    // Entries stacked oldest-first into one [token_count, d_e] block;
    // contract_error when empty.
    Tensor as_decoder_input() const;

    nlohmann::json dump() const;

private:
    const ContextEmbedding& entry_nolock(int i) const;

    mutable std::mutex mu_;
    int capacity_;
    std::vector<ContextEmbedding> entries_;
    std::vector<MergeEvent> log_;
    int insert_count_ = 0;
};

}  // namespace iqvic
