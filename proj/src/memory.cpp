#include "iqvic/memory.hpp"

#include <cmath>
#include <cstring>

namespace iqvic {

double entry_similarity(const ContextEmbedding& a, const ContextEmbedding& b) {
    if (!a.tokens.defined() || !b.tokens.defined())
        throw contract_error("entry_similarity: undefined entry");
    return cosine_flat(a.tokens, b.tokens);
}

ContextMemory::ContextMemory(int capacity) : capacity_(capacity) {
    if (capacity <= 0)
        throw config_error("memory capacity must be positive, got " + std::to_string(capacity));
}

ContextMemory::ContextMemory(const ContextMemory& o) {
    std::lock_guard<std::mutex> lk(o.mu_);
    capacity_ = o.capacity_;
    entries_ = o.entries_;
    log_ = o.log_;
    insert_count_ = o.insert_count_;
}

ContextMemory& ContextMemory::operator=(const ContextMemory& o) {
    if (this == &o) return *this;
    ContextMemory copy(o);
    std::lock_guard<std::mutex> lk(mu_);
    capacity_ = copy.capacity_;
    entries_ = std::move(copy.entries_);
    log_ = std::move(copy.log_);
    insert_count_ = copy.insert_count_;
    return *this;
}

int ContextMemory::size() const {
    std::lock_guard<std::mutex> lk(mu_);
    return (int)entries_.size();
}

int ContextMemory::insert_count() const {
    std::lock_guard<std::mutex> lk(mu_);
    return insert_count_;
}

void ContextMemory::insert(const ContextEmbedding& e) {
    if (!e.tokens.defined() || e.tokens.shape().size() != 2)
        throw contract_error("memory insert: entry must hold [C, d_e] tokens");
    std::lock_guard<std::mutex> lk(mu_);
    if (!entries_.empty()) {
        if (e.tokens.shape() != entries_.front().tokens.shape())
            throw dim_error("memory insert: entry shape " + shape_str(e.tokens.shape()) +
                            " does not match resident " +
                            shape_str(entries_.front().tokens.shape()));
        if (e.question_hash != entries_.front().question_hash)
            throw consistency_error("memory insert: entry conditioned on a different question (hash " +
                                    std::to_string(e.question_hash) + " vs resident " +
                                    std::to_string(entries_.front().question_hash) + ")");
    }
    // Detach: the memory owns plain values, never graph nodes.
    entries_.push_back(ContextEmbedding{e.tokens.clone(), e.source_index, e.question_hash});
    ++insert_count_;
    if ((int)entries_.size() <= capacity_) return;

    // Overflow by exactly one: merge the most similar adjacent pair.
    int best = 0;
    double best_sim = entry_similarity(entries_[0], entries_[1]);
    for (int i = 1; i + 1 < (int)entries_.size(); ++i) {
        double s = entry_similarity(entries_[i], entries_[i + 1]);
        if (s > best_sim) {  // strict: ties keep the smallest index
            best_sim = s;
            best = i;
        }
    }
    Tensor& left = entries_[best].tokens;
    const Tensor& right = entries_[best + 1].tokens;
    for (long long i = 0; i < left.size(); ++i)
        left.at(i) = (left.at(i) + right.at(i)) / 2.0;
    // The merged slot keeps the earlier source index: coarse temporal order.
    entries_.erase(entries_.begin() + best + 1);
    log_.push_back(MergeEvent{insert_count_, best, best_sim});
}

const ContextEmbedding& ContextMemory::entry_nolock(int i) const {
    if (i < 0 || i >= (int)entries_.size())
        throw index_error("memory entry " + std::to_string(i) + " out of range for size " +
                          std::to_string(entries_.size()));
    return entries_[i];
}

const ContextEmbedding& ContextMemory::entry(int i) const {
    std::lock_guard<std::mutex> lk(mu_);
    return entry_nolock(i);
}

ContextMemory ContextMemory::snapshot() const { return ContextMemory(*this); }

std::vector<MergeEvent> ContextMemory::merge_log() const {
    std::lock_guard<std::mutex> lk(mu_);
    return log_;
}

std::uint64_t ContextMemory::question_hash() const {
    std::lock_guard<std::mutex> lk(mu_);
    if (entries_.empty()) throw contract_error("question_hash: memory is empty");
    return entries_.front().question_hash;
}

int ContextMemory::token_count() const {
    std::lock_guard<std::mutex> lk(mu_);
    int n = 0;
    for (const ContextEmbedding& e : entries_) n += e.tokens.rows();
    return n;
}

Tensor ContextMemory::as_decoder_input() const {
    std::lock_guard<std::mutex> lk(mu_);
    if (entries_.empty()) throw contract_error("as_decoder_input: memory is empty");
    int d = entries_.front().tokens.cols();
    int total = 0;
    for (const ContextEmbedding& e : entries_) total += e.tokens.rows();
    Tensor out(Shape{total, d});
    long long off = 0;
    for (const ContextEmbedding& e : entries_) {
        std::memcpy(out.data() + off, e.tokens.data(), sizeof(double) * e.tokens.size());
        off += e.tokens.size();
    }
    return out;
}

nlohmann::json ContextMemory::dump() const {
    std::lock_guard<std::mutex> lk(mu_);
    nlohmann::json j;
    j["capacity"] = capacity_;
    j["size"] = entries_.size();
    j["insert_count"] = insert_count_;
    int tokens = 0;
    nlohmann::json entries = nlohmann::json::array();
    for (const ContextEmbedding& e : entries_) {
        double norm = 0.0;
        for (long long i = 0; i < e.tokens.size(); ++i) norm += e.tokens.at(i) * e.tokens.at(i);
        entries.push_back({{"source_index", e.source_index},
                           {"rows", e.tokens.rows()},
                           {"cols", e.tokens.cols()},
                           {"l2_norm", std::sqrt(norm)}});
        tokens += e.tokens.rows();
    }
    j["token_count"] = tokens;
    if (!entries_.empty()) j["question_hash"] = entries_.front().question_hash;
    j["entries"] = entries;
    nlohmann::json merges = nlohmann::json::array();
    for (const MergeEvent& m : log_)
        merges.push_back({{"insert_step", m.insert_step},
                          {"merged_index", m.merged_index},
                          {"similarity", m.similarity}});
    j["merges"] = merges;
    return j;
}

}  // namespace iqvic
