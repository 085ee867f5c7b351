#include "iqvic/tokenizer.hpp"

#include <sstream>

namespace iqvic {

Vocab Vocab::kv_vocab(int n_keys, int n_values) {
    if (n_keys <= 0 || n_values <= 0)
        throw config_error("vocabulary needs at least one key and one value word");
    Vocab v;
    v.n_keys = n_keys;
    v.n_values = n_values;
    v.words = {"<eos>", "none", "value", "of", "?"};
    for (int i = 0; i < n_keys; ++i) v.words.push_back("k" + std::to_string(i));
    for (int i = 0; i < n_values; ++i) v.words.push_back("v" + std::to_string(i));
    for (int i = 0; i < (int)v.words.size(); ++i) v.index[v.words[i]] = i;
    return v;
}

int Vocab::id(const std::string& w) const {
    auto it = index.find(w);
    if (it == index.end()) throw data_error("unknown vocabulary word: " + w);
    return it->second;
}

TokenSequence Vocab::encode(const std::string& text) const {
    TokenSequence out;
    std::vector<std::string> unknown;
    std::istringstream is(text);
    std::string w;
    while (is >> w) {
        auto it = index.find(w);
        if (it == index.end())
            unknown.push_back(w);
        else
            out.push_back(it->second);
    }
    if (!unknown.empty()) {
        std::string msg = "unknown vocabulary words:";
        for (const std::string& u : unknown) msg += " " + u;
        throw data_error(msg);
    }
    return out;
}

std::string Vocab::decode(const TokenSequence& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= size())
            throw index_error("token id " + std::to_string(ids[i]) + " outside vocabulary of size " +
                              std::to_string(size()));
        if (i) out += " ";
        out += words[ids[i]];
    }
    return out;
}

int Vocab::key_token(int k) const {
    if (k < 0 || k >= n_keys)
        throw index_error("key index " + std::to_string(k) + " outside [0," + std::to_string(n_keys) + ")");
    return 5 + k;
}

int Vocab::value_token(int v) const {
    if (v < 0 || v >= n_values)
        throw index_error("value index " + std::to_string(v) + " outside [0," +
                          std::to_string(n_values) + ")");
    return 5 + n_keys + v;
}

TokenSequence Vocab::question_for_key(int k) const {
    return {id("value"), id("of"), key_token(k), id("?")};
}

}  // namespace iqvic
