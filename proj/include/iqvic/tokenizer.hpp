#pragma once

#include <map>
#include <string>
#include <vector>

#include "iqvic/error.hpp"

namespace iqvic {

using TokenSequence = std::vector<int>;

// Closed whitespace-delimited vocabulary shared by the compressor and the
// decoder. Layout: [<eos>, none, value, of, ?, k0..k{K-1}, v0..v{V-1}].
struct Vocab {
    static constexpr int eos_id = 0;
    static constexpr int none_id = 1;

    std::vector<std::string> words;
    std::map<std::string, int> index;
    int n_keys = 0;
    int n_values = 0;

    static Vocab kv_vocab(int n_keys, int n_values);

    int size() const { return (int)words.size(); }
    bool contains(const std::string& w) const { return index.count(w) != 0; }
    int id(const std::string& w) const;

    // Splits on whitespace; unknown words raise data_error naming all of them.
    TokenSequence encode(const std::string& text) const;
    std::string decode(const TokenSequence& ids) const;

    int key_token(int k) const;    // id of word "k<k>"
    int value_token(int v) const;  // id of word "v<v>"

    // The fixed question template: "value of k<k> ?"
    TokenSequence question_for_key(int k) const;
};

}  // namespace iqvic
