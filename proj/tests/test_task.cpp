#include "iqvic/task.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include "doctest.h"
#include "json.hpp"

using namespace iqvic;

namespace {

TaskOptions small_opts() {
    TaskOptions o;
    o.grid = 4;
    o.alphabet = FrameAlphabet{};  // 16 keys, 16 values, 8 distractors
    o.noise_cells = 4;
    return o;
}

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) : path("/tmp/iqvic_test_" + name) {}
    ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("stream samples obey the task contract") {
    Vocab vocab = Vocab::kv_vocab(16, 16);
    TaskOptions opt = small_opts();
    auto samples = gen_kv_stream(50, 8, vocab, opt, 7);
    REQUIRE(samples.size() == 50);
    FrameAlphabet a = opt.alphabet;
    for (const QASample& s : samples) {
        REQUIRE(s.frames.size() == 8);
        std::set<int> keys, values;
        int asked_key = -1, gold_value = -1;
        REQUIRE(s.question.size() == 4);
        int qtok = s.question[2];
        for (std::size_t t = 0; t < s.frames.size(); ++t) {
            const SymbolicFrame& f = s.frames[t];
            CHECK(f.source_index == (int)t);
            int key_sym = f.cells[0], val_sym = f.cells[1];
            CHECK(key_sym >= 1);
            CHECK(key_sym <= a.n_keys);
            CHECK(a.is_value(val_sym));
            keys.insert(key_sym);
            values.insert(val_sym);
            // Noise cells hold distractors; the rest is blank.
            for (int cidx = 2; cidx < 6; ++cidx) CHECK(f.cells[cidx] >= 1 + a.n_keys + a.n_values);
            for (int cidx = 6; cidx < 16; ++cidx) CHECK(f.cells[cidx] == FrameAlphabet::blank);
            if (vocab.key_token(key_sym - 1) == qtok) {
                asked_key = key_sym;
                gold_value = val_sym;
            }
        }
        CHECK(keys.size() == 8);    // distinct keys
        CHECK(values.size() == 8);  // distinct values
        REQUIRE(asked_key != -1);   // the question names a shown key
        REQUIRE(s.answer.size() == 1);
        CHECK(s.answer[0] == vocab.value_token(a.value_of(gold_value)));
    }
}

TEST_CASE("stream generation is deterministic and per-index stable") {
    Vocab vocab = Vocab::kv_vocab(16, 16);
    TaskOptions opt = small_opts();
    auto a = gen_kv_stream(20, 6, vocab, opt, 99);
    auto b = gen_kv_stream(20, 6, vocab, opt, 99);
    for (int i = 0; i < 20; ++i) {
        CHECK(a[i].question == b[i].question);
        CHECK(a[i].answer == b[i].answer);
        for (std::size_t t = 0; t < a[i].frames.size(); ++t)
            CHECK(a[i].frames[t].cells == b[i].frames[t].cells);
    }
    // Growing the count leaves earlier samples untouched.
    auto c = gen_kv_stream(40, 6, vocab, opt, 99);
    for (int i = 0; i < 20; ++i) CHECK(c[i].frames[0].cells == a[i].frames[0].cells);
    // A different seed changes content.
    auto d = gen_kv_stream(20, 6, vocab, opt, 100);
    int same = 0;
    for (int i = 0; i < 20; ++i)
        if (d[i].frames[0].cells == a[i].frames[0].cells) ++same;
    CHECK(same < 3);
}

TEST_CASE("stream generation validates its limits") {
    Vocab vocab = Vocab::kv_vocab(4, 4);
    TaskOptions opt = small_opts();
    opt.alphabet.n_keys = 4;
    opt.alphabet.n_values = 4;
    CHECK_NOTHROW(gen_kv_stream(2, 4, vocab, opt, 1));
    CHECK_THROWS_AS(gen_kv_stream(2, 5, vocab, opt, 1), config_error);
    CHECK_THROWS_AS(gen_kv_stream(0, 4, vocab, opt, 1), config_error);
    // Vocab/alphabet mismatch.
    Vocab big = Vocab::kv_vocab(16, 16);
    CHECK_THROWS_AS(gen_kv_stream(2, 4, big, opt, 1), config_error);
    // Grid too small for pairs plus noise.
    TaskOptions tiny = small_opts();
    tiny.grid = 2;
    tiny.noise_cells = 4;
    CHECK_THROWS_AS(gen_kv_stream(2, 4, vocab, tiny, 1), config_error);
}

TEST_CASE("single-frame samples mix present-key and absent-key questions") {
    Vocab vocab = Vocab::kv_vocab(16, 16);
    TaskOptions opt = small_opts();
    auto samples = gen_single_frame(400, 4, 0.25, vocab, opt, 11);
    FrameAlphabet a = opt.alphabet;
    int none_count = 0;
    for (const QASample& s : samples) {
        REQUIRE(s.frames.size() == 1);
        const SymbolicFrame& f = s.frames[0];
        // Recover the pairs from fixed cells.
        std::set<int> present_keys;
        std::map<int, int> pair_value;  // key sym -> value sym
        int j = 0;
        while (j < 8 && f.cells[2 * j] >= 1 && f.cells[2 * j] <= a.n_keys) {
            present_keys.insert(f.cells[2 * j]);
            REQUIRE(a.is_value(f.cells[2 * j + 1]));
            pair_value[f.cells[2 * j]] = f.cells[2 * j + 1];
            ++j;
        }
        CHECK(j >= 1);
        CHECK(j <= 4);
        int qkey_tok = s.question[2];
        int qkey_sym = 1 + (qkey_tok - 5);  // word k<i> -> symbol 1+i
        REQUIRE(s.answer.size() == 1);
        if (s.answer[0] == Vocab::none_id) {
            ++none_count;
            CHECK(present_keys.count(qkey_sym) == 0);
        } else {
            REQUIRE(present_keys.count(qkey_sym) == 1);
            CHECK(s.answer[0] == vocab.value_token(a.value_of(pair_value[qkey_sym])));
        }
    }
    // ~25% none questions.
    CHECK(none_count > 50);
    CHECK(none_count < 150);
}

TEST_CASE("dataset files round-trip exactly") {
    Vocab vocab = Vocab::kv_vocab(16, 16);
    TaskOptions opt = small_opts();
    Dataset ds;
    ds.kind = "stream";
    ds.grid = opt.grid;
    ds.alphabet = opt.alphabet;
    ds.vocab = vocab;
    ds.seed = 31;
    ds.samples = gen_kv_stream(25, 5, vocab, opt, 31);

    TempFile f("roundtrip.jsonl");
    save_dataset(f.path, ds);
    Dataset back = load_dataset(f.path);
    CHECK(back.kind == "stream");
    CHECK(back.grid == 4);
    CHECK(back.seed == 31);
    CHECK(back.vocab.words == vocab.words);
    REQUIRE(back.samples.size() == 25);
    for (int i = 0; i < 25; ++i) {
        CHECK(back.samples[i].sample_index == ds.samples[i].sample_index);
        CHECK(back.samples[i].question == ds.samples[i].question);
        CHECK(back.samples[i].answer == ds.samples[i].answer);
        REQUIRE(back.samples[i].frames.size() == ds.samples[i].frames.size());
        for (std::size_t t = 0; t < back.samples[i].frames.size(); ++t)
            CHECK(back.samples[i].frames[t].cells == ds.samples[i].frames[t].cells);
    }

    // Saving the reloaded dataset produces identical bytes.
    TempFile g("roundtrip2.jsonl");
    save_dataset(g.path, back);
    std::ifstream f1(f.path), f2(g.path);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);
}

TEST_CASE("malformed dataset files are rejected with clear errors") {
    CHECK_THROWS_AS(load_dataset("/tmp/iqvic_no_such_file.jsonl"), data_error);

    TempFile f("malformed.jsonl");
    {
        std::ofstream os(f.path);
        os << "not json at all\n";
    }
    CHECK_THROWS_AS(load_dataset(f.path), data_error);

    {
        std::ofstream os(f.path);
        os << "{\"format\":\"something-else\"}\n";
    }
    CHECK_THROWS_AS(load_dataset(f.path), data_error);

    // Valid header, sample with an out-of-alphabet symbol.
    Vocab vocab = Vocab::kv_vocab(2, 2);
    {
        Dataset ds;
        ds.kind = "single_frame";
        ds.grid = 2;
        ds.alphabet = FrameAlphabet{2, 2, 1};
        ds.vocab = vocab;
        ds.samples = gen_single_frame(1, 1, 0.0, vocab, TaskOptions{2, FrameAlphabet{2, 2, 1}, 1}, 1);
        save_dataset(f.path, ds);
        // Corrupt: append a sample with a bogus symbol (alphabet size is 6).
        std::ofstream os(f.path, std::ios::app);
        os << "{\"index\":1,\"frames\":[[9,0,0,0]],\"question\":\"value of k0 ?\",\"answer\":\"v0\"}\n";
    }
    CHECK_THROWS_AS(load_dataset(f.path), data_error);

    // Count mismatch.
    {
        std::ofstream os(f.path);
        nlohmann::json h = {{"format", "iqvic-qa-v1"}, {"kind", "stream"}, {"grid", 2},
                            {"alphabet", {{"n_keys", 2}, {"n_values", 2}, {"n_distract", 1}}},
                            {"vocab", vocab.words}, {"seed", 0}, {"count", 5}};
        os << h.dump() << "\n";
    }
    CHECK_THROWS_AS(load_dataset(f.path), data_error);

    // Unknown question word.
    {
        std::ofstream os(f.path);
        nlohmann::json h = {{"format", "iqvic-qa-v1"}, {"kind", "stream"}, {"grid", 2},
                            {"alphabet", {{"n_keys", 2}, {"n_values", 2}, {"n_distract", 1}}},
                            {"vocab", vocab.words}, {"seed", 0}, {"count", 1}};
        os << h.dump() << "\n";
        os << "{\"index\":0,\"frames\":[[1,3,0,0]],\"question\":\"value of zebra ?\",\"answer\":\"v0\"}\n";
    }
    CHECK_THROWS_AS(load_dataset(f.path), data_error);
}
