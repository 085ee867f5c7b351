#include "iqvic/transformer.hpp"

#include <cmath>
#include <cstring>
#include <map>

#include "doctest.h"
#include "grad_check.hpp"

using namespace iqvic;

namespace {

TransformerConfig tiny_config() {
    TransformerConfig c;
    c.d_model = 8;
    c.n_heads = 2;
    c.n_layers = 1;
    c.d_ff = 16;
    c.vocab_size = 10;
    c.max_positions = 8;
    c.lora_rank = 2;
    c.lora_alpha = 16.0;
    c.lora_dropout = 0.0;
    return c;
}

// Copies every identically-named parameter from src into dst.
void copy_common_params(TransformerModel& src, TransformerModel& dst) {
    std::map<std::string, Tensor> by_name;
    for (auto& [n, t] : src.named_parameters()) by_name.emplace(n, t);
    for (auto& [n, t] : dst.named_parameters()) {
        auto it = by_name.find(n);
        if (it == by_name.end()) continue;
        REQUIRE(it->second.shape() == t.shape());
        std::memcpy(t.data(), it->second.data(), sizeof(double) * t.size());
    }
}

}  // namespace

// ==================== vocabulary ====================

TEST_CASE("kv vocabulary layout is frozen") {
    Vocab v = Vocab::kv_vocab(16, 16);
    CHECK(v.size() == 37);
    CHECK(v.words[Vocab::eos_id] == "<eos>");
    CHECK(v.words[Vocab::none_id] == "none");
    CHECK(v.id("value") == 2);
    CHECK(v.id("of") == 3);
    CHECK(v.id("?") == 4);
    CHECK(v.key_token(0) == 5);
    CHECK(v.key_token(3) == 8);
    CHECK(v.value_token(0) == 21);
    CHECK(v.question_for_key(3) == TokenSequence{2, 3, 8, 4});
    CHECK(v.decode(v.question_for_key(3)) == "value of k3 ?");
}

TEST_CASE("encode round-trips and reports all unknown words") {
    Vocab v = Vocab::kv_vocab(4, 4);
    TokenSequence ids = v.encode("value of k2 ?");
    CHECK(v.decode(ids) == "value of k2 ?");
    CHECK_THROWS_WITH_AS(v.encode("value of q9 zap"), "unknown vocabulary words: q9 zap", data_error);
    CHECK_THROWS_AS(v.decode({99}), index_error);
    CHECK_THROWS_AS(v.key_token(4), index_error);
    CHECK_THROWS_AS(Vocab::kv_vocab(0, 4), config_error);
}

// ==================== configuration ====================

TEST_CASE("config validation catches bad combinations") {
    TransformerConfig c = tiny_config();
    CHECK_NOTHROW(c.validate());
    c.n_heads = 3;  // 8 % 3 != 0
    CHECK_THROWS_AS(c.validate(), config_error);
    c = tiny_config();
    c.lora_rank = -1;
    CHECK_THROWS_AS(c.validate(), config_error);
    c = tiny_config();
    c.lora_dropout = 1.0;
    CHECK_THROWS_AS(c.validate(), config_error);
    c = tiny_config();
    c.vocab_size = 1;
    CHECK_THROWS_AS(c.validate(), config_error);

    // The reference operating point must be accepted.
    TransformerConfig paper;
    paper.d_model = 64;
    paper.n_heads = 4;
    paper.n_layers = 2;
    paper.d_ff = 256;
    paper.vocab_size = 128;
    paper.lora_rank = 64;
    paper.lora_alpha = 16.0;
    paper.lora_dropout = 0.05;
    CHECK_NOTHROW(paper.validate());
}

// ==================== forward ====================

TEST_CASE("seeded construction and forward are deterministic") {
    TransformerModel m1(tiny_config(), 99);
    TransformerModel m2(tiny_config(), 99);
    for (std::size_t i = 0; i < m1.named_parameters().size(); ++i) {
        Tensor a = m1.named_parameters()[i].second;
        Tensor b = m2.named_parameters()[i].second;
        CHECK(std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0);
    }
    std::mt19937_64 rng(5);
    Tensor x = Tensor::randn({5, 8}, rng, 0.5);
    Tensor y1 = m1.forward_embeddings(x, AttentionMask::causal);
    Tensor y2 = m2.forward_embeddings(x, AttentionMask::causal);
    CHECK(y1.rows() == 5);
    CHECK(y1.cols() == 8);
    CHECK(std::memcmp(y1.data(), y2.data(), sizeof(double) * y1.size()) == 0);

    TransformerModel m3(tiny_config(), 100);
    Tensor y3 = m3.forward_embeddings(x, AttentionMask::causal);
    CHECK(std::memcmp(y1.data(), y3.data(), sizeof(double) * y1.size()) != 0);
}

TEST_CASE("embed_tokens gathers table rows without positions") {
    TransformerModel m(tiny_config(), 1);
    Tensor e = m.embed_tokens({3, 3, 7});
    CHECK(e.rows() == 3);
    for (int c = 0; c < 8; ++c) {
        CHECK(e.at(0, c) == m.token_embedding.at(3, c));
        CHECK(e.at(1, c) == m.token_embedding.at(3, c));
        CHECK(e.at(2, c) == m.token_embedding.at(7, c));
    }
    CHECK_THROWS_AS(m.embed_tokens({10}), index_error);
    CHECK_THROWS_AS(m.embed_tokens({}), contract_error);
}

TEST_CASE("sequences beyond max_positions are rejected") {
    TransformerModel m(tiny_config(), 1);
    std::mt19937_64 rng(2);
    Tensor ok = Tensor::randn({8, 8}, rng);
    CHECK_NOTHROW(m.forward_embeddings(ok, AttentionMask::causal));
    Tensor too_long = Tensor::randn({9, 8}, rng);
    CHECK_THROWS_AS(m.forward_embeddings(too_long, AttentionMask::causal), capacity_error);
    Tensor wrong_width = Tensor::randn({4, 7}, rng);
    CHECK_THROWS_AS(m.forward_embeddings(wrong_width, AttentionMask::causal), dim_error);
}

TEST_CASE("causal forward: changing a suffix row never changes prefix outputs") {
    TransformerModel m(tiny_config(), 7);
    std::mt19937_64 rng(13);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor a = Tensor::randn({6, 8}, rng, 0.7);
        Tensor b = a.clone();
        int j = 1 + (int)(splitmix64(trial) % 5);  // prefix length in [1,5]
        for (int r = j; r < 6; ++r)
            for (int c = 0; c < 8; ++c) b.at(r, c) += 0.37 * (trial + 1);
        Tensor ya = m.forward_embeddings(a, AttentionMask::causal);
        Tensor yb = m.forward_embeddings(b, AttentionMask::causal);
        CHECK(std::memcmp(ya.data(), yb.data(), sizeof(double) * j * 8) == 0);
        // And the full mask does leak: suffix change reaches row 0.
        Tensor fa = m.forward_embeddings(a, AttentionMask::full);
        Tensor fb = m.forward_embeddings(b, AttentionMask::full);
        CHECK(std::memcmp(fa.data(), fb.data(), sizeof(double) * 8) != 0);
    }
}

TEST_CASE("logits are tied to the token embedding") {
    TransformerModel m(tiny_config(), 3);
    std::mt19937_64 rng(4);
    Tensor h = Tensor::randn({2, 8}, rng);
    Tensor lg = m.logits(h);
    CHECK(lg.rows() == 2);
    CHECK(lg.cols() == 10);
    double manual = 0.0;
    for (int c = 0; c < 8; ++c) manual += h.at(1, c) * m.token_embedding.at(6, c);
    CHECK(lg.at(1, 6) == doctest::Approx(manual).epsilon(1e-15));
}

// ==================== greedy decode ====================

TEST_CASE("greedy decode is deterministic, bounded, and respects stop") {
    TransformerModel m(tiny_config(), 21);
    Tensor prefix = m.embed_tokens({1, 2, 3});
    TokenSequence a = m.greedy_decode(prefix, 4, 0);
    TokenSequence b = m.greedy_decode(prefix, 4, 0);
    CHECK(a == b);
    CHECK((int)a.size() <= 4);
    CHECK(m.greedy_decode(prefix, 0, 0).empty());

    // Using the first predicted token as the stop id yields an empty answer.
    TokenSequence first = m.greedy_decode(prefix, 1, 9);
    if (!first.empty()) CHECK(m.greedy_decode(prefix, 4, first[0]).empty());

    CHECK_THROWS_AS(m.greedy_decode(prefix, 6, 0), capacity_error);  // 3 + 6 > 8
    CHECK_THROWS_AS(m.greedy_decode(prefix, 2, 10), index_error);
}

TEST_CASE("argmax breaks ties toward the smallest index") {
    Tensor t(Shape{1, 4}, {1.0, 3.0, 3.0, 2.0});
    CHECK(argmax_row(t, 0) == 1);
    Tensor u(Shape{1, 3}, {5.0, 5.0, 5.0});
    CHECK(argmax_row(u, 0) == 0);
}

// ==================== adapters and freezing ====================

TEST_CASE("fresh adapters leave the model identical to its base") {
    TransformerConfig with = tiny_config();
    TransformerConfig without = tiny_config();
    without.lora_rank = 0;
    TransformerModel adapted(with, 31);
    TransformerModel base(without, 555);
    copy_common_params(adapted, base);
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor x = Tensor::randn({5, 8}, rng, 0.6);
        Tensor ya = adapted.forward_embeddings(x, AttentionMask::causal);
        Tensor yb = base.forward_embeddings(x, AttentionMask::causal);
        CHECK(std::memcmp(ya.data(), yb.data(), sizeof(double) * ya.size()) == 0);
    }
}

TEST_CASE("frozen base accumulates no gradient; adapters do") {
    TransformerModel m(tiny_config(), 17);
    m.set_frozen_base(true);
    CHECK(m.frozen_base());
    std::mt19937_64 rng(6);
    Tensor x = Tensor::randn({4, 8}, rng, 0.5);
    {
        Tape tape;
        Tensor h = m.forward_embeddings(x, AttentionMask::causal);
        Tensor loss = cross_entropy(m.logits(h), {1, 2, 3, 4}, {1, 1, 1, 1});
        tape.backward(loss);
    }
    for (Tensor& t : m.base_parameters()) CHECK(!t.has_grad());
    double adapter_mag = 0.0;
    for (Tensor& t : m.adapter_parameters())
        for (long long i = 0; i < t.size(); ++i) adapter_mag += std::abs(t.grad()[i]);
    CHECK(adapter_mag > 0.0);
}

TEST_CASE("named parameter set matches the architecture") {
    TransformerModel m(tiny_config(), 1);
    auto ps = m.named_parameters();
    // 2 embeddings + 2 final-norm + per layer (12 base + 4 adapter).
    CHECK(ps.size() == 2 + 2 + 1 * 16);
    CHECK(m.adapter_parameters().size() == 4);
    TransformerConfig c0 = tiny_config();
    c0.lora_rank = 0;
    TransformerModel m0(c0, 1);
    CHECK(m0.named_parameters().size() == 2 + 2 + 1 * 12);
    CHECK(m0.adapter_parameters().empty());
}

// ==================== gradients through the whole model ====================

TEST_CASE("finite differences across every transformer parameter") {
    TransformerModel m(tiny_config(), 41);
    TokenSequence ids{1, 2, 3, 4};
    std::vector<int> targets{2, 3, 4, 5};
    std::vector<std::uint8_t> mask{1, 1, 1, 1};
    auto loss = [&] {
        Tensor h = m.forward_embeddings(m.embed_tokens(ids), AttentionMask::causal);
        return cross_entropy(m.logits(h), targets, mask);
    };
    std::vector<Tensor> params;
    for (auto& [n, t] : m.named_parameters()) params.push_back(t);
    auto res = finite_diff_check(params, loss, 1e-5);
    CHECK(res.n_checked > 500);
    CHECK(res.max_rel_err < 1e-5);
}
