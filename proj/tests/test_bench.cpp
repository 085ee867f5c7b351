#include "iqvic/bench.hpp"

#include <random>

#include "doctest.h"
#include "iqvic/error.hpp"
#include "iqvic/task.hpp"

using namespace iqvic;

namespace {

TaskOptions small_task() {
    TaskOptions opt;
    opt.grid = 3;
    opt.alphabet = FrameAlphabet{4, 4, 2};
    opt.noise_cells = 2;
    return opt;
}

SystemConfig small_config(Method m) {
    SystemConfig cfg;
    cfg.model.d_model = 16;
    cfg.model.n_heads = 2;
    cfg.model.n_layers = 1;
    cfg.model.d_ff = 32;
    cfg.model.vocab_size = 0;
    cfg.model.max_positions = 0;
    cfg.model.lora_rank = 2;
    cfg.grid = 3;
    cfg.d_f = 8;
    cfg.alphabet = FrameAlphabet{4, 4, 2};
    cfg.context_tokens = 3;
    cfg.memory_capacity = 2;
    cfg.method = m;
    cfg.seed = 99;
    return cfg;
}

}  // namespace

TEST_CASE("evaluate scores an oracle at 100 and a wrong guesser at 0") {
    const Vocab vocab = Vocab::kv_vocab(4, 4);
    auto eval_set = gen_kv_stream(20, 3, vocab, small_task(), 11);

    AnswerFn oracle = [](const QASample& s) { return s.answer; };
    MethodReport perfect = evaluate(oracle, eval_set, "oracle", 2, 3, 9);
    CHECK(perfect.n_samples == 20);
    CHECK(perfect.n_correct == 20);
    CHECK(perfect.accuracy == 100.0);
    CHECK(perfect.mean_score == 5.0);
    CHECK(perfect.memory_tokens == 6);
    CHECK(perfect.compression_ratio == doctest::Approx(100.0 * 3 / 9));

    AnswerFn wrong = [&](const QASample&) { return TokenSequence{vocab.eos_id}; };
    MethodReport zero = evaluate(wrong, eval_set, "wrong", 2, 3, 9);
    CHECK(zero.n_correct == 0);
    CHECK(zero.accuracy == 0.0);
    CHECK(zero.mean_score == 0.0);
}

TEST_CASE("a uniform guesser lands near chance accuracy") {
    const Vocab vocab = Vocab::kv_vocab(16, 16);
    TaskOptions opt;  // default 16/16 alphabet, grid 4
    auto eval_set = gen_kv_stream(2000, 4, vocab, opt, 21);

    // Guess a uniformly random value token, seeded per sample so threads agree.
    AnswerFn guess = [&](const QASample& s) {
        std::mt19937_64 rng(derive_seed(777, {static_cast<std::uint64_t>(s.sample_index)}));
        const int v = static_cast<int>(rng() % 16);
        return TokenSequence{vocab.value_token(v)};
    };
    EvalOptions opts;
    opts.n_threads = 4;
    MethodReport r = evaluate(guess, eval_set, "guess", 4, 8, 16, opts);
    // Chance is 100/16 = 6.25; 2000 draws put the observed rate within +-3.
    CHECK(r.accuracy > 6.25 - 3.0);
    CHECK(r.accuracy < 6.25 + 3.0);
}

TEST_CASE("thread count changes nothing about the result") {
    const Vocab vocab = Vocab::kv_vocab(4, 4);
    auto eval_set = gen_kv_stream(64, 3, vocab, small_task(), 31);
    AnswerFn parity = [&](const QASample& s) {
        return s.sample_index % 3 == 0 ? s.answer : TokenSequence{vocab.none_id};
    };
    EvalOptions one;
    EvalOptions many;
    many.n_threads = 7;
    MethodReport a = evaluate(parity, eval_set, "parity", 2, 3, 9, one);
    MethodReport b = evaluate(parity, eval_set, "parity", 2, 3, 9, many);
    CHECK(a.to_json() == b.to_json());

    QaSystem sys = QaSystem::create(small_config(Method::avgpool));
    auto small_eval = gen_kv_stream(10, 3, vocab, small_task(), 41);
    MethodReport s1 = evaluate_system(sys, small_eval, one);
    EvalOptions three;
    three.n_threads = 3;
    MethodReport s3 = evaluate_system(sys, small_eval, three);
    CHECK(s1.to_json() == s3.to_json());
    CHECK(s1.method == "avgpool");
    CHECK(s1.memory_tokens == 6);
}

TEST_CASE("worker exceptions surface and empty inputs are rejected") {
    const Vocab vocab = Vocab::kv_vocab(4, 4);
    auto eval_set = gen_kv_stream(16, 3, vocab, small_task(), 51);
    AnswerFn bomb = [](const QASample& s) -> TokenSequence {
        if (s.sample_index == 7) throw data_error("sample 7 is poisoned");
        return s.answer;
    };
    EvalOptions opts;
    opts.n_threads = 4;
    CHECK_THROWS_AS(evaluate(bomb, eval_set, "bomb", 2, 3, 9, opts), data_error);

    CHECK_THROWS_AS(evaluate(AnswerFn{}, eval_set, "none", 2, 3, 9), contract_error);
    CHECK_THROWS_AS(evaluate([](const QASample& s) { return s.answer; }, {}, "empty", 2, 3, 9),
                    contract_error);
}

TEST_CASE("report accounting is re-derived and enforced") {
    MethodReport r;
    r.method = "iqvic";
    r.n_samples = 200;
    r.n_correct = 150;
    r.accuracy = 75.0;
    r.mean_score = 3.75;
    r.context_tokens = 8;
    r.memory_capacity = 4;
    r.patch_tokens = 16;
    r.memory_tokens = 32;
    r.compression_ratio = 50.0;

    BenchReport rep;
    rep.rows = {r};
    rep.seed = 5;
    rep.config_digest = "deadbeefdeadbeef";
    CHECK_NOTHROW(rep.validate_accounting());

    BenchReport bad_tokens = rep;
    bad_tokens.rows[0].memory_tokens = 31;
    CHECK_THROWS_AS(bad_tokens.validate_accounting(), contract_error);

    BenchReport bad_acc = rep;
    bad_acc.rows[0].accuracy = 74.0;
    CHECK_THROWS_AS(bad_acc.validate_accounting(), contract_error);

    BenchReport bad_ratio = rep;
    bad_ratio.rows[0].compression_ratio = 49.0;
    CHECK_THROWS_AS(bad_ratio.validate_accounting(), contract_error);

    BenchReport bad_count = rep;
    bad_count.rows[0].n_correct = 201;
    CHECK_THROWS_AS(bad_count.validate_accounting(), contract_error);
}

TEST_CASE("text and json renderings are stable and timestamp-free") {
    MethodReport r;
    r.method = "truncate";
    r.n_samples = 100;
    r.n_correct = 40;
    r.accuracy = 40.0;
    r.mean_score = 2.0;
    r.context_tokens = 8;
    r.memory_capacity = 4;
    r.patch_tokens = 16;
    r.memory_tokens = 32;
    r.compression_ratio = 50.0;
    BenchReport rep;
    rep.rows = {r};
    rep.seed = 77;
    rep.config_digest = "0123456789abcdef";

    const std::string text = rep.to_text();
    CHECK(text == rep.to_text());
    CHECK(text.find("truncate") != std::string::npos);
    CHECK(text.find("50%") != std::string::npos);
    CHECK(text.find("40.0%") != std::string::npos);
    CHECK(text.find("2.00") != std::string::npos);
    CHECK(text.find("seed=77") != std::string::npos);
    CHECK(text.find("0123456789abcdef") != std::string::npos);

    const nlohmann::json j = rep.to_json();
    CHECK(j == rep.to_json());
    CHECK(j.at("rows").size() == 1);
    CHECK(j.at("rows")[0].at("accuracy") == 40.0);
    CHECK(j.dump().find("time") == std::string::npos);
}

TEST_CASE("config digests are stable and distinguish configs") {
    SystemConfig a = small_config(Method::iqvic).resolved();
    SystemConfig b = a;
    b.seed += 1;
    const std::string da = config_digest_of(a.to_json());
    CHECK(da.size() == 16);
    CHECK(da == config_digest_of(a.to_json()));
    CHECK(da != config_digest_of(b.to_json()));
    for (char c : da) CHECK(std::isxdigit(static_cast<unsigned char>(c)));
}
