#include "iqvic/pipeline.hpp"

#include <filesystem>
#include <utility>

#include "iqvic/error.hpp"

namespace iqvic {

namespace {

// Seed substream labels: one fixed path per component so adding components
// never reshuffles existing initializations.
constexpr std::uint64_t kSeedFeaturizer = 1;
constexpr std::uint64_t kSeedProjector = 2;
constexpr std::uint64_t kSeedCompressor = 3;
constexpr std::uint64_t kSeedLookup = 4;
constexpr std::uint64_t kSeedDecoder = 5;

// Input budgets beyond the frame/memory rows: a question and a short answer.
constexpr int kQuestionBudget = 8;
constexpr int kAnswerBudget = 8;

}  // namespace

Method method_from_string(const std::string& s) {
    if (s == "iqvic") return Method::iqvic;
    if (s == "avgpool") return Method::avgpool;
    if (s == "truncate") return Method::truncate;
    throw config_error("unknown method '" + s + "' (expected iqvic, avgpool or truncate)");
}

std::string method_name(Method m) {
    switch (m) {
        case Method::iqvic: return "iqvic";
        case Method::avgpool: return "avgpool";
        case Method::truncate: return "truncate";
    }
    throw config_error("invalid method value");
}

Tensor avgpool_rows(const Tensor& e_v, int c) {
    const int p = e_v.rows();
    if (c <= 0) throw contract_error("avgpool_rows: need a positive row count");
    if (c > p)
        throw contract_error("avgpool_rows: cannot pool " + std::to_string(p) + " rows into " +
                             std::to_string(c));
    // Built from differentiable ops so the projector keeps its gradient path
    // when a baseline trains. Summing via a ones-row matmul and dividing after
    // keeps each window's accumulation order (bit-stable results).
    Tensor ones_row;
    std::vector<Tensor> pooled;
    pooled.reserve(static_cast<std::size_t>(c));
    for (int i = 0; i < c; ++i) {
        // Balanced contiguous windows: sizes differ by at most one, cover all rows.
        const int lo = static_cast<int>(static_cast<long long>(i) * p / c);
        const int hi = static_cast<int>(static_cast<long long>(i + 1) * p / c);
        if (!ones_row.defined() || ones_row.cols() != hi - lo)
            ones_row = Tensor::full({1, hi - lo}, 1.0);
        pooled.push_back(
            scale(matmul(ones_row, slice_rows(e_v, lo, hi)), 1.0 / static_cast<double>(hi - lo)));
    }
    return c == 1 ? pooled.front() : concat_rows(pooled);
}

Tensor truncate_rows(const Tensor& e_v, int c) {
    const int p = e_v.rows();
    if (c <= 0) throw contract_error("truncate_rows: need a positive row count");
    if (c > p)
        throw contract_error("truncate_rows: cannot keep " + std::to_string(c) + " of " +
                             std::to_string(p) + " rows");
    return slice_rows(e_v, 0, c);
}

int SystemConfig::min_positions() const {
    const int compressor_need = kQuestionBudget + patch_tokens() + context_tokens;
    const int decoder_need = kQuestionBudget + memory_capacity * context_tokens + kAnswerBudget;
    return std::max(compressor_need, decoder_need);
}

SystemConfig SystemConfig::resolved() const {
    SystemConfig r = *this;
    if (r.model.max_positions == 0) r.model.max_positions = r.min_positions();
    if (r.model.vocab_size == 0) {
        const Vocab v = Vocab::kv_vocab(r.alphabet.n_keys, r.alphabet.n_values);
        r.model.vocab_size = static_cast<int>(v.words.size());
    }
    return r;
}

void SystemConfig::validate() const {
    if (grid <= 0) throw config_error("grid must be positive");
    if (d_f <= 0) throw config_error("d_f must be positive");
    if (context_tokens <= 0) throw config_error("context_tokens must be positive");
    if (memory_capacity <= 0) throw config_error("memory_capacity must be positive");
    if (alphabet.n_keys <= 0 || alphabet.n_values <= 0 || alphabet.n_distract < 0)
        throw config_error("alphabet sizes must be positive (distractors may be zero)");
    model.validate();
    const Vocab v = Vocab::kv_vocab(alphabet.n_keys, alphabet.n_values);
    if (model.vocab_size < static_cast<int>(v.words.size()))
        throw config_error("vocab_size " + std::to_string(model.vocab_size) + " below task vocabulary " +
                           std::to_string(v.words.size()));
    if (model.max_positions < min_positions())
        throw config_error("max_positions " + std::to_string(model.max_positions) +
                           " below required " + std::to_string(min_positions()) +
                           " (question + rows + answer); set 0 to auto-size");
    if (method != Method::iqvic && context_tokens > patch_tokens())
        throw config_error(method_name(method) + " cannot produce " + std::to_string(context_tokens) +
                           " rows from " + std::to_string(patch_tokens()) + " patch rows");
}

std::vector<std::string> SystemConfig::warnings() const {
    std::vector<std::string> w;
    if (method == Method::iqvic && context_tokens > patch_tokens())
        w.push_back("context_tokens " + std::to_string(context_tokens) + " exceeds patch rows " +
                    std::to_string(patch_tokens()) + "; compression enlarges each frame");
    return w;
}

nlohmann::json SystemConfig::to_json() const {
    return nlohmann::json{{"d_model", model.d_model},
                          {"n_heads", model.n_heads},
                          {"n_layers", model.n_layers},
                          {"d_ff", model.d_ff},
                          {"vocab_size", model.vocab_size},
                          {"max_positions", model.max_positions},
                          {"lora_rank", model.lora_rank},
                          {"lora_alpha", model.lora_alpha},
                          {"lora_dropout", model.lora_dropout},
                          {"ln_eps", model.ln_eps},
                          {"grid", grid},
                          {"d_f", d_f},
                          {"n_keys", alphabet.n_keys},
                          {"n_values", alphabet.n_values},
                          {"n_distract", alphabet.n_distract},
                          {"context_tokens", context_tokens},
                          {"memory_capacity", memory_capacity},
                          {"method", method_name(method)},
                          {"seed", seed}};
}

SystemConfig SystemConfig::from_json(const nlohmann::json& j) {
    SystemConfig c;
    try {
        c.model.d_model = j.at("d_model").get<int>();
        c.model.n_heads = j.at("n_heads").get<int>();
        c.model.n_layers = j.at("n_layers").get<int>();
        c.model.d_ff = j.at("d_ff").get<int>();
        c.model.vocab_size = j.at("vocab_size").get<int>();
        c.model.max_positions = j.at("max_positions").get<int>();
        c.model.lora_rank = j.at("lora_rank").get<int>();
        c.model.lora_alpha = j.at("lora_alpha").get<double>();
        c.model.lora_dropout = j.at("lora_dropout").get<double>();
        c.model.ln_eps = j.at("ln_eps").get<double>();
        c.grid = j.at("grid").get<int>();
        c.d_f = j.at("d_f").get<int>();
        c.alphabet.n_keys = j.at("n_keys").get<int>();
        c.alphabet.n_values = j.at("n_values").get<int>();
        c.alphabet.n_distract = j.at("n_distract").get<int>();
        c.context_tokens = j.at("context_tokens").get<int>();
        c.memory_capacity = j.at("memory_capacity").get<int>();
        c.method = method_from_string(j.at("method").get<std::string>());
        c.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw config_error(std::string("bad system config: ") + e.what());
    }
    return c;
}

QaSystem QaSystem::create(const SystemConfig& raw) {
    SystemConfig cfg = raw.resolved();
    cfg.validate();
    const Vocab vocab = Vocab::kv_vocab(cfg.alphabet.n_keys, cfg.alphabet.n_values);
    FrameFeaturizer fe(cfg.grid, cfg.alphabet.size(), cfg.d_f,
                       derive_seed(cfg.seed, {kSeedFeaturizer}));
    FrameProjector proj(cfg.d_f, cfg.model.d_model, derive_seed(cfg.seed, {kSeedProjector}));
    std::optional<TransformerModel> compressor;
    std::optional<ContextTokenLookup> lookup;
    if (cfg.method == Method::iqvic) {
        compressor.emplace(cfg.model, derive_seed(cfg.seed, {kSeedCompressor}));
        lookup.emplace(cfg.context_tokens, cfg.model.d_model, derive_seed(cfg.seed, {kSeedLookup}));
    }
    TransformerModel decoder(cfg.model, derive_seed(cfg.seed, {kSeedDecoder}));
    return QaSystem{cfg, vocab, std::move(fe), std::move(proj), std::move(compressor),
                    std::move(lookup), std::move(decoder)};
}

ContextEmbedding QaSystem::compress_one(const SymbolicFrame& f, const TokenSequence& question,
                                        const TrainContext* tc) const {
    if (question.empty()) throw contract_error("compress_one: question must not be empty");
    const FrameEmbedding e_v = embed_frame(featurizer, projector, f);
    if (cfg.method == Method::iqvic) return compress_frame(*compressor, question, e_v, *lookup, tc);
    Tensor rows = cfg.method == Method::avgpool ? avgpool_rows(e_v.tokens, cfg.context_tokens)
                                                : truncate_rows(e_v.tokens, cfg.context_tokens);
    return ContextEmbedding{std::move(rows), f.source_index, fnv1a(question)};
}

CompressFn QaSystem::make_compress(const TokenSequence& question) const {
    // Captures this; the system must outlive the returned hook.
    return [this, question](const SymbolicFrame& f) { return compress_one(f, question); };
}

StreamResult QaSystem::answer_stream(const QASample& s, const StreamOptions& opts) const {
    return run_stream(make_compress(s.question), decoder, s.frames, s.question,
                      cfg.memory_capacity, vocab, opts);
}

std::vector<std::pair<std::string, Tensor>> QaSystem::named_tensors() {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("featurizer.sym_table", featurizer.sym_table);
    out.emplace_back("featurizer.cell_table", featurizer.cell_table);
    for (auto& [n, t] : projector.named_parameters()) out.emplace_back(n, t);
    if (lookup) {
        for (auto& [n, t] : lookup->named_parameters()) out.emplace_back(n, t);
    }
    if (compressor) {
        for (auto& [n, t] : compressor->named_parameters()) out.emplace_back("compressor." + n, t);
    }
    for (auto& [n, t] : decoder.named_parameters()) out.emplace_back("decoder." + n, t);
    return out;
}

void QaSystem::save(const std::string& dir) const {
    std::filesystem::create_directories(dir);
    auto& self = const_cast<QaSystem&>(*this);  // named_parameters needs mutable tensors
    const nlohmann::json config = cfg.to_json();

    Checkpoint comp;
    comp.meta = {{"role", "compressor"}, {"config", config}};
    comp.add("featurizer.sym_table", self.featurizer.sym_table);
    comp.add("featurizer.cell_table", self.featurizer.cell_table);
    for (auto& [n, t] : self.projector.named_parameters()) comp.add(n, t);
    if (self.lookup) {
        for (auto& [n, t] : self.lookup->named_parameters()) comp.add(n, t);
    }
    if (self.compressor) {
        for (auto& [n, t] : self.compressor->named_parameters()) comp.add("compressor." + n, t);
    }
    comp.save(compressor_path(dir));

    Checkpoint dec;
    dec.meta = {{"role", "decoder"}, {"config", config}};
    for (auto& [n, t] : self.decoder.named_parameters()) dec.add("decoder." + n, t);
    dec.save(decoder_path(dir));
}

QaSystem QaSystem::load(const std::string& dir) {
    const Checkpoint comp = Checkpoint::load(compressor_path(dir));
    const Checkpoint dec = Checkpoint::load(decoder_path(dir));
    for (const Checkpoint* ck : {&comp, &dec}) {
        if (!ck->meta.contains("role") || !ck->meta.contains("config"))
            throw load_error("checkpoint meta lacks role/config");
    }
    if (comp.meta.at("role") != "compressor" || dec.meta.at("role") != "decoder")
        throw load_error("checkpoint roles are swapped or wrong");
    if (comp.meta.at("config") != dec.meta.at("config"))
        throw load_error("compressor and decoder checkpoints disagree on the system config");

    QaSystem sys = create(SystemConfig::from_json(comp.meta.at("config")));
    std::size_t consumed = 0;
    for (auto& [name, t] : sys.named_tensors()) {
        const Checkpoint& src = name.rfind("decoder.", 0) == 0 ? dec : comp;
        src.read_into(name, t);
        ++consumed;
    }
    if (consumed != comp.tensors.size() + dec.tensors.size())
        throw load_error("checkpoint holds tensors this configuration does not use");
    return sys;
}

}  // namespace iqvic
