#include "iqvic/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "iqvic/decoder.hpp"
#include "iqvic/error.hpp"
#include "iqvic/memory.hpp"

namespace iqvic {

namespace {

// Substream labels for the trainer's random draws.
constexpr std::uint64_t kSeedShuffle = 0x5e0f;
constexpr std::uint64_t kSeedDropout = 0xd40;

std::vector<int> permutation(int n, std::mt19937_64& rng) {
    std::vector<int> p(static_cast<std::size_t>(n));
    std::iota(p.begin(), p.end(), 0);
    for (int i = n - 1; i > 0; --i) {
        const int j = static_cast<int>(rng() % static_cast<std::uint64_t>(i + 1));
        std::swap(p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(j)]);
    }
    return p;
}

}  // namespace

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    if (params_.empty()) throw contract_error("optimizer needs at least one parameter");
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (!params_[i].defined() || !params_[i].requires_grad())
            throw contract_error("optimizer parameters must be defined and trainable");
        for (std::size_t j = 0; j < i; ++j)
            if (params_[i].same_storage(params_[j]))
                throw contract_error("optimizer parameter listed twice");
    }
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
        m_[i].assign(static_cast<std::size_t>(params_[i].size()), 0.0);
        v_[i].assign(static_cast<std::size_t>(params_[i].size()), 0.0);
    }
}

void AdamW::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        const double* g = p.grad();
        double* w = p.data();
        double* m = m_[i].data();
        double* v = v_[i].data();
        const long long n = p.size();
        for (long long k = 0; k < n; ++k) {
            m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
            v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
            const double mhat = m[k] / bc1;
            const double vhat = v[k] / bc2;
            w[k] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[k]);
            if (!std::isfinite(w[k]))
                throw numeric_error("parameter became non-finite at optimizer step " +
                                    std::to_string(t_));
        }
    }
}

void AdamW::zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
}

void AdamW::set_lr(double lr) {
    if (!(lr > 0.0) || !std::isfinite(lr))
        throw contract_error("learning rate must stay positive and finite");
    cfg_.lr = lr;
}

double AdamW::grad_norm() const {
    double sq = 0.0;
    for (const Tensor& p : params_) {
        const double* g = p.grad();
        const long long n = p.size();
        for (long long k = 0; k < n; ++k) sq += g[k] * g[k];
    }
    return std::sqrt(sq);
}

void AdamW::state_to_checkpoint(Checkpoint& ck, const std::string& prefix) const {
    ck.meta[prefix + "steps"] = t_;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        ck.add(prefix + "m." + std::to_string(i), Tensor(params_[i].shape(), m_[i]));
        ck.add(prefix + "v." + std::to_string(i), Tensor(params_[i].shape(), v_[i]));
    }
}

void AdamW::state_from_checkpoint(const Checkpoint& ck, const std::string& prefix) {
    if (!ck.meta.contains(prefix + "steps")) throw load_error("optimizer state lacks step counter");
    t_ = ck.meta.at(prefix + "steps").get<long long>();
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const Tensor& tm = ck.get(prefix + "m." + std::to_string(i));
        const Tensor& tv = ck.get(prefix + "v." + std::to_string(i));
        if (tm.shape() != params_[i].shape() || tv.shape() != params_[i].shape())
            throw load_error("optimizer moment " + std::to_string(i) +
                             " does not match the parameter shape");
        m_[i].assign(tm.data(), tm.data() + tm.size());
        v_[i].assign(tv.data(), tv.data() + tv.size());
    }
}

void TrainConfig::validate() const {
    if (batch_size <= 0) throw config_error("batch_size must be positive");
    if (grad_accum_steps <= 0) throw config_error("grad_accum_steps must be positive");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
        throw config_error("learning_rate must be positive and finite");
    if (weight_decay < 0.0 || !std::isfinite(weight_decay))
        throw config_error("weight_decay must be non-negative");
    if (dropout < 0.0 || dropout >= 1.0) throw config_error("dropout must be in [0,1)");
    if (epochs < 0) throw config_error("epochs must be non-negative");
}

Tensor readout_loss(const TransformerModel& decoder, const TokenSequence& question,
                    const Tensor& context_rows, const TokenSequence& answer, int eos_id,
                    const TrainContext* tc) {
    if (question.empty()) throw contract_error("readout_loss: question is empty");
    if (answer.empty()) throw contract_error("readout_loss: answer is empty");
    const int k = static_cast<int>(question.size());
    const int m = context_rows.rows();
    const int a = static_cast<int>(answer.size());

    Tensor q_rows = decoder.embed_tokens(question);
    Tensor ans_rows = decoder.embed_tokens(answer);
    Tensor prefix = concat_rows({q_rows, context_rows, ans_rows});
    Tensor hidden = decoder.forward_embeddings(prefix, AttentionMask::causal, tc);
    Tensor lg = decoder.logits(hidden);

    // Teacher forcing: the last context row predicts answer[0], each answer row
    // predicts its successor, and the final row predicts eos.
    const int n = k + m + a;
    std::vector<int> targets(static_cast<std::size_t>(n), 0);
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(n), 0);
    for (int j = 0; j < a; ++j) {
        targets[static_cast<std::size_t>(k + m - 1 + j)] = answer[static_cast<std::size_t>(j)];
        mask[static_cast<std::size_t>(k + m - 1 + j)] = 1;
    }
    targets[static_cast<std::size_t>(n - 1)] = eos_id;
    mask[static_cast<std::size_t>(n - 1)] = 1;
    return cross_entropy(lg, targets, mask);
}

namespace {

std::vector<std::pair<std::string, Tensor>> select_trainables(QaSystem& sys, int stage,
                                                              const TrainConfig& cfg) {
    cfg.validate();
    if (stage != 1 && stage != 2) throw config_error("training stage must be 1 or 2");
    if (stage == 2 && sys.cfg.model.lora_rank <= 0)
        throw config_error("stage 2 trains decoder adapters; lora_rank must be positive");

    sys.projector.set_trainable(stage == 1);
    if (sys.lookup) sys.lookup->set_trainable(stage == 1);
    if (sys.compressor) {
        sys.compressor->set_all_trainable(false);
        if (stage == 1 && sys.cfg.model.lora_rank > 0) sys.compressor->set_frozen_base(true);
    }
    sys.decoder.set_all_trainable(false);
    if (stage == 2) sys.decoder.set_frozen_base(true);

    std::vector<std::pair<std::string, Tensor>> out;
    for (auto& [name, t] : sys.named_tensors())
        if (t.requires_grad()) out.emplace_back(name, t);
    if (out.empty()) throw config_error("nothing to train in this stage");
    return out;
}

std::vector<Tensor> values_of(const std::vector<std::pair<std::string, Tensor>>& named) {
    std::vector<Tensor> v;
    v.reserve(named.size());
    for (const auto& [n, t] : named) v.push_back(t);
    return v;
}

}  // namespace

StepTrainer::StepTrainer(QaSystem& sys, int stage, TrainConfig cfg)
    : sys_(sys),
      stage_(stage),
      cfg_(cfg),
      trainables_(select_trainables(sys, stage, cfg)),
      opt_(values_of(trainables_),
           AdamWConfig{cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.weight_decay}) {}

long long StepTrainer::optimizer_steps() const { return opt_.step_count(); }

Tensor StepTrainer::sample_loss(const QASample& s, const TrainContext* tc) const {
    if (s.question.empty() || s.answer.empty())
        throw data_error("sample " + std::to_string(s.sample_index) + " lacks a question or answer");
    if (stage_ == 1) {
        if (s.frames.size() != 1)
            throw data_error("stage 1 trains on single-frame samples; sample " +
                             std::to_string(s.sample_index) + " has " +
                             std::to_string(s.frames.size()));
        // Compressed rows feed the frozen decoder directly: gradient reaches the
        // projector, the lookup and the compressor adapters through the readout.
        ContextEmbedding ce = sys_.compress_one(s.frames[0], s.question, tc);
        return readout_loss(sys_.decoder, s.question, ce.tokens, s.answer, sys_.vocab.eos_id,
                            nullptr);
    }
    if (s.frames.empty())
        throw data_error("sample " + std::to_string(s.sample_index) + " has no frames");
    // Memory entries are constants here: the whole upstream path is frozen, so
    // nothing records on the tape until the decoder reads the stacked entries.
    ContextMemory mem(sys_.cfg.memory_capacity);
    for (const SymbolicFrame& f : s.frames) mem.insert(sys_.compress_one(f, s.question, nullptr));
    return readout_loss(sys_.decoder, s.question, mem.as_decoder_input(), s.answer,
                        sys_.vocab.eos_id, tc);
}

double StepTrainer::apply_accumulated(int n_micro) {
    if (n_micro > 1) {
        const double inv = 1.0 / n_micro;
        for (auto& [name, t] : trainables_) {
            double* g = t.grad();
            const long long n = t.size();
            for (long long i = 0; i < n; ++i) g[i] *= inv;
        }
    }
    const double gn = opt_.grad_norm();
    opt_.step();
    opt_.zero_grad();
    return gn;
}

double StepTrainer::train_epoch(const std::vector<QASample>& data, TrainReport* report) {
    if (data.empty()) throw data_error("training set is empty");
    if (cfg_.cosine_schedule && cfg_.epochs > 0) {
        // Half-cosine decay across the planned horizon; epochs past it keep the
        // final (lowest) rate rather than wrapping around.
        const int e = std::min(epochs_done_, cfg_.epochs - 1);
        const double frac = static_cast<double>(e) / cfg_.epochs;
        opt_.set_lr(cfg_.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * frac)));
    }
    const int n = static_cast<int>(data.size());
    std::mt19937_64 perm_rng(derive_seed(
        cfg_.seed, {kSeedShuffle, static_cast<std::uint64_t>(stage_),
                    static_cast<std::uint64_t>(epochs_done_)}));
    const std::vector<int> order = permutation(n, perm_rng);

    double epoch_sum = 0.0;
    long long epoch_count = 0;
    double window_sum = 0.0;
    long long window_count = 0;
    int accumulated = 0;

    auto flush = [&] {
        const double lr_used = opt_.lr();
        const double gn = apply_accumulated(accumulated);
        if (report)
            report->log.push_back(
                {opt_.step_count(), epochs_done_, window_sum / window_count, lr_used, gn});
        if (step_hook_) step_hook_(opt_.step_count());
        window_sum = 0.0;
        window_count = 0;
        accumulated = 0;
    };

    for (int start = 0; start < n; start += cfg_.batch_size) {
        const int bn = std::min(cfg_.batch_size, n - start);
        std::mt19937_64 micro_rng(derive_seed(
            cfg_.seed, {kSeedDropout, static_cast<std::uint64_t>(stage_),
                        static_cast<std::uint64_t>(micro_steps_)}));
        TrainContext tc{cfg_.dropout, &micro_rng};

        Tape tape;
        Tensor sum;
        for (int b = 0; b < bn; ++b) {
            Tensor li = sample_loss(data[static_cast<std::size_t>(order[start + b])], &tc);
            sum = b == 0 ? li : add(sum, li);
        }
        Tensor mean_loss = scale(sum, 1.0 / bn);
        tape.backward(mean_loss);
        const double lval = mean_loss.item();

        epoch_sum += lval * bn;
        epoch_count += bn;
        window_sum += lval * bn;
        window_count += bn;
        ++micro_steps_;
        if (++accumulated == cfg_.grad_accum_steps) flush();
    }
    if (accumulated > 0) flush();
    ++epochs_done_;
    return epoch_sum / epoch_count;
}

TrainReport StepTrainer::run(const std::vector<QASample>& data) {
    TrainReport rep;
    for (int e = 0; e < cfg_.epochs; ++e) rep.epoch_mean_loss.push_back(train_epoch(data, &rep));
    rep.final_loss = rep.epoch_mean_loss.empty() ? 0.0 : rep.epoch_mean_loss.back();
    rep.optimizer_steps = opt_.step_count();
    return rep;
}

Checkpoint StepTrainer::state() const {
    Checkpoint ck;
    ck.meta["stage"] = stage_;
    ck.meta["epochs_done"] = epochs_done_;
    ck.meta["micro_steps"] = micro_steps_;
    opt_.state_to_checkpoint(ck, "opt.");
    return ck;
}

void StepTrainer::restore(const Checkpoint& ck) {
    if (!ck.meta.contains("stage") || ck.meta.at("stage").get<int>() != stage_)
        throw load_error("trainer state is for a different stage");
    if (ck.tensors.size() != 2 * trainables_.size())
        throw load_error("trainer state does not match the trainable parameter count");
    epochs_done_ = ck.meta.at("epochs_done").get<int>();
    micro_steps_ = ck.meta.at("micro_steps").get<long long>();
    opt_.state_from_checkpoint(ck, "opt.");
}

TrainReport train_stage(QaSystem& sys, int stage, const std::vector<QASample>& data,
                        const TrainConfig& cfg) {
    StepTrainer trainer(sys, stage, cfg);
    return trainer.run(data);
}

}  // namespace iqvic
