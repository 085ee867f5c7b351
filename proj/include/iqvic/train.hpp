#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "iqvic/checkpoint.hpp"
#include "iqvic/pipeline.hpp"
#include "iqvic/task.hpp"

namespace iqvic {

struct AdamWConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled: applied to the value, not the moments
};

// Adam with decoupled weight decay over a fixed parameter list. step() consumes
// whatever gradient each parameter has accumulated; moments serialize for
// bitwise-identical resume.
class AdamW {
public:
    AdamW(std::vector<Tensor> params, AdamWConfig cfg);

    void step();
    void zero_grad();
    long long step_count() const { return t_; }
    const std::vector<Tensor>& params() const { return params_; }

    // Schedules adjust the rate between steps; moments are unaffected.
    void set_lr(double lr);
    double lr() const { return cfg_.lr; }
    double grad_norm() const;  // L2 over every parameter's current gradient

    void state_to_checkpoint(Checkpoint& ck, const std::string& prefix) const;
    void state_from_checkpoint(const Checkpoint& ck, const std::string& prefix);

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    AdamWConfig cfg_;
    long long t_ = 0;
};

struct TrainConfig {
    int batch_size = 4;
    int grad_accum_steps = 4;  // optimizer steps see batch_size * accum samples
    double learning_rate = 2e-4;
    bool cosine_schedule = false;  // half-cosine decay of the rate over `epochs`
    double weight_decay = 0.0;
    double dropout = 0.05;  // adapter-branch dropout while training
    int epochs = 1;
    std::uint64_t seed = 0;

    void validate() const;  // config_error on bad values
};

struct TrainLogEntry {
    long long step = 0;  // optimizer step, 1-based, global across epochs
    int epoch = 0;
    double loss = 0.0;  // mean sample loss inside this step's window
    double lr = 0.0;        // rate the step was taken with
    double grad_norm = 0.0;  // L2 of the accumulated gradient at the step
};

struct TrainReport {
    std::vector<TrainLogEntry> log;
    std::vector<double> epoch_mean_loss;
    double final_loss = 0.0;  // mean loss of the last epoch
    long long optimizer_steps = 0;
};

// Runs one stage of the two-stage recipe on a system, owning the freeze
// pattern for that stage:
//   stage 1: decoder fully frozen; trains the projector, the slot lookup and
//            the compressor's adapters on single-frame samples (the compressed
//            rows feed the frozen decoder directly, no memory involved).
//   stage 2: everything upstream frozen; trains the decoder's adapters on
//            stream samples whose memories are built as constants.
class StepTrainer {
public:
    StepTrainer(QaSystem& sys, int stage, TrainConfig cfg);

    TrainReport run(const std::vector<QASample>& data);  // cfg.epochs epochs
    double train_epoch(const std::vector<QASample>& data, TrainReport* report = nullptr);

    // Taped loss of one sample; callers own the tape scope.
    Tensor sample_loss(const QASample& s, const TrainContext* tc) const;

    // Runs after every optimizer step with the global step count; parameters
    // and optimizer state are consistent at that moment (checkpoint hooks).
    void set_step_hook(std::function<void(long long)> hook) { step_hook_ = std::move(hook); }

    const std::vector<std::pair<std::string, Tensor>>& trainables() const { return trainables_; }
    int stage() const { return stage_; }
    long long optimizer_steps() const;
    int epochs_done() const { return epochs_done_; }

    // Optimizer moments and progress counters; parameters live in the system.
    Checkpoint state() const;
    void restore(const Checkpoint& ck);

private:
    double apply_accumulated(int n_micro);  // returns the pre-step gradient norm

    QaSystem& sys_;
    int stage_;
    TrainConfig cfg_;
    std::vector<std::pair<std::string, Tensor>> trainables_;
    AdamW opt_;
    std::function<void(long long)> step_hook_;
    int epochs_done_ = 0;
    long long micro_steps_ = 0;
};

// Teacher-forced answer loss: stacks [question ; context rows ; answer],
// runs the decoder once, and scores the answer tokens plus the closing eos.
Tensor readout_loss(const TransformerModel& decoder, const TokenSequence& question,
                    const Tensor& context_rows, const TokenSequence& answer, int eos_id,
                    const TrainContext* tc = nullptr);

TrainReport train_stage(QaSystem& sys, int stage, const std::vector<QASample>& data,
                        const TrainConfig& cfg);

}  // namespace iqvic
