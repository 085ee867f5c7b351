#pragma once

#include <iostream>
#include <string>
#include <vector>

#include "iqvic/bench.hpp"
#include "iqvic/pipeline.hpp"
#include "iqvic/task.hpp"
#include "iqvic/train.hpp"

namespace iqvic {

// Process exit codes: one per error family so scripts can tell a bad flag from
// a bad file.
enum ExitCode {
    exit_ok = 0,
    exit_failure = 1,
    exit_config = 2,
    exit_data = 3,
    exit_load = 4,
    exit_numeric = 5,
};

struct GenOptions {
    std::string out_dir = "data";
    std::uint64_t seed = 0;
    int n_stage1 = 2000;  // single-frame samples
    int n_stage2 = 2000;  // training streams
    int n_eval = 500;     // held-out streams
    int t_len = 8;        // frames per stream
    int max_pairs = 3;    // pairs per single-frame sample
    double none_fraction = 0.5;
    TaskOptions task;
};

// Writes stage1.jsonl / stage2.jsonl / eval.jsonl plus gen_config.json. Each
// split draws from its own derived seed, so counts can change per split
// without disturbing the others.
void cmd_gen(const GenOptions& opts, std::ostream& out = std::cout);

struct TrainCmdOptions {
    std::string data_dir = "data";
    std::string out_dir = "runs";
    SystemConfig system;       // method selects the run subdirectory
    TrainConfig stage1;        // seed fields are overwritten from system.seed
    TrainConfig stage2;
    int stages = 0;            // 0 = both, 1 or 2 = that stage only
    long long ckpt_every = 0;  // also checkpoint every N optimizer steps
};

// Trains the selected stages and saves the system, the trainer state, the
// resolved configuration and a JSONL loss log under out_dir/<method>/.
void cmd_train(const TrainCmdOptions& opts, std::ostream& out = std::cout);

struct EvalCmdOptions {
    std::string data_dir = "data";
    std::string runs_dir = "runs";
    std::vector<std::string> methods = {"iqvic", "avgpool", "truncate"};
    int n_threads = 1;
    int max_new_tokens = 4;
    bool reference_accounting = false;  // also print the flagship-geometry block
    std::string report_prefix;          // default: <runs_dir>/report
};

// Evaluates each trained method on the eval split and writes report.txt and
// report.json. Accounting invariants are re-derived before anything is written.
void cmd_eval(const EvalCmdOptions& opts, std::ostream& out = std::cout);

struct AskCmdOptions {
    std::string run_dir;    // one trained method's directory
    std::string data_path;  // a stream dataset
    int sample = 0;
    int max_new_tokens = 4;
    bool incremental = false;
    bool memory_first = false;  // ablation: decoder reads [memory ; question]
    bool dump_memory = false;
    std::string memory_out;  // dump target; empty = stdout
};

// Replays one stream and prints the answer, the gold answer and memory stats.
void cmd_ask(const AskCmdOptions& opts, std::ostream& out = std::cout);

// Memory-token budget and keep ratios at the flagship geometry, computed from
// the same formulas the benchmark uses.
std::string reference_accounting_text();

// Full argv-level entry point; maps errors to ExitCode values.
int run_cli(int argc, const char* const* argv);

}  // namespace iqvic
