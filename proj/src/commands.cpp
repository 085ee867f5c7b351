#include "iqvic/commands.hpp"

#include <filesystem>
#include <fstream>

#include "CLI11.hpp"
#include "iqvic/error.hpp"

namespace iqvic {

namespace {

// Splits and stages draw from fixed substream labels under the user seed.
constexpr std::uint64_t kSeedSplitStage1 = 0xa1;
constexpr std::uint64_t kSeedSplitStage2 = 0xa2;
constexpr std::uint64_t kSeedSplitEval = 0xea;
constexpr std::uint64_t kSeedTrain = 0x0a;

void write_text(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw load_error("cannot open for writing: " + path);
    os << content;
    os.flush();
    if (!os) throw load_error("write failed: " + path);
}

void check_dataset_matches(const Dataset& ds, const QaSystem& sys) {
    if (ds.grid != sys.cfg.grid)
        throw data_error("dataset grid " + std::to_string(ds.grid) + " does not match system grid " +
                         std::to_string(sys.cfg.grid));
    if (ds.alphabet.n_keys != sys.cfg.alphabet.n_keys ||
        ds.alphabet.n_values != sys.cfg.alphabet.n_values ||
        ds.alphabet.n_distract != sys.cfg.alphabet.n_distract)
        throw data_error("dataset alphabet does not match the system alphabet");
    if (ds.vocab.words != sys.vocab.words)
        throw data_error("dataset vocabulary does not match the system vocabulary");
}

Dataset load_split(const std::string& path, const std::string& kind) {
    Dataset ds = load_dataset(path);
    if (ds.kind != kind)
        throw data_error(path + " holds " + ds.kind + " samples; expected " + kind);
    return ds;
}

nlohmann::json train_config_json(const TrainConfig& tc) {
    return nlohmann::json{{"batch_size", tc.batch_size},
                          {"grad_accum_steps", tc.grad_accum_steps},
                          {"learning_rate", tc.learning_rate},
                          {"cosine_schedule", tc.cosine_schedule},
                          {"weight_decay", tc.weight_decay},
                          {"dropout", tc.dropout},
                          {"epochs", tc.epochs},
                          {"seed", tc.seed}};
}

}  // namespace

void cmd_gen(const GenOptions& opts, std::ostream& out) {
    if (opts.n_stage1 <= 0 || opts.n_stage2 <= 0 || opts.n_eval <= 0)
        throw config_error("sample counts must be positive");
    if (opts.t_len <= 0) throw config_error("t_len must be positive");
    if (opts.max_pairs <= 0) throw config_error("max_pairs must be positive");
    if (opts.none_fraction < 0.0 || opts.none_fraction > 1.0)
        throw config_error("none_fraction must be in [0,1]");

    const Vocab vocab = Vocab::kv_vocab(opts.task.alphabet.n_keys, opts.task.alphabet.n_values);
    std::filesystem::create_directories(opts.out_dir);

    auto write_split = [&](const std::string& file, const std::string& kind, std::uint64_t label,
                           auto&& generate) {
        Dataset ds;
        ds.kind = kind;
        ds.grid = opts.task.grid;
        ds.alphabet = opts.task.alphabet;
        ds.vocab = vocab;
        ds.seed = derive_seed(opts.seed, {label});
        ds.samples = generate(ds.seed);
        const std::string path = opts.out_dir + "/" + file;
        save_dataset(path, ds);
        out << "wrote " << ds.samples.size() << " " << kind << " samples to " << path << "\n";
    };

    write_split("stage1.jsonl", "single_frame", kSeedSplitStage1, [&](std::uint64_t s) {
        return gen_single_frame(opts.n_stage1, opts.max_pairs, opts.none_fraction, vocab, opts.task,
                                s);
    });
    write_split("stage2.jsonl", "stream", kSeedSplitStage2, [&](std::uint64_t s) {
        return gen_kv_stream(opts.n_stage2, opts.t_len, vocab, opts.task, s);
    });
    write_split("eval.jsonl", "stream", kSeedSplitEval, [&](std::uint64_t s) {
        return gen_kv_stream(opts.n_eval, opts.t_len, vocab, opts.task, s);
    });

    nlohmann::json manifest{{"seed", opts.seed},
                            {"n_stage1", opts.n_stage1},
                            {"n_stage2", opts.n_stage2},
                            {"n_eval", opts.n_eval},
                            {"t_len", opts.t_len},
                            {"max_pairs", opts.max_pairs},
                            {"none_fraction", opts.none_fraction},
                            {"grid", opts.task.grid},
                            {"n_keys", opts.task.alphabet.n_keys},
                            {"n_values", opts.task.alphabet.n_values},
                            {"n_distract", opts.task.alphabet.n_distract},
                            {"noise_cells", opts.task.noise_cells}};
    write_text(opts.out_dir + "/gen_config.json", manifest.dump(2) + "\n");
}

void cmd_train(const TrainCmdOptions& opts, std::ostream& out) {
    if (opts.stages < 0 || opts.stages > 2) throw config_error("stages must be 0, 1 or 2");
    SystemConfig sc = opts.system.resolved();
    sc.validate();
    for (const std::string& w : sc.warnings()) out << "warning: " << w << "\n";

    const std::string run_dir = opts.out_dir + "/" + method_name(sc.method);
    std::filesystem::create_directories(run_dir);

    QaSystem sys = [&] {
        if (opts.stages == 2) {
            // Continue from the stage-1 result saved in this run directory.
            QaSystem loaded = QaSystem::load(run_dir);
            if (loaded.cfg.to_json() != sc.to_json())
                throw config_error("existing run at " + run_dir +
                                   " was trained with a different configuration");
            return loaded;
        }
        return QaSystem::create(sc);
    }();

    std::string log_lines;
    auto run_stage = [&](int stage, TrainConfig cfg, const std::string& file,
                         const std::string& kind) {
        Dataset ds = load_split(opts.data_dir + "/" + file, kind);
        check_dataset_matches(ds, sys);
        cfg.seed = derive_seed(sc.seed, {kSeedTrain, static_cast<std::uint64_t>(stage)});
        StepTrainer trainer(sys, stage, cfg);
        if (opts.ckpt_every > 0)
            trainer.set_step_hook([&](long long step) {
                if (step % opts.ckpt_every != 0) return;
                const std::string dir = run_dir + "/ckpt_stage" + std::to_string(stage) +
                                        "_step" + std::to_string(step);
                sys.save(dir);
                trainer.state().save(dir + "/trainer.ckpt");
            });
        TrainReport rep = trainer.run(ds.samples);
        for (const TrainLogEntry& e : rep.log)
            log_lines += nlohmann::json{{"stage", stage},
                                        {"step", e.step},
                                        {"epoch", e.epoch},
                                        {"loss", e.loss},
                                        {"lr", e.lr},
                                        {"grad_norm", e.grad_norm}}.dump() +
                "\n";
        trainer.state().save(run_dir + "/trainer_stage" + std::to_string(stage) + ".ckpt");
        out << "stage " << stage << ": " << rep.optimizer_steps << " optimizer steps over "
            << ds.samples.size() << " samples, final loss " << rep.final_loss << "\n";
        return cfg;
    };

    TrainConfig used1 = opts.stage1;
    TrainConfig used2 = opts.stage2;
    if (opts.stages == 0 || opts.stages == 1)
        used1 = run_stage(1, opts.stage1, "stage1.jsonl", "single_frame");
    if (opts.stages == 0 || opts.stages == 2)
        used2 = run_stage(2, opts.stage2, "stage2.jsonl", "stream");

    sys.save(run_dir);
    write_text(run_dir + "/train_log.jsonl", log_lines);
    nlohmann::json resolved{{"system", sc.to_json()},
                            {"stages", opts.stages},
                            {"stage1", train_config_json(used1)},
                            {"stage2", train_config_json(used2)},
                            {"data_dir", opts.data_dir},
                            {"config_digest", config_digest_of(sc.to_json())}};
    write_text(run_dir + "/resolved_config.json", resolved.dump(2) + "\n");
    out << "saved " << run_dir << "\n";
}

void cmd_eval(const EvalCmdOptions& opts, std::ostream& out) {
    if (opts.methods.empty()) throw config_error("eval needs at least one method");
    if (opts.n_threads <= 0) throw config_error("n_threads must be positive");
    Dataset ds = load_split(opts.data_dir + "/eval.jsonl", "stream");

    BenchReport report;
    report.seed = ds.seed;
    nlohmann::json digest_src{{"eval_seed", ds.seed}, {"n_eval", ds.samples.size()}};
    digest_src["configs"] = nlohmann::json::array();
    for (const std::string& name : opts.methods) {
        QaSystem sys = QaSystem::load(opts.runs_dir + "/" + name);
        if (method_name(sys.cfg.method) != name)
            throw load_error("run directory " + opts.runs_dir + "/" + name + " holds a " +
                             method_name(sys.cfg.method) + " system");
        check_dataset_matches(ds, sys);
        EvalOptions eo;
        eo.max_new_tokens = opts.max_new_tokens;
        eo.n_threads = opts.n_threads;
        report.rows.push_back(evaluate_system(sys, ds.samples, eo));
        digest_src["configs"].push_back(sys.cfg.to_json());
    }
    report.config_digest = config_digest_of(digest_src);
    report.validate_accounting();

    const std::string prefix =
        opts.report_prefix.empty() ? opts.runs_dir + "/report" : opts.report_prefix;
    write_text(prefix + ".txt", report.to_text());
    write_text(prefix + ".json", report.to_json().dump(2) + "\n");
    out << report.to_text();
    if (opts.reference_accounting) out << "\n" << reference_accounting_text();
}

void cmd_ask(const AskCmdOptions& opts, std::ostream& out) {
    if (opts.run_dir.empty()) throw config_error("ask needs --run");
    if (opts.data_path.empty()) throw config_error("ask needs --data");
    QaSystem sys = QaSystem::load(opts.run_dir);
    Dataset ds = load_split(opts.data_path, "stream");
    check_dataset_matches(ds, sys);
    if (opts.sample < 0 || opts.sample >= static_cast<int>(ds.samples.size()))
        throw data_error("sample index " + std::to_string(opts.sample) + " out of range [0," +
                         std::to_string(ds.samples.size()) + ")");
    const QASample& s = ds.samples[static_cast<std::size_t>(opts.sample)];

    StreamOptions so;
    so.max_new_tokens = opts.max_new_tokens;
    so.incremental = opts.incremental;
    so.order = opts.memory_first ? ConcatOrder::memory_first : ConcatOrder::question_first;
    StreamResult r = sys.answer_stream(s, so);

    out << "question: " << sys.vocab.decode(s.question) << "\n";
    if (opts.incremental)
        for (std::size_t i = 0; i < r.incremental.size(); ++i)
            out << "after frame " << i + 1 << ": " << r.incremental[i].text << "\n";
    out << "answer: " << r.final_answer.text << "\n";
    out << "gold: " << sys.vocab.decode(s.answer) << "\n";
    out << "frames=" << r.stats.frames << " entries=" << r.stats.entries
        << " memory_tokens=" << r.stats.token_count << " merges=" << r.stats.merges << "\n";

    if (opts.dump_memory) {
        const std::string dump = r.memory.dump().dump(2) + "\n";
        if (opts.memory_out.empty()) {
            out << dump;
        } else {
            write_text(opts.memory_out, dump);
            out << "memory dump written to " << opts.memory_out << "\n";
        }
    }
}

std::string reference_accounting_text() {
    const int patch = 576;  // 24x24 patch grid
    const int capacity = 10;
    const int context = 64;
    std::string s;
    s += "flagship geometry: " + std::to_string(patch) + " patch rows per frame\n";
    s += "  memory tokens: " + std::to_string(capacity) + " x " + std::to_string(context) + " = " +
         std::to_string(capacity * context) + "\n";
    for (int c : {64, 32, 1})
        s += "  keep ratio at C=" + std::to_string(c) + ": " +
             format_percent(compression_ratio_percent(c, patch)) + "\n";
    return s;
}

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"question-conditioned stream compression workbench"};
    app.set_config("--config", "", "read options from an INI/TOML file");
    app.require_subcommand(1);

    GenOptions g;
    CLI::App* gen = app.add_subcommand("gen", "generate train/eval datasets");
    gen->add_option("--out", g.out_dir, "output directory");
    gen->add_option("--seed", g.seed, "master data seed");
    gen->add_option("--n-stage1", g.n_stage1, "single-frame training samples");
    gen->add_option("--n-stage2", g.n_stage2, "stream training samples");
    gen->add_option("--n-eval", g.n_eval, "held-out streams");
    gen->add_option("--t-len", g.t_len, "frames per stream");
    gen->add_option("--max-pairs", g.max_pairs, "pairs per single frame");
    gen->add_option("--none-fraction", g.none_fraction, "absent-key question share");
    gen->add_option("--grid", g.task.grid, "frame grid side");
    gen->add_option("--keys", g.task.alphabet.n_keys, "distinct keys");
    gen->add_option("--values", g.task.alphabet.n_values, "distinct values");
    gen->add_option("--distract", g.task.alphabet.n_distract, "distractor symbols");
    gen->add_option("--noise-cells", g.task.noise_cells, "distractor cells per frame");
    gen->callback([&] { cmd_gen(g); });

    TrainCmdOptions t;
    t.system.model.vocab_size = 0;
    t.system.model.max_positions = 0;
    t.system.model.lora_rank = 8;
    t.system.context_tokens = 8;
    t.system.memory_capacity = 4;
    t.stage1.epochs = 4;
    t.stage2.epochs = 2;
    int epochs2 = t.stage2.epochs;
    std::vector<std::string> train_methods = {"iqvic"};
    std::string step = "all";
    CLI::App* train = app.add_subcommand("train", "run the two-stage training recipe");
    train->add_option("--data", t.data_dir, "dataset directory from gen");
    train->add_option("--out", t.out_dir, "run output directory");
    train->add_option("--method", train_methods, "methods to train: iqvic | avgpool | truncate")
        ->delimiter(',');
    CLI::Option* stage_opt =
        train->add_option("--stage", t.stages, "0 = both stages, 1 or 2 = that stage only");
    train->add_option("--step", step, "1, 2 or all: which training stage(s) to run")
        ->check(CLI::IsMember({"1", "2", "all"}))
        ->excludes(stage_opt);
    train->add_option("--seed", t.system.seed, "system seed");
    train->add_option("--grid", t.system.grid, "frame grid side");
    train->add_option("--d-f", t.system.d_f, "featurizer width");
    train->add_option("--keys", t.system.alphabet.n_keys, "distinct keys");
    train->add_option("--values", t.system.alphabet.n_values, "distinct values");
    train->add_option("--distract", t.system.alphabet.n_distract, "distractor symbols");
    train->add_option("--context-tokens", t.system.context_tokens, "rows kept per frame (C)");
    train->add_option("--memory-capacity", t.system.memory_capacity, "resident entries (L)");
    train->add_option("--d-model", t.system.model.d_model, "model width");
    train->add_option("--n-heads", t.system.model.n_heads, "attention heads");
    train->add_option("--n-layers", t.system.model.n_layers, "transformer blocks");
    train->add_option("--d-ff", t.system.model.d_ff, "mlp width");
    train->add_option("--lora-rank", t.system.model.lora_rank, "adapter rank");
    train->add_option("--lora-alpha", t.system.model.lora_alpha, "adapter scale numerator");
    train->add_option("--batch", t.stage1.batch_size, "micro-batch size");
    train->add_option("--accum", t.stage1.grad_accum_steps, "micro-batches per optimizer step");
    train->add_option("--lr", t.stage1.learning_rate, "learning rate");
    train->add_flag("--cosine-lr", t.stage1.cosine_schedule,
                    "decay the rate along a half cosine over each stage's epochs");
    train->add_option("--weight-decay", t.stage1.weight_decay, "decoupled weight decay");
    train->add_option("--dropout", t.stage1.dropout, "adapter-branch dropout");
    train->add_option("--epochs1", t.stage1.epochs, "stage 1 epochs");
    train->add_option("--epochs2", epochs2, "stage 2 epochs");
    train->add_option("--ckpt-every", t.ckpt_every,
                      "also checkpoint every N optimizer steps (0 = stage end only)");
    train->callback([&] {
        if (step == "1" || step == "2") t.stages = step == "1" ? 1 : 2;
        t.stage2 = t.stage1;
        t.stage2.epochs = epochs2;
        for (const std::string& name : train_methods) {
            t.system.method = method_from_string(name);
            cmd_train(t);
        }
    });

    EvalCmdOptions e;
    CLI::App* eval = app.add_subcommand("eval", "score trained methods on the eval split");
    eval->add_option("--data", e.data_dir, "dataset directory from gen");
    eval->add_option("--runs", e.runs_dir, "directory holding trained runs");
    eval->add_option("--method", e.methods, "methods to score")->delimiter(',');
    eval->add_option("--threads", e.n_threads, "evaluation worker threads");
    eval->add_option("--max-new", e.max_new_tokens, "answer token budget");
    eval->add_option("--report-prefix", e.report_prefix, "report path prefix");
    eval->add_flag("--reference-accounting", e.reference_accounting,
                   "also print the flagship-geometry budget block");
    eval->callback([&] { cmd_eval(e); });

    AskCmdOptions a;
    CLI::App* ask = app.add_subcommand("ask", "answer one stream and show memory stats");
    ask->add_option("--run", a.run_dir, "trained method directory");
    ask->add_option("--data", a.data_path, "stream dataset file");
    ask->add_option("--sample", a.sample, "sample index");
    ask->add_option("--max-new", a.max_new_tokens, "answer token budget");
    ask->add_flag("--incremental", a.incremental, "answer after every frame");
    ask->add_flag("--memory-first", a.memory_first,
                  "ablation: stack memory rows before the question");
    ask->add_flag("--dump-memory", a.dump_memory, "dump the final memory state");
    ask->add_option("--memory-out", a.memory_out, "write the memory dump here");
    ask->callback([&] { cmd_ask(a); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int rc = app.exit(err);
        return rc == 0 ? exit_ok : exit_config;
    } catch (const config_error& err) {
        std::cerr << "config error: " << err.what() << "\n";
        return exit_config;
    } catch (const data_error& err) {
        std::cerr << "data error: " << err.what() << "\n";
        return exit_data;
    } catch (const load_error& err) {
        std::cerr << "load error: " << err.what() << "\n";
        return exit_load;
    } catch (const numeric_error& err) {
        std::cerr << "numeric error: " << err.what() << "\n";
        return exit_numeric;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return exit_failure;
    }
    return exit_ok;
}

}  // namespace iqvic
