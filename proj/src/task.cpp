#include "iqvic/task.hpp"

#include <algorithm>
#include <fstream>
#include <random>

#include "iqvic/tensor.hpp"
#include "json.hpp"

namespace iqvic {

namespace {

void validate_options(const TaskOptions& opt, int cells_needed) {
    if (opt.grid <= 0) throw config_error("task grid must be positive");
    if (opt.noise_cells < 0) throw config_error("noise_cells must be non-negative");
    if (cells_needed + opt.noise_cells > opt.grid * opt.grid)
        throw config_error("grid " + std::to_string(opt.grid) + "x" + std::to_string(opt.grid) +
                           " cannot hold " + std::to_string(cells_needed) + " pair cells plus " +
                           std::to_string(opt.noise_cells) + " noise cells");
    if (opt.alphabet.n_distract <= 0 && opt.noise_cells > 0)
        throw config_error("noise cells requested but the alphabet has no distractor symbols");
}

void check_vocab_matches(const Vocab& vocab, const FrameAlphabet& alpha) {
    if (vocab.n_keys != alpha.n_keys || vocab.n_values != alpha.n_values)
        throw config_error("vocabulary keys/values (" + std::to_string(vocab.n_keys) + "," +
                           std::to_string(vocab.n_values) + ") do not match the frame alphabet (" +
                           std::to_string(alpha.n_keys) + "," + std::to_string(alpha.n_values) + ")");
}

// First k elements of a seeded shuffle of 0..n-1.
std::vector<int> sample_distinct(int n, int k, std::mt19937_64& rng) {
    std::vector<int> pool(n);
    for (int i = 0; i < n; ++i) pool[i] = i;
    for (int i = 0; i < k; ++i) {
        int j = i + (int)(rng() % (std::uint64_t)(n - i));
        std::swap(pool[i], pool[j]);
    }
    pool.resize(k);
    return pool;
}

void fill_noise(SymbolicFrame& f, int begin, int count, const FrameAlphabet& alpha,
                std::mt19937_64& rng) {
    for (int i = 0; i < count; ++i)
        f.cells[begin + i] = alpha.distract_symbol((int)(rng() % (std::uint64_t)alpha.n_distract));
}

}  // namespace

std::vector<QASample> gen_kv_stream(int n, int t_len, const Vocab& vocab, const TaskOptions& opt,
                                    std::uint64_t seed) {
    if (n <= 0) throw config_error("gen_kv_stream: sample count must be positive");
    if (t_len <= 0) throw config_error("gen_kv_stream: stream length must be positive");
    validate_options(opt, 2);
    check_vocab_matches(vocab, opt.alphabet);
    const FrameAlphabet& alpha = opt.alphabet;
    if (t_len > alpha.n_keys || t_len > alpha.n_values)
        throw config_error("stream length " + std::to_string(t_len) +
                           " exceeds distinct keys/values (" + std::to_string(alpha.n_keys) + "," +
                           std::to_string(alpha.n_values) + ")");
    int p = opt.grid * opt.grid;
    std::vector<QASample> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        std::mt19937_64 rng(derive_seed(seed, {(std::uint64_t)i}));
        std::vector<int> keys = sample_distinct(alpha.n_keys, t_len, rng);
        std::vector<int> values = sample_distinct(alpha.n_values, t_len, rng);
        QASample s;
        s.sample_index = i;
        for (int t = 0; t < t_len; ++t) {
            SymbolicFrame f{opt.grid, std::vector<int>(p, FrameAlphabet::blank), t};
            f.cells[0] = alpha.key_symbol(keys[t]);
            f.cells[1] = alpha.value_symbol(values[t]);
            fill_noise(f, 2, opt.noise_cells, alpha, rng);
            s.frames.push_back(std::move(f));
        }
        int asked = (int)(rng() % (std::uint64_t)t_len);
        s.question = vocab.question_for_key(keys[asked]);
        s.answer = {vocab.value_token(values[asked])};
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<QASample> gen_single_frame(int n, int max_pairs, double none_fraction,
                                       const Vocab& vocab, const TaskOptions& opt,
                                       std::uint64_t seed) {
    if (n <= 0) throw config_error("gen_single_frame: sample count must be positive");
    if (max_pairs <= 0) throw config_error("gen_single_frame: max_pairs must be positive");
    if (none_fraction < 0.0 || none_fraction > 1.0)
        throw config_error("gen_single_frame: none_fraction must be in [0,1]");
    validate_options(opt, 2 * max_pairs);
    check_vocab_matches(vocab, opt.alphabet);
    const FrameAlphabet& alpha = opt.alphabet;
    if (max_pairs > alpha.n_keys || max_pairs > alpha.n_values)
        throw config_error("max_pairs exceeds distinct keys/values");
    int p = opt.grid * opt.grid;
    std::vector<QASample> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        std::mt19937_64 rng(derive_seed(seed, {(std::uint64_t)i}));
        int n_pairs = 1 + (int)(rng() % (std::uint64_t)max_pairs);
        std::vector<int> keys = sample_distinct(alpha.n_keys, n_pairs, rng);
        std::vector<int> values = sample_distinct(alpha.n_values, n_pairs, rng);
        QASample s;
        s.sample_index = i;
        SymbolicFrame f{opt.grid, std::vector<int>(p, FrameAlphabet::blank), 0};
        for (int j = 0; j < n_pairs; ++j) {
            f.cells[2 * j] = alpha.key_symbol(keys[j]);
            f.cells[2 * j + 1] = alpha.value_symbol(values[j]);
        }
        fill_noise(f, 2 * n_pairs, opt.noise_cells, alpha, rng);
        s.frames.push_back(std::move(f));

        bool ask_absent = false;
        if (n_pairs < alpha.n_keys) {
            double u = (double)(rng() >> 11) * 0x1.0p-53;  // uniform [0,1)
            ask_absent = u < none_fraction;
        }
        if (ask_absent) {
            std::vector<int> absent;
            for (int k = 0; k < alpha.n_keys; ++k)
                if (std::find(keys.begin(), keys.end(), k) == keys.end()) absent.push_back(k);
            int k = absent[(int)(rng() % absent.size())];
            s.question = vocab.question_for_key(k);
            s.answer = {Vocab::none_id};
        } else {
            int j = (int)(rng() % (std::uint64_t)n_pairs);
            s.question = vocab.question_for_key(keys[j]);
            s.answer = {vocab.value_token(values[j])};
        }
        out.push_back(std::move(s));
    }
    return out;
}

void save_dataset(const std::string& path, const Dataset& ds) {
    if (ds.kind != "single_frame" && ds.kind != "stream")
        throw contract_error("save_dataset: kind must be single_frame or stream, got " + ds.kind);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw data_error("save_dataset: cannot open for writing: " + path);
    nlohmann::json header;
    header["format"] = Dataset::format_version;
    header["kind"] = ds.kind;
    header["grid"] = ds.grid;
    header["alphabet"] = {{"n_keys", ds.alphabet.n_keys},
                          {"n_values", ds.alphabet.n_values},
                          {"n_distract", ds.alphabet.n_distract}};
    header["vocab"] = ds.vocab.words;
    header["seed"] = ds.seed;
    header["count"] = ds.samples.size();
    os << header.dump() << "\n";
    for (const QASample& s : ds.samples) {
        nlohmann::json line;
        line["index"] = s.sample_index;
        nlohmann::json frames = nlohmann::json::array();
        for (const SymbolicFrame& f : s.frames) frames.push_back(f.cells);
        line["frames"] = frames;
        line["question"] = ds.vocab.decode(s.question);
        line["answer"] = ds.vocab.decode(s.answer);
        os << line.dump() << "\n";
    }
    if (!os) throw data_error("save_dataset: write failed: " + path);
}

Dataset load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw data_error("load_dataset: cannot open: " + path);
    std::string line;
    if (!std::getline(is, line)) throw data_error("load_dataset: missing header line in " + path);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw data_error("load_dataset: bad header in " + path + ": " + e.what());
    }
    if (!header.contains("format") || header["format"] != Dataset::format_version)
        throw data_error("load_dataset: " + path + " is not a " +
                         std::string(Dataset::format_version) + " file");
    Dataset ds;
    try {
        ds.kind = header.at("kind").get<std::string>();
        ds.grid = header.at("grid").get<int>();
        ds.alphabet.n_keys = header.at("alphabet").at("n_keys").get<int>();
        ds.alphabet.n_values = header.at("alphabet").at("n_values").get<int>();
        ds.alphabet.n_distract = header.at("alphabet").at("n_distract").get<int>();
        ds.seed = header.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw data_error("load_dataset: incomplete header in " + path + ": " + e.what());
    }
    if (ds.kind != "single_frame" && ds.kind != "stream")
        throw data_error("load_dataset: unknown kind " + ds.kind);
    ds.vocab = Vocab::kv_vocab(ds.alphabet.n_keys, ds.alphabet.n_values);
    if (header.at("vocab").get<std::vector<std::string>>() != ds.vocab.words)
        throw data_error("load_dataset: header vocabulary does not match its key/value counts");
    std::size_t expected = header.at("count").get<std::size_t>();
    int p = ds.grid * ds.grid;
    int line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw data_error("load_dataset: bad sample at " + path + ":" +
                             std::to_string(line_no) + ": " + e.what());
        }
        QASample s;
        try {
            s.sample_index = j.at("index").get<int>();
            for (const auto& cells : j.at("frames")) {
                SymbolicFrame f{ds.grid, cells.get<std::vector<int>>(),
                                (int)s.frames.size()};
                if ((int)f.cells.size() != p)
                    throw data_error("frame with " + std::to_string(f.cells.size()) +
                                     " cells, expected " + std::to_string(p));
                for (int sym : f.cells)
                    if (sym < 0 || sym >= ds.alphabet.size())
                        throw data_error("symbol " + std::to_string(sym) + " outside alphabet");
                s.frames.push_back(std::move(f));
            }
            s.question = ds.vocab.encode(j.at("question").get<std::string>());
            s.answer = ds.vocab.encode(j.at("answer").get<std::string>());
        } catch (const nlohmann::json::exception& e) {
            throw data_error("load_dataset: malformed sample at " + path + ":" +
                             std::to_string(line_no) + ": " + e.what());
        } catch (const data_error& e) {
            throw data_error("load_dataset: " + path + ":" + std::to_string(line_no) + ": " +
                             e.what());
        }
        if (s.frames.empty())
            throw data_error("load_dataset: sample without frames at " + path + ":" +
                             std::to_string(line_no));
        if (ds.kind == "single_frame" && s.frames.size() != 1)
            throw data_error("load_dataset: single_frame sample with " +
                             std::to_string(s.frames.size()) + " frames at " + path + ":" +
                             std::to_string(line_no));
        ds.samples.push_back(std::move(s));
    }
    if (ds.samples.size() != expected)
        throw data_error("load_dataset: " + path + " holds " + std::to_string(ds.samples.size()) +
                         " samples but the header promises " + std::to_string(expected));
    return ds;
}

}  // namespace iqvic
