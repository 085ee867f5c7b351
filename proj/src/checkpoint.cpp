#include "iqvic/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is written as native little-endian float64");

namespace iqvic {

void Checkpoint::add(const std::string& name, const Tensor& t) {
    if (!t.defined()) throw contract_error("checkpoint: cannot add undefined tensor " + name);
    if (has(name)) throw contract_error("checkpoint: duplicate tensor name " + name);
    tensors.emplace_back(name, t);
}

bool Checkpoint::has(const std::string& name) const {
    for (auto& [n, t] : tensors)
        if (n == name) return true;
    return false;
}

const Tensor& Checkpoint::get(const std::string& name) const {
    for (auto& [n, t] : tensors)
        if (n == name) return t;
    throw load_error("checkpoint: tensor not found: " + name);
}

void Checkpoint::read_into(const std::string& name, Tensor dst) const {
    const Tensor& src = get(name);
    if (src.shape() != dst.shape())
        throw load_error("checkpoint: shape mismatch for " + name + ": stored " +
                         shape_str(src.shape()) + ", expected " + shape_str(dst.shape()));
    std::memcpy(dst.data(), src.data(), sizeof(double) * src.size());
}

void Checkpoint::read_all_into(std::vector<std::pair<std::string, Tensor>> dsts) const {
    for (auto& [name, t] : dsts) read_into(name, t);
}

void Checkpoint::save(const std::string& path) const {
    nlohmann::json manifest;
    manifest["version"] = format_version;
    manifest["meta"] = meta;
    nlohmann::json dir = nlohmann::json::array();
    for (auto& [name, t] : tensors) dir.push_back({{"name", name}, {"shape", t.shape()}});
    manifest["tensors"] = dir;

    std::ofstream os(path, std::ios::binary);
    if (!os) throw load_error("checkpoint: cannot open for writing: " + path);
    os << manifest.dump() << "\n";
    for (auto& [name, t] : tensors)
        os.write(reinterpret_cast<const char*>(t.data()),
                 (std::streamsize)(sizeof(double) * t.size()));
    if (!os) throw load_error("checkpoint: write failed: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw load_error("checkpoint: cannot open: " + path);
    std::string line;
    if (!std::getline(is, line)) throw load_error("checkpoint: missing manifest line: " + path);
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw load_error("checkpoint: bad manifest in " + path + ": " + e.what());
    }
    if (!manifest.contains("version") || manifest["version"] != format_version)
        throw load_error("checkpoint: " + path + " is not a " + std::string(format_version) +
                         " file");
    Checkpoint ck;
    ck.meta = manifest.value("meta", nlohmann::json::object());
    for (const auto& entry : manifest.at("tensors")) {
        std::string name = entry.at("name").get<std::string>();
        Shape shape = entry.at("shape").get<Shape>();
        Tensor t{shape};
        is.read(reinterpret_cast<char*>(t.data()), (std::streamsize)(sizeof(double) * t.size()));
        if (is.gcount() != (std::streamsize)(sizeof(double) * t.size()))
            throw load_error("checkpoint: truncated payload for " + name + " in " + path);
        ck.tensors.emplace_back(name, t);
    }
    char extra;
    if (is.read(&extra, 1))
        throw load_error("checkpoint: trailing bytes after payload in " + path);
    for (auto& [name, t] : ck.tensors)
        for (long long i = 0; i < t.size(); ++i)
            if (!std::isfinite(t.data()[i]))
                throw load_error("checkpoint: non-finite value in tensor " + name);
    return ck;
}

}  // namespace iqvic
