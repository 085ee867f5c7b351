#pragma once

#include <string>
#include <utility>
#include <vector>

#include "iqvic/tensor.hpp"
#include "json.hpp"

namespace iqvic {

// Single-file tensor archive: one JSON manifest line (format version, free-form
// meta object, ordered tensor directory with shapes) followed by the raw
// little-endian float64 payload concatenated in directory order.
struct Checkpoint {
    static constexpr const char* format_version = "iqvic-ckpt-v1";

    nlohmann::json meta = nlohmann::json::object();
    std::vector<std::pair<std::string, Tensor>> tensors;

    void add(const std::string& name, const Tensor& t);
    bool has(const std::string& name) const;
    const Tensor& get(const std::string& name) const;  // load_error if absent

    // Copies the stored payload into dst; load_error on missing name or shape
    // mismatch. dst keeps its identity (training state stays wired up).
    void read_into(const std::string& name, Tensor dst) const;
    void read_all_into(std::vector<std::pair<std::string, Tensor>> dsts) const;

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);
};

}  // namespace iqvic
