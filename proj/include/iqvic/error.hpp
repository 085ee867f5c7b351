#pragma once

#include <stdexcept>
#include <string>

namespace iqvic {

// Base class for everything this library throws on purpose.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or width mismatch between operands.
struct dim_error : error {
    using error::error;
};

// An id addressed a row outside its table (token id, symbol id, target id).
struct index_error : error {
    using error::error;
};

// A sequence would not fit (max_positions, decode budget).
struct capacity_error : error {
    using error::error;
};

// An operation was invoked outside its contract (empty memory, non-scalar loss).
struct contract_error : error {
    using error::error;
};

// Mixing state built under different questions.
struct consistency_error : error {
    using error::error;
};

// NaN/Inf surfaced in a forward computation.
struct numeric_error : error {
    using error::error;
};

// Invalid configuration value or combination.
struct config_error : error {
    using error::error;
};

// Malformed dataset or input file, unknown vocabulary words.
struct data_error : error {
    using error::error;
};

// Checkpoint or report file missing/unreadable/incompatible.
struct load_error : error {
    using error::error;
};

}  // namespace iqvic
