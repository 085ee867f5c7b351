#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "iqvic/error.hpp"

namespace iqvic {

// Dimensions of a dense row-major array. Rank 1 or 2 everywhere in practice.
using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
long long shape_size(const Shape& s);

namespace detail {

struct Storage {
    Shape shape;
    std::vector<double> value;
    // Allocated (same length as value) iff wants_grad; holds accumulated d(loss)/d(value).
    std::vector<double> grad;
    // True when gradient should be accumulated here: set explicitly on leaves,
    // inherited by op outputs recorded on an active tape.
    bool wants_grad = false;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

}  // namespace detail

// Value-semantic handle to shared storage. Copying a Tensor aliases the same
// buffer; clone() makes a detached deep copy.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double v);
    static Tensor scalar(double v);
    static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0);

    bool defined() const { return s_ != nullptr; }
    const Shape& shape() const;
    // Rank-2 accessors; throw dim_error on other ranks.
    int rows() const;
    int cols() const;
    long long size() const;

    double* data();
    const double* data() const;
    double& at(long long i);
    double at(long long i) const;
    double& at(int r, int c);
    double at(int r, int c) const;
    // Scalar read; contract_error unless size() == 1.
    double item() const;

    void set_requires_grad(bool b);
    bool requires_grad() const;
    bool has_grad() const;
    double* grad();
    const double* grad() const;
    void zero_grad();

    Tensor clone() const;
    bool same_storage(const Tensor& o) const { return s_ == o.s_; }

    const std::shared_ptr<detail::Storage>& ptr() const { return s_; }

private:
    explicit Tensor(std::shared_ptr<detail::Storage> s) : s_(std::move(s)) {}
    std::shared_ptr<detail::Storage> s_;

    friend Tensor make_tensor(std::shared_ptr<detail::Storage>);
};

// Define-by-run gradient tape. Constructing a Tape makes it the active tape for
// the current thread (stack discipline via nesting); ops executed while a tape
// is active append backward closures in execution order, and backward() replays
// them strictly in reverse. Gradients accumulate (+=) into every storage with
// wants_grad; storages without it are left untouched, so frozen parameters keep
// exactly-zero gradients.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // loss must be a scalar recorded under this tape (or a leaf). Seeds
    // d(loss)/d(loss) = 1 and runs all closures in reverse insertion order.
    void backward(const Tensor& loss);

    std::size_t node_count() const { return nodes_.size(); }

    static Tape* active();
    // out is the op's output storage; its grad buffer is reset at the start of
    // every backward() so repeated passes do not double-count intermediates.
    void record(std::shared_ptr<detail::Storage> out, std::function<void()> backward_fn);

private:
    std::vector<std::function<void()>> nodes_;
    std::vector<std::shared_ptr<detail::Storage>> outputs_;
    Tape* prev_ = nullptr;
};

// Convenience: backward on the thread's active tape; contract_error if none.
void backward(const Tensor& loss);

// ---------------- differentiable ops ----------------
// Every op validates shapes (dim_error), computes eagerly, verifies the result
// is finite (numeric_error), and registers a backward closure when a tape is
// active and any input wants gradient.

Tensor matmul(const Tensor& a, const Tensor& b);   // [m,k]x[k,n] -> [m,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a x b^T: [m,k]x[n,k] -> [m,n]
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);      // elementwise
Tensor scale(const Tensor& a, double s);
Tensor add_row_bias(const Tensor& x, const Tensor& bias);  // [n,d] + [d]
Tensor gelu(const Tensor& x);                      // exact erf form
Tensor softmax_lastdim(const Tensor& x);           // max-subtracted, rows sum to 1
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
// Mean of -log p(target) over rows where mask != 0. logits [n,v]; at least one
// masked-in row (contract_error); masked-in targets must lie in [0,v).
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<std::uint8_t>& mask);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, int row_begin, int row_end);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& x, int col_begin, int col_end);
// Gather rows of table by id; backward scatter-adds into the table.
Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids);
// Entries with column > row are replaced by a large negative constant so that
// softmax assigns them exactly zero probability.
Tensor causal_mask_fill(const Tensor& scores);
// Inverted dropout: keep with prob 1-p and scale by 1/(1-p). p == 0 is the
// identity (no tape node). Draws one uniform per element from rng.
Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng);
Tensor sum_all(const Tensor& x);  // -> scalar

// Low-rank adapted linear map: x W + (alpha/r) (x A) B. With B == 0 this is
// bit-identical to x W. Optional dropout (train-time) on the adapter branch.
Tensor apply_lora(const Tensor& x, const Tensor& w, const Tensor& a, const Tensor& b,
                  double alpha, int r, double dropout_p = 0.0,
                  std::mt19937_64* rng = nullptr);

// ---------------- small numeric/rng utilities ----------------

// Cosine similarity of flattened contents; 0.0 when either norm < 1e-12.
double cosine_flat(const Tensor& a, const Tensor& b);

// splitmix64: cheap stateless seed derivation for independent substreams.
std::uint64_t splitmix64(std::uint64_t x);
// Fold a list of components into one substream seed.
std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> path);

// FNV-1a over a token sequence; used to tag question-conditioned state.
std::uint64_t fnv1a(const std::vector<int>& ids);
std::uint64_t fnv1a_bytes(const void* data, std::size_t n, std::uint64_t h = 1469598103934665603ull);

}  // namespace iqvic
