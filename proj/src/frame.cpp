#include "iqvic/frame.hpp"

#include <cmath>

namespace iqvic {

int FrameAlphabet::key_symbol(int k) const {
    if (k < 0 || k >= n_keys)
        throw index_error("key " + std::to_string(k) + " outside [0," + std::to_string(n_keys) + ")");
    return 1 + k;
}

int FrameAlphabet::value_symbol(int v) const {
    if (v < 0 || v >= n_values)
        throw index_error("value " + std::to_string(v) + " outside [0," + std::to_string(n_values) +
                          ")");
    return 1 + n_keys + v;
}

int FrameAlphabet::distract_symbol(int i) const {
    if (i < 0 || i >= n_distract)
        throw index_error("distractor " + std::to_string(i) + " outside [0," +
                          std::to_string(n_distract) + ")");
    return 1 + n_keys + n_values + i;
}

int FrameAlphabet::value_of(int sym) const {
    if (!is_value(sym)) throw index_error("symbol " + std::to_string(sym) + " is not a value symbol");
    return sym - 1 - n_keys;
}

FrameFeaturizer::FrameFeaturizer(int grid, int alphabet_size, int d_f, std::uint64_t seed)
    : grid_(grid), alphabet_(alphabet_size), d_f_(d_f) {
    if (grid <= 0) throw config_error("featurizer grid must be positive");
    if (alphabet_size <= 0) throw config_error("featurizer alphabet must be positive");
    if (d_f <= 0) throw config_error("featurizer feature dim must be positive");
    std::mt19937_64 rng(seed);
    sym_table = Tensor::randn({alphabet_, d_f_}, rng, 1.0);
    cell_table = Tensor::randn({patch_tokens(), d_f_}, rng, 1.0);
}

Tensor FrameFeaturizer::encode(const SymbolicFrame& f) const {
    if (f.grid != grid_)
        throw dim_error("frame grid " + std::to_string(f.grid) + " does not match featurizer grid " +
                        std::to_string(grid_));
    int p = patch_tokens();
    if ((int)f.cells.size() != p)
        throw dim_error("frame has " + std::to_string(f.cells.size()) + " cells, expected " +
                        std::to_string(p));
    Tensor out(Shape{p, d_f_});
    for (int i = 0; i < p; ++i) {
        int sym = f.cells[i];
        if (sym < 0 || sym >= alphabet_)
            throw index_error("cell " + std::to_string(i) + " holds symbol " + std::to_string(sym) +
                              " outside alphabet of size " + std::to_string(alphabet_));
        for (int c = 0; c < d_f_; ++c)
            out.at(i, c) = sym_table.at(sym, c) + cell_table.at(i, c);
    }
    return out;
}

FrameProjector::FrameProjector(int d_f, int d_e, std::uint64_t seed) {
    if (d_f <= 0 || d_e <= 0) throw config_error("projector dims must be positive");
    std::mt19937_64 rng(seed);
    w1 = Tensor::randn({d_f, d_e}, rng, 1.0 / std::sqrt((double)d_f));
    b1 = Tensor::zeros({d_e});
    w2 = Tensor::randn({d_e, d_e}, rng, 1.0 / std::sqrt((double)d_e));
    b2 = Tensor::zeros({d_e});
}

Tensor FrameProjector::apply(const Tensor& features) const {
    if (!features.defined() || features.shape().size() != 2 || features.cols() != feature_dim())
        throw dim_error("projector expects [n," + std::to_string(feature_dim()) + "] features");
    Tensor h = gelu(add_row_bias(matmul(features, w1), b1));
    return add_row_bias(matmul(h, w2), b2);
}

std::vector<std::pair<std::string, Tensor>> FrameProjector::named_parameters() {
    return {{"proj.w1", w1}, {"proj.b1", b1}, {"proj.w2", w2}, {"proj.b2", b2}};
}

void FrameProjector::set_trainable(bool trainable) {
    for (auto& [n, t] : named_parameters()) t.set_requires_grad(trainable);
}

void FrameProjector::zero_grads() {
    for (auto& [n, t] : named_parameters()) t.zero_grad();
}

FrameEmbedding embed_frame(const FrameFeaturizer& fe, const FrameProjector& proj,
                           const SymbolicFrame& frame) {
    return FrameEmbedding{proj.apply(fe.encode(frame)), frame.source_index};
}

}  // namespace iqvic
