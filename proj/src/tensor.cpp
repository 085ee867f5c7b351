#include "iqvic/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace iqvic {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

long long shape_size(const Shape& s) {
    long long n = 1;
    for (int d : s) n *= d;
    return n;
}

namespace {

void validate_shape(const Shape& s) {
    if (s.empty() || s.size() > 2)
        throw dim_error("tensor rank must be 1 or 2, got " + shape_str(s));
    for (int d : s)
        if (d <= 0) throw dim_error("tensor dims must be positive, got " + shape_str(s));
}

void check_finite(const Tensor& t, const char* op) {
    const double* p = t.data();
    long long n = t.size();
    for (long long i = 0; i < n; ++i) {
        if (!std::isfinite(p[i]))
            throw numeric_error(std::string(op) + " produced a non-finite value at index " +
                                std::to_string(i));
    }
}

// C[m,n] += A[m,k] B[k,n]
void mm_acc(double* c, const double* a, const double* b, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ar = a + (long long)i * k;
        double* cr = c + (long long)i * n;
        for (int kk = 0; kk < k; ++kk) {
            double av = ar[kk];
            if (av == 0.0) continue;
            const double* br = b + (long long)kk * n;
            for (int j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

// C[m,n] += A[m,k] B[n,k]^T  (row-dot-row)
void mm_abT_acc(double* c, const double* a, const double* b, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ar = a + (long long)i * k;
        double* cr = c + (long long)i * n;
        for (int j = 0; j < n; ++j) {
            const double* br = b + (long long)j * k;
            double acc = 0.0;
            for (int kk = 0; kk < k; ++kk) acc += ar[kk] * br[kk];
            cr[j] += acc;
        }
    }
}

// C[m,n] += A[k,m]^T B[k,n]  (outer-product accumulation)
void mm_aTb_acc(double* c, const double* a, const double* b, int m, int k, int n) {
    for (int kk = 0; kk < k; ++kk) {
        const double* ar = a + (long long)kk * m;
        const double* br = b + (long long)kk * n;
        for (int i = 0; i < m; ++i) {
            double av = ar[i];
            if (av == 0.0) continue;
            double* cr = c + (long long)i * n;
            for (int j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

using StoragePtr = std::shared_ptr<detail::Storage>;

bool want(const StoragePtr& s) { return s && s->wants_grad; }

// Marks the output as gradient-carrying and records the closure, but only when
// a tape is active and some input actually wants gradient. Inference runs the
// same code with zero bookkeeping.
void maybe_record(Tensor& out, std::initializer_list<const Tensor*> inputs,
                  std::function<void()> fn) {
    Tape* t = Tape::active();
    if (!t) return;
    bool any = false;
    for (const Tensor* in : inputs)
        if (in->defined() && in->ptr()->wants_grad) { any = true; break; }
    if (!any) return;
    out.ptr()->wants_grad = true;
    out.ptr()->ensure_grad();
    t->record(out.ptr(), std::move(fn));
}

void require_defined(const Tensor& t, const char* op) {
    if (!t.defined()) throw contract_error(std::string(op) + " called on an undefined tensor");
}

void require_rank2(const Tensor& t, const char* op) {
    if (t.shape().size() != 2)
        throw dim_error(std::string(op) + " requires a rank-2 tensor, got " + shape_str(t.shape()));
}

}  // namespace

// ---------------- Tensor ----------------

Tensor::Tensor(Shape shape) {
    validate_shape(shape);
    s_ = std::make_shared<detail::Storage>();
    s_->value.assign(shape_size(shape), 0.0);
    s_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) {
    validate_shape(shape);
    if ((long long)values.size() != shape_size(shape))
        throw dim_error("value count " + std::to_string(values.size()) +
                        " does not match shape " + shape_str(shape));
    s_ = std::make_shared<detail::Storage>();
    s_->shape = std::move(shape);
    s_->value = std::move(values);
}

Tensor Tensor::zeros(Shape shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(Shape shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.s_->value.begin(), t.s_->value.end(), v);
    return t;
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{1}, {v}); }

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& x : t.s_->value) x = dist(rng);
    return t;
}

const Shape& Tensor::shape() const {
    if (!s_) throw contract_error("shape() on an undefined tensor");
    return s_->shape;
}

int Tensor::rows() const {
    require_rank2(*this, "rows()");
    return s_->shape[0];
}

int Tensor::cols() const {
    require_rank2(*this, "cols()");
    return s_->shape[1];
}

long long Tensor::size() const { return s_ ? (long long)s_->value.size() : 0; }

double* Tensor::data() {
    require_defined(*this, "data()");
    return s_->value.data();
}

const double* Tensor::data() const {
    require_defined(*this, "data()");
    return s_->value.data();
}

double& Tensor::at(long long i) {
    require_defined(*this, "at()");
    if (i < 0 || i >= size()) throw index_error("flat index " + std::to_string(i) + " out of range");
    return s_->value[(std::size_t)i];
}

double Tensor::at(long long i) const { return const_cast<Tensor*>(this)->at(i); }

double& Tensor::at(int r, int c) {
    require_rank2(*this, "at(r,c)");
    if (r < 0 || r >= s_->shape[0] || c < 0 || c >= s_->shape[1])
        throw index_error("index (" + std::to_string(r) + "," + std::to_string(c) +
                          ") out of range for " + shape_str(s_->shape));
    return s_->value[(std::size_t)r * s_->shape[1] + c];
}

double Tensor::at(int r, int c) const { return const_cast<Tensor*>(this)->at(r, c); }

double Tensor::item() const {
    require_defined(*this, "item()");
    if (size() != 1) throw contract_error("item() requires a size-1 tensor, got " + shape_str(shape()));
    return s_->value[0];
}

void Tensor::set_requires_grad(bool b) {
    require_defined(*this, "set_requires_grad()");
    s_->wants_grad = b;
    if (b)
        s_->ensure_grad();
    else
        s_->grad.clear();
}

bool Tensor::requires_grad() const { return s_ && s_->wants_grad; }

bool Tensor::has_grad() const { return s_ && !s_->grad.empty(); }

double* Tensor::grad() {
    require_defined(*this, "grad()");
    s_->ensure_grad();
    return s_->grad.data();
}

const double* Tensor::grad() const {
    require_defined(*this, "grad()");
    s_->ensure_grad();
    return s_->grad.data();
}

void Tensor::zero_grad() {
    require_defined(*this, "zero_grad()");
    if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
    require_defined(*this, "clone()");
    return Tensor(s_->shape, s_->value);
}

Tensor make_tensor(std::shared_ptr<detail::Storage> s) { return Tensor(std::move(s)); }

// ---------------- Tape ----------------

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape::Tape() {
    prev_ = g_active_tape;
    g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::shared_ptr<detail::Storage> out, std::function<void()> backward_fn) {
    outputs_.push_back(std::move(out));
    nodes_.push_back(std::move(backward_fn));
}

void Tape::backward(const Tensor& loss) {
    require_defined(loss, "backward()");
    if (loss.size() != 1)
        throw contract_error("backward() requires a scalar loss, got " + shape_str(loss.shape()));
    // Leaves keep accumulating across passes; intermediates restart at zero.
    for (auto& s : outputs_)
        if (!s->grad.empty()) std::fill(s->grad.begin(), s->grad.end(), 0.0);
    auto s = loss.ptr();
    if (s->wants_grad) {
        s->ensure_grad();
        s->grad[0] += 1.0;
    }
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

void backward(const Tensor& loss) {
    Tape* t = Tape::active();
    if (!t) throw contract_error("backward() called with no active tape");
    t->backward(loss);
}

// ---------------- ops ----------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    int m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
    if (k != k2)
        throw dim_error("matmul inner dims differ: " + shape_str(a.shape()) + " x " +
                        shape_str(b.shape()));
    Tensor out(Shape{m, n});
    mm_acc(out.data(), a.data(), b.data(), m, k, n);
    check_finite(out, "matmul");
    auto sa = a.ptr(), sb = b.ptr(), so = out.ptr();
    maybe_record(out, {&a, &b}, [sa, sb, so, m, k, n] {
        const double* g = so->grad.data();  // [m,n]
        if (want(sa)) {  // dA += G B^T : [m,n]x[k,n]^T
            sa->ensure_grad();
            mm_abT_acc(sa->grad.data(), g, sb->value.data(), m, n, k);
        }
        if (want(sb)) {  // dB += A^T G : [m,k]^T x [m,n]
            sb->ensure_grad();
            mm_aTb_acc(sb->grad.data(), sa->value.data(), g, k, m, n);
        }
    });
    return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul_nt");
    require_rank2(b, "matmul_nt");
    int m = a.rows(), k = a.cols(), n = b.rows();
    if (b.cols() != k)
        throw dim_error("matmul_nt inner dims differ: " + shape_str(a.shape()) + " x " +
                        shape_str(b.shape()) + "^T");
    Tensor out(Shape{m, n});
    mm_abT_acc(out.data(), a.data(), b.data(), m, k, n);
    check_finite(out, "matmul_nt");
    auto sa = a.ptr(), sb = b.ptr(), so = out.ptr();
    maybe_record(out, {&a, &b}, [sa, sb, so, m, k, n] {
        const double* g = so->grad.data();  // [m,n]
        if (want(sa)) {  // dA += G B : [m,n]x[n,k]
            sa->ensure_grad();
            mm_acc(sa->grad.data(), g, sb->value.data(), m, n, k);
        }
        if (want(sb)) {  // dB += G^T A : [n,m]x[m,k]
            sb->ensure_grad();
            mm_aTb_acc(sb->grad.data(), g, sa->value.data(), n, m, k);
        }
    });
    return out;
}

namespace {

Tensor elementwise2(const Tensor& a, const Tensor& b, const char* op, double sign_b) {
    require_defined(a, op);
    require_defined(b, op);
    if (a.shape() != b.shape())
        throw dim_error(std::string(op) + " shape mismatch: " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
    Tensor out(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    long long ncount = a.size();
    for (long long i = 0; i < ncount; ++i) po[i] = pa[i] + sign_b * pb[i];
    check_finite(out, op);
    auto sa = a.ptr(), sb = b.ptr(), so = out.ptr();
    maybe_record(out, {&a, &b}, [sa, sb, so, ncount, sign_b] {
        const double* g = so->grad.data();
        if (want(sa)) {
            sa->ensure_grad();
            for (long long i = 0; i < ncount; ++i) sa->grad[i] += g[i];
        }
        if (want(sb)) {
            sb->ensure_grad();
            for (long long i = 0; i < ncount; ++i) sb->grad[i] += sign_b * g[i];
        }
    });
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return elementwise2(a, b, "add", 1.0); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise2(a, b, "sub", -1.0); }

Tensor mul(const Tensor& a, const Tensor& b) {
    require_defined(a, "mul");
    require_defined(b, "mul");
    if (a.shape() != b.shape())
        throw dim_error("mul shape mismatch: " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
    Tensor out(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    long long n = a.size();
    for (long long i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    check_finite(out, "mul");
    auto sa = a.ptr(), sb = b.ptr(), so = out.ptr();
    maybe_record(out, {&a, &b}, [sa, sb, so, n] {
        const double* g = so->grad.data();
        if (want(sa)) {
            sa->ensure_grad();
            for (long long i = 0; i < n; ++i) sa->grad[i] += g[i] * sb->value[i];
        }
        if (want(sb)) {
            sb->ensure_grad();
            for (long long i = 0; i < n; ++i) sb->grad[i] += g[i] * sa->value[i];
        }
    });
    return out;
}

Tensor scale(const Tensor& a, double s) {
    require_defined(a, "scale");
    Tensor out(a.shape());
    const double* pa = a.data();
    double* po = out.data();
    long long n = a.size();
    for (long long i = 0; i < n; ++i) po[i] = pa[i] * s;
    check_finite(out, "scale");
    auto sa = a.ptr(), so = out.ptr();
    maybe_record(out, {&a}, [sa, so, n, s] {
        if (!want(sa)) return;
        sa->ensure_grad();
        const double* g = so->grad.data();
        for (long long i = 0; i < n; ++i) sa->grad[i] += g[i] * s;
    });
    return out;
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
    require_rank2(x, "add_row_bias");
    require_defined(bias, "add_row_bias");
    if (bias.shape().size() != 1 || bias.shape()[0] != x.cols())
        throw dim_error("add_row_bias: bias " + shape_str(bias.shape()) + " does not match " +
                        shape_str(x.shape()));
    int n = x.rows(), d = x.cols();
    Tensor out(Shape{n, d});
    const double* px = x.data();
    const double* pb = bias.data();
    double* po = out.data();
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < d; ++c) po[(long long)r * d + c] = px[(long long)r * d + c] + pb[c];
    check_finite(out, "add_row_bias");
    auto sx = x.ptr(), sb = bias.ptr(), so = out.ptr();
    maybe_record(out, {&x, &bias}, [sx, sb, so, n, d] {
        const double* g = so->grad.data();
        if (want(sx)) {
            sx->ensure_grad();
            for (long long i = 0; i < (long long)n * d; ++i) sx->grad[i] += g[i];
        }
        if (want(sb)) {
            sb->ensure_grad();
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < d; ++c) sb->grad[c] += g[(long long)r * d + c];
        }
    });
    return out;
}

Tensor gelu(const Tensor& x) {
    require_defined(x, "gelu");
    Tensor out(x.shape());
    const double* px = x.data();
    double* po = out.data();
    long long n = x.size();
    for (long long i = 0; i < n; ++i) po[i] = 0.5 * px[i] * (1.0 + std::erf(px[i] * M_SQRT1_2));
    check_finite(out, "gelu");
    auto sx = x.ptr(), so = out.ptr();
    maybe_record(out, {&x}, [sx, so, n] {
        if (!want(sx)) return;
        sx->ensure_grad();
        const double* g = so->grad.data();
        const double inv_sqrt_2pi = 0.3989422804014327;
        for (long long i = 0; i < n; ++i) {
            double v = sx->value[i];
            double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
            double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
            sx->grad[i] += g[i] * (cdf + v * pdf);
        }
    });
    return out;
}

Tensor softmax_lastdim(const Tensor& x) {
    require_rank2(x, "softmax_lastdim");
    int n = x.rows(), d = x.cols();
    Tensor out(Shape{n, d});
    const double* px = x.data();
    double* po = out.data();
    for (int r = 0; r < n; ++r) {
        const double* row = px + (long long)r * d;
        double* orow = po + (long long)r * d;
        double mx = row[0];
        for (int c = 1; c < d; ++c) mx = std::max(mx, row[c]);
        double sum = 0.0;
        for (int c = 0; c < d; ++c) {
            orow[c] = std::exp(row[c] - mx);
            sum += orow[c];
        }
        for (int c = 0; c < d; ++c) orow[c] /= sum;
    }
    check_finite(out, "softmax_lastdim");
    auto sx = x.ptr(), so = out.ptr();
    maybe_record(out, {&x}, [sx, so, n, d] {
        if (!want(sx)) return;
        sx->ensure_grad();
        const double* g = so->grad.data();
        const double* p = so->value.data();
        for (int r = 0; r < n; ++r) {
            const double* gr = g + (long long)r * d;
            const double* pr = p + (long long)r * d;
            double dot = 0.0;
            for (int c = 0; c < d; ++c) dot += gr[c] * pr[c];
            double* xr = sx->grad.data() + (long long)r * d;
            for (int c = 0; c < d; ++c) xr[c] += pr[c] * (gr[c] - dot);
        }
    });
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    require_rank2(x, "layer_norm");
    int n = x.rows(), d = x.cols();
    if (gain.shape() != Shape{d} || bias.shape() != Shape{d})
        throw dim_error("layer_norm: gain/bias must be [" + std::to_string(d) + "], got " +
                        shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
    if (eps <= 0.0) throw contract_error("layer_norm eps must be positive");
    Tensor out(Shape{n, d});
    // Saved for backward: normalized activations and 1/sqrt(var+eps) per row.
    auto xhat = std::make_shared<std::vector<double>>((std::size_t)n * d);
    auto inv_std = std::make_shared<std::vector<double>>(n);
    const double* px = x.data();
    const double* pg = gain.data();
    const double* pb = bias.data();
    double* po = out.data();
    for (int r = 0; r < n; ++r) {
        const double* row = px + (long long)r * d;
        double mean = 0.0;
        for (int c = 0; c < d; ++c) mean += row[c];
        mean /= d;
        double var = 0.0;
        for (int c = 0; c < d; ++c) {
            double dv = row[c] - mean;
            var += dv * dv;
        }
        var /= d;  // population variance
        double inv = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = inv;
        for (int c = 0; c < d; ++c) {
            double h = (row[c] - mean) * inv;
            (*xhat)[(std::size_t)r * d + c] = h;
            po[(long long)r * d + c] = pg[c] * h + pb[c];
        }
    }
    check_finite(out, "layer_norm");
    auto sx = x.ptr(), sg = gain.ptr(), sb = bias.ptr(), so = out.ptr();
    maybe_record(out, {&x, &gain, &bias}, [sx, sg, sb, so, xhat, inv_std, n, d] {
        const double* g = so->grad.data();
        if (want(sg)) {
            sg->ensure_grad();
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < d; ++c)
                    sg->grad[c] += g[(long long)r * d + c] * (*xhat)[(std::size_t)r * d + c];
        }
        if (want(sb)) {
            sb->ensure_grad();
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < d; ++c) sb->grad[c] += g[(long long)r * d + c];
        }
        if (want(sx)) {
            sx->ensure_grad();
            for (int r = 0; r < n; ++r) {
                const double* gr = g + (long long)r * d;
                const double* hr = xhat->data() + (std::size_t)r * d;
                double sum_gy = 0.0, sum_gyh = 0.0;
                for (int c = 0; c < d; ++c) {
                    double gy = gr[c] * sg->value[c];
                    sum_gy += gy;
                    sum_gyh += gy * hr[c];
                }
                double inv = (*inv_std)[r];
                double* xr = sx->grad.data() + (long long)r * d;
                for (int c = 0; c < d; ++c) {
                    double gy = gr[c] * sg->value[c];
                    xr[c] += inv * (gy - sum_gy / d - hr[c] * sum_gyh / d);
                }
            }
        }
    });
    return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<std::uint8_t>& mask) {
    require_rank2(logits, "cross_entropy");
    int n = logits.rows(), v = logits.cols();
    if ((int)targets.size() != n || (int)mask.size() != n)
        throw dim_error("cross_entropy: need " + std::to_string(n) + " targets and mask entries, got " +
                        std::to_string(targets.size()) + " and " + std::to_string(mask.size()));
    long long n_masked = 0;
    for (int r = 0; r < n; ++r) {
        if (!mask[r]) continue;
        ++n_masked;
        if (targets[r] < 0 || targets[r] >= v)
            throw index_error("cross_entropy: target " + std::to_string(targets[r]) + " at row " +
                              std::to_string(r) + " outside vocabulary of size " + std::to_string(v));
    }
    if (n_masked == 0) throw contract_error("cross_entropy: mask selects no rows");
    // Saved softmax probabilities for masked rows, keyed by row index.
    auto probs = std::make_shared<std::vector<double>>();
    probs->reserve((std::size_t)n_masked * v);
    auto rows = std::make_shared<std::vector<int>>();
    rows->reserve(n_masked);
    const double* px = logits.data();
    double total = 0.0;
    for (int r = 0; r < n; ++r) {
        if (!mask[r]) continue;
        const double* row = px + (long long)r * v;
        double mx = row[0];
        for (int c = 1; c < v; ++c) mx = std::max(mx, row[c]);
        double sum = 0.0;
        std::size_t base = probs->size();
        for (int c = 0; c < v; ++c) {
            double e = std::exp(row[c] - mx);
            probs->push_back(e);
            sum += e;
        }
        for (int c = 0; c < v; ++c) (*probs)[base + c] /= sum;
        total += -(row[targets[r]] - mx - std::log(sum));
        rows->push_back(r);
    }
    Tensor out = Tensor::scalar(total / (double)n_masked);
    check_finite(out, "cross_entropy");
    auto sx = logits.ptr(), so = out.ptr();
    auto tgt = std::make_shared<std::vector<int>>(targets);
    maybe_record(out, {&logits}, [sx, so, probs, rows, tgt, v, n_masked] {
        if (!want(sx)) return;
        sx->ensure_grad();
        double g = so->grad[0] / (double)n_masked;
        for (std::size_t i = 0; i < rows->size(); ++i) {
            int r = (*rows)[i];
            const double* pr = probs->data() + i * v;
            double* xr = sx->grad.data() + (long long)r * v;
            for (int c = 0; c < v; ++c) xr[c] += g * pr[c];
            xr[(*tgt)[r]] -= g;
        }
    });
    return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw contract_error("concat_rows: no parts");
    int d = -1, total = 0;
    for (const Tensor& p : parts) {
        require_rank2(p, "concat_rows");
        if (d < 0) d = p.cols();
        if (p.cols() != d)
            throw dim_error("concat_rows: width mismatch, expected " + std::to_string(d) +
                            " got " + shape_str(p.shape()));
        total += p.rows();
    }
    Tensor out(Shape{total, d});
    double* po = out.data();
    long long off = 0;
    std::vector<StoragePtr> srcs;
    bool any = false;
    for (const Tensor& p : parts) {
        std::memcpy(po + off, p.data(), (std::size_t)p.size() * sizeof(double));
        off += p.size();
        srcs.push_back(p.ptr());
        any = any || p.ptr()->wants_grad;
    }
    auto so = out.ptr();
    if (Tape::active() && any) {
        so->wants_grad = true;
        so->ensure_grad();
        Tape::active()->record(so, [srcs, so] {
            const double* g = so->grad.data();
            long long off2 = 0;
            for (const StoragePtr& s : srcs) {
                long long sz = (long long)s->value.size();
                if (want(s)) {
                    s->ensure_grad();
                    for (long long i = 0; i < sz; ++i) s->grad[i] += g[off2 + i];
                }
                off2 += sz;
            }
        });
    }
    return out;
}

Tensor slice_rows(const Tensor& x, int row_begin, int row_end) {
    require_rank2(x, "slice_rows");
    int n = x.rows(), d = x.cols();
    if (row_begin < 0 || row_end > n || row_begin >= row_end)
        throw index_error("slice_rows: [" + std::to_string(row_begin) + "," +
                          std::to_string(row_end) + ") invalid for " + std::to_string(n) + " rows");
    int m = row_end - row_begin;
    Tensor out(Shape{m, d});
    std::memcpy(out.data(), x.data() + (long long)row_begin * d, (std::size_t)m * d * sizeof(double));
    auto sx = x.ptr(), so = out.ptr();
    maybe_record(out, {&x}, [sx, so, row_begin, m, d] {
        if (!want(sx)) return;
        sx->ensure_grad();
        const double* g = so->grad.data();
        double* xg = sx->grad.data() + (long long)row_begin * d;
        for (long long i = 0; i < (long long)m * d; ++i) xg[i] += g[i];
    });
    return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw contract_error("concat_cols: no parts");
    int n = -1, total = 0;
    for (const Tensor& p : parts) {
        require_rank2(p, "concat_cols");
        if (n < 0) n = p.rows();
        if (p.rows() != n)
            throw dim_error("concat_cols: row-count mismatch, expected " + std::to_string(n) +
                            " got " + shape_str(p.shape()));
        total += p.cols();
    }
    Tensor out(Shape{n, total});
    double* po = out.data();
    int off = 0;
    for (const Tensor& p : parts) {
        int d = p.cols();
        const double* pp = p.data();
        for (int r = 0; r < n; ++r)
            std::memcpy(po + (long long)r * total + off, pp + (long long)r * d,
                        (std::size_t)d * sizeof(double));
        off += d;
    }
    std::vector<StoragePtr> srcs;
    std::vector<int> widths;
    bool any = false;
    for (const Tensor& p : parts) {
        srcs.push_back(p.ptr());
        widths.push_back(p.cols());
        any = any || p.ptr()->wants_grad;
    }
    auto so = out.ptr();
    if (Tape::active() && any) {
        so->wants_grad = true;
        so->ensure_grad();
        Tape::active()->record(so, [srcs, widths, so, n, total] {
            const double* g = so->grad.data();
            int off2 = 0;
            for (std::size_t i = 0; i < srcs.size(); ++i) {
                int d = widths[i];
                if (want(srcs[i])) {
                    srcs[i]->ensure_grad();
                    double* pg = srcs[i]->grad.data();
                    for (int r = 0; r < n; ++r)
                        for (int c = 0; c < d; ++c)
                            pg[(long long)r * d + c] += g[(long long)r * total + off2 + c];
                }
                off2 += d;
            }
        });
    }
    return out;
}

Tensor slice_cols(const Tensor& x, int col_begin, int col_end) {
    require_rank2(x, "slice_cols");
    int n = x.rows(), d = x.cols();
    if (col_begin < 0 || col_end > d || col_begin >= col_end)
        throw index_error("slice_cols: [" + std::to_string(col_begin) + "," +
                          std::to_string(col_end) + ") invalid for " + std::to_string(d) + " cols");
    int w = col_end - col_begin;
    Tensor out(Shape{n, w});
    const double* px = x.data();
    double* po = out.data();
    for (int r = 0; r < n; ++r)
        std::memcpy(po + (long long)r * w, px + (long long)r * d + col_begin,
                    (std::size_t)w * sizeof(double));
    auto sx = x.ptr(), so = out.ptr();
    maybe_record(out, {&x}, [sx, so, col_begin, n, d, w] {
        if (!want(sx)) return;
        sx->ensure_grad();
        const double* g = so->grad.data();
        double* xg = sx->grad.data();
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < w; ++c)
                xg[(long long)r * d + col_begin + c] += g[(long long)r * w + c];
    });
    return out;
}

Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids) {
    require_rank2(table, "embedding_rows");
    if (ids.empty()) throw contract_error("embedding_rows: empty id list");
    int v = table.rows(), d = table.cols();
    for (int id : ids)
        if (id < 0 || id >= v)
            throw index_error("embedding_rows: id " + std::to_string(id) +
                              " outside table of size " + std::to_string(v));
    int n = (int)ids.size();
    Tensor out(Shape{n, d});
    const double* pt = table.data();
    double* po = out.data();
    for (int r = 0; r < n; ++r)
        std::memcpy(po + (long long)r * d, pt + (long long)ids[r] * d, (std::size_t)d * sizeof(double));
    auto st = table.ptr(), so = out.ptr();
    auto idv = std::make_shared<std::vector<int>>(ids);
    maybe_record(out, {&table}, [st, so, idv, d] {
        if (!want(st)) return;
        st->ensure_grad();
        const double* g = so->grad.data();
        for (std::size_t r = 0; r < idv->size(); ++r) {
            double* tg = st->grad.data() + (long long)(*idv)[r] * d;
            const double* gr = g + (long long)r * d;
            for (int c = 0; c < d; ++c) tg[c] += gr[c];
        }
    });
    return out;
}

Tensor causal_mask_fill(const Tensor& scores) {
    require_rank2(scores, "causal_mask_fill");
    int n = scores.rows(), m = scores.cols();
    Tensor out(Shape{n, m});
    const double* px = scores.data();
    double* po = out.data();
    const double neg = -1e30;
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < m; ++c)
            po[(long long)r * m + c] = (c > r) ? neg : px[(long long)r * m + c];
    auto sx = scores.ptr(), so = out.ptr();
    maybe_record(out, {&scores}, [sx, so, n, m] {
        if (!want(sx)) return;
        sx->ensure_grad();
        const double* g = so->grad.data();
        for (int r = 0; r < n; ++r)
            for (int c = 0; c <= std::min(r, m - 1); ++c)
                sx->grad[(long long)r * m + c] += g[(long long)r * m + c];
    });
    return out;
}

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng) {
    require_defined(x, "dropout");
    if (p < 0.0 || p >= 1.0)
        throw contract_error("dropout probability must be in [0,1), got " + std::to_string(p));
    if (p == 0.0) return x;
    long long n = x.size();
    Tensor out(x.shape());
    auto keep_scale = std::make_shared<std::vector<double>>(n);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double inv_keep = 1.0 / (1.0 - p);
    const double* px = x.data();
    double* po = out.data();
    for (long long i = 0; i < n; ++i) {
        double k = (u(rng) >= p) ? inv_keep : 0.0;
        (*keep_scale)[i] = k;
        po[i] = px[i] * k;
    }
    check_finite(out, "dropout");
    auto sx = x.ptr(), so = out.ptr();
    maybe_record(out, {&x}, [sx, so, keep_scale, n] {
        if (!want(sx)) return;
        sx->ensure_grad();
        const double* g = so->grad.data();
        for (long long i = 0; i < n; ++i) sx->grad[i] += g[i] * (*keep_scale)[i];
    });
    return out;
}

Tensor sum_all(const Tensor& x) {
    require_defined(x, "sum_all");
    double total = 0.0;
    const double* px = x.data();
    long long n = x.size();
    for (long long i = 0; i < n; ++i) total += px[i];
    Tensor out = Tensor::scalar(total);
    check_finite(out, "sum_all");
    auto sx = x.ptr(), so = out.ptr();
    maybe_record(out, {&x}, [sx, so, n] {
        if (!want(sx)) return;
        sx->ensure_grad();
        double g = so->grad[0];
        for (long long i = 0; i < n; ++i) sx->grad[i] += g;
    });
    return out;
}

Tensor apply_lora(const Tensor& x, const Tensor& w, const Tensor& a, const Tensor& b,
                  double alpha, int r, double dropout_p, std::mt19937_64* rng) {
    require_rank2(x, "apply_lora");
    require_rank2(w, "apply_lora");
    require_rank2(a, "apply_lora");
    require_rank2(b, "apply_lora");
    if (r <= 0) throw contract_error("apply_lora: rank must be positive");
    if (a.cols() != r || b.rows() != r)
        throw dim_error("apply_lora: adapters " + shape_str(a.shape()) + "/" + shape_str(b.shape()) +
                        " do not match rank " + std::to_string(r));
    if (x.cols() != w.rows() || a.rows() != x.cols() || b.cols() != w.cols())
        throw dim_error("apply_lora: incompatible shapes x" + shape_str(x.shape()) + " w" +
                        shape_str(w.shape()) + " a" + shape_str(a.shape()) + " b" +
                        shape_str(b.shape()));
    Tensor base = matmul(x, w);
    Tensor xin = x;
    if (dropout_p > 0.0) {
        if (!rng) throw contract_error("apply_lora: dropout requested without an rng");
        xin = dropout(x, dropout_p, *rng);
    }
    Tensor delta = scale(matmul(matmul(xin, a), b), alpha / (double)r);
    return add(base, delta);
}

// ---------------- utilities ----------------

double cosine_flat(const Tensor& a, const Tensor& b) {
    require_defined(a, "cosine_flat");
    require_defined(b, "cosine_flat");
    if (a.size() != b.size())
        throw dim_error("cosine_flat: sizes differ, " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
    const double* pa = a.data();
    const double* pb = b.data();
    long long n = a.size();
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (long long i = 0; i < n; ++i) {
        dot += pa[i] * pb[i];
        na += pa[i] * pa[i];
        nb += pb[i] * pb[i];
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    if (na < 1e-12 || nb < 1e-12) return 0.0;
    return dot / (na * nb);
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> path) {
    std::uint64_t s = splitmix64(root);
    for (std::uint64_t p : path) s = splitmix64(s ^ splitmix64(p));
    return s;
}

std::uint64_t fnv1a_bytes(const void* data, std::size_t n, std::uint64_t h) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

std::uint64_t fnv1a(const std::vector<int>& ids) {
    std::uint64_t h = 1469598103934665603ull;
    for (int id : ids) {
        std::uint32_t u = (std::uint32_t)id;
        h = fnv1a_bytes(&u, sizeof(u), h);
    }
    return h;
}

}  // namespace iqvic
