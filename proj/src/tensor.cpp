#include "agconv/tensor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <sstream>

#include "agconv/parallel.hpp"

namespace agconv {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<EMat>;
using CMap = Eigen::Map<const EMat>;

// Output rows of every matrix product are computed in fixed 64-row tiles,
// one Eigen product per tile. Tile boundaries never depend on the thread
// count, so results are bit-identical for any --threads setting.
constexpr std::size_t kTile = 64;

void mm_nn(const double* a, std::size_t m, std::size_t k, const double* b, std::size_t n,
           double* c, bool accumulate) {
    CMap bm(b, k, n);
    parallel_for(m, kTile, [&](std::size_t r0, std::size_t r1) {
        CMap am(a + r0 * k, r1 - r0, k);
        Map cm(c + r0 * n, r1 - r0, n);
        if (accumulate)
            cm.noalias() += am * bm;
        else
            cm.noalias() = am * bm;
    });
}

// c (m x n) = a (m x k) * b (n x k)^T
void mm_nt(const double* a, std::size_t m, std::size_t k, const double* b, std::size_t n,
           double* c, bool accumulate) {
    CMap bm(b, n, k);
    parallel_for(m, kTile, [&](std::size_t r0, std::size_t r1) {
        CMap am(a + r0 * k, r1 - r0, k);
        Map cm(c + r0 * n, r1 - r0, n);
        if (accumulate)
            cm.noalias() += am * bm.transpose();
        else
            cm.noalias() = am * bm.transpose();
    });
}

// c (k x n) = a (m x k)^T * b (m x n)
void mm_tn(const double* a, std::size_t m, std::size_t k, const double* b, std::size_t n,
           double* c, bool accumulate) {
    CMap am(a, m, k);
    CMap bm(b, m, n);
    parallel_for(k, kTile, [&](std::size_t r0, std::size_t r1) {
        Map cm(c + r0 * n, r1 - r0, n);
        if (accumulate)
            cm.noalias() += am.middleCols(r0, r1 - r0).transpose() * bm;
        else
            cm.noalias() = am.middleCols(r0, r1 - r0).transpose() * bm;
    });
}

thread_local Tape* t_active_tape = nullptr;

bool tracing(std::initializer_list<const Tensor*> inputs) {
    if (t_active_tape == nullptr)
        return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad())
            return true;
    return false;
}

void check_finite(double v, const char* where) {
    if (!std::isfinite(v))
        throw NumericError(std::string(where) + ": non-finite value encountered");
}

} // namespace

// ---- shape / tensor -------------------------------------------------------

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s)
        n *= e;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i)
        os << (i ? ", " : "") << s[i];
    os << "]";
    return os.str();
}

Tensor::Tensor(Shape shape, double fill, bool requires_grad) {
    node_ = std::make_shared<Node>();
    node_->values.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
    if (requires_grad)
        node_->grad.assign(node_->values.size(), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != values.size())
        throw DimError("tensor: " + std::to_string(values.size()) + " values do not fill shape " +
                       shape_str(shape));
    node_ = std::make_shared<Node>();
    node_->shape = std::move(shape);
    node_->values = std::move(values);
    node_->requires_grad = requires_grad;
    if (requires_grad)
        node_->grad.assign(node_->values.size(), 0.0);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return Tensor(Shape{1}, std::vector<double>{v}, requires_grad);
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad) {
    Tensor t(std::move(shape), 0.0, requires_grad);
    for (double& v : t.values())
        v = rng.uniform(lo, hi);
    return t;
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::numel() const { return node_->values.size(); }

std::size_t Tensor::rows() const {
    const Shape& s = shape();
    if (s.empty())
        return 1;
    if (s.size() == 1)
        return 1;
    return numel() / s.back();
}

std::size_t Tensor::cols() const {
    const Shape& s = shape();
    return s.empty() ? 1 : s.back();
}

std::vector<double>& Tensor::values() const { return node_->values; }

double Tensor::value() const {
    if (numel() != 1)
        throw ContractError("value(): tensor of shape " + shape_str(shape()) + " is not scalar");
    return node_->values[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool rg) const {
    node_->requires_grad = rg;
    if (rg)
        node_->grad.assign(node_->values.size(), 0.0);
    else
        node_->grad.clear();
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::vector<double>& Tensor::grad() const {
    if (!has_grad())
        throw ContractError("grad(): tensor has no gradient buffer");
    return node_->grad;
}

void Tensor::zero_grad() const {
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

// ---- tape -------------------------------------------------------------------

void Tape::record(const char* name, std::function<void()> backward_fn) {
    ops_.push_back({name, std::move(backward_fn)});
}

void Tape::replay_backward() const {
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it)
        it->backward();
}

TapeScope::TapeScope(Tape& tape) {
    previous_ = t_active_tape;
    t_active_tape = &tape;
}

TapeScope::~TapeScope() { t_active_tape = previous_; }

Tape* active_tape() { return t_active_tape; }

// ---- ops ---------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() > 2 || b.rank() > 2)
        throw DimError("matmul: expects matrices, got " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
    if (k != k2)
        throw DimError("matmul: inner extents disagree: " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
    const bool rg = tracing({&a, &b});
    Tensor out(Shape{m, n}, 0.0, rg);
    mm_nn(a.values().data(), m, k, b.values().data(), n, out.values().data(), false);
    if (rg) {
        t_active_tape->record("matmul", [a, b, out, m, k, n]() {
            const double* g = out.grad().data();
            if (a.has_grad())
                mm_nt(g, m, n, b.values().data(), k, a.grad().data(), true); // dA += dC*B^T
            if (b.has_grad())
                mm_tn(a.values().data(), m, k, g, n, b.grad().data(), true); // dB += A^T*dC
        });
    }
    return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.rank() > 2 || b.rank() > 2)
        throw DimError("matmul_nt: expects matrices, got " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    if (b.cols() != k)
        throw DimError("matmul_nt: inner extents disagree: " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()) + "^T");
    const bool rg = tracing({&a, &b});
    Tensor out(Shape{m, n}, 0.0, rg);
    mm_nt(a.values().data(), m, k, b.values().data(), n, out.values().data(), false);
    if (rg) {
        t_active_tape->record("matmul_nt", [a, b, out, m, k, n]() {
            const double* g = out.grad().data();
            if (a.has_grad())
                mm_nn(g, m, n, b.values().data(), k, a.grad().data(), true); // dA += dC*B
            if (b.has_grad())
                mm_tn(g, m, n, a.values().data(), k, b.grad().data(), true); // dB += dC^T*A
        });
    }
    return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw DimError("reshape: " + shape_str(x.shape()) + " does not hold " + shape_str(shape));
    const bool rg = tracing({&x});
    Tensor out(std::move(shape), x.values(), rg);
    if (rg) {
        t_active_tape->record("reshape", [x, out]() {
            if (!x.has_grad())
                return;
            const auto& g = out.grad();
            for (std::size_t i = 0; i < g.size(); ++i)
                x.grad()[i] += g[i];
        });
    }
    return out;
}

namespace {

Tensor elementwise_binary(const Tensor& a, const Tensor& b, const char* name,
                          const std::function<double(double, double)>& fwd,
                          const std::function<void(const Tensor&, const Tensor&, const Tensor&)>& bwd) {
    if (a.shape() != b.shape())
        throw DimError(std::string(name) + ": shape mismatch: " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    const bool rg = tracing({&a, &b});
    Tensor out(a.shape(), 0.0, rg);
    const std::size_t n = a.numel();
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    double* po = out.values().data();
    for (std::size_t i = 0; i < n; ++i)
        po[i] = fwd(pa[i], pb[i]);
    if (rg)
        t_active_tape->record(name, [a, b, out, bwd]() { bwd(a, b, out); });
    return out;
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return elementwise_binary(
        a, b, "add", [](double x, double y) { return x + y; },
        [](const Tensor& a, const Tensor& b, const Tensor& out) {
            const auto& g = out.grad();
            if (a.has_grad())
                for (std::size_t i = 0; i < g.size(); ++i)
                    a.grad()[i] += g[i];
            if (b.has_grad())
                for (std::size_t i = 0; i < g.size(); ++i)
                    b.grad()[i] += g[i];
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return elementwise_binary(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](const Tensor& a, const Tensor& b, const Tensor& out) {
            const auto& g = out.grad();
            if (a.has_grad())
                for (std::size_t i = 0; i < g.size(); ++i)
                    a.grad()[i] += g[i];
            if (b.has_grad())
                for (std::size_t i = 0; i < g.size(); ++i)
                    b.grad()[i] -= g[i];
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return elementwise_binary(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](const Tensor& a, const Tensor& b, const Tensor& out) {
            const auto& g = out.grad();
            if (a.has_grad())
                for (std::size_t i = 0; i < g.size(); ++i)
                    a.grad()[i] += g[i] * b.values()[i];
            if (b.has_grad())
                for (std::size_t i = 0; i < g.size(); ++i)
                    b.grad()[i] += g[i] * a.values()[i];
        });
}

Tensor scale(const Tensor& a, double s) {
    const bool rg = tracing({&a});
    Tensor out(a.shape(), 0.0, rg);
    for (std::size_t i = 0; i < a.numel(); ++i)
        out.values()[i] = a.values()[i] * s;
    if (rg) {
        t_active_tape->record("scale", [a, out, s]() {
            if (!a.has_grad())
                return;
            const auto& g = out.grad();
            for (std::size_t i = 0; i < g.size(); ++i)
                a.grad()[i] += g[i] * s;
        });
    }
    return out;
}

Tensor add_bias(const Tensor& m, const Tensor& bias) {
    const std::size_t r = m.rows(), c = m.cols();
    if (bias.numel() != c)
        throw DimError("add_bias: bias " + shape_str(bias.shape()) + " does not match columns of " +
                       shape_str(m.shape()));
    const bool rg = tracing({&m, &bias});
    Tensor out(m.shape(), 0.0, rg);
    const double* pm = m.values().data();
    const double* pb = bias.values().data();
    double* po = out.values().data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j)
            po[i * c + j] = pm[i * c + j] + pb[j];
    if (rg) {
        t_active_tape->record("add_bias", [m, bias, out, r, c]() {
            const double* g = out.grad().data();
            if (m.has_grad()) {
                double* gm = m.grad().data();
                for (std::size_t i = 0; i < r * c; ++i)
                    gm[i] += g[i];
            }
            if (bias.has_grad()) {
                double* gb = bias.grad().data();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j)
                        gb[j] += g[i * c + j];
            }
        });
    }
    return out;
}

Tensor row_scale(const Tensor& m, const Tensor& s) {
    const std::size_t r = m.rows(), c = m.cols();
    if (s.numel() != r)
        throw DimError("row_scale: scaler " + shape_str(s.shape()) + " does not match rows of " +
                       shape_str(m.shape()));
    const bool rg = tracing({&m, &s});
    Tensor out(m.shape(), 0.0, rg);
    for (std::size_t i = 0; i < r; ++i) {
        const double si = s.values()[i];
        for (std::size_t j = 0; j < c; ++j)
            out.values()[i * c + j] = m.values()[i * c + j] * si;
    }
    if (rg) {
        t_active_tape->record("row_scale", [m, s, out, r, c]() {
            const double* g = out.grad().data();
            if (m.has_grad())
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j)
                        m.grad()[i * c + j] += g[i * c + j] * s.values()[i];
            if (s.has_grad())
                for (std::size_t i = 0; i < r; ++i) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < c; ++j)
                        acc += g[i * c + j] * m.values()[i * c + j];
                    s.grad()[i] += acc;
                }
        });
    }
    return out;
}

Tensor leaky_relu(const Tensor& x, double slope) {
    if (slope < 0.0 || slope >= 1.0)
        throw ContractError("leaky_relu: slope must lie in [0, 1)");
    const bool rg = tracing({&x});
    Tensor out(x.shape(), 0.0, rg);
    const std::size_t n = x.numel();
    const double* px = x.values().data();
    double* po = out.values().data();
    parallel_for(n, 4096, [&](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i)
            po[i] = px[i] >= 0.0 ? px[i] : slope * px[i];
    });
    if (rg) {
        t_active_tape->record("leaky_relu", [x, out, slope, n]() {
            if (!x.has_grad())
                return;
            const double* g = out.grad().data();
            const double* px = x.values().data();
            double* gx = x.grad().data();
            for (std::size_t i = 0; i < n; ++i)
                gx[i] += px[i] >= 0.0 ? g[i] : slope * g[i];
        });
    }
    return out;
}

Tensor softmax_lastdim(const Tensor& x) {
    const std::size_t c = x.cols();
    if (c < 1)
        throw DimError("softmax_lastdim: empty last extent in " + shape_str(x.shape()));
    const std::size_t r = x.rows();
    const bool rg = tracing({&x});
    Tensor out(x.shape(), 0.0, rg);
    const double* px = x.values().data();
    double* po = out.values().data();
    for (std::size_t i = 0; i < r; ++i) {
        const double* row = px + i * c;
        double* orow = po + i * c;
        double mx = row[0];
        for (std::size_t j = 1; j < c; ++j)
            mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        for (std::size_t j = 0; j < c; ++j)
            orow[j] /= sum;
    }
    if (rg) {
        t_active_tape->record("softmax_lastdim", [x, out, r, c]() {
            if (!x.has_grad())
                return;
            const double* y = out.values().data();
            const double* g = out.grad().data();
            double* gx = x.grad().data();
            for (std::size_t i = 0; i < r; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < c; ++j)
                    dot += y[i * c + j] * g[i * c + j];
                for (std::size_t j = 0; j < c; ++j)
                    gx[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
            }
        });
    }
    return out;
}

Tensor concat_lastdim(const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() != sb.size() || sa.empty())
        throw DimError("concat_lastdim: rank mismatch: " + shape_str(sa) + " vs " + shape_str(sb));
    for (std::size_t i = 0; i + 1 < sa.size(); ++i)
        if (sa[i] != sb[i])
            throw DimError("concat_lastdim: leading extents disagree: " + shape_str(sa) + " vs " +
                           shape_str(sb));
    const std::size_t p = sa.back(), q = sb.back();
    const std::size_t r = p == 0 ? b.rows() : a.rows();
    Shape so = sa;
    so.back() = p + q;
    const bool rg = tracing({&a, &b});
    Tensor out(so, 0.0, rg);
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    double* po = out.values().data();
    for (std::size_t i = 0; i < r; ++i) {
        std::copy(pa + i * p, pa + (i + 1) * p, po + i * (p + q));
        std::copy(pb + i * q, pb + (i + 1) * q, po + i * (p + q) + p);
    }
    if (rg) {
        t_active_tape->record("concat_lastdim", [a, b, out, r, p, q]() {
            const double* g = out.grad().data();
            if (a.has_grad()) {
                double* ga = a.grad().data();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < p; ++j)
                        ga[i * p + j] += g[i * (p + q) + j];
            }
            if (b.has_grad()) {
                double* gb = b.grad().data();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < q; ++j)
                        gb[i * q + j] += g[i * (p + q) + p + j];
            }
        });
    }
    return out;
}

Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& idx) {
    const std::size_t n = x.rows(), c = x.cols(), e = idx.size();
    for (std::size_t i : idx)
        if (i >= n)
            throw DimError("gather_rows: index " + std::to_string(i) + " out of range for " +
                           shape_str(x.shape()));
    const bool rg = tracing({&x});
    Tensor out(Shape{e, c}, 0.0, rg);
    const double* px = x.values().data();
    double* po = out.values().data();
    parallel_for(e, 256, [&](std::size_t e0, std::size_t e1) {
        for (std::size_t i = e0; i < e1; ++i)
            std::copy(px + idx[i] * c, px + (idx[i] + 1) * c, po + i * c);
    });
    if (rg) {
        t_active_tape->record("gather_rows", [x, out, idx, c]() {
            if (!x.has_grad())
                return;
            const double* g = out.grad().data();
            double* gx = x.grad().data();
            // sequential scatter-add keeps accumulation order fixed
            for (std::size_t i = 0; i < idx.size(); ++i)
                for (std::size_t j = 0; j < c; ++j)
                    gx[idx[i] * c + j] += g[i * c + j];
        });
    }
    return out;
}

Tensor weighted_sum(const Tensor& x, const std::vector<double>& w) {
    if (w.size() != x.numel())
        throw DimError("weighted_sum: " + std::to_string(w.size()) + " weights for " +
                       shape_str(x.shape()));
    double acc = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i)
        acc += x.values()[i] * w[i];
    const bool rg = tracing({&x});
    Tensor out = Tensor(Shape{1}, std::vector<double>{acc}, rg);
    if (rg) {
        t_active_tape->record("weighted_sum", [x, out, w]() {
            if (!x.has_grad())
                return;
            const double g = out.grad()[0];
            for (std::size_t i = 0; i < w.size(); ++i)
                x.grad()[i] += g * w[i];
        });
    }
    return out;
}

MaxReduce neighborhood_max(const Tensor& x, std::size_t group) {
    const std::size_t c = x.cols();
    if (group == 0 || x.rows() == 0)
        throw SizeError("neighborhood_max: empty neighborhood");
    if (x.rows() % group != 0)
        throw DimError("neighborhood_max: rows of " + shape_str(x.shape()) +
                       " not divisible by group " + std::to_string(group));
    const std::size_t n = x.rows() / group;
    const bool rg = tracing({&x});
    MaxReduce res;
    res.values = Tensor(n == 1 ? Shape{c} : Shape{n, c}, 0.0, rg);
    res.argmax.assign(n * c, 0);
    const double* px = x.values().data();
    double* po = res.values.values().data();
    std::vector<std::size_t>& amax = res.argmax;
    parallel_for(n, 64, [&](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
                std::size_t best = i * group;
                double bv = px[best * c + j];
                for (std::size_t r = 1; r < group; ++r) {
                    const double v = px[(i * group + r) * c + j];
                    if (v > bv) { // strict: ties keep the lowest row
                        bv = v;
                        best = i * group + r;
                    }
                }
                po[i * c + j] = bv;
                amax[i * c + j] = best;
            }
        }
    });
    if (rg) {
        const Tensor out = res.values;
        const std::vector<std::size_t> am = res.argmax;
        t_active_tape->record("neighborhood_max", [x, out, am, c]() {
            if (!x.has_grad())
                return;
            const double* g = out.grad().data();
            double* gx = x.grad().data();
            for (std::size_t i = 0; i < am.size(); ++i)
                gx[am[i] * c + (i % c)] += g[i];
        });
    }
    return res;
}

MaxReduce reduce_max_rows(const Tensor& x) {
    return neighborhood_max(x, x.rows());
}

Tensor neighborhood_softmax(const Tensor& x, std::size_t group) {
    const std::size_t c = x.cols();
    if (group == 0 || x.rows() % group != 0)
        throw DimError("neighborhood_softmax: rows of " + shape_str(x.shape()) +
                       " not divisible by group " + std::to_string(group));
    const std::size_t n = x.rows() / group;
    const bool rg = tracing({&x});
    Tensor out(x.shape(), 0.0, rg);
    const double* px = x.values().data();
    double* po = out.values().data();
    parallel_for(n, 64, [&](std::size_t i0, std::size_t i1) {
        std::vector<double> sorted(group);
        for (std::size_t i = i0; i < i1; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
                double mx = px[i * group * c + j];
                for (std::size_t r = 1; r < group; ++r)
                    mx = std::max(mx, px[(i * group + r) * c + j]);
                for (std::size_t r = 0; r < group; ++r) {
                    const std::size_t at = (i * group + r) * c + j;
                    po[at] = std::exp(px[at] - mx);
                    sorted[r] = po[at];
                }
                // accumulate in ascending value order so the result does not
                // depend on how the rows of the group are arranged
                std::sort(sorted.begin(), sorted.end());
                double sum = 0.0;
                for (double v : sorted)
                    sum += v;
                for (std::size_t r = 0; r < group; ++r)
                    po[(i * group + r) * c + j] /= sum;
            }
        }
    });
    if (rg) {
        t_active_tape->record("neighborhood_softmax", [x, out, n, group, c]() {
            if (!x.has_grad())
                return;
            const double* y = out.values().data();
            const double* g = out.grad().data();
            double* gx = x.grad().data();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < c; ++j) {
                    double dot = 0.0;
                    for (std::size_t r = 0; r < group; ++r) {
                        const std::size_t at = (i * group + r) * c + j;
                        dot += y[at] * g[at];
                    }
                    for (std::size_t r = 0; r < group; ++r) {
                        const std::size_t at = (i * group + r) * c + j;
                        gx[at] += y[at] * (g[at] - dot);
                    }
                }
        });
    }
    return out;
}

Tensor edge_linear(const Tensor& w, const Tensor& b, const Tensor& feats,
                   const std::vector<std::size_t>& centers,
                   const std::vector<std::size_t>& neighbors) {
    const std::size_t n = feats.rows(), d = feats.cols();
    const std::size_t m = w.cols();
    if (w.rows() != 2 * d)
        throw DimError("edge_linear: weight " + shape_str(w.shape()) + " does not accept features " +
                       shape_str(feats.shape()));
    if (b.numel() != m)
        throw DimError("edge_linear: bias " + shape_str(b.shape()) + " vs output width " +
                       std::to_string(m));
    if (centers.size() != neighbors.size())
        throw DimError("edge_linear: center/neighbor lists differ in length");
    const std::size_t e = centers.size();

    // u = F*Wa, v = F*Wb with Wa/Wb the top/bottom halves of W.
    std::vector<double> u(n * m), v(n * m);
    mm_nn(feats.values().data(), n, d, w.values().data(), m, u.data(), false);
    mm_nn(feats.values().data(), n, d, w.values().data() + d * m, m, v.data(), false);

    const bool rg = tracing({&w, &b, &feats});
    Tensor out(Shape{e, m}, 0.0, rg);
    double* po = out.values().data();
    const double* pb = b.values().data();
    parallel_for(e, 256, [&](std::size_t e0, std::size_t e1) {
        for (std::size_t i = e0; i < e1; ++i) {
            const double* uc = u.data() + centers[i] * m;
            const double* vc = v.data() + centers[i] * m;
            const double* vn = v.data() + neighbors[i] * m;
            double* o = po + i * m;
            for (std::size_t j = 0; j < m; ++j)
                o[j] = uc[j] + vn[j] - vc[j] + pb[j];
        }
    });
    if (rg) {
        t_active_tape->record("edge_linear", [w, b, feats, out, centers, neighbors, n, d, m]() {
            const std::size_t e = centers.size();
            const double* g = out.grad().data();
            std::vector<double> du(n * m, 0.0), dv(n * m, 0.0);
            for (std::size_t i = 0; i < e; ++i) {
                double* duc = du.data() + centers[i] * m;
                double* dvc = dv.data() + centers[i] * m;
                double* dvn = dv.data() + neighbors[i] * m;
                const double* gi = g + i * m;
                for (std::size_t j = 0; j < m; ++j) {
                    duc[j] += gi[j];
                    dvn[j] += gi[j];
                    dvc[j] -= gi[j];
                }
            }
            if (w.has_grad()) {
                mm_tn(feats.values().data(), n, d, du.data(), m, w.grad().data(), true);
                mm_tn(feats.values().data(), n, d, dv.data(), m, w.grad().data() + d * m, true);
            }
            if (b.has_grad()) {
                double* gb = b.grad().data();
                for (std::size_t i = 0; i < e; ++i)
                    for (std::size_t j = 0; j < m; ++j)
                        gb[j] += g[i * m + j];
            }
            if (feats.has_grad()) {
                mm_nt(du.data(), n, m, w.values().data(), d, feats.grad().data(), true);
                mm_nt(dv.data(), n, m, w.values().data() + d * m, d, feats.grad().data(), true);
            }
        });
    }
    return out;
}

Tensor edge_kernel_apply(const Tensor& kernels, const Tensor& dx) {
    const std::size_t e = kernels.rows(), c = dx.cols();
    if (dx.rows() != e || c == 0 || kernels.cols() % c != 0)
        throw DimError("edge_kernel_apply: kernels " + shape_str(kernels.shape()) +
                       " do not reshape to (c x M) against " + shape_str(dx.shape()));
    const std::size_t m = kernels.cols() / c;
    const bool rg = tracing({&kernels, &dx});
    Tensor out(Shape{e, m}, 0.0, rg);
    const double* pk = kernels.values().data();
    const double* px = dx.values().data();
    double* po = out.values().data();
    parallel_for(e, 128, [&](std::size_t e0, std::size_t e1) {
        for (std::size_t i = e0; i < e1; ++i) {
            CMap k(pk + i * c * m, c, m);
            Eigen::Map<const Eigen::RowVectorXd> x(px + i * c, c);
            Eigen::Map<Eigen::RowVectorXd> o(po + i * m, m);
            o.noalias() = x * k;
        }
    });
    if (rg) {
        t_active_tape->record("edge_kernel_apply", [kernels, dx, out, e, c, m]() {
            const double* g = out.grad().data();
            const double* pk = kernels.values().data();
            const double* px = dx.values().data();
            double* gk = kernels.has_grad() ? kernels.grad().data() : nullptr;
            double* gx = dx.has_grad() ? dx.grad().data() : nullptr;
            parallel_for(e, 128, [&](std::size_t e0, std::size_t e1) {
                for (std::size_t i = e0; i < e1; ++i) {
                    Eigen::Map<const Eigen::RowVectorXd> go(g + i * m, m);
                    if (gk) {
                        Map dk(gk + i * c * m, c, m);
                        Eigen::Map<const Eigen::VectorXd> x(px + i * c, c);
                        dk.noalias() += x * go;
                    }
                    if (gx) {
                        CMap k(pk + i * c * m, c, m);
                        Eigen::Map<Eigen::RowVectorXd> dxr(gx + i * c, c);
                        dxr.noalias() += go * k.transpose();
                    }
                }
            });
        });
    }
    return out;
}

Tensor affine_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const std::size_t n = x.rows(), c = x.cols();
    if (gamma.numel() != c || beta.numel() != c)
        throw DimError("affine_norm: affine parameters do not match feature width " +
                       std::to_string(c));
    const bool rg = tracing({&x, &gamma, &beta});
    Tensor out(x.shape(), 0.0, rg);
    // Per-feature stats over the row (point) axis, biased variance.
    auto xhat = std::make_shared<std::vector<double>>(n * c);
    auto inv_s = std::make_shared<std::vector<double>>(c);
    const double* px = x.values().data();
    double* po = out.values().data();
    for (std::size_t j = 0; j < c; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            mean += px[i * c + j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = px[i * c + j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_s)[j] = is;
        const double gj = gamma.values()[j], bj = beta.values()[j];
        for (std::size_t i = 0; i < n; ++i) {
            const double h = (px[i * c + j] - mean) * is;
            (*xhat)[i * c + j] = h;
            po[i * c + j] = gj * h + bj;
        }
    }
    if (rg) {
        t_active_tape->record("affine_norm", [x, gamma, beta, out, xhat, inv_s, n, c]() {
            const double* g = out.grad().data();
            const double inv_n = 1.0 / static_cast<double>(n);
            for (std::size_t j = 0; j < c; ++j) {
                double sum_g = 0.0, sum_gh = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    sum_g += g[i * c + j];
                    sum_gh += g[i * c + j] * (*xhat)[i * c + j];
                }
                if (gamma.has_grad())
                    gamma.grad()[j] += sum_gh;
                if (beta.has_grad())
                    beta.grad()[j] += sum_g;
                if (x.has_grad()) {
                    const double k = gamma.values()[j] * (*inv_s)[j];
                    for (std::size_t i = 0; i < n; ++i) {
                        const double h = (*xhat)[i * c + j];
                        x.grad()[i * c + j] +=
                            k * (g[i * c + j] - inv_n * sum_g - h * inv_n * sum_gh);
                    }
                }
            }
        });
    }
    return out;
}

namespace {

// log(sum exp(row)) with max subtraction; fills probs with softmax(row).
double row_log_sum_exp(const double* row, std::size_t c, double* probs) {
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j)
        mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
        probs[j] = std::exp(row[j] - mx);
        sum += probs[j];
    }
    for (std::size_t j = 0; j < c; ++j)
        probs[j] /= sum;
    return mx + std::log(sum);
}

} // namespace

Tensor cross_entropy(const Tensor& logits, std::size_t label) {
    const std::size_t c = logits.numel();
    if (logits.rows() != 1)
        throw DimError("cross_entropy: expected a single row of logits, got " +
                       shape_str(logits.shape()));
    if (label >= c)
        throw ContractError("cross_entropy: label " + std::to_string(label) +
                            " out of range for " + std::to_string(c) + " classes");
    std::vector<double> probs(c);
    const double lse = row_log_sum_exp(logits.values().data(), c, probs.data());
    const double loss = lse - logits.values()[label];
    const bool rg = tracing({&logits});
    Tensor out = Tensor(Shape{1}, std::vector<double>{loss}, rg);
    if (rg) {
        t_active_tape->record("cross_entropy", [logits, out, probs, label]() {
            if (!logits.has_grad())
                return;
            const double g = out.grad()[0];
            for (std::size_t j = 0; j < probs.size(); ++j)
                logits.grad()[j] += g * (probs[j] - (j == label ? 1.0 : 0.0));
        });
    }
    return out;
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& labels) {
    const std::size_t n = logits.rows(), c = logits.cols();
    if (labels.size() != n)
        throw DimError("cross_entropy_rows: " + std::to_string(labels.size()) + " labels for " +
                       shape_str(logits.shape()));
    for (int l : labels)
        if (l < 0 || static_cast<std::size_t>(l) >= c)
            throw ContractError("cross_entropy_rows: label out of range");
    auto probs = std::make_shared<std::vector<double>>(n * c);
    double loss = 0.0;
    const double* px = logits.values().data();
    for (std::size_t i = 0; i < n; ++i) {
        const double lse = row_log_sum_exp(px + i * c, c, probs->data() + i * c);
        loss += lse - px[i * c + labels[i]];
    }
    loss /= static_cast<double>(n);
    const bool rg = tracing({&logits});
    Tensor out = Tensor(Shape{1}, std::vector<double>{loss}, rg);
    if (rg) {
        t_active_tape->record("cross_entropy_rows", [logits, out, probs, labels, n, c]() {
            if (!logits.has_grad())
                return;
            const double g = out.grad()[0] / static_cast<double>(n);
            double* gx = logits.grad().data();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < c; ++j)
                    gx[i * c + j] += g * ((*probs)[i * c + j] -
                                          (j == static_cast<std::size_t>(labels[i]) ? 1.0 : 0.0));
        });
    }
    return out;
}

Tensor sparse_mix_rows(const std::vector<std::size_t>& indices, const std::vector<double>& weights,
                       std::size_t fan, const Tensor& src_feats) {
    if (fan == 0 || indices.size() != weights.size() || indices.size() % fan != 0)
        throw DimError("sparse_mix_rows: inconsistent index/weight table");
    const std::size_t n = indices.size() / fan;
    const std::size_t c = src_feats.cols();
    const bool rg = tracing({&src_feats});
    Tensor out(Shape{n, c}, 0.0, rg);
    const double* ps = src_feats.values().data();
    double* po = out.values().data();
    parallel_for(n, 128, [&](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i) {
            double* o = po + i * c;
            for (std::size_t t = 0; t < fan; ++t) {
                const double w = weights[i * fan + t];
                const double* s = ps + indices[i * fan + t] * c;
                for (std::size_t j = 0; j < c; ++j)
                    o[j] += w * s[j];
            }
        }
    });
    if (rg) {
        t_active_tape->record("sparse_mix_rows", [indices, weights, fan, src_feats, out, n, c]() {
            if (!src_feats.has_grad())
                return;
            const double* g = out.grad().data();
            double* gs = src_feats.grad().data();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t t = 0; t < fan; ++t) {
                    const double w = weights[i * fan + t];
                    double* s = gs + indices[i * fan + t] * c;
                    for (std::size_t j = 0; j < c; ++j)
                        s[j] += w * g[i * c + j];
                }
        });
    }
    return out;
}

// ---- autodiff driver ---------------------------------------------------------

void backward(Tape& tape, const Tensor& loss) {
    if (loss.numel() != 1)
        throw ContractError("backward: loss of shape " + shape_str(loss.shape()) +
                            " is not scalar");
    if (loss.has_grad())
        loss.grad()[0] = 1.0;
    tape.replay_backward();
}

double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& tensors,
                  double eps) {
    if (eps <= 0.0)
        throw ContractError("grad_check: eps must be positive");
    for (const Tensor& t : tensors)
        if (!t.requires_grad())
            throw ContractError("grad_check: all checked tensors must require grad");
    for (Tensor t : tensors)
        t.zero_grad();

    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        TapeScope scope(tape);
        Tensor loss = f();
        check_finite(loss.value(), "grad_check");
        backward(tape, loss);
    }
    analytic.reserve(tensors.size());
    for (const Tensor& t : tensors)
        analytic.push_back(t.grad());

    double worst = 0.0;
    for (std::size_t ti = 0; ti < tensors.size(); ++ti) {
        Tensor t = tensors[ti];
        for (std::size_t i = 0; i < t.numel(); ++i) {
            const double old = t.values()[i];
            t.values()[i] = old + eps;
            const double fp = f().value();
            t.values()[i] = old - eps;
            const double fm = f().value();
            t.values()[i] = old;
            check_finite(fp, "grad_check");
            check_finite(fm, "grad_check");
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = analytic[ti][i];
            const double rel =
                std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

// ---- optimizer -----------------------------------------------------------------

Parameter::Parameter(std::string name, Tensor t) : name(std::move(name)), tensor(std::move(t)) {
    tensor.set_requires_grad(true);
    momentum.assign(tensor.numel(), 0.0);
}

void sgd_momentum_step(Parameter& p, double lr, double mu) {
    if (!p.tensor.has_grad())
        throw ContractError("sgd_momentum_step: parameter '" + p.name + "' has no gradient");
    std::vector<double>& g = p.tensor.grad();
    std::vector<double>& v = p.momentum;
    std::vector<double>& theta = p.tensor.values();
    for (std::size_t i = 0; i < theta.size(); ++i) {
        v[i] = mu * v[i] + g[i];
        theta[i] -= lr * v[i];
    }
    p.tensor.zero_grad();
}

double cosine_lr(std::size_t t, std::size_t total, double lr_max, double lr_min) {
    if (total < 1)
        throw ContractError("cosine_lr: total steps must be >= 1");
    if (t > total)
        throw ContractError("cosine_lr: step " + std::to_string(t) + " out of range [0, " +
                            std::to_string(total) + "]");
    const double pi = 3.14159265358979323846;
    const double frac = static_cast<double>(t) / static_cast<double>(total);
    return lr_min + (lr_max - lr_min) * (1.0 + std::cos(pi * frac)) / 2.0;
}

} // namespace agconv
