#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "agconv/common.hpp"
#include "agconv/rng.hpp"

namespace agconv {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major f64 tensor. Copying a Tensor copies the handle; the
// underlying storage is shared, which is what lets tape closures observe
// gradients accumulated later. Values are treated as immutable once an op
// has consumed them; grad buffers are the only mutable state afterwards.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, double fill, bool requires_grad = false);
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t numel() const;
    // 2-D accessors; rank-1 tensors behave as a single row.
    std::size_t rows() const;
    std::size_t cols() const;

    // Tensor is a handle: const methods return mutable references into the
    // shared node, the way shared_ptr exposes its pointee.
    std::vector<double>& values() const;
    double value() const; // scalar tensors only

    bool requires_grad() const;
    void set_requires_grad(bool rg) const; // allocates/drops the grad buffer
    bool has_grad() const;
    std::vector<double>& grad() const;
    void zero_grad() const;

    // Identity of the underlying node (stable across handle copies).
    const void* id() const { return node_.get(); }

private:
    struct Node {
        Shape shape;
        std::vector<double> values;
        std::vector<double> grad;
        bool requires_grad = false;
    };
    std::shared_ptr<Node> node_;
};

// Records the executed ops of one forward pass. Replaying the records in
// reverse order accumulates gradients into every requires-grad input.
class Tape {
public:
    void record(const char* name, std::function<void()> backward_fn);
    std::size_t size() const { return ops_.size(); }
    void clear() { ops_.clear(); }
    void replay_backward() const;

private:
    struct Record {
        const char* name;
        std::function<void()> backward;
    };
    std::vector<Record> ops_;
};

// Binds a tape as the recording target for ops executed on this thread.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

Tape* active_tape();

// ---- ops ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b); // a * b^T
Tensor reshape(const Tensor& x, Shape shape);       // same numel, taped copy
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_bias(const Tensor& m, const Tensor& bias);    // bias broadcast over rows
Tensor row_scale(const Tensor& m, const Tensor& s);      // s is rows x 1
Tensor leaky_relu(const Tensor& x, double slope);
Tensor softmax_lastdim(const Tensor& x);
Tensor concat_lastdim(const Tensor& a, const Tensor& b);
Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& idx);
Tensor weighted_sum(const Tensor& x, const std::vector<double>& w); // scalar

struct MaxReduce {
    Tensor values;
    std::vector<std::size_t> argmax;
};

// Channel-wise max over all rows; argmax keeps the lowest-index row on ties
// and the backward pass routes each channel's gradient to that row.
MaxReduce reduce_max_rows(const Tensor& x);

// Same reduction applied per group of `group` consecutive rows:
// (n*group) x M -> n x M. argmax holds row indices into x.
MaxReduce neighborhood_max(const Tensor& x, std::size_t group);

// Per-group, per-column softmax over `group` consecutive rows.
Tensor neighborhood_softmax(const Tensor& x, std::size_t group);

// One linear map W (2D x M), b (M) applied to the implicit edge features
// [f_i, f_j - f_i] without materializing them: out_e = Wa'f_c + Wb'(f_n - f_c) + b
// where Wa/Wb are the top/bottom D rows of W. Exactly the matrix product
// with the concatenated input, reassociated per block.
Tensor edge_linear(const Tensor& w, const Tensor& b, const Tensor& feats,
                   const std::vector<std::size_t>& centers,
                   const std::vector<std::size_t>& neighbors);

// Per-edge product dx_e (1 x c) times reshape(kernels_e, c x M) -> out_e (1 x M).
Tensor edge_kernel_apply(const Tensor& kernels, const Tensor& dx);

// Per-feature normalization over the row (point) axis with learned affine.
Tensor affine_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// -log softmax(logits)[label]; logits is a single row.
Tensor cross_entropy(const Tensor& logits, std::size_t label);
// Mean of per-row cross entropies; logits is N x C.
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& labels);

// Inverse-distance-weighted combination using a fixed sparse weight table
// (built by the graph module); grads flow to src_feats only.
Tensor sparse_mix_rows(const std::vector<std::size_t>& indices,
                       const std::vector<double>& weights,
                       std::size_t fan, const Tensor& src_feats);

// ---- autodiff driver ------------------------------------------------------

// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Grads of
// multiply-used tensors accumulate by summation.
void backward(Tape& tape, const Tensor& loss);

// Max over all entries of all tensors of |analytic - numeric| /
// max(1, |analytic|, |numeric|), numeric by central differences of f.
// f must rebuild the scalar loss from the tensors' current values.
double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& tensors,
                  double eps = 1e-6);

// ---- optimizer -------------------------------------------------------------

struct Parameter {
    std::string name;
    Tensor tensor;               // requires_grad = true
    std::vector<double> momentum; // same length, zero-initialized

    Parameter() = default;
    Parameter(std::string name, Tensor t);
};

// Classical momentum: v <- mu*v + g; theta <- theta - lr*v; grad zeroed.
void sgd_momentum_step(Parameter& p, double lr, double mu);

// lr_min + (lr_max - lr_min) * (1 + cos(pi * t / total)) / 2.
double cosine_lr(std::size_t t, std::size_t total, double lr_max, double lr_min);

} // namespace agconv
