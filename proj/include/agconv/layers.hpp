#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "agconv/graph.hpp"
#include "agconv/tensor.hpp"

namespace agconv {

// Fully-connected map with bias, init uniform in +-1/sqrt(fan_in).
struct Linear {
    Tensor weight; // in x out
    Tensor bias;   // out

    Linear() = default;
    Linear(std::size_t in, std::size_t out, Rng& rng);

    std::size_t in_dim() const { return weight.rows(); }
    std::size_t out_dim() const { return weight.cols(); }

    Tensor forward(const Tensor& x) const { return add_bias(matmul(x, weight), bias); }

    // Same map applied to the implicit per-edge input [f_c, f_n - f_c].
    Tensor forward_edges(const Tensor& feats, const std::vector<std::size_t>& centers,
                         const std::vector<std::size_t>& neighbors) const {
        return edge_linear(weight, bias, feats, centers, neighbors);
    }
};

// What the convolution operand delta_x is built from.
enum class ConvInput { Spatial, Normals, SpatialNormals, Feature };

ConvInput conv_input_from_string(const std::string& tag);
const char* conv_input_to_string(ConvInput mode);

// Per-edge inputs for one convolution: the feature pairs feeding the kernel
// generator and the convolution operand delta_x = [x_i, x_j - x_i].
struct EdgeBatch {
    std::vector<std::size_t> centers;   // E, flat
    std::vector<std::size_t> neighbors; // E, flat
    std::size_t k = 0;
    std::size_t n = 0;    // number of center rows
    Tensor feats;         // per-point features the graph was built over
    Tensor delta_x;       // E x c
    std::size_t conv_dim = 0;

    // E x 2D edge features [f_i, f_j - f_i], materialized on demand.
    Tensor delta_f() const;
};

// mode picks the delta_x source: Spatial/Normals give c = 6, SpatialNormals
// c = 12, Feature substitutes delta_f itself (c = 2D).
EdgeBatch build_edges(const Tensor& coords, const Tensor& normals, const Tensor& feats,
                      const NeighborGraph& graph, ConvInput mode);

// Adaptive convolution: a two-layer MLP turns each edge's feature pair into
// a (c x M) weight matrix that is applied to delta_x, followed by
// channel-wise max over the neighborhood.
struct AgConvLayer {
    std::size_t in_dim = 0;     // D
    std::size_t out_dim = 0;    // M
    std::size_t conv_dim = 0;   // c
    std::size_t hidden_dim = 0; // d
    double slope = 0.2;
    Linear kernel_mlp1; // 2D -> d
    Linear kernel_mlp2; // d -> c*M
    bool with_shortcut = false;
    Linear shortcut;      // 2D -> M on the self edge [f_i, 0]
    Tensor short_gamma;   // affine normalization of the shortcut branch
    Tensor short_beta;

    AgConvLayer() = default;
    AgConvLayer(std::size_t in, std::size_t out, std::size_t conv, std::size_t hidden, Rng& rng,
                bool shortcut_block = false, double act_slope = 0.2);

    Tensor forward(const EdgeBatch& edges) const;
    void collect_parameters(const std::string& prefix, std::vector<Parameter>& out) const;
};

enum class FixedKind { GraphConv, AttentionPoint, AttentionChannel };

FixedKind fixed_kind_from_string(const std::string& tag);
const char* fixed_kind_to_string(FixedKind kind);

// Fixed-kernel baselines sharing the same aggregation: standard graph
// convolution on [f_i, f_j - f_i], or attention variants that score
// neighbors with softmax weights before the max.
struct FixedKernelLayer {
    FixedKind kind = FixedKind::GraphConv;
    std::size_t in_dim = 0;
    std::size_t out_dim = 0;
    double slope = 0.2;
    Linear h;     // 2D -> M (graphconv) or D -> M (attention)
    Linear alpha; // 2M -> 1 (point) or 2M -> M (channel)

    FixedKernelLayer() = default;
    FixedKernelLayer(FixedKind kind, std::size_t in, std::size_t out, Rng& rng,
                     double act_slope = 0.2);

    Tensor forward(const EdgeBatch& edges) const;
    void collect_parameters(const std::string& prefix, std::vector<Parameter>& out) const;
};

// FPS subsample plus feature aggregation over full-cloud neighborhoods of
// the kept points. agg == nullptr aggregates by channel-wise max.
struct PoolResult {
    std::vector<std::size_t> selected;
    Tensor coords; // m x 3
    Tensor feats;  // m x M
};

PoolResult graph_pool(const Tensor& coords, const Tensor& feats, std::size_t rate, std::size_t k,
                      const AgConvLayer* agg = nullptr,
                      const Tensor* normals = nullptr);

// Learned global 3x3 transform: three fixed-kernel convolutions (64, 128,
// 1024), global max, then (512, 256) -> 9 with the output initialized to the
// identity matrix exactly.
struct StnLayer {
    std::size_t k = 20;
    double slope = 0.2;
    FixedKernelLayer conv1, conv2, conv3;
    Linear fc1, fc2, out;

    StnLayer() = default;
    StnLayer(std::size_t neighborhood, Rng& rng, double act_slope = 0.2);

    struct Result {
        Tensor transform;        // 3 x 3
        Tensor coords;           // N x 3, coords * T^T
        Tensor normals;          // transformed the same way (empty if absent)
        double determinant = 0;  // diagnostic only
    };
    Result forward(const Tensor& coords, const Tensor& normals) const;
    void collect_parameters(const std::string& prefix, std::vector<Parameter>& out) const;
};

// Parameter totals per the closed-form kernel counts: 2dD + dcM for the
// adaptive layer, 2DM for the standard graph convolution. with_bias adds
// d + cM and M respectively. The optional shortcut block is not part of the
// kernel and is counted separately by the model table.
std::size_t layer_param_count(const AgConvLayer& layer, bool include_bias);
std::size_t layer_param_count(const FixedKernelLayer& layer, bool include_bias);

} // namespace agconv
