#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "agconv/layers.hpp"
#include "agconv/pointcloud.hpp"

namespace agconv {

struct ParamRow {
    std::string layer;
    std::string formula; // closed form with the instantiated dimensions
    std::size_t bias_free = 0;
    std::size_t with_bias = 0;
};

// Classification backbone: conv stack with dynamic graph rebuilds, shared
// aggregation layer to agg_width, global channel-wise max, dense head.
// The first n_adaptive stages use the adaptive convolution, the rest the
// standard graph convolution; n_adaptive = 0 is the fixed-kernel baseline.
struct ClsConfig {
    std::size_t num_classes = 3;
    std::size_t k = 20;
    std::size_t kernel_hidden = 16; // d of the kernel MLP
    std::vector<std::size_t> conv_widths{64, 64, 128, 256};
    std::size_t n_adaptive = 2;
    std::size_t agg_width = 1024;
    std::vector<std::size_t> head_widths{512, 256};
    bool normalize = true;
    double slope = 0.2;
    ConvInput mode = ConvInput::Spatial;

    // Small instantiation used by gradient checks (norm off).
    static ClsConfig tiny();
};

class ClassificationNet {
public:
    ClassificationNet(ClsConfig config, std::uint64_t seed);

    // Logits of length num_classes. Graphs are rebuilt from each layer's
    // input features; the first layer uses the spatial graph.
    Tensor forward(const PointCloud& cloud) const;

    const ClsConfig& config() const { return config_; }
    std::vector<Parameter>& parameters() { return params_; }
    const std::vector<Parameter>& parameters() const { return params_; }
    std::vector<ParamRow> param_table() const;

private:
    struct Stage {
        bool adaptive = false;
        AgConvLayer ag;
        FixedKernelLayer fx;
        Tensor gamma, beta; // per-stage normalization (identity when disabled)
    };
    Tensor stage_forward(const Stage& s, const EdgeBatch& e) const;

    ClsConfig config_;
    std::vector<Stage> stages_;
    Linear agg_;
    Tensor agg_gamma_, agg_beta_;
    std::vector<Linear> head_;
    std::vector<Parameter> params_;
};

// Segmentation network: five-stage encoder (last stage fixed-kernel) with
// two FPS pooling stages aggregated by adaptive convolutions, IDW
// interpolation of every pooled scale back to full resolution, and a shared
// per-point head over the concatenated scales plus the category one-hot.
struct SegConfig {
    std::size_t num_parts = 6;
    std::size_t num_categories = 1;
    std::size_t input_dim = 6; // 3 (xyz) or 6 (xyz + normals)
    std::size_t k = 20;
    std::size_t kernel_hidden = 16;
    std::vector<std::size_t> enc_widths{64, 64, 128, 128, 256};
    std::size_t pool_rate = 4;
    std::vector<std::size_t> head_widths{512, 256};
    std::size_t n_adaptive = 4; // encoder stages 1..4; stage 5 stays fixed
    bool with_stn = false;
    bool normalize = true;
    double slope = 0.2;
    ConvInput mode = ConvInput::Spatial;

    static SegConfig tiny();
};

class SegmentationNet {
public:
    SegmentationNet(SegConfig config, std::uint64_t seed);

    // Per-point part logits, N x num_parts. The category one-hot is derived
    // from cloud.class_label when present, otherwise category 0.
    Tensor forward(const PointCloud& cloud) const;

    const SegConfig& config() const { return config_; }
    std::vector<Parameter>& parameters() { return params_; }
    const std::vector<Parameter>& parameters() const { return params_; }
    std::vector<ParamRow> param_table() const;
    const StnLayer* stn() const { return config_.with_stn ? &stn_ : nullptr; }

private:
    struct Stage {
        bool adaptive = false;
        AgConvLayer ag;
        FixedKernelLayer fx;
        Tensor gamma, beta;
    };
    Tensor stage_forward(const Stage& s, const EdgeBatch& e) const;

    SegConfig config_;
    StnLayer stn_;
    std::vector<Stage> stages_;
    AgConvLayer pool_agg1_, pool_agg2_;
    std::vector<Linear> head_;
    std::vector<Tensor> head_gamma_, head_beta_;
    std::vector<Parameter> params_;
};

// Table total; include_bias folds in biases and affine-normalization terms.
std::size_t model_param_count(const std::vector<ParamRow>& table, bool include_bias);

} // namespace agconv
