#include "agconv/layers.hpp"

#include <cmath>

namespace agconv {

Linear::Linear(std::size_t in, std::size_t out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in == 0 ? 1 : in));
    weight = Tensor::uniform(Shape{in, out}, rng, -bound, bound);
    bias = Tensor::uniform(Shape{out}, rng, -bound, bound);
}

ConvInput conv_input_from_string(const std::string& tag) {
    if (tag == "spatial")
        return ConvInput::Spatial;
    if (tag == "normals")
        return ConvInput::Normals;
    if (tag == "spatial+normals")
        return ConvInput::SpatialNormals;
    if (tag == "feature")
        return ConvInput::Feature;
    throw ConfigError("unknown conv input mode '" + tag + "'");
}

const char* conv_input_to_string(ConvInput mode) {
    switch (mode) {
    case ConvInput::Spatial: return "spatial";
    case ConvInput::Normals: return "normals";
    case ConvInput::SpatialNormals: return "spatial+normals";
    case ConvInput::Feature: return "feature";
    }
    return "?";
}

Tensor EdgeBatch::delta_f() const {
    Tensor fc = gather_rows(feats, centers);
    Tensor fn = gather_rows(feats, neighbors);
    return concat_lastdim(fc, sub(fn, fc));
}

EdgeBatch build_edges(const Tensor& coords, const Tensor& normals, const Tensor& feats,
                      const NeighborGraph& graph, ConvInput mode) {
    if (graph.num_points != feats.rows())
        throw DimError("build_edges: graph over " + std::to_string(graph.num_points) +
                       " points but features " + shape_str(feats.shape()));
    EdgeBatch e;
    e.centers = graph.edge_centers();
    e.neighbors = graph.neighbors;
    e.k = graph.k;
    e.n = graph.rows();
    e.feats = feats;

    Tensor x;
    switch (mode) {
    case ConvInput::Spatial:
        x = coords;
        break;
    case ConvInput::Normals:
        if (!normals.defined() || normals.numel() == 0)
            throw ContractError("build_edges: conv input mode 'normals' needs normals");
        x = normals;
        break;
    case ConvInput::SpatialNormals:
        if (!normals.defined() || normals.numel() == 0)
            throw ContractError("build_edges: conv input mode 'spatial+normals' needs normals");
        x = concat_lastdim(coords, normals);
        break;
    case ConvInput::Feature:
        x = feats;
        break;
    }
    Tensor xc = gather_rows(x, e.centers);
    Tensor xn = gather_rows(x, e.neighbors);
    e.delta_x = concat_lastdim(xc, sub(xn, xc));
    e.conv_dim = e.delta_x.cols();
    return e;
}

// ---- adaptive convolution --------------------------------------------------

AgConvLayer::AgConvLayer(std::size_t in, std::size_t out, std::size_t conv, std::size_t hidden,
                         Rng& rng, bool shortcut_block, double act_slope)
    : in_dim(in), out_dim(out), conv_dim(conv), hidden_dim(hidden), slope(act_slope),
      kernel_mlp1(2 * in, hidden, rng), kernel_mlp2(hidden, conv * out, rng),
      with_shortcut(shortcut_block) {
    if (with_shortcut) {
        shortcut = Linear(2 * in, out, rng);
        short_gamma = Tensor(Shape{out}, 1.0);
        short_beta = Tensor(Shape{out}, 0.0);
    }
}

Tensor AgConvLayer::forward(const EdgeBatch& edges) const {
    if (edges.feats.cols() != in_dim)
        throw DimError("agconv: layer expects " + std::to_string(in_dim) + "-dim features, got " +
                       shape_str(edges.feats.shape()));
    if (edges.conv_dim != conv_dim)
        throw DimError("agconv: layer convolves " + std::to_string(conv_dim) +
                       "-dim inputs, edge batch carries " + std::to_string(edges.conv_dim));
    // kernel generation: shared MLP(d), then one weight matrix (c x M) per edge
    Tensor hidden = leaky_relu(
        kernel_mlp1.forward_edges(edges.feats, edges.centers, edges.neighbors), slope);
    Tensor kernels = kernel_mlp2.forward(hidden); // E x (c*M)
    // convolution: (1 x c) * (c x M) per edge, nonlinearity, neighborhood max
    Tensor h = leaky_relu(edge_kernel_apply(kernels, edges.delta_x), slope);
    Tensor pooled = neighborhood_max(h, edges.k).values;
    if (!with_shortcut)
        return pooled;
    // self edge [f_i, 0]: center and neighbor coincide
    std::vector<std::size_t> self(edges.n);
    for (std::size_t i = 0; i < self.size(); ++i)
        self[i] = i;
    Tensor res = shortcut.forward_edges(edges.feats, self, self);
    return add(pooled, affine_norm(res, short_gamma, short_beta));
}

void AgConvLayer::collect_parameters(const std::string& prefix,
                                     std::vector<Parameter>& out) const {
    out.emplace_back(prefix + ".mlp1.weight", kernel_mlp1.weight);
    out.emplace_back(prefix + ".mlp1.bias", kernel_mlp1.bias);
    out.emplace_back(prefix + ".mlp2.weight", kernel_mlp2.weight);
    out.emplace_back(prefix + ".mlp2.bias", kernel_mlp2.bias);
    if (with_shortcut) {
        out.emplace_back(prefix + ".shortcut.weight", shortcut.weight);
        out.emplace_back(prefix + ".shortcut.bias", shortcut.bias);
        out.emplace_back(prefix + ".shortcut.gamma", short_gamma);
        out.emplace_back(prefix + ".shortcut.beta", short_beta);
    }
}

// ---- fixed-kernel baselines ---------------------------------------------------

FixedKind fixed_kind_from_string(const std::string& tag) {
    if (tag == "graphconv")
        return FixedKind::GraphConv;
    if (tag == "attention_point")
        return FixedKind::AttentionPoint;
    if (tag == "attention_channel")
        return FixedKind::AttentionChannel;
    throw ConfigError("unknown fixed kernel '" + tag + "'");
}

const char* fixed_kind_to_string(FixedKind kind) {
    switch (kind) {
    case FixedKind::GraphConv: return "graphconv";
    case FixedKind::AttentionPoint: return "attention_point";
    case FixedKind::AttentionChannel: return "attention_channel";
    }
    return "?";
}

FixedKernelLayer::FixedKernelLayer(FixedKind kind, std::size_t in, std::size_t out, Rng& rng,
                                   double act_slope)
    : kind(kind), in_dim(in), out_dim(out), slope(act_slope) {
    if (kind == FixedKind::GraphConv) {
        h = Linear(2 * in, out, rng);
    } else {
        h = Linear(in, out, rng);
        alpha = Linear(2 * out, kind == FixedKind::AttentionPoint ? 1 : out, rng);
    }
}

Tensor FixedKernelLayer::forward(const EdgeBatch& edges) const {
    if (edges.feats.cols() != in_dim)
        throw DimError("fixed conv: layer expects " + std::to_string(in_dim) +
                       "-dim features, got " + shape_str(edges.feats.shape()));
    if (kind == FixedKind::GraphConv) {
        Tensor hij = leaky_relu(h.forward_edges(edges.feats, edges.centers, edges.neighbors), slope);
        return neighborhood_max(hij, edges.k).values;
    }
    // attention: u = h(f), scores over [u_i, u_j - u_i], softmax per neighborhood
    Tensor u = h.forward(edges.feats);
    Tensor scores = alpha.forward_edges(u, edges.centers, edges.neighbors);
    Tensor a = neighborhood_softmax(scores, edges.k);
    Tensor uj = gather_rows(u, edges.neighbors);
    Tensor weighted = kind == FixedKind::AttentionPoint ? row_scale(uj, a) : mul(uj, a);
    return neighborhood_max(weighted, edges.k).values;
}

void FixedKernelLayer::collect_parameters(const std::string& prefix,
                                          std::vector<Parameter>& out) const {
    out.emplace_back(prefix + ".h.weight", h.weight);
    out.emplace_back(prefix + ".h.bias", h.bias);
    if (kind != FixedKind::GraphConv) {
        out.emplace_back(prefix + ".alpha.weight", alpha.weight);
        out.emplace_back(prefix + ".alpha.bias", alpha.bias);
    }
}

// ---- graph pooling ---------------------------------------------------------------

PoolResult graph_pool(const Tensor& coords, const Tensor& feats, std::size_t rate, std::size_t k,
                      const AgConvLayer* agg, const Tensor* normals) {
    if (rate < 1)
        throw ContractError("graph_pool: rate must be >= 1");
    const std::size_t n = feats.rows();
    const std::size_t m = (n + rate - 1) / rate;
    if (m < 1)
        throw SizeError("graph_pool: no points would remain");
    if (m < k)
        throw SizeError("graph_pool: " + std::to_string(m) + " kept points cannot host k = " +
                        std::to_string(k) + " neighborhoods");
    Points pts = tensor_to_points(coords);
    // Start FPS from the point farthest from the centroid (ties: lowest
    // index) so pooling commutes with input permutations.
    Eigen::RowVector3d centroid = pts.colwise().mean();
    std::size_t start = 0;
    double best = -1.0;
    for (Eigen::Index i = 0; i < pts.rows(); ++i) {
        const double d2 = (pts.row(i) - centroid).squaredNorm();
        if (d2 > best) {
            best = d2;
            start = static_cast<std::size_t>(i);
        }
    }
    PoolResult res;
    res.selected = fps(pts, m, start);
    NeighborGraph g = knn_rooted(pts, res.selected, k);
    res.coords = gather_rows(coords, res.selected);
    if (agg != nullptr) {
        EdgeBatch e;
        e.centers = g.edge_centers();
        e.neighbors = g.neighbors;
        e.k = k;
        e.n = g.rows();
        e.feats = feats;
        Tensor x;
        // delta_x over the full-cloud coordinates, matching the layer's width
        if (agg->conv_dim == 6)
            x = coords;
        else if (normals != nullptr && agg->conv_dim == 12)
            x = concat_lastdim(coords, *normals);
        else if (agg->conv_dim == 2 * feats.cols())
            x = feats;
        else
            throw DimError("graph_pool: aggregator conv width " + std::to_string(agg->conv_dim) +
                           " has no matching input");
        Tensor xc = gather_rows(x, e.centers);
        Tensor xn = gather_rows(x, e.neighbors);
        e.delta_x = concat_lastdim(xc, sub(xn, xc));
        e.conv_dim = e.delta_x.cols();
        res.feats = agg->forward(e);
    } else {
        Tensor nbr_feats = gather_rows(feats, g.neighbors);
        res.feats = neighborhood_max(nbr_feats, k).values;
    }
    return res;
}

// ---- spatial transformer ------------------------------------------------------------

StnLayer::StnLayer(std::size_t neighborhood, Rng& rng, double act_slope)
    : k(neighborhood), slope(act_slope),
      conv1(FixedKind::GraphConv, 3, 64, rng, act_slope),
      conv2(FixedKind::GraphConv, 64, 128, rng, act_slope),
      conv3(FixedKind::GraphConv, 128, 1024, rng, act_slope),
      fc1(1024, 512, rng), fc2(512, 256, rng), out(256, 9, rng) {
    // start as the exact identity transform
    std::fill(out.weight.values().begin(), out.weight.values().end(), 0.0);
    std::fill(out.bias.values().begin(), out.bias.values().end(), 0.0);
    out.bias.values()[0] = 1.0;
    out.bias.values()[4] = 1.0;
    out.bias.values()[8] = 1.0;
}

StnLayer::Result StnLayer::forward(const Tensor& coords, const Tensor& normals) const {
    NeighborGraph g = knn_spatial(tensor_to_points(coords), k);
    EdgeBatch e1 = build_edges(coords, Tensor(), coords, g, ConvInput::Spatial);
    Tensor x1 = conv1.forward(e1);

    EdgeBatch e2 = e1;
    e2.feats = x1;
    Tensor x2 = conv2.forward(e2);

    EdgeBatch e3 = e1;
    e3.feats = x2;
    Tensor x3 = conv3.forward(e3);

    Tensor global = reduce_max_rows(x3).values; // 1024
    Tensor h1 = leaky_relu(fc1.forward(global), slope);
    Tensor h2 = leaky_relu(fc2.forward(h1), slope);
    Tensor nine = out.forward(h2); // 1 x 9

    Tensor t33 = reshape(nine, Shape{3, 3});
    Result res;
    res.transform = t33;
    res.coords = matmul_nt(coords, t33); // coords * T^T
    if (normals.defined() && normals.numel() > 0)
        res.normals = matmul_nt(normals, t33);
    const auto& tv = t33.values();
    res.determinant = tv[0] * (tv[4] * tv[8] - tv[5] * tv[7]) -
                      tv[1] * (tv[3] * tv[8] - tv[5] * tv[6]) +
                      tv[2] * (tv[3] * tv[7] - tv[4] * tv[6]);
    return res;
}

void StnLayer::collect_parameters(const std::string& prefix, std::vector<Parameter>& out_list) const {
    conv1.collect_parameters(prefix + ".conv1", out_list);
    conv2.collect_parameters(prefix + ".conv2", out_list);
    conv3.collect_parameters(prefix + ".conv3", out_list);
    out_list.emplace_back(prefix + ".fc1.weight", fc1.weight);
    out_list.emplace_back(prefix + ".fc1.bias", fc1.bias);
    out_list.emplace_back(prefix + ".fc2.weight", fc2.weight);
    out_list.emplace_back(prefix + ".fc2.bias", fc2.bias);
    out_list.emplace_back(prefix + ".out.weight", out.weight);
    out_list.emplace_back(prefix + ".out.bias", out.bias);
}

// ---- parameter formulas ------------------------------------------------------------

std::size_t layer_param_count(const AgConvLayer& layer, bool include_bias) {
    const std::size_t d = layer.hidden_dim, D = layer.in_dim, c = layer.conv_dim,
                      M = layer.out_dim;
    std::size_t count = 2 * d * D + d * c * M;
    if (include_bias)
        count += d + c * M;
    return count;
}

std::size_t layer_param_count(const FixedKernelLayer& layer, bool include_bias) {
    const std::size_t D = layer.in_dim, M = layer.out_dim;
    if (layer.kind == FixedKind::GraphConv) {
        std::size_t count = 2 * D * M;
        if (include_bias)
            count += M;
        return count;
    }
    const std::size_t q = layer.kind == FixedKind::AttentionPoint ? 1 : M;
    std::size_t count = D * M + 2 * M * q;
    if (include_bias)
        count += M + q;
    return count;
}

} // namespace agconv
