#include "agconv/models.hpp"

#include <numeric>

namespace agconv {

namespace {

std::size_t conv_operand_dim(ConvInput mode, std::size_t in_dim) {
    switch (mode) {
    case ConvInput::Spatial:
    case ConvInput::Normals:
        return 6;
    case ConvInput::SpatialNormals:
        return 12;
    case ConvInput::Feature:
        return 2 * in_dim;
    }
    return 6;
}

std::string dim_str(std::size_t v) { return std::to_string(v); }

ParamRow agconv_row(const std::string& name, const AgConvLayer& l) {
    ParamRow row;
    row.layer = name;
    row.formula = "2dD+dcM: d=" + dim_str(l.hidden_dim) + " D=" + dim_str(l.in_dim) +
                  " c=" + dim_str(l.conv_dim) + " M=" + dim_str(l.out_dim);
    row.bias_free = layer_param_count(l, false);
    row.with_bias = layer_param_count(l, true);
    return row;
}

ParamRow fixed_row(const std::string& name, const FixedKernelLayer& l) {
    ParamRow row;
    row.layer = name;
    if (l.kind == FixedKind::GraphConv)
        row.formula = "2DM: D=" + dim_str(l.in_dim) + " M=" + dim_str(l.out_dim);
    else
        row.formula = std::string("DM+2Mq: ") + fixed_kind_to_string(l.kind) +
                      " D=" + dim_str(l.in_dim) + " M=" + dim_str(l.out_dim);
    row.bias_free = layer_param_count(l, false);
    row.with_bias = layer_param_count(l, true);
    return row;
}

ParamRow linear_row(const std::string& name, const Linear& l) {
    ParamRow row;
    row.layer = name;
    row.formula = "in*out: " + dim_str(l.in_dim()) + "*" + dim_str(l.out_dim());
    row.bias_free = l.in_dim() * l.out_dim();
    row.with_bias = row.bias_free + l.out_dim();
    return row;
}

ParamRow norm_row(const std::string& name, std::size_t width) {
    ParamRow row;
    row.layer = name;
    row.formula = "2M: M=" + dim_str(width);
    row.bias_free = 0;
    row.with_bias = 2 * width;
    return row;
}

ParamRow shortcut_row(const std::string& name, const AgConvLayer& l) {
    ParamRow row;
    row.layer = name;
    row.formula = "2DM: D=" + dim_str(l.in_dim) + " M=" + dim_str(l.out_dim);
    row.bias_free = 2 * l.in_dim * l.out_dim;
    row.with_bias = row.bias_free + l.out_dim + 2 * l.out_dim; // bias + affine norm
    return row;
}

Tensor category_onehot(const PointCloud& cloud, std::size_t num_categories) {
    std::size_t cat = 0;
    if (cloud.class_label >= 0) {
        if (static_cast<std::size_t>(cloud.class_label) >= num_categories)
            throw ContractError("cloud category " + std::to_string(cloud.class_label) +
                                " exceeds the configured " + std::to_string(num_categories));
        cat = static_cast<std::size_t>(cloud.class_label);
    }
    Tensor oh(Shape{1, num_categories}, 0.0);
    oh.values()[cat] = 1.0;
    return oh;
}

} // namespace

std::size_t model_param_count(const std::vector<ParamRow>& table, bool include_bias) {
    std::size_t total = 0;
    for (const ParamRow& r : table)
        total += include_bias ? r.with_bias : r.bias_free;
    return total;
}

// ---- classification ---------------------------------------------------------

ClsConfig ClsConfig::tiny() {
    ClsConfig c;
    c.num_classes = 3;
    c.k = 4;
    c.kernel_hidden = 4;
    c.conv_widths = {6, 6, 8, 8};
    c.agg_width = 16;
    c.head_widths = {12, 10};
    c.normalize = false;
    return c;
}

ClassificationNet::ClassificationNet(ClsConfig config, std::uint64_t seed)
    : config_(std::move(config)) {
    Rng rng(seed);
    std::size_t in = 3;
    for (std::size_t i = 0; i < config_.conv_widths.size(); ++i) {
        const std::size_t out = config_.conv_widths[i];
        Stage s;
        s.adaptive = i < config_.n_adaptive;
        if (s.adaptive)
            s.ag = AgConvLayer(in, out, conv_operand_dim(config_.mode, in), config_.kernel_hidden,
                               rng, false, config_.slope);
        else
            s.fx = FixedKernelLayer(FixedKind::GraphConv, in, out, rng, config_.slope);
        if (config_.normalize) {
            s.gamma = Tensor(Shape{out}, 1.0);
            s.beta = Tensor(Shape{out}, 0.0);
        }
        stages_.push_back(std::move(s));
        in = out;
    }
    const std::size_t cat_dim =
        std::accumulate(config_.conv_widths.begin(), config_.conv_widths.end(), std::size_t{0});
    agg_ = Linear(cat_dim, config_.agg_width, rng);
    if (config_.normalize) {
        agg_gamma_ = Tensor(Shape{config_.agg_width}, 1.0);
        agg_beta_ = Tensor(Shape{config_.agg_width}, 0.0);
    }
    std::size_t h_in = config_.agg_width;
    for (std::size_t w : config_.head_widths) {
        head_.emplace_back(h_in, w, rng);
        h_in = w;
    }
    head_.emplace_back(h_in, config_.num_classes, rng);

    for (std::size_t i = 0; i < stages_.size(); ++i) {
        const std::string prefix = "conv" + std::to_string(i + 1);
        if (stages_[i].adaptive)
            stages_[i].ag.collect_parameters(prefix, params_);
        else
            stages_[i].fx.collect_parameters(prefix, params_);
        if (config_.normalize) {
            params_.emplace_back(prefix + ".norm.gamma", stages_[i].gamma);
            params_.emplace_back(prefix + ".norm.beta", stages_[i].beta);
        }
    }
    params_.emplace_back("agg.weight", agg_.weight);
    params_.emplace_back("agg.bias", agg_.bias);
    if (config_.normalize) {
        params_.emplace_back("agg.norm.gamma", agg_gamma_);
        params_.emplace_back("agg.norm.beta", agg_beta_);
    }
    for (std::size_t i = 0; i < head_.size(); ++i) {
        params_.emplace_back("head" + std::to_string(i + 1) + ".weight", head_[i].weight);
        params_.emplace_back("head" + std::to_string(i + 1) + ".bias", head_[i].bias);
    }
}

Tensor ClassificationNet::stage_forward(const Stage& s, const EdgeBatch& e) const {
    Tensor out = s.adaptive ? s.ag.forward(e) : s.fx.forward(e);
    if (config_.normalize)
        out = affine_norm(out, s.gamma, s.beta);
    return out;
}

Tensor ClassificationNet::forward(const PointCloud& cloud) const {
    const std::size_t n = cloud.size();
    if (n < config_.k)
        throw SizeError("classification: " + std::to_string(n) + " points cannot host k = " +
                        std::to_string(config_.k));
    Tensor coords = points_to_tensor(cloud.coords);
    Tensor normals =
        cloud.has_normals() ? points_to_tensor(cloud.normals) : Tensor();

    Tensor f = coords;
    std::vector<Tensor> skips;
    for (std::size_t i = 0; i < stages_.size(); ++i) {
        NeighborGraph g = i == 0 ? knn_spatial(cloud.coords, config_.k)
                                 : knn_feature(f, config_.k);
        EdgeBatch e = build_edges(coords, normals, f, g,
                                  stages_[i].adaptive ? config_.mode : ConvInput::Spatial);
        f = stage_forward(stages_[i], e);
        skips.push_back(f);
    }
    Tensor cat = skips[0];
    for (std::size_t i = 1; i < skips.size(); ++i)
        cat = concat_lastdim(cat, skips[i]);
    Tensor a = add_bias(matmul(cat, agg_.weight), agg_.bias);
    if (config_.normalize)
        a = affine_norm(a, agg_gamma_, agg_beta_);
    a = leaky_relu(a, config_.slope);
    Tensor global = reduce_max_rows(a).values;
    Tensor h = reshape(global, Shape{1, config_.agg_width});
    for (std::size_t i = 0; i + 1 < head_.size(); ++i)
        h = leaky_relu(head_[i].forward(h), config_.slope);
    return head_.back().forward(h);
}

std::vector<ParamRow> ClassificationNet::param_table() const {
    std::vector<ParamRow> table;
    for (std::size_t i = 0; i < stages_.size(); ++i) {
        const std::string prefix = "conv" + std::to_string(i + 1);
        if (stages_[i].adaptive)
            table.push_back(agconv_row(prefix, stages_[i].ag));
        else
            table.push_back(fixed_row(prefix, stages_[i].fx));
        if (config_.normalize)
            table.push_back(norm_row(prefix + ".norm", config_.conv_widths[i]));
    }
    table.push_back(linear_row("agg", agg_));
    if (config_.normalize)
        table.push_back(norm_row("agg.norm", config_.agg_width));
    for (std::size_t i = 0; i < head_.size(); ++i)
        table.push_back(linear_row("head" + std::to_string(i + 1), head_[i]));
    return table;
}

// ---- segmentation --------------------------------------------------------------

SegConfig SegConfig::tiny() {
    SegConfig c;
    c.num_parts = 6;
    c.num_categories = 1;
    c.input_dim = 6;
    c.k = 2;
    c.kernel_hidden = 4;
    c.enc_widths = {6, 6, 8, 8, 12};
    c.head_widths = {10, 8};
    c.normalize = false;
    return c;
}

SegmentationNet::SegmentationNet(SegConfig config, std::uint64_t seed)
    : config_(std::move(config)) {
    if (config_.enc_widths.size() != 5)
        throw ConfigError("segmentation encoder expects 5 stages");
    Rng rng(seed);
    if (config_.with_stn)
        stn_ = StnLayer(config_.k, rng, config_.slope);
    std::size_t in = config_.input_dim;
    for (std::size_t i = 0; i < 5; ++i) {
        const std::size_t out = config_.enc_widths[i];
        Stage s;
        s.adaptive = i < config_.n_adaptive && i + 1 < 5; // last stage stays fixed
        if (s.adaptive)
            s.ag = AgConvLayer(in, out, conv_operand_dim(config_.mode, in), config_.kernel_hidden,
                               rng, /*shortcut*/ true, config_.slope);
        else
            s.fx = FixedKernelLayer(FixedKind::GraphConv, in, out, rng, config_.slope);
        if (config_.normalize) {
            s.gamma = Tensor(Shape{out}, 1.0);
            s.beta = Tensor(Shape{out}, 0.0);
        }
        stages_.push_back(std::move(s));
        in = out;
    }
    pool_agg1_ = AgConvLayer(config_.enc_widths[1], config_.enc_widths[1], 6,
                             config_.kernel_hidden, rng, false, config_.slope);
    pool_agg2_ = AgConvLayer(config_.enc_widths[2], config_.enc_widths[2], 6,
                             config_.kernel_hidden, rng, false, config_.slope);

    const std::size_t cat_dim =
        std::accumulate(config_.enc_widths.begin(), config_.enc_widths.end(), std::size_t{0}) +
        config_.num_categories;
    std::size_t h_in = cat_dim;
    for (std::size_t w : config_.head_widths) {
        head_.emplace_back(h_in, w, rng);
        if (config_.normalize) {
            head_gamma_.push_back(Tensor(Shape{w}, 1.0));
            head_beta_.push_back(Tensor(Shape{w}, 0.0));
        }
        h_in = w;
    }
    head_.emplace_back(h_in, config_.num_parts, rng);

    if (config_.with_stn)
        stn_.collect_parameters("stn", params_);
    for (std::size_t i = 0; i < 5; ++i) {
        const std::string prefix = "enc" + std::to_string(i + 1);
        if (stages_[i].adaptive)
            stages_[i].ag.collect_parameters(prefix, params_);
        else
            stages_[i].fx.collect_parameters(prefix, params_);
        if (config_.normalize) {
            params_.emplace_back(prefix + ".norm.gamma", stages_[i].gamma);
            params_.emplace_back(prefix + ".norm.beta", stages_[i].beta);
        }
    }
    pool_agg1_.collect_parameters("pool1.agg", params_);
    pool_agg2_.collect_parameters("pool2.agg", params_);
    for (std::size_t i = 0; i < head_.size(); ++i) {
        params_.emplace_back("head" + std::to_string(i + 1) + ".weight", head_[i].weight);
        params_.emplace_back("head" + std::to_string(i + 1) + ".bias", head_[i].bias);
        if (config_.normalize && i < config_.head_widths.size()) {
            params_.emplace_back("head" + std::to_string(i + 1) + ".norm.gamma", head_gamma_[i]);
            params_.emplace_back("head" + std::to_string(i + 1) + ".norm.beta", head_beta_[i]);
        }
    }
}

Tensor SegmentationNet::stage_forward(const Stage& s, const EdgeBatch& e) const {
    Tensor out = s.adaptive ? s.ag.forward(e) : s.fx.forward(e);
    if (config_.normalize)
        out = affine_norm(out, s.gamma, s.beta);
    return out;
}

Tensor SegmentationNet::forward(const PointCloud& cloud) const {
    const std::size_t n = cloud.size();
    const std::size_t k = config_.k;
    if (n < k)
        throw SizeError("segmentation: " + std::to_string(n) + " points cannot host k = " +
                        std::to_string(k));
    const std::size_t m1 = (n + config_.pool_rate - 1) / config_.pool_rate;
    const std::size_t m2 = (m1 + config_.pool_rate - 1) / config_.pool_rate;
    if (m1 < k || m2 < k)
        throw SizeError("segmentation: two pooling stages at rate " +
                        std::to_string(config_.pool_rate) + " underflow k = " + std::to_string(k));

    Tensor coords = points_to_tensor(cloud.coords);
    Tensor normals = cloud.has_normals() ? points_to_tensor(cloud.normals) : Tensor();
    if (config_.with_stn) {
        StnLayer::Result res = stn_.forward(coords, normals);
        coords = res.coords;
        if (res.normals.defined())
            normals = res.normals;
    }

    const bool with_normals = normals.defined() && normals.numel() > 0;
    Tensor f0 = with_normals && config_.input_dim == 6 ? concat_lastdim(coords, normals) : coords;
    if (f0.cols() != config_.input_dim)
        throw ContractError("segmentation: input features have width " +
                            std::to_string(f0.cols()) + ", net expects " +
                            std::to_string(config_.input_dim));

    // stage 1 on the spatial graph, stage 2 on the feature graph (full cloud)
    Points pts_full = tensor_to_points(coords);
    NeighborGraph g1 = knn_spatial(pts_full, k);
    EdgeBatch e1 = build_edges(coords, normals, f0, g1, config_.mode);
    Tensor x1 = stage_forward(stages_[0], e1);

    NeighborGraph g2 = knn_feature(x1, k);
    EdgeBatch e2 = build_edges(coords, normals, x1, g2, config_.mode);
    Tensor x2 = stage_forward(stages_[1], e2);

    PoolResult p1 = graph_pool(coords, x2, config_.pool_rate, k, &pool_agg1_,
                               with_normals ? &normals : nullptr);
    Tensor normals_p1 = with_normals ? gather_rows(normals, p1.selected) : Tensor();

    NeighborGraph g3 = knn_feature(p1.feats, k);
    EdgeBatch e3 = build_edges(p1.coords, normals_p1, p1.feats, g3, config_.mode);
    Tensor x3 = stage_forward(stages_[2], e3);

    PoolResult p2 = graph_pool(p1.coords, x3, config_.pool_rate, k, &pool_agg2_,
                               with_normals ? &normals_p1 : nullptr);
    Tensor normals_p2 = with_normals ? gather_rows(normals_p1, p2.selected) : Tensor();

    NeighborGraph g4 = knn_feature(p2.feats, k);
    EdgeBatch e4 = build_edges(p2.coords, normals_p2, p2.feats, g4, config_.mode);
    Tensor x4 = stage_forward(stages_[3], e4);

    NeighborGraph g5 = knn_feature(x4, k);
    EdgeBatch e5 = build_edges(p2.coords, normals_p2, x4, g5, config_.mode);
    Tensor x5 = stage_forward(stages_[4], e5);

    // every pooled scale back to full resolution
    Points pts_m1 = tensor_to_points(p1.coords);
    Points pts_m2 = tensor_to_points(p2.coords);
    const std::size_t ki1 = std::min<std::size_t>(3, m1);
    const std::size_t ki2 = std::min<std::size_t>(3, m2);
    Tensor ix3 = idw_interpolate(pts_m1, x3, pts_full, ki1);
    Tensor ix4 = idw_interpolate(pts_m2, x4, pts_full, ki2);
    Tensor ix5 = idw_interpolate(pts_m2, x5, pts_full, ki2);

    Tensor oh = category_onehot(cloud, config_.num_categories);
    Tensor oh_rows = gather_rows(oh, std::vector<std::size_t>(n, 0));

    Tensor cat = concat_lastdim(x1, x2);
    cat = concat_lastdim(cat, ix3);
    cat = concat_lastdim(cat, ix4);
    cat = concat_lastdim(cat, ix5);
    cat = concat_lastdim(cat, oh_rows);

    Tensor h = cat;
    for (std::size_t i = 0; i + 1 < head_.size(); ++i) {
        h = head_[i].forward(h);
        if (config_.normalize)
            h = affine_norm(h, head_gamma_[i], head_beta_[i]);
        h = leaky_relu(h, config_.slope);
    }
    return head_.back().forward(h);
}

std::vector<ParamRow> SegmentationNet::param_table() const {
    std::vector<ParamRow> table;
    if (config_.with_stn) {
        table.push_back(fixed_row("stn.conv1", stn_.conv1));
        table.push_back(fixed_row("stn.conv2", stn_.conv2));
        table.push_back(fixed_row("stn.conv3", stn_.conv3));
        table.push_back(linear_row("stn.fc1", stn_.fc1));
        table.push_back(linear_row("stn.fc2", stn_.fc2));
        table.push_back(linear_row("stn.out", stn_.out));
    }
    for (std::size_t i = 0; i < 5; ++i) {
        const std::string prefix = "enc" + std::to_string(i + 1);
        if (stages_[i].adaptive) {
            table.push_back(agconv_row(prefix, stages_[i].ag));
            table.push_back(shortcut_row(prefix + ".shortcut", stages_[i].ag));
        } else {
            table.push_back(fixed_row(prefix, stages_[i].fx));
        }
        if (config_.normalize)
            table.push_back(norm_row(prefix + ".norm", config_.enc_widths[i]));
    }
    table.push_back(agconv_row("pool1.agg", pool_agg1_));
    table.push_back(agconv_row("pool2.agg", pool_agg2_));
    for (std::size_t i = 0; i < head_.size(); ++i) {
        table.push_back(linear_row("head" + std::to_string(i + 1), head_[i]));
        if (config_.normalize && i < config_.head_widths.size())
            table.push_back(norm_row("head" + std::to_string(i + 1) + ".norm",
                                     config_.head_widths[i]));
    }
    return table;
}

} // namespace agconv
