#pragma once

#include <cstdint>
#include <vector>

#include "agconv/pointcloud.hpp"
#include "agconv/tensor.hpp"

namespace agconv {

// k-nearest-neighbor table with self-loops. Row r lists the neighbors of
// query point centers[r], sorted by ascending distance with ties broken by
// ascending index; the query itself always sorts first at distance zero.
// centers is the identity for whole-cloud graphs and a subset for graphs
// rooted at sampled points.
struct NeighborGraph {
    enum class Space { Spatial, Feature };

    std::size_t num_points = 0; // support set size
    std::size_t k = 0;
    std::vector<std::size_t> centers;   // query ids, one per row
    std::vector<std::size_t> neighbors; // rows() x k, flattened row-major
    Space space = Space::Spatial;

    std::size_t rows() const { return centers.size(); }

    // Flat per-edge center ids (each row's center repeated k times).
    std::vector<std::size_t> edge_centers() const;
};

NeighborGraph knn_spatial(const Points& coords, std::size_t k);
NeighborGraph knn_feature(const Tensor& feats, std::size_t k);

// Neighborhoods of the selected query points over the full support cloud.
NeighborGraph knn_rooted(const Points& coords, const std::vector<std::size_t>& queries,
                         std::size_t k);

// Greedy farthest point sampling: repeatedly add the point maximizing the
// minimum distance to the selected set (ties pick the lowest index).
// Returns the m selected indices in selection order, starting from `start`.
std::vector<std::size_t> fps(const Points& coords, std::size_t m, std::size_t start = 0);

struct IdwTable {
    std::vector<std::size_t> indices; // N x fan
    std::vector<double> weights;      // N x fan, rows sum to 1
    std::size_t fan = 0;
};

// Normalized inverse-distance weights w_j = 1/(d_j^p + eps) over the
// k_interp nearest sources of each destination point.
IdwTable build_idw_table(const Points& src_coords, const Points& dst_coords,
                         std::size_t k_interp, double p, double eps);

// Interpolates per-source features to the destination points; differentiable
// in src_feats.
Tensor idw_interpolate(const Points& src_coords, const Tensor& src_feats,
                       const Points& dst_coords, std::size_t k_interp = 3, double p = 2.0,
                       double eps = 1e-8);

// Row-major copy helpers between Eigen point blocks and tensors.
Points tensor_to_points(const Tensor& t);
Tensor points_to_tensor(const Points& p);

} // namespace agconv
