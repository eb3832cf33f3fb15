#include "agconv/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "agconv/parallel.hpp"

namespace agconv {

std::vector<std::size_t> NeighborGraph::edge_centers() const {
    std::vector<std::size_t> out(rows() * k);
    for (std::size_t r = 0; r < rows(); ++r)
        std::fill(out.begin() + r * k, out.begin() + (r + 1) * k, centers[r]);
    return out;
}

namespace {

// Shared brute-force selection. Sort key is (squared distance, index), with
// the query point itself pinned ahead of any other zero-distance duplicate
// so the self-loop survives.
NeighborGraph knn_impl(const double* data, std::size_t n, std::size_t dim,
                       std::vector<std::size_t> queries, std::size_t k,
                       NeighborGraph::Space space) {
    if (k < 1 || k > n)
        throw SizeError("knn: k = " + std::to_string(k) + " outside [1, " + std::to_string(n) +
                        "]");
    NeighborGraph g;
    g.num_points = n;
    g.k = k;
    g.space = space;
    g.centers = std::move(queries);
    g.neighbors.assign(g.rows() * k, 0);

    parallel_for(g.rows(), 16, [&](std::size_t r0, std::size_t r1) {
        std::vector<std::pair<double, std::size_t>> cand(n);
        for (std::size_t r = r0; r < r1; ++r) {
            const std::size_t q = g.centers[r];
            const double* pq = data + q * dim;
            for (std::size_t j = 0; j < n; ++j) {
                const double* pj = data + j * dim;
                double d2 = 0.0;
                for (std::size_t t = 0; t < dim; ++t) {
                    const double d = pq[t] - pj[t];
                    d2 += d * d;
                }
                cand[j] = {d2, j};
            }
            auto less = [q](const std::pair<double, std::size_t>& a,
                            const std::pair<double, std::size_t>& b) {
                if (a.first != b.first)
                    return a.first < b.first;
                const std::size_t ka = a.second == q ? 0 : a.second + 1;
                const std::size_t kb = b.second == q ? 0 : b.second + 1;
                return ka < kb;
            };
            std::nth_element(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k) - 1,
                             cand.end(), less);
            std::sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), less);
            for (std::size_t t = 0; t < k; ++t)
                g.neighbors[r * k + t] = cand[t].second;
        }
    });
    return g;
}

std::vector<std::size_t> iota_ids(std::size_t n) {
    std::vector<std::size_t> ids(n);
    for (std::size_t i = 0; i < n; ++i)
        ids[i] = i;
    return ids;
}

} // namespace

NeighborGraph knn_spatial(const Points& coords, std::size_t k) {
    const auto n = static_cast<std::size_t>(coords.rows());
    return knn_impl(coords.data(), n, 3, iota_ids(n), k, NeighborGraph::Space::Spatial);
}

NeighborGraph knn_feature(const Tensor& feats, std::size_t k) {
    const std::size_t n = feats.rows();
    return knn_impl(feats.values().data(), n, feats.cols(), iota_ids(n), k,
                    NeighborGraph::Space::Feature);
}

NeighborGraph knn_rooted(const Points& coords, const std::vector<std::size_t>& queries,
                         std::size_t k) {
    const auto n = static_cast<std::size_t>(coords.rows());
    for (std::size_t q : queries)
        if (q >= n)
            throw SizeError("knn_rooted: query index out of range");
    return knn_impl(coords.data(), n, 3, queries, k, NeighborGraph::Space::Spatial);
}

std::vector<std::size_t> fps(const Points& coords, std::size_t m, std::size_t start) {
    const auto n = static_cast<std::size_t>(coords.rows());
    if (m < 1 || m > n)
        throw SizeError("fps: m = " + std::to_string(m) + " outside [1, " + std::to_string(n) +
                        "]");
    if (start >= n)
        throw SizeError("fps: start index out of range");
    std::vector<std::size_t> picked;
    picked.reserve(m);
    picked.push_back(start);
    std::vector<double> min_d2(n, std::numeric_limits<double>::infinity());
    std::size_t last = start;
    for (std::size_t round = 1; round < m; ++round) {
        std::size_t best = 0;
        double best_d2 = -1.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double d2 = (coords.row(static_cast<Eigen::Index>(j)) -
                               coords.row(static_cast<Eigen::Index>(last)))
                                  .squaredNorm();
            if (d2 < min_d2[j])
                min_d2[j] = d2;
            if (min_d2[j] > best_d2) { // strict: ties keep the lowest index
                best_d2 = min_d2[j];
                best = j;
            }
        }
        picked.push_back(best);
        last = best;
    }
    return picked;
}

IdwTable build_idw_table(const Points& src_coords, const Points& dst_coords,
                         std::size_t k_interp, double p, double eps) {
    const auto m = static_cast<std::size_t>(src_coords.rows());
    const auto n = static_cast<std::size_t>(dst_coords.rows());
    if (k_interp < 1 || k_interp > m)
        throw SizeError("idw: k_interp = " + std::to_string(k_interp) + " outside [1, " +
                        std::to_string(m) + "]");
    IdwTable table;
    table.fan = k_interp;
    table.indices.assign(n * k_interp, 0);
    table.weights.assign(n * k_interp, 0.0);

    parallel_for(n, 16, [&](std::size_t r0, std::size_t r1) {
        std::vector<std::pair<double, std::size_t>> cand(m);
        for (std::size_t i = r0; i < r1; ++i) {
            for (std::size_t j = 0; j < m; ++j)
                cand[j] = {(dst_coords.row(static_cast<Eigen::Index>(i)) -
                            src_coords.row(static_cast<Eigen::Index>(j)))
                               .squaredNorm(),
                           j};
            std::nth_element(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k_interp) - 1,
                             cand.end());
            std::sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k_interp));
            double sum = 0.0;
            bool exact_hit = false;
            for (std::size_t t = 0; t < k_interp; ++t) {
                table.indices[i * k_interp + t] = cand[t].second;
                const double d = std::sqrt(cand[t].first);
                const double denom = std::pow(d, p) + eps;
                if (denom == 0.0) {
                    // exact hit with eps = 0: all weight on the nearest source
                    exact_hit = true;
                    break;
                }
                table.weights[i * k_interp + t] = 1.0 / denom;
                sum += table.weights[i * k_interp + t];
            }
            if (exact_hit) {
                std::fill(table.weights.begin() + static_cast<std::ptrdiff_t>(i * k_interp),
                          table.weights.begin() + static_cast<std::ptrdiff_t>((i + 1) * k_interp),
                          0.0);
                table.weights[i * k_interp] = 1.0;
            } else {
                for (std::size_t t = 0; t < k_interp; ++t)
                    table.weights[i * k_interp + t] /= sum;
            }
        }
    });
    return table;
}

Tensor idw_interpolate(const Points& src_coords, const Tensor& src_feats,
                       const Points& dst_coords, std::size_t k_interp, double p, double eps) {
    if (static_cast<std::size_t>(src_coords.rows()) != src_feats.rows())
        throw DimError("idw: " + std::to_string(src_coords.rows()) + " sources but features " +
                       shape_str(src_feats.shape()));
    IdwTable table = build_idw_table(src_coords, dst_coords, k_interp, p, eps);
    return sparse_mix_rows(table.indices, table.weights, table.fan, src_feats);
}

Points tensor_to_points(const Tensor& t) {
    if (t.cols() != 3)
        throw DimError("tensor_to_points: expected 3 columns, got " + shape_str(t.shape()));
    Points p(t.rows(), 3);
    std::copy(t.values().begin(), t.values().end(), p.data());
    return p;
}

Tensor points_to_tensor(const Points& p) {
    std::vector<double> v(p.data(), p.data() + p.size());
    return Tensor(Shape{static_cast<std::size_t>(p.rows()), 3}, std::move(v));
}

} // namespace agconv
