#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "agconv/graph.hpp"
#include "agconv/pointcloud.hpp"
#include "agconv/rng.hpp"

using namespace agconv;

namespace {

Points collinear() {
    Points p(4, 3);
    p << 0, 0, 0, 1, 0, 0, 2, 0, 0, 10, 0, 0;
    return p;
}

Points random_points(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    Points p(static_cast<Eigen::Index>(n), 3);
    for (Eigen::Index i = 0; i < p.rows(); ++i)
        p.row(i) << rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1);
    return p;
}

// Independent oracle: full sort of all (distance, index) pairs per query.
std::vector<std::size_t> knn_row_oracle(const Points& pts, std::size_t q, std::size_t k) {
    std::vector<std::pair<double, std::size_t>> all;
    for (Eigen::Index j = 0; j < pts.rows(); ++j)
        all.push_back({(pts.row(static_cast<Eigen::Index>(q)) - pts.row(j)).squaredNorm(),
                       static_cast<std::size_t>(j)});
    std::stable_sort(all.begin(), all.end());
    std::vector<std::size_t> row(k);
    for (std::size_t t = 0; t < k; ++t)
        row[t] = all[t].second;
    return row;
}

// Independent oracle: greedy farthest-point rule with distances recomputed
// from scratch at every round.
std::vector<std::size_t> fps_oracle(const Points& pts, std::size_t m, std::size_t start) {
    std::vector<std::size_t> sel{start};
    while (sel.size() < m) {
        std::size_t best = 0;
        double best_d = -1.0;
        for (Eigen::Index j = 0; j < pts.rows(); ++j) {
            double dmin = std::numeric_limits<double>::infinity();
            for (std::size_t s : sel)
                dmin = std::min(dmin, (pts.row(j) - pts.row(static_cast<Eigen::Index>(s)))
                                          .squaredNorm());
            if (dmin > best_d) {
                best_d = dmin;
                best = static_cast<std::size_t>(j);
            }
        }
        sel.push_back(best);
    }
    return sel;
}

} // namespace

TEST_CASE("knn_spatial on collinear points") {
    NeighborGraph g = knn_spatial(collinear(), 2);
    CHECK(g.neighbors[0 * 2 + 0] == 0);
    CHECK(g.neighbors[0 * 2 + 1] == 1);
    CHECK(g.neighbors[3 * 2 + 0] == 3);
    CHECK(g.neighbors[3 * 2 + 1] == 2);
}

TEST_CASE("knn_spatial edge sizes") {
    Points p = random_points(12, 5);
    SUBCASE("k = 1 keeps only the self loop") {
        NeighborGraph g = knn_spatial(p, 1);
        for (std::size_t i = 0; i < 12; ++i)
            CHECK(g.neighbors[i] == i);
    }
    SUBCASE("k = N rows are permutations of all indices") {
        NeighborGraph g = knn_spatial(p, 12);
        for (std::size_t i = 0; i < 12; ++i) {
            std::set<std::size_t> row(g.neighbors.begin() + static_cast<std::ptrdiff_t>(i * 12),
                                      g.neighbors.begin() + static_cast<std::ptrdiff_t>((i + 1) * 12));
            CHECK(row.size() == 12);
        }
    }
    SUBCASE("k > N errors") {
        CHECK_THROWS_AS(knn_spatial(p, 13), SizeError);
    }
}

TEST_CASE("knn rows always contain the self loop, sorted by distance") {
    Points p = random_points(40, 9);
    NeighborGraph g = knn_spatial(p, 7);
    for (std::size_t i = 0; i < 40; ++i) {
        CHECK(g.neighbors[i * 7] == i); // self at distance zero
        double prev = -1.0;
        for (std::size_t t = 0; t < 7; ++t) {
            double d = (p.row(static_cast<Eigen::Index>(i)) -
                        p.row(static_cast<Eigen::Index>(g.neighbors[i * 7 + t])))
                           .squaredNorm();
            CHECK(d >= prev);
            prev = d;
        }
        std::set<std::size_t> uniq(g.neighbors.begin() + static_cast<std::ptrdiff_t>(i * 7),
                                   g.neighbors.begin() + static_cast<std::ptrdiff_t>((i + 1) * 7));
        CHECK(uniq.size() == 7);
    }
}

TEST_CASE("knn self loop survives duplicate points") {
    Points p(5, 3);
    p << 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 2, 2, 2;
    NeighborGraph g = knn_spatial(p, 2);
    for (std::size_t i = 0; i < 5; ++i)
        CHECK(g.neighbors[i * 2] == i);
}

TEST_CASE("knn matches the brute-force sort oracle on random clouds") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Points p = random_points(30, 1000 + seed);
        const std::size_t k = 1 + seed % 10;
        NeighborGraph g = knn_spatial(p, k);
        for (std::size_t q = 0; q < 30; ++q) {
            auto expect = knn_row_oracle(p, q, k);
            for (std::size_t t = 0; t < k; ++t)
                CHECK(g.neighbors[q * k + t] == expect[t]);
        }
    }
}

TEST_CASE("knn_feature") {
    SUBCASE("features equal to coords reproduce the spatial table") {
        Points p = random_points(24, 33);
        Tensor f = points_to_tensor(p);
        NeighborGraph a = knn_spatial(p, 5);
        NeighborGraph b = knn_feature(f, 5);
        CHECK(a.neighbors == b.neighbors);
        CHECK(b.space == NeighborGraph::Space::Feature);
    }
    SUBCASE("tight clusters never cross") {
        // two exact clusters of 4 in feature space
        std::vector<double> v;
        Rng rng(3);
        for (int c = 0; c < 2; ++c)
            for (int i = 0; i < 4; ++i)
                for (int d = 0; d < 2; ++d)
                    v.push_back(10.0 * c + 0.01 * rng.uniform());
        Tensor f(Shape{8, 2}, v);
        NeighborGraph g = knn_feature(f, 4);
        for (std::size_t i = 0; i < 8; ++i)
            for (std::size_t t = 0; t < 4; ++t)
                CHECK(g.neighbors[i * 4 + t] / 4 == i / 4);
    }
    SUBCASE("one-dimensional features") {
        Tensor f(Shape{4, 1}, {0.0, 0.1, 5.0, 5.1});
        NeighborGraph g = knn_feature(f, 2);
        std::vector<std::size_t> expect{0, 1, 1, 0, 2, 3, 3, 2};
        CHECK(g.neighbors == expect);
    }
}

TEST_CASE("knn is equivariant under relabeling") {
    Points p = random_points(20, 55);
    const std::size_t k = 4;
    NeighborGraph g = knn_spatial(p, k);

    // relabel with a permutation, rebuild, map back
    std::vector<std::size_t> perm(20);
    for (std::size_t i = 0; i < 20; ++i)
        perm[i] = i;
    Rng rng(56);
    rng.shuffle(perm);
    Points q(20, 3);
    std::vector<std::size_t> inv(20);
    for (std::size_t i = 0; i < 20; ++i) {
        q.row(static_cast<Eigen::Index>(perm[i])) = p.row(static_cast<Eigen::Index>(i));
        inv[perm[i]] = i;
    }
    NeighborGraph h = knn_rooted(q, perm, k); // row i queries perm[i]
    for (std::size_t i = 0; i < 20; ++i)
        for (std::size_t t = 0; t < k; ++t)
            CHECK(inv[h.neighbors[i * k + t]] == g.neighbors[i * k + t]);
}

TEST_CASE("fps basics") {
    SUBCASE("collinear: farthest point joins first") {
        auto sel = fps(collinear(), 2, 0);
        CHECK(sel == std::vector<std::size_t>{0, 3});
    }
    SUBCASE("m = N returns everything, start first") {
        Points p = random_points(9, 1);
        auto sel = fps(p, 9, 4);
        CHECK(sel.size() == 9);
        CHECK(sel[0] == 4);
        std::set<std::size_t> uniq(sel.begin(), sel.end());
        CHECK(uniq.size() == 9);
    }
    SUBCASE("m = 1 returns the start point") {
        CHECK(fps(collinear(), 1, 2) == std::vector<std::size_t>{2});
    }
    SUBCASE("m > N errors") {
        CHECK_THROWS_AS(fps(collinear(), 5, 0), SizeError);
    }
}

TEST_CASE("fps matches the exhaustive greedy oracle") {
    Rng seeds(123);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 2 + seeds.integer(9); // up to 10 points
        Points p = random_points(n, 9000 + static_cast<std::uint64_t>(trial));
        const std::size_t m = 1 + seeds.integer(n);
        const std::size_t start = seeds.integer(n);
        CHECK(fps(p, m, start) == fps_oracle(p, m, start));
    }
}

TEST_CASE("fps spreads better than random selection on average") {
    auto min_pairwise = [](const Points& p, const std::vector<std::size_t>& sel) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t a = 0; a < sel.size(); ++a)
            for (std::size_t b = a + 1; b < sel.size(); ++b)
                best = std::min(best, (p.row(static_cast<Eigen::Index>(sel[a])) -
                                       p.row(static_cast<Eigen::Index>(sel[b])))
                                          .norm());
        return best;
    };
    double fps_total = 0.0, rand_total = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Points p = random_points(64, 500 + seed);
        fps_total += min_pairwise(p, fps(p, 8, 0));
        std::vector<std::size_t> idx(64);
        for (std::size_t i = 0; i < 64; ++i)
            idx[i] = i;
        Rng rng(700 + seed);
        rng.shuffle(idx);
        idx.resize(8);
        rand_total += min_pairwise(p, idx);
    }
    CHECK(fps_total > rand_total);
}

TEST_CASE("idw interpolation") {
    SUBCASE("coincident destination takes the source feature") {
        Points src(3, 3);
        src << 0, 0, 0, 1, 0, 0, 0, 1, 0;
        Tensor feats(Shape{3, 2}, {1, 10, 2, 20, 3, 30});
        Points dst(1, 3);
        dst << 1, 0, 0;
        Tensor out = idw_interpolate(src, feats, dst, 3, 2.0, 1e-8);
        CHECK(out.values()[0] == doctest::Approx(2.0).epsilon(1e-6));
        CHECK(out.values()[1] == doctest::Approx(20.0).epsilon(1e-6));
    }
    SUBCASE("equidistant pair averages") {
        Points src(2, 3);
        src << -1, 0, 0, 1, 0, 0;
        Tensor feats(Shape{2, 1}, {0.0, 1.0});
        Points dst(1, 3);
        dst << 0, 0, 0;
        Tensor out = idw_interpolate(src, feats, dst, 2, 2.0, 1e-8);
        CHECK(out.values()[0] == doctest::Approx(0.5).epsilon(1e-12));
    }
    SUBCASE("hand-computed weights on a line") {
        Points src(2, 3);
        src << 0, 0, 0, 3, 0, 0;
        Tensor feats(Shape{2, 1}, {0.0, 1.0});
        Points dst(1, 3);
        dst << 1, 0, 0;
        Tensor out = idw_interpolate(src, feats, dst, 2, 2.0, 0.0);
        CHECK(out.values()[0] == doctest::Approx(0.2).epsilon(1e-12));
    }
    SUBCASE("weights are a convex combination") {
        Points src = random_points(20, 2);
        Points dst = random_points(11, 3);
        IdwTable t = build_idw_table(src, dst, 3, 2.0, 1e-8);
        for (std::size_t i = 0; i < 11; ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j < 3; ++j) {
                CHECK(t.weights[i * 3 + j] >= 0.0);
                sum += t.weights[i * 3 + j];
            }
            CHECK(std::abs(sum - 1.0) < 1e-12);
        }
    }
    SUBCASE("gradients flow to source features") {
        Points src = random_points(6, 4);
        Points dst = random_points(4, 5);
        Rng rng(6);
        Tensor feats = Tensor::uniform(Shape{6, 2}, rng, -1, 1, true);
        std::vector<double> proj;
        for (int i = 0; i < 8; ++i)
            proj.push_back(rng.uniform(-1, 1));
        auto f = [&] { return weighted_sum(idw_interpolate(src, feats, dst), proj); };
        CHECK(grad_check(f, {feats}) < 1e-8);
    }
}
