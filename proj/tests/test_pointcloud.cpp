#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "agconv/pointcloud.hpp"
#include "agconv/rng.hpp"

using namespace agconv;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const char* name) {
    return fs::temp_directory_path() / name;
}

PointCloud random_cloud(std::size_t n, std::uint64_t seed, bool normals, bool labels) {
    Rng rng(seed);
    PointCloud c;
    c.coords.resize(static_cast<Eigen::Index>(n), 3);
    for (Eigen::Index i = 0; i < c.coords.rows(); ++i)
        c.coords.row(i) << rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2);
    if (normals) {
        c.normals.resize(static_cast<Eigen::Index>(n), 3);
        for (Eigen::Index i = 0; i < c.normals.rows(); ++i) {
            Eigen::RowVector3d d(rng.normal(), rng.normal(), rng.normal());
            c.normals.row(i) = d.normalized();
        }
    }
    if (labels) {
        c.point_labels.resize(n);
        for (auto& l : c.point_labels)
            l = static_cast<int>(rng.integer(4));
        c.part_count = 4;
    }
    return c;
}

} // namespace

TEST_CASE("xyz parsing") {
    SUBCASE("single origin point") {
        auto p = temp_file("agconv_origin.xyz");
        std::ofstream(p) << "# comment\n0 0 0\n";
        PointCloud c = load_xyz(p.string());
        CHECK(c.size() == 1);
        CHECK(c.coords.row(0).norm() == 0.0);
        CHECK(!c.has_normals());
        CHECK(!c.has_point_labels());
    }
    SUBCASE("seven columns map to coords, normal, label") {
        auto p = temp_file("agconv_seven.xyz");
        std::ofstream(p) << "1 2 3 0 0 1 4\n";
        PointCloud c = load_xyz(p.string());
        CHECK(c.coords(0, 0) == 1.0);
        CHECK(c.coords(0, 2) == 3.0);
        CHECK(c.normals(0, 2) == 1.0);
        CHECK(c.point_labels[0] == 4);
    }
    SUBCASE("malformed line reports its number") {
        auto p = temp_file("agconv_bad.xyz");
        std::ofstream(p) << "0 0 0\n1 2 bogus\n";
        CHECK_THROWS_WITH_AS(load_xyz(p.string()), doctest::Contains("line 2"), ParseError);
    }
    SUBCASE("inconsistent column count") {
        auto p = temp_file("agconv_cols.xyz");
        std::ofstream(p) << "0 0 0\n1 2 3 4 5 6\n";
        CHECK_THROWS_AS(load_xyz(p.string()), ParseError);
    }
    SUBCASE("wrong column arity") {
        auto p = temp_file("agconv_arity.xyz");
        std::ofstream(p) << "0 0\n";
        CHECK_THROWS_AS(load_xyz(p.string()), ParseError);
    }
}

TEST_CASE("xyz round trip preserves values") {
    PointCloud c = random_cloud(100, 99, true, true);
    auto p = temp_file("agconv_roundtrip.xyz");
    save_xyz(c, p.string());
    PointCloud r = load_xyz(p.string());
    REQUIRE(r.size() == c.size());
    CHECK((r.coords - c.coords).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((r.normals - c.normals).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(r.point_labels == c.point_labels);
}

TEST_CASE("synthetic shape generation") {
    SUBCASE("normalization contract") {
        for (auto kind : {SurfaceKind::Sphere, SurfaceKind::Cube, SurfaceKind::Torus}) {
            PointCloud c = gen_synthetic(kind, 500, 7);
            double max_norm = c.coords.rowwise().norm().maxCoeff();
            CHECK(max_norm <= 1.0 + 1e-9);
            CHECK(max_norm >= 1.0 - 1e-9);
            c.validate();
        }
    }
    SUBCASE("cube faces are uniformly sampled") {
        PointCloud c = gen_synthetic(SurfaceKind::Cube, 6000, 13);
        std::array<int, 6> counts{};
        for (int l : c.point_labels)
            ++counts[static_cast<std::size_t>(l)];
        for (int n : counts) {
            double frac = n / 6000.0;
            CHECK(frac >= 0.12);
            CHECK(frac <= 0.21);
        }
    }
    SUBCASE("deterministic in (shape, n, seed)") {
        PointCloud a = gen_synthetic(SurfaceKind::Torus, 128, 21);
        PointCloud b = gen_synthetic(SurfaceKind::Torus, 128, 21);
        CHECK(a.coords == b.coords);
        CHECK(a.normals == b.normals);
        CHECK(a.point_labels == b.point_labels);
    }
    SUBCASE("torus has both parts") {
        PointCloud c = gen_synthetic(SurfaceKind::Torus, 256, 3);
        int outer = 0;
        for (int l : c.point_labels)
            outer += l == 0;
        CHECK(outer > 0);
        CHECK(outer < 256);
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(gen_synthetic(SurfaceKind::Sphere, 4, 1), SizeError);
        CHECK_THROWS_AS(surface_from_string("pyramid"), ConfigError);
    }
}

TEST_CASE("augmentation") {
    PointCloud c = gen_synthetic(SurfaceKind::Sphere, 64, 5);
    SUBCASE("identity configuration") {
        AugmentConfig cfg;
        cfg.scale_lo = cfg.scale_hi = 1.0;
        cfg.shift = 0.0;
        cfg.jitter_sigma = 0.0;
        PointCloud a = augment(c, cfg, 11);
        CHECK(a.coords == c.coords);
        CHECK(a.point_labels == c.point_labels);
    }
    SUBCASE("scale-only preserves distance ratios") {
        AugmentConfig cfg;
        cfg.shift = 0.0;
        cfg.jitter_sigma = 0.0;
        PointCloud a = augment(c, cfg, 17);
        double r0 = (c.coords.row(1) - c.coords.row(0)).norm() /
                    (c.coords.row(2) - c.coords.row(0)).norm();
        double r1 = (a.coords.row(1) - a.coords.row(0)).norm() /
                    (a.coords.row(2) - a.coords.row(0)).norm();
        CHECK(r0 == doctest::Approx(r1).epsilon(1e-12));
    }
    SUBCASE("seeded determinism") {
        AugmentConfig cfg;
        PointCloud a = augment(c, cfg, 23);
        PointCloud b = augment(c, cfg, 23);
        CHECK(a.coords == b.coords);
    }
}

TEST_CASE("dropout corruption") {
    PointCloud c = gen_synthetic(SurfaceKind::Cube, 1024, 31);
    SUBCASE("keep everything") {
        PointCloud a = corrupt_dropout(c, 1.0, 1);
        CHECK(a.coords == c.coords);
    }
    SUBCASE("half of 1024 is 512") {
        PointCloud a = corrupt_dropout(c, 0.5, 2);
        CHECK(a.size() == 512);
    }
    SUBCASE("survivors form a labeled subset") {
        PointCloud a = corrupt_dropout(c, 0.25, 3);
        // every surviving point matches an original row with the same label
        for (std::size_t i = 0; i < a.size(); ++i) {
            bool found = false;
            for (std::size_t j = 0; j < c.size(); ++j)
                if (a.coords.row(static_cast<Eigen::Index>(i)) ==
                    c.coords.row(static_cast<Eigen::Index>(j))) {
                    found = a.point_labels[i] == c.point_labels[j];
                    break;
                }
            if (!found) {
                CHECK(found);
                break;
            }
        }
        CHECK(a.size() == 256);
    }
    SUBCASE("degenerate result is an error") {
        PointCloud tiny = gen_synthetic(SurfaceKind::Cube, 16, 4);
        CHECK_THROWS_AS(corrupt_dropout(tiny, 0.1, 5), SizeError);
        CHECK_THROWS_AS(corrupt_dropout(tiny, 0.0, 5), ContractError);
    }
}

TEST_CASE("noise corruption") {
    PointCloud c = gen_synthetic(SurfaceKind::Sphere, 64, 41);
    SUBCASE("zero sigma is the identity") {
        PointCloud a = corrupt_noise(c, 0.0, 1);
        CHECK(a.coords == c.coords);
    }
    SUBCASE("labels unchanged") {
        PointCloud a = corrupt_noise(c, 0.05, 2);
        CHECK(a.point_labels == c.point_labels);
    }
    SUBCASE("sample deviation matches requested sigma") {
        PointCloud big = gen_synthetic(SurfaceKind::Sphere, 100000, 43);
        const double sigma_rel = 0.04;
        Eigen::RowVector3d centroid = big.coords.colwise().mean();
        const double radius = (big.coords.rowwise() - centroid).rowwise().norm().maxCoeff();
        PointCloud noisy = corrupt_noise(big, sigma_rel, 3);
        Points diff = noisy.coords - big.coords;
        for (int j = 0; j < 3; ++j) {
            double mean = diff.col(j).mean();
            double var = (diff.col(j).array() - mean).square().sum() / (diff.rows() - 1.0);
            double sd = std::sqrt(var);
            CHECK(sd == doctest::Approx(sigma_rel * radius).epsilon(0.05));
        }
    }
}

TEST_CASE("dataset generation and manifest round trip") {
    Dataset ds = make_synthetic_dataset({SurfaceKind::Sphere, SurfaceKind::Cube, SurfaceKind::Torus},
                                        9, 3, 64, 77);
    CHECK(ds.clouds.size() == 12);
    CHECK(ds.indices_of_split(0).size() == 9);
    CHECK(ds.indices_of_split(1).size() == 3);
    CHECK(ds.clouds[0].class_label == 0);
    CHECK(ds.clouds[4].class_label == 1);
    CHECK(ds.clouds[0].part_count == 2); // sphere parts
    CHECK(ds.clouds[1].part_count == 6); // cube faces

    Dataset again = make_synthetic_dataset(
        {SurfaceKind::Sphere, SurfaceKind::Cube, SurfaceKind::Torus}, 9, 3, 64, 77);
    CHECK(ds.clouds[5].coords == again.clouds[5].coords);

    auto dir = fs::temp_directory_path() / "agconv_dataset_test";
    fs::remove_all(dir);
    save_dataset(ds, dir.string());
    Dataset loaded = load_dataset((dir / "manifest.txt").string());
    REQUIRE(loaded.clouds.size() == 12);
    CHECK(loaded.split == ds.split);
    for (std::size_t i = 0; i < 12; ++i) {
        CHECK(loaded.clouds[i].class_label == ds.clouds[i].class_label);
        CHECK((loaded.clouds[i].coords - ds.clouds[i].coords).cwiseAbs().maxCoeff() < 1e-9);
        CHECK(loaded.clouds[i].point_labels == ds.clouds[i].point_labels);
    }
    CHECK(loaded.clouds[0].category_count == 3);
}
