#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "agconv/common.hpp"

namespace agconv {

using Points = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

struct PointCloud {
    Points coords;                  // N x 3
    Points normals;                 // N x 3, or 0 rows when absent
    std::vector<int> point_labels;  // empty or length N
    int class_label = -1;           // cloud-level category, -1 when absent
    int category_count = -1;        // total categories (segmentation one-hot)
    int part_count = -1;            // declared per-point label space

    std::size_t size() const { return static_cast<std::size_t>(coords.rows()); }
    bool has_normals() const { return normals.rows() == coords.rows() && coords.rows() > 0; }
    bool has_point_labels() const { return !point_labels.empty(); }

    // N >= 1, unit normals within 1e-6, labels below the declared part count.
    void validate() const;
};

// ASCII xyz: one point per line, `x y z [nx ny nz] [label]`, '#' comments.
PointCloud load_xyz(const std::string& path);
void save_xyz(const PointCloud& cloud, const std::string& path);

enum class SurfaceKind { Sphere, Cube, Torus };

SurfaceKind surface_from_string(const std::string& tag);
const char* surface_to_string(SurfaceKind kind);

// n points sampled uniformly on the surface, centered and scaled so the
// farthest point sits on the unit sphere. Analytic normals and part labels
// attached (sphere: hemispheres, cube: faces, torus: inner/outer half).
PointCloud gen_synthetic(SurfaceKind kind, std::size_t n, std::uint64_t seed);

struct AugmentConfig {
    double scale_lo = 0.8;
    double scale_hi = 1.25;
    double shift = 0.1;         // per-axis translation in [-shift, shift]
    double jitter_sigma = 0.01; // per-point Gaussian, clipped
    double jitter_clip = 0.05;
};

PointCloud augment(const PointCloud& cloud, const AugmentConfig& cfg, std::uint64_t seed);

// Keeps ceil(keep_fraction * N) uniformly chosen points, labels intact.
PointCloud corrupt_dropout(const PointCloud& cloud, double keep_fraction, std::uint64_t seed);

// Isotropic Gaussian noise, sigma = sigma_rel * max distance from the centroid.
PointCloud corrupt_noise(const PointCloud& cloud, double sigma_rel, std::uint64_t seed);

struct Dataset {
    std::vector<PointCloud> clouds;
    std::vector<int> split; // 0 = train, 1 = test, aligned with clouds
    std::uint64_t seed = 0;

    std::vector<std::size_t> indices_of_split(int which) const;
};

// Clouds cycle through the given shapes; the first n_train are the train
// split. Cloud contents depend only on (seed, index).
Dataset make_synthetic_dataset(const std::vector<SurfaceKind>& shapes, std::size_t n_train,
                               std::size_t n_test, std::size_t points_per_cloud,
                               std::uint64_t seed);

// Writes cloud files plus `manifest.txt` with `path split class_label` lines.
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& manifest_path);

} // namespace agconv
