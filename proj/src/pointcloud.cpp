#include "agconv/pointcloud.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "agconv/rng.hpp"

namespace fs = std::filesystem;

namespace agconv {

void PointCloud::validate() const {
    if (coords.rows() < 1)
        throw SizeError("point cloud must contain at least one point");
    if (normals.rows() != 0 && normals.rows() != coords.rows())
        throw DimError("normals row count does not match coordinates");
    for (Eigen::Index i = 0; i < normals.rows(); ++i)
        if (std::abs(normals.row(i).norm() - 1.0) > 1e-6)
            throw ContractError("normal " + std::to_string(i) + " is not unit length");
    if (!point_labels.empty()) {
        if (point_labels.size() != size())
            throw DimError("point label count does not match coordinates");
        if (part_count >= 0)
            for (std::size_t i = 0; i < point_labels.size(); ++i)
                if (point_labels[i] < 0 || point_labels[i] >= part_count)
                    throw ContractError("point label " + std::to_string(point_labels[i]) +
                                        " outside declared part count " +
                                        std::to_string(part_count));
    }
}

// ---- xyz i/o -----------------------------------------------------------------

namespace {

double parse_double(const std::string& tok, std::size_t line_no) {
    double v = 0.0;
    const char* b = tok.data();
    const char* e = b + tok.size();
    auto [p, ec] = std::from_chars(b, e, v);
    if (ec != std::errc() || p != e)
        throw ParseError("line " + std::to_string(line_no) + ": bad number '" + tok + "'");
    return v;
}

int parse_label(const std::string& tok, std::size_t line_no) {
    int v = 0;
    const char* b = tok.data();
    const char* e = b + tok.size();
    auto [p, ec] = std::from_chars(b, e, v);
    if (ec != std::errc() || p != e)
        throw ParseError("line " + std::to_string(line_no) + ": bad label '" + tok + "'");
    return v;
}

} // namespace

PointCloud load_xyz(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw IoError("cannot open '" + path + "'");
    std::vector<std::array<double, 6>> rows;
    std::vector<int> labels;
    int n_cols = -1;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string::npos)
            line.erase(hash);
        std::istringstream ls(line);
        std::vector<std::string> toks;
        for (std::string t; ls >> t;)
            toks.push_back(t);
        if (toks.empty())
            continue;
        const int c = static_cast<int>(toks.size());
        if (c != 3 && c != 4 && c != 6 && c != 7)
            throw ParseError("line " + std::to_string(line_no) + ": expected 3, 4, 6 or 7 columns, got " +
                             std::to_string(c));
        if (n_cols < 0)
            n_cols = c;
        else if (c != n_cols)
            throw ParseError("line " + std::to_string(line_no) + ": inconsistent column count " +
                             std::to_string(c) + " (file uses " + std::to_string(n_cols) + ")");
        std::array<double, 6> r{};
        const int n_float = (c == 3 || c == 4) ? 3 : 6;
        for (int j = 0; j < n_float; ++j)
            r[j] = parse_double(toks[j], line_no);
        rows.push_back(r);
        if (c == 4 || c == 7)
            labels.push_back(parse_label(toks.back(), line_no));
    }
    if (rows.empty())
        throw ParseError("'" + path + "' contains no points");

    PointCloud cloud;
    const auto n = static_cast<Eigen::Index>(rows.size());
    cloud.coords.resize(n, 3);
    if (n_cols >= 6)
        cloud.normals.resize(n, 3);
    for (Eigen::Index i = 0; i < n; ++i) {
        cloud.coords.row(i) << rows[i][0], rows[i][1], rows[i][2];
        if (n_cols >= 6)
            cloud.normals.row(i) << rows[i][3], rows[i][4], rows[i][5];
    }
    cloud.point_labels = std::move(labels);
    if (cloud.has_point_labels())
        cloud.part_count = *std::max_element(cloud.point_labels.begin(), cloud.point_labels.end()) + 1;
    return cloud;
}

void save_xyz(const PointCloud& cloud, const std::string& path) {
    std::ofstream out(path);
    if (!out)
        throw IoError("cannot write '" + path + "'");
    char buf[64];
    auto put = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        out << buf;
    };
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        for (int j = 0; j < 3; ++j) {
            if (j)
                out << ' ';
            put(cloud.coords(static_cast<Eigen::Index>(i), j));
        }
        if (cloud.has_normals())
            for (int j = 0; j < 3; ++j) {
                out << ' ';
                put(cloud.normals(static_cast<Eigen::Index>(i), j));
            }
        if (cloud.has_point_labels())
            out << ' ' << cloud.point_labels[i];
        out << '\n';
    }
    if (!out)
        throw IoError("write failed for '" + path + "'");
}

// ---- synthetic shapes -----------------------------------------------------------

SurfaceKind surface_from_string(const std::string& tag) {
    if (tag == "sphere")
        return SurfaceKind::Sphere;
    if (tag == "cube")
        return SurfaceKind::Cube;
    if (tag == "torus")
        return SurfaceKind::Torus;
    throw ConfigError("unknown shape '" + tag + "' (expected sphere, cube or torus)");
}

const char* surface_to_string(SurfaceKind kind) {
    switch (kind) {
    case SurfaceKind::Sphere: return "sphere";
    case SurfaceKind::Cube: return "cube";
    case SurfaceKind::Torus: return "torus";
    }
    return "?";
}

namespace {

constexpr double kTau = 6.283185307179586476925286766559;
constexpr double kTorusMajor = 0.7;
constexpr double kTorusMinor = 0.3;

void center_and_rescale(Points& coords) {
    Eigen::RowVector3d centroid = coords.colwise().mean();
    coords.rowwise() -= centroid;
    const double radius = coords.rowwise().norm().maxCoeff();
    if (radius > 0.0)
        coords /= radius;
}

} // namespace

PointCloud gen_synthetic(SurfaceKind kind, std::size_t n, std::uint64_t seed) {
    if (n < 8)
        throw SizeError("synthetic clouds need at least 8 points");
    Rng rng(seed);
    PointCloud cloud;
    const auto ni = static_cast<Eigen::Index>(n);
    cloud.coords.resize(ni, 3);
    cloud.normals.resize(ni, 3);
    cloud.point_labels.resize(n);

    switch (kind) {
    case SurfaceKind::Sphere: {
        cloud.part_count = 2;
        for (Eigen::Index i = 0; i < ni; ++i) {
            Eigen::RowVector3d d;
            do {
                d << rng.normal(), rng.normal(), rng.normal();
            } while (d.norm() < 1e-12);
            d.normalize();
            cloud.coords.row(i) = d;
            cloud.normals.row(i) = d;
            cloud.point_labels[static_cast<std::size_t>(i)] = d.z() >= 0.0 ? 0 : 1;
        }
        break;
    }
    case SurfaceKind::Cube: {
        cloud.part_count = 6;
        for (Eigen::Index i = 0; i < ni; ++i) {
            const int face = static_cast<int>(rng.integer(6));
            const double u = rng.uniform(-1.0, 1.0);
            const double v = rng.uniform(-1.0, 1.0);
            const int axis = face / 2;
            const double sign = face % 2 == 0 ? 1.0 : -1.0;
            Eigen::RowVector3d p = Eigen::RowVector3d::Zero();
            Eigen::RowVector3d nrm = Eigen::RowVector3d::Zero();
            p[axis] = sign;
            nrm[axis] = sign;
            p[(axis + 1) % 3] = u;
            p[(axis + 2) % 3] = v;
            cloud.coords.row(i) = p;
            cloud.normals.row(i) = nrm;
            cloud.point_labels[static_cast<std::size_t>(i)] = face;
        }
        break;
    }
    case SurfaceKind::Torus: {
        cloud.part_count = 2;
        const double R = kTorusMajor, r = kTorusMinor;
        for (Eigen::Index i = 0; i < ni; ++i) {
            double v = 0.0;
            // area-uniform sampling: accept v with probability prop. to R + r*cos(v)
            for (;;) {
                v = rng.uniform(0.0, kTau);
                if (rng.uniform(0.0, 1.0) <= (R + r * std::cos(v)) / (R + r))
                    break;
            }
            const double u = rng.uniform(0.0, kTau);
            const double cu = std::cos(u), su = std::sin(u);
            const double cv = std::cos(v), sv = std::sin(v);
            cloud.coords.row(i) << (R + r * cv) * cu, (R + r * cv) * su, r * sv;
            cloud.normals.row(i) << cv * cu, cv * su, sv;
            cloud.point_labels[static_cast<std::size_t>(i)] = cv >= 0.0 ? 0 : 1;
        }
        break;
    }
    }
    center_and_rescale(cloud.coords);
    return cloud;
}

// ---- augmentation / corruption -----------------------------------------------------

PointCloud augment(const PointCloud& cloud, const AugmentConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    PointCloud out = cloud;
    const double s = rng.uniform(cfg.scale_lo, cfg.scale_hi);
    Eigen::RowVector3d shift;
    shift << rng.uniform(-cfg.shift, cfg.shift), rng.uniform(-cfg.shift, cfg.shift),
        rng.uniform(-cfg.shift, cfg.shift);
    for (Eigen::Index i = 0; i < out.coords.rows(); ++i) {
        Eigen::RowVector3d jitter;
        for (int j = 0; j < 3; ++j)
            jitter[j] = std::clamp(rng.normal() * cfg.jitter_sigma, -cfg.jitter_clip, cfg.jitter_clip);
        out.coords.row(i) = out.coords.row(i) * s + shift + jitter;
    }
    return out;
}

PointCloud corrupt_dropout(const PointCloud& cloud, double keep_fraction, std::uint64_t seed) {
    if (keep_fraction <= 0.0 || keep_fraction > 1.0)
        throw ContractError("keep_fraction must lie in (0, 1]");
    if (keep_fraction == 1.0)
        return cloud;
    const std::size_t n = cloud.size();
    const auto m = static_cast<std::size_t>(std::ceil(keep_fraction * static_cast<double>(n)));
    if (m < 8)
        throw SizeError("dropout would leave a degenerate cloud of " + std::to_string(m) +
                        " points");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    rng.shuffle(idx);
    idx.resize(m);
    std::sort(idx.begin(), idx.end());

    PointCloud out;
    out.class_label = cloud.class_label;
    out.category_count = cloud.category_count;
    out.part_count = cloud.part_count;
    out.coords.resize(static_cast<Eigen::Index>(m), 3);
    if (cloud.has_normals())
        out.normals.resize(static_cast<Eigen::Index>(m), 3);
    if (cloud.has_point_labels())
        out.point_labels.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
        out.coords.row(static_cast<Eigen::Index>(i)) =
            cloud.coords.row(static_cast<Eigen::Index>(idx[i]));
        if (cloud.has_normals())
            out.normals.row(static_cast<Eigen::Index>(i)) =
                cloud.normals.row(static_cast<Eigen::Index>(idx[i]));
        if (cloud.has_point_labels())
            out.point_labels[i] = cloud.point_labels[idx[i]];
    }
    return out;
}

PointCloud corrupt_noise(const PointCloud& cloud, double sigma_rel, std::uint64_t seed) {
    if (sigma_rel < 0.0)
        throw ContractError("sigma_rel must be non-negative");
    if (sigma_rel == 0.0)
        return cloud;
    Eigen::RowVector3d centroid = cloud.coords.colwise().mean();
    const double radius = (cloud.coords.rowwise() - centroid).rowwise().norm().maxCoeff();
    const double sigma = sigma_rel * radius;
    Rng rng(seed);
    PointCloud out = cloud;
    for (Eigen::Index i = 0; i < out.coords.rows(); ++i)
        for (int j = 0; j < 3; ++j)
            out.coords(i, j) += rng.normal() * sigma;
    return out;
}

// ---- datasets --------------------------------------------------------------------

std::vector<std::size_t> Dataset::indices_of_split(int which) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < clouds.size(); ++i)
        if (split[i] == which)
            out.push_back(i);
    return out;
}

Dataset make_synthetic_dataset(const std::vector<SurfaceKind>& shapes, std::size_t n_train,
                               std::size_t n_test, std::size_t points_per_cloud,
                               std::uint64_t seed) {
    if (shapes.empty())
        throw ConfigError("dataset needs at least one shape");
    Dataset ds;
    ds.seed = seed;
    const std::size_t total = n_train + n_test;
    for (std::size_t i = 0; i < total; ++i) {
        const SurfaceKind kind = shapes[i % shapes.size()];
        PointCloud c = gen_synthetic(kind, points_per_cloud, derive_seed(seed, i));
        c.class_label = static_cast<int>(i % shapes.size());
        c.category_count = static_cast<int>(shapes.size());
        ds.clouds.push_back(std::move(c));
        ds.split.push_back(i < n_train ? 0 : 1);
    }
    return ds;
}

void save_dataset(const Dataset& ds, const std::string& dir) {
    fs::create_directories(dir);
    std::ofstream manifest(fs::path(dir) / "manifest.txt");
    if (!manifest)
        throw IoError("cannot write manifest in '" + dir + "'");
    char name[32];
    for (std::size_t i = 0; i < ds.clouds.size(); ++i) {
        std::snprintf(name, sizeof name, "cloud_%05zu.xyz", i);
        save_xyz(ds.clouds[i], (fs::path(dir) / name).string());
        manifest << name << ' ' << (ds.split[i] == 0 ? "train" : "test") << ' '
                 << ds.clouds[i].class_label << '\n';
    }
}

Dataset load_dataset(const std::string& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in)
        throw IoError("cannot open manifest '" + manifest_path + "'");
    const fs::path base = fs::path(manifest_path).parent_path();
    Dataset ds;
    std::string line;
    std::size_t line_no = 0;
    int max_class = -1;
    std::map<int, int> parts_by_category;
    while (std::getline(in, line)) {
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string::npos)
            line.erase(hash);
        std::istringstream ls(line);
        std::string path, split;
        int label = -1;
        if (!(ls >> path))
            continue;
        if (!(ls >> split >> label))
            throw ParseError("manifest line " + std::to_string(line_no) +
                             ": expected 'path split class_label'");
        if (split != "train" && split != "test")
            throw ParseError("manifest line " + std::to_string(line_no) + ": unknown split '" +
                             split + "'");
        PointCloud c = load_xyz((base / path).string());
        c.class_label = label;
        max_class = std::max(max_class, label);
        auto& parts = parts_by_category[label];
        parts = std::max(parts, c.part_count);
        ds.clouds.push_back(std::move(c));
        ds.split.push_back(split == "train" ? 0 : 1);
    }
    if (ds.clouds.empty())
        throw ConfigError("manifest '" + manifest_path + "' lists no clouds");
    for (PointCloud& c : ds.clouds) {
        c.category_count = max_class + 1;
        c.part_count = parts_by_category[c.class_label]; // category-wide part space
    }
    return ds;
}

} // namespace agconv
