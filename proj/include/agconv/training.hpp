#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "agconv/models.hpp"
#include "agconv/pointcloud.hpp"

namespace agconv {

struct TrainConfig {
    std::string model = "cls"; // cls | seg
    double lr_max = 0.1;
    double lr_min = 0.001;
    double momentum = 0.9;
    std::size_t epochs = 10;
    std::size_t batch_size = 8;
    std::size_t k = 20;
    std::uint64_t seed = 1;

    // dataset: load from data_dir when set, otherwise generate synthetically
    std::string data_dir;
    std::vector<SurfaceKind> shapes{SurfaceKind::Sphere, SurfaceKind::Cube, SurfaceKind::Torus};
    std::size_t n_train = 300;
    std::size_t n_test = 60;
    std::size_t n_points = 256;
    bool augment = true;

    // model knobs
    std::size_t kernel_hidden = 16;
    std::size_t n_adaptive = 2; // cls default; seg uses min(n_adaptive, 4)
    bool normalize = true;
    bool with_stn = false;
    ConvInput mode = ConvInput::Spatial;

    // robustness sweep levels
    std::vector<double> keep_levels{1.0, 0.75, 0.5, 0.25};
    std::vector<double> sigma_levels{0.0, 0.02, 0.05};

    int threads = 0; // 0 = hardware

    void validate() const;
};

struct EpochRow {
    std::size_t epoch = 0;
    std::string split;
    double loss = 0.0;
    double oa = 0.0;
    double macc = 0.0;
    double miou = -1.0;  // < 0 means not applicable (classification)
    double mciou = -1.0;
};

struct MetricsReport {
    double oa = 0.0;
    double macc = 0.0;
    double miou = -1.0;
    double mciou = -1.0;
    std::vector<double> per_class; // accuracy per class (cls) or IoU per part (seg)
    std::vector<double> loss_curve; // mean train loss per epoch
    std::vector<EpochRow> rows;     // one train + one test row per epoch
    double best_test_oa = 0.0;
};

// Per-part intersection over union. Parts absent from both prediction and
// truth score 1. shape_miou averages over the declared parts.
struct IouResult {
    std::vector<double> per_part;
    double shape_miou = 0.0;
};
IouResult compute_iou(const std::vector<int>& pred, const std::vector<int>& truth,
                      const std::vector<int>& parts);

// Either network behind one surface (checkpoints carry the kind).
class Model {
public:
    static Model make_cls(ClsConfig cfg, std::uint64_t seed);
    static Model make_seg(SegConfig cfg, std::uint64_t seed);

    const std::string& kind() const { return kind_; }
    std::vector<Parameter>& parameters();
    const std::vector<Parameter>& parameters() const;
    Tensor forward(const PointCloud& cloud) const;
    std::vector<ParamRow> param_table() const;
    std::string config_text() const;

    const ClassificationNet* cls() const { return cls_.get(); }
    const SegmentationNet* seg() const { return seg_.get(); }

private:
    std::string kind_;
    std::shared_ptr<ClassificationNet> cls_;
    std::shared_ptr<SegmentationNet> seg_;
};

// Derives the model for a config + dataset (class/part counts, input width).
Model build_model(const TrainConfig& cfg, const Dataset& ds);
Dataset resolve_dataset(const TrainConfig& cfg);

struct EvalResult {
    double loss = 0.0;
    double oa = 0.0;
    double macc = 0.0;
    double miou = -1.0;
    double mciou = -1.0;
    std::vector<double> per_class;
};
EvalResult evaluate(const Model& model, const Dataset& ds, int split);

// Shuffled minibatches, per-step cosine schedule, SGD with momentum,
// test-split evaluation after every epoch, checkpoint written at the end.
// Identical config+seed reproduces the loss curve bit for bit.
MetricsReport train(const TrainConfig& cfg, const std::string& checkpoint_path,
                    const std::function<void(const EpochRow&)>& on_epoch = {});

// ---- checkpoints -------------------------------------------------------------

// Binary layout: magic "AGCK1"; u64 length + architecture text; then per
// parameter: u64 name length, name, u64 rank, u64 extents, f64 values.
// All integers and floats little-endian.
void checkpoint_save(const Model& model, const std::string& path);
Model checkpoint_load(const std::string& path);
// Loads weights into an existing model; shapes and names must match.
void checkpoint_load_into(Model& model, const std::string& path);

// ---- robustness ------------------------------------------------------------------

struct RobustnessRow {
    double keep = 1.0;
    double sigma = 0.0;
    double oa = 0.0;
    double macc = 0.0;
};

// Cartesian sweep over keep x sigma on the test split; the (1.0, 0) cell is
// the plain evaluation, reproduced exactly.
std::vector<RobustnessRow> robustness_sweep(const Model& model, const Dataset& ds,
                                            const TrainConfig& cfg);

} // namespace agconv
