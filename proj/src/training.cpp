#include "agconv/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "agconv/parallel.hpp"
#include "agconv/rng.hpp"

namespace agconv {

void TrainConfig::validate() const {
    if (model != "cls" && model != "seg")
        throw ConfigError("model must be 'cls' or 'seg', got '" + model + "'");
    if (lr_min > lr_max)
        throw ConfigError("lr_min exceeds lr_max");
    if (k < 1)
        throw ConfigError("k must be >= 1");
    if (batch_size < 1)
        throw ConfigError("batch_size must be >= 1");
}

// ---- metrics ---------------------------------------------------------------

IouResult compute_iou(const std::vector<int>& pred, const std::vector<int>& truth,
                      const std::vector<int>& parts) {
    if (pred.size() != truth.size())
        throw DimError("compute_iou: prediction and truth lengths differ");
    IouResult res;
    for (int p : parts) {
        std::size_t inter = 0, uni = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const bool a = pred[i] == p, b = truth[i] == p;
            inter += a && b;
            uni += a || b;
        }
        res.per_part.push_back(uni == 0 ? 1.0 : static_cast<double>(inter) /
                                                    static_cast<double>(uni));
    }
    res.shape_miou = res.per_part.empty()
                         ? 0.0
                         : std::accumulate(res.per_part.begin(), res.per_part.end(), 0.0) /
                               static_cast<double>(res.per_part.size());
    return res;
}

// ---- model wrapper --------------------------------------------------------------

Model Model::make_cls(ClsConfig cfg, std::uint64_t seed) {
    Model m;
    m.kind_ = "cls";
    m.cls_ = std::make_shared<ClassificationNet>(std::move(cfg), seed);
    return m;
}

Model Model::make_seg(SegConfig cfg, std::uint64_t seed) {
    Model m;
    m.kind_ = "seg";
    m.seg_ = std::make_shared<SegmentationNet>(std::move(cfg), seed);
    return m;
}

std::vector<Parameter>& Model::parameters() {
    return kind_ == "cls" ? cls_->parameters() : seg_->parameters();
}

const std::vector<Parameter>& Model::parameters() const {
    return kind_ == "cls" ? cls_->parameters() : seg_->parameters();
}

Tensor Model::forward(const PointCloud& cloud) const {
    return kind_ == "cls" ? cls_->forward(cloud) : seg_->forward(cloud);
}

std::vector<ParamRow> Model::param_table() const {
    return kind_ == "cls" ? cls_->param_table() : seg_->param_table();
}

namespace {

std::string join_sizes(const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i)
        out += (i ? "," : "") + std::to_string(v[i]);
    return out;
}

std::vector<std::size_t> split_sizes(const std::string& s) {
    std::vector<std::size_t> out;
    std::istringstream is(s);
    std::string tok;
    while (std::getline(is, tok, ','))
        out.push_back(static_cast<std::size_t>(std::stoull(tok)));
    return out;
}

} // namespace

std::string Model::config_text() const {
    std::ostringstream os;
    if (kind_ == "cls") {
        const ClsConfig& c = cls_->config();
        os << "kind = cls\n";
        os << "num_classes = " << c.num_classes << "\n";
        os << "k = " << c.k << "\n";
        os << "kernel_hidden = " << c.kernel_hidden << "\n";
        os << "conv_widths = " << join_sizes(c.conv_widths) << "\n";
        os << "n_adaptive = " << c.n_adaptive << "\n";
        os << "agg_width = " << c.agg_width << "\n";
        os << "head_widths = " << join_sizes(c.head_widths) << "\n";
        os << "normalize = " << (c.normalize ? 1 : 0) << "\n";
        os << "slope = " << c.slope << "\n";
        os << "mode = " << conv_input_to_string(c.mode) << "\n";
    } else {
        const SegConfig& c = seg_->config();
        os << "kind = seg\n";
        os << "num_parts = " << c.num_parts << "\n";
        os << "num_categories = " << c.num_categories << "\n";
        os << "input_dim = " << c.input_dim << "\n";
        os << "k = " << c.k << "\n";
        os << "kernel_hidden = " << c.kernel_hidden << "\n";
        os << "enc_widths = " << join_sizes(c.enc_widths) << "\n";
        os << "pool_rate = " << c.pool_rate << "\n";
        os << "head_widths = " << join_sizes(c.head_widths) << "\n";
        os << "n_adaptive = " << c.n_adaptive << "\n";
        os << "with_stn = " << (c.with_stn ? 1 : 0) << "\n";
        os << "normalize = " << (c.normalize ? 1 : 0) << "\n";
        os << "slope = " << c.slope << "\n";
        os << "mode = " << conv_input_to_string(c.mode) << "\n";
    }
    return os.str();
}

namespace {

std::map<std::string, std::string> parse_kv(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (auto hash = line.find('#'); hash != std::string::npos)
            line.erase(hash);
        auto eq = line.find('=');
        if (eq == std::string::npos)
            continue;
        auto trim = [](std::string s) {
            const char* ws = " \t\r";
            s.erase(0, s.find_first_not_of(ws));
            if (auto last = s.find_last_not_of(ws); last != std::string::npos)
                s.erase(last + 1);
            else
                s.clear();
            return s;
        };
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return kv;
}

Model model_from_config_text(const std::string& text) {
    auto kv = parse_kv(text);
    const std::string kind = kv.at("kind");
    if (kind == "cls") {
        ClsConfig c;
        c.num_classes = std::stoull(kv.at("num_classes"));
        c.k = std::stoull(kv.at("k"));
        c.kernel_hidden = std::stoull(kv.at("kernel_hidden"));
        c.conv_widths = split_sizes(kv.at("conv_widths"));
        c.n_adaptive = std::stoull(kv.at("n_adaptive"));
        c.agg_width = std::stoull(kv.at("agg_width"));
        c.head_widths = split_sizes(kv.at("head_widths"));
        c.normalize = kv.at("normalize") == "1";
        c.slope = std::stod(kv.at("slope"));
        c.mode = conv_input_from_string(kv.at("mode"));
        return Model::make_cls(std::move(c), 0);
    }
    if (kind == "seg") {
        SegConfig c;
        c.num_parts = std::stoull(kv.at("num_parts"));
        c.num_categories = std::stoull(kv.at("num_categories"));
        c.input_dim = std::stoull(kv.at("input_dim"));
        c.k = std::stoull(kv.at("k"));
        c.kernel_hidden = std::stoull(kv.at("kernel_hidden"));
        c.enc_widths = split_sizes(kv.at("enc_widths"));
        c.pool_rate = std::stoull(kv.at("pool_rate"));
        c.head_widths = split_sizes(kv.at("head_widths"));
        c.n_adaptive = std::stoull(kv.at("n_adaptive"));
        c.with_stn = kv.at("with_stn") == "1";
        c.normalize = kv.at("normalize") == "1";
        c.slope = std::stod(kv.at("slope"));
        c.mode = conv_input_from_string(kv.at("mode"));
        return Model::make_seg(std::move(c), 0);
    }
    throw IoError("checkpoint declares unknown model kind '" + kind + "'");
}

} // namespace

// ---- dataset / model resolution ----------------------------------------------------

Dataset resolve_dataset(const TrainConfig& cfg) {
    if (!cfg.data_dir.empty())
        return load_dataset(cfg.data_dir + "/manifest.txt");
    return make_synthetic_dataset(cfg.shapes, cfg.n_train, cfg.n_test, cfg.n_points, cfg.seed);
}

Model build_model(const TrainConfig& cfg, const Dataset& ds) {
    if (ds.clouds.empty())
        throw ConfigError("dataset is empty");
    const std::uint64_t net_seed = derive_seed(cfg.seed, 0xA0);
    if (cfg.model == "cls") {
        ClsConfig c;
        c.num_classes = static_cast<std::size_t>(ds.clouds.front().category_count);
        c.k = cfg.k;
        c.kernel_hidden = cfg.kernel_hidden;
        c.n_adaptive = cfg.n_adaptive;
        c.normalize = cfg.normalize;
        c.mode = cfg.mode;
        return Model::make_cls(std::move(c), net_seed);
    }
    SegConfig c;
    int max_parts = 1;
    bool normals = true;
    for (const PointCloud& pc : ds.clouds) {
        max_parts = std::max(max_parts, pc.part_count);
        normals = normals && pc.has_normals();
    }
    c.num_parts = static_cast<std::size_t>(max_parts);
    c.num_categories = static_cast<std::size_t>(ds.clouds.front().category_count);
    c.input_dim = normals ? 6 : 3;
    c.k = cfg.k;
    c.kernel_hidden = cfg.kernel_hidden;
    c.n_adaptive = std::min<std::size_t>(cfg.n_adaptive, 4);
    c.with_stn = cfg.with_stn;
    c.normalize = cfg.normalize;
    c.mode = cfg.mode;
    return Model::make_seg(std::move(c), net_seed);
}

// ---- evaluation ------------------------------------------------------------------

namespace {

std::size_t argmax_row(const double* row, std::size_t c) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
        if (row[j] > row[best])
            best = j;
    return best;
}

struct SegAccum {
    double loss_sum = 0.0;
    std::size_t correct = 0, total = 0;
    std::map<int, std::pair<std::size_t, std::size_t>> per_part_hits; // part -> (hit, count)
    std::vector<double> shape_ious;
    std::map<int, std::vector<double>> category_ious;
};

} // namespace

EvalResult evaluate(const Model& model, const Dataset& ds, int split) {
    EvalResult res;
    if (model.kind() == "cls") {
        std::map<int, std::pair<std::size_t, std::size_t>> per_class; // class -> (hit, n)
        double loss_sum = 0.0;
        std::size_t correct = 0, total = 0;
        for (std::size_t i : ds.indices_of_split(split)) {
            const PointCloud& cloud = ds.clouds[i];
            Tensor logits = model.forward(cloud);
            loss_sum +=
                cross_entropy(logits, static_cast<std::size_t>(cloud.class_label)).value();
            const std::size_t pred = argmax_row(logits.values().data(), logits.numel());
            auto& bucket = per_class[cloud.class_label];
            ++bucket.second;
            ++total;
            if (pred == static_cast<std::size_t>(cloud.class_label)) {
                ++bucket.first;
                ++correct;
            }
        }
        if (total == 0)
            throw ConfigError("evaluation split is empty");
        res.loss = loss_sum / static_cast<double>(total);
        res.oa = static_cast<double>(correct) / static_cast<double>(total);
        double acc_sum = 0.0;
        for (auto& [cls, hits] : per_class) {
            const double acc = static_cast<double>(hits.first) / static_cast<double>(hits.second);
            res.per_class.push_back(acc);
            acc_sum += acc;
        }
        res.macc = acc_sum / static_cast<double>(per_class.size());
        return res;
    }

    SegAccum acc;
    for (std::size_t i : ds.indices_of_split(split)) {
        const PointCloud& cloud = ds.clouds[i];
        if (!cloud.has_point_labels())
            throw ConfigError("segmentation needs per-point labels");
        Tensor logits = model.forward(cloud);
        acc.loss_sum += cross_entropy_rows(logits, cloud.point_labels).value();
        const std::size_t parts = logits.cols();
        std::vector<int> pred(cloud.size());
        for (std::size_t p = 0; p < cloud.size(); ++p) {
            pred[p] = static_cast<int>(argmax_row(logits.values().data() + p * parts, parts));
            auto& bucket = acc.per_part_hits[cloud.point_labels[p]];
            ++bucket.second;
            ++acc.total;
            if (pred[p] == cloud.point_labels[p]) {
                ++bucket.first;
                ++acc.correct;
            }
        }
        std::vector<int> declared(static_cast<std::size_t>(cloud.part_count));
        std::iota(declared.begin(), declared.end(), 0);
        IouResult iou = compute_iou(pred, cloud.point_labels, declared);
        acc.shape_ious.push_back(iou.shape_miou);
        acc.category_ious[cloud.class_label].push_back(iou.shape_miou);
        if (res.per_class.empty())
            res.per_class.assign(iou.per_part.size(), 0.0);
        for (std::size_t p = 0; p < iou.per_part.size() && p < res.per_class.size(); ++p)
            res.per_class[p] += iou.per_part[p];
    }
    if (acc.total == 0)
        throw ConfigError("evaluation split is empty");
    const double n_shapes = static_cast<double>(acc.shape_ious.size());
    res.loss = acc.loss_sum / n_shapes;
    res.oa = static_cast<double>(acc.correct) / static_cast<double>(acc.total);
    double macc_sum = 0.0;
    for (auto& [part, hits] : acc.per_part_hits)
        macc_sum += static_cast<double>(hits.first) / static_cast<double>(hits.second);
    res.macc = macc_sum / static_cast<double>(acc.per_part_hits.size());
    res.miou = std::accumulate(acc.shape_ious.begin(), acc.shape_ious.end(), 0.0) / n_shapes;
    double cat_sum = 0.0;
    for (auto& [cat, v] : acc.category_ious)
        cat_sum += std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    res.mciou = cat_sum / static_cast<double>(acc.category_ious.size());
    for (double& v : res.per_class)
        v /= n_shapes;
    return res;
}

// ---- training loop ------------------------------------------------------------------

MetricsReport train(const TrainConfig& cfg, const std::string& checkpoint_path,
                    const std::function<void(const EpochRow&)>& on_epoch) {
    cfg.validate();
    ThreadPool::instance().set_threads(cfg.threads);
    Dataset ds = resolve_dataset(cfg);
    std::vector<std::size_t> train_idx = ds.indices_of_split(0);
    if (train_idx.empty())
        throw ConfigError("training split is empty");
    Model model = build_model(cfg, ds);

    const std::size_t steps_per_epoch = (train_idx.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = std::max<std::size_t>(1, cfg.epochs * steps_per_epoch);

    MetricsReport report;
    std::size_t step = 0;
    std::uint64_t aug_counter = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng order_rng(derive_seed(cfg.seed, 0xE0, epoch));
        std::vector<std::size_t> order = train_idx;
        order_rng.shuffle(order);

        double epoch_loss = 0.0;
        std::size_t epoch_correct = 0, epoch_points = 0, epoch_samples = 0;
        std::map<int, std::pair<std::size_t, std::size_t>> epoch_hits;
        for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
            const std::size_t b_end = std::min(order.size(), b + cfg.batch_size);
            const double inv_batch = 1.0 / static_cast<double>(b_end - b);
            double batch_loss = 0.0;
            for (std::size_t s = b; s < b_end; ++s) {
                PointCloud cloud = ds.clouds[order[s]];
                if (cfg.augment)
                    cloud = augment(cloud, AugmentConfig{},
                                    derive_seed(cfg.seed, 0xAE, aug_counter));
                ++aug_counter;
                Tape tape;
                TapeScope scope(tape);
                Tensor logits = model.forward(cloud);
                Tensor loss;
                if (model.kind() == "cls") {
                    loss = cross_entropy(logits,
                                         static_cast<std::size_t>(cloud.class_label));
                    const std::size_t pred =
                        argmax_row(logits.values().data(), logits.numel());
                    const bool hit = pred == static_cast<std::size_t>(cloud.class_label);
                    auto& bucket = epoch_hits[cloud.class_label];
                    bucket.first += hit;
                    ++bucket.second;
                    epoch_correct += hit;
                    ++epoch_points;
                } else {
                    loss = cross_entropy_rows(logits, cloud.point_labels);
                    const std::size_t parts = logits.cols();
                    for (std::size_t p = 0; p < cloud.size(); ++p) {
                        const bool hit =
                            static_cast<int>(argmax_row(logits.values().data() + p * parts,
                                                        parts)) == cloud.point_labels[p];
                        auto& bucket = epoch_hits[cloud.point_labels[p]];
                        bucket.first += hit;
                        ++bucket.second;
                        epoch_correct += hit;
                        ++epoch_points;
                    }
                }
                const double loss_value = loss.value();
                if (!std::isfinite(loss_value))
                    throw NumericError("non-finite loss at step " + std::to_string(step) +
                                       " (epoch " + std::to_string(epoch) + ")");
                batch_loss += loss_value;
                backward(tape, scale(loss, inv_batch));
                ++epoch_samples;
            }
            const double lr = cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min);
            for (Parameter& p : model.parameters())
                sgd_momentum_step(p, lr, cfg.momentum);
            ++step;
            epoch_loss += batch_loss;
        }

        EpochRow train_row;
        train_row.epoch = epoch;
        train_row.split = "train";
        train_row.loss = epoch_loss / static_cast<double>(epoch_samples);
        train_row.oa = static_cast<double>(epoch_correct) / static_cast<double>(epoch_points);
        train_row.macc = train_row.oa; // running estimate; the test row carries the real mAcc
        report.loss_curve.push_back(train_row.loss);
        report.rows.push_back(train_row);
        if (on_epoch)
            on_epoch(train_row);

        EvalResult ev = evaluate(model, ds, 1);
        EpochRow test_row;
        test_row.epoch = epoch;
        test_row.split = "test";
        test_row.loss = ev.loss;
        test_row.oa = ev.oa;
        test_row.macc = ev.macc;
        test_row.miou = ev.miou;
        test_row.mciou = ev.mciou;
        report.rows.push_back(test_row);
        report.best_test_oa = std::max(report.best_test_oa, ev.oa);
        if (on_epoch)
            on_epoch(test_row);

        report.oa = ev.oa;
        report.macc = ev.macc;
        report.miou = ev.miou;
        report.mciou = ev.mciou;
        report.per_class = ev.per_class;
    }

    if (cfg.epochs == 0) {
        EvalResult ev = evaluate(model, ds, 1);
        report.oa = ev.oa;
        report.macc = ev.macc;
        report.miou = ev.miou;
        report.mciou = ev.mciou;
        report.per_class = ev.per_class;
        report.best_test_oa = ev.oa;
        EpochRow row;
        row.epoch = 0;
        row.split = "test";
        row.loss = ev.loss;
        row.oa = ev.oa;
        row.macc = ev.macc;
        row.miou = ev.miou;
        row.mciou = ev.mciou;
        report.rows.push_back(row);
        if (on_epoch)
            on_epoch(row);
    }

    if (!checkpoint_path.empty())
        checkpoint_save(model, checkpoint_path);
    return report;
}

// ---- checkpoints ----------------------------------------------------------------------

namespace {

constexpr char kMagic[5] = {'A', 'G', 'C', 'K', '1'};

void write_u64(std::ostream& os, std::uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i)
        buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), 8);
}

std::uint64_t read_u64(std::istream& is) {
    unsigned char buf[8];
    is.read(reinterpret_cast<char*>(buf), 8);
    if (!is)
        throw IoError("checkpoint truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
        v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
}

void write_f64(std::ostream& os, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    write_u64(os, bits);
}

double read_f64(std::istream& is) {
    std::uint64_t bits = read_u64(is);
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
}

} // namespace

void checkpoint_save(const Model& model, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os)
        throw IoError("cannot write checkpoint '" + path + "'");
    os.write(kMagic, 5);
    const std::string cfg = model.config_text();
    write_u64(os, cfg.size());
    os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    for (const Parameter& p : model.parameters()) {
        write_u64(os, p.name.size());
        os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        write_u64(os, p.tensor.rank());
        for (std::size_t e : p.tensor.shape())
            write_u64(os, e);
        for (double v : p.tensor.values())
            write_f64(os, v);
    }
    if (!os)
        throw IoError("write failed for checkpoint '" + path + "'");
}

namespace {

void load_records_into(Model& model, std::istream& is) {
    for (Parameter& p : model.parameters()) {
        const std::uint64_t name_len = read_u64(is);
        std::string name(name_len, '\0');
        is.read(name.data(), static_cast<std::streamsize>(name_len));
        if (!is)
            throw IoError("checkpoint truncated");
        if (name != p.name)
            throw IoError("checkpoint record '" + name + "' does not match parameter '" +
                          p.name + "'");
        const std::uint64_t rank = read_u64(is);
        Shape shape(rank);
        for (std::uint64_t i = 0; i < rank; ++i)
            shape[i] = read_u64(is);
        if (shape != p.tensor.shape())
            throw IoError("checkpoint parameter '" + name + "' has shape " + shape_str(shape) +
                          ", layer expects " + shape_str(p.tensor.shape()));
        for (double& v : p.tensor.values())
            v = read_f64(is);
    }
    // trailing data means the architectures disagree on parameter count
    char extra;
    if (is.read(&extra, 1))
        throw IoError("checkpoint holds more parameters than the model declares");
}

std::string read_header(std::istream& is) {
    char magic[5];
    is.read(magic, 5);
    if (!is || std::memcmp(magic, kMagic, 5) != 0)
        throw IoError("checkpoint magic mismatch (expected AGCK1)");
    const std::uint64_t len = read_u64(is);
    std::string cfg(len, '\0');
    is.read(cfg.data(), static_cast<std::streamsize>(len));
    if (!is)
        throw IoError("checkpoint truncated");
    return cfg;
}

} // namespace

Model checkpoint_load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw IoError("cannot open checkpoint '" + path + "'");
    Model model = model_from_config_text(read_header(is));
    load_records_into(model, is);
    return model;
}

void checkpoint_load_into(Model& model, const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw IoError("cannot open checkpoint '" + path + "'");
    read_header(is);
    load_records_into(model, is);
}

// ---- robustness -----------------------------------------------------------------------

std::vector<RobustnessRow> robustness_sweep(const Model& model, const Dataset& ds,
                                            const TrainConfig& cfg) {
    std::vector<RobustnessRow> rows;
    std::size_t level = 0;
    for (double keep : cfg.keep_levels) {
        for (double sigma : cfg.sigma_levels) {
            Dataset corrupted;
            corrupted.seed = ds.seed;
            std::size_t ci = 0;
            for (std::size_t i : ds.indices_of_split(1)) {
                PointCloud c = ds.clouds[i];
                c = corrupt_dropout(c, keep, derive_seed(cfg.seed, 0xD0 + level, ci));
                c = corrupt_noise(c, sigma, derive_seed(cfg.seed, 0xF0 + level, ci));
                corrupted.clouds.push_back(std::move(c));
                corrupted.split.push_back(1);
                ++ci;
            }
            EvalResult ev = evaluate(model, corrupted, 1);
            rows.push_back({keep, sigma, ev.oa, ev.macc});
            ++level;
        }
    }
    return rows;
}

} // namespace agconv
