#include "tta_forge/stream.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace ttaforge {

CorruptionKind corruption_kind_from_name(const std::string& name) {
    if (name == "none") return CorruptionKind::None;
    if (name == "gaussian_noise") return CorruptionKind::GaussianNoise;
    if (name == "feature_scale") return CorruptionKind::FeatureScale;
    if (name == "feature_rotate") return CorruptionKind::FeatureRotate;
    throw std::invalid_argument("corruption_kind_from_name: unknown kind '" + name + "'");
}

std::string corruption_kind_name(CorruptionKind kind) {
    switch (kind) {
        case CorruptionKind::None: return "none";
        case CorruptionKind::GaussianNoise: return "gaussian_noise";
        case CorruptionKind::FeatureScale: return "feature_scale";
        case CorruptionKind::FeatureRotate: return "feature_rotate";
    }
    throw std::invalid_argument("corruption_kind_name: unknown kind");
}

std::vector<double> build_qt(std::size_t t, std::size_t num_classes, double rho) {
    if (std::isinf(rho)) rho = kInfImbalance;
    if (t < 1 || t > num_classes) {
        throw std::invalid_argument("build_qt: step index out of [1, K]");
    }
    if (!(rho >= 1.0)) {
        throw std::invalid_argument("build_qt: imbalance ratio must be >= 1");
    }
    const double k = static_cast<double>(num_classes);
    const double q_max = rho / (rho + k - 1.0);
    const double q_min = (1.0 - q_max) / (k - 1.0);
    std::vector<double> q(num_classes, q_min);
    q[t - 1] = q_max;
    return q;
}

std::size_t StreamBatches::total_samples() const {
    std::size_t n = 0;
    for (const auto& l : labels) n += l.size();
    return n;
}

StreamBatches generate_stream(const LabeledDataset& data, const StreamSpec& spec) {
    if (spec.batch_size < 1 || spec.samples_per_step < 1) {
        throw std::invalid_argument("generate_stream: batch_size and samples_per_step must be >= 1");
    }
    const std::size_t k = spec.num_classes;
    std::vector<std::vector<std::size_t>> pools(k);
    for (std::size_t i = 0; i < data.size(); ++i) {
        const int y = data.labels[i];
        if (y >= 0 && static_cast<std::size_t>(y) < k) pools[y].push_back(i);
    }
    for (std::size_t c = 0; c < k; ++c) {
        if (pools[c].empty()) {
            throw std::invalid_argument("generate_stream: dataset has no samples of class " +
                                        std::to_string(c));
        }
    }

    Rng root(spec.seed);
    Rng label_rng = root.fork("labels");
    Rng instance_rng = root.fork("instances");
    std::vector<std::vector<std::size_t>> queues = pools;
    for (std::size_t c = 0; c < k; ++c) {
        Rng pool_rng = root.fork("pool").fork(c);
        pool_rng.shuffle(queues[c]);
    }
    std::vector<std::size_t> cursor(k, 0);

    const std::size_t steps = spec.steps > 0 ? spec.steps : k;
    std::vector<std::size_t> order;
    order.reserve(steps * spec.samples_per_step);
    for (std::size_t step = 0; step < steps; ++step) {
        const std::vector<double> q = build_qt(step % k + 1, k, spec.imbalance_ratio);
        std::vector<double> cdf(k);
        double acc = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            acc += q[c];
            cdf[c] = acc;
        }
        for (std::size_t s = 0; s < spec.samples_per_step; ++s) {
            const double u = label_rng.uniform();
            std::size_t c = static_cast<std::size_t>(
                std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
            if (c >= k) c = k - 1;
            if (cursor[c] < queues[c].size()) {
                order.push_back(queues[c][cursor[c]++]);
            } else {
                // pool exhausted: fall back to draws with replacement
                order.push_back(pools[c][instance_rng.uniform_int(pools[c].size())]);
            }
        }
    }

    StreamBatches out;
    const std::size_t b = spec.batch_size;
    for (std::size_t start = 0; start < order.size(); start += b) {
        const std::size_t count = std::min(b, order.size() - start);
        Batch xb(count, data.dim());
        std::vector<int> yb(count);
        for (std::size_t i = 0; i < count; ++i) {
            const std::size_t src = order[start + i];
            for (std::size_t j = 0; j < data.dim(); ++j) xb(i, j) = data.features(src, j);
            yb[i] = data.labels[src];
        }
        out.inputs.push_back(std::move(xb));
        out.labels.push_back(std::move(yb));
    }
    return out;
}

LabeledDataset apply_corruption(const LabeledDataset& data, const CorruptionSpec& spec,
                                std::uint64_t seed) {
    if (spec.severity < 1 || spec.severity > 5) {
        throw std::invalid_argument("apply_corruption: severity must be in 1..5");
    }
    LabeledDataset out = data;
    Rng rng(seed);
    const int s = spec.severity - 1;
    switch (spec.kind) {
        case CorruptionKind::None:
            return out;
        case CorruptionKind::GaussianNoise: {
            static constexpr double kSigma[5] = {0.1, 0.25, 0.5, 0.75, 1.0};
            Rng noise = rng.fork("noise");
            for (double& v : out.features.data()) v += kSigma[s] * noise.normal();
            return out;
        }
        case CorruptionKind::FeatureScale: {
            static constexpr double kScale[5] = {1.5, 2.0, 2.5, 3.0, 3.5};
            for (double& v : out.features.data()) v *= kScale[s];
            return out;
        }
        case CorruptionKind::FeatureRotate: {
            static constexpr double kDegrees[5] = {15.0, 30.0, 45.0, 60.0, 75.0};
            const double theta = kDegrees[s] * M_PI / 180.0;
            const double c = std::cos(theta), sn = std::sin(theta);
            std::vector<std::size_t> axes(data.dim());
            for (std::size_t j = 0; j < axes.size(); ++j) axes[j] = j;
            Rng perm = rng.fork("axes");
            perm.shuffle(axes);
            for (std::size_t i = 0; i < out.features.rows(); ++i) {
                double* row = out.features.row_ptr(i);
                for (std::size_t p = 0; p + 1 < axes.size(); p += 2) {
                    const std::size_t a = axes[p], bx = axes[p + 1];
                    const double va = row[a], vb = row[bx];
                    row[a] = c * va - sn * vb;
                    row[bx] = sn * va + c * vb;
                }
            }
            return out;
        }
    }
    throw std::invalid_argument("apply_corruption: unknown kind");
}

namespace {

constexpr double kMeanRadius = 3.0;

Matrix cluster_means(std::size_t k, std::size_t dim, Rng& rng) {
    Matrix means(k, dim);
    for (std::size_t c = 0; c < k; ++c) {
        double norm2 = 0.0;
        double* row = means.row_ptr(c);
        for (std::size_t j = 0; j < dim; ++j) {
            row[j] = rng.normal();
            norm2 += row[j] * row[j];
        }
        const double scale = kMeanRadius / std::sqrt(norm2);
        for (std::size_t j = 0; j < dim; ++j) row[j] *= scale;
    }
    return means;
}

LabeledDataset sample_clusters(const Matrix& means, std::size_t n_per_class, double spread,
                               Rng& rng) {
    const std::size_t k = means.rows(), dim = means.cols();
    LabeledDataset ds;
    ds.num_classes = k;
    ds.features = Matrix(k * n_per_class, dim);
    ds.labels.resize(k * n_per_class);
    for (std::size_t c = 0; c < k; ++c) {
        for (std::size_t i = 0; i < n_per_class; ++i) {
            const std::size_t row = c * n_per_class + i;
            for (std::size_t j = 0; j < dim; ++j) {
                ds.features(row, j) = means(c, j) + spread * rng.normal();
            }
            ds.labels[row] = static_cast<int>(c);
        }
    }
    return ds;
}

}  // namespace

LabeledDataset synth_dataset(std::size_t num_classes, std::size_t dim, std::size_t n_per_class,
                             double cluster_spread, std::uint64_t seed) {
    if (num_classes < 2 || dim < 2) {
        throw std::invalid_argument("synth_dataset: need K >= 2 and D >= 2");
    }
    Rng root(seed);
    Rng means_rng = root.fork("means");
    Rng sample_rng = root.fork("samples");
    const Matrix means = cluster_means(num_classes, dim, means_rng);
    return sample_clusters(means, n_per_class, cluster_spread, sample_rng);
}

ShiftTask make_shift_task(std::size_t num_classes, std::size_t dim, std::size_t source_per_class,
                          std::size_t target_per_class, double cluster_spread,
                          std::uint64_t seed) {
    if (num_classes < 2 || dim < 2) {
        throw std::invalid_argument("make_shift_task: need K >= 2 and D >= 2");
    }
    Rng root(seed);
    Rng means_rng = root.fork("means");
    Rng source_rng = root.fork("source");
    Rng target_rng = root.fork("target");
    const Matrix means = cluster_means(num_classes, dim, means_rng);
    ShiftTask task;
    task.source = sample_clusters(means, source_per_class, cluster_spread, source_rng);
    task.target = sample_clusters(means, target_per_class, cluster_spread, target_rng);
    return task;
}

LabeledDataset load_csv_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("load_csv_dataset: cannot open '" + path + "'");

    auto split = [](const std::string& line) {
        std::vector<std::string> cells;
        std::string cell;
        std::stringstream ss(line);
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.push_back("");
        return cells;
    };

    std::string line;
    if (!std::getline(in, line)) {
        throw std::invalid_argument("load_csv_dataset: empty file");
    }
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::vector<std::string> header = split(line);
    std::size_t label_col = header.size();
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i] == "label") label_col = i;
    }
    if (label_col == header.size()) {
        throw std::invalid_argument("load_csv_dataset: header has no `label` column");
    }
    const std::size_t dim = header.size() - 1;
    if (dim == 0) {
        throw std::invalid_argument("load_csv_dataset: no feature columns");
    }

    std::vector<double> values;
    std::vector<int> labels;
    std::size_t line_no = 1;
    int max_label = -1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const std::vector<std::string> cells = split(line);
        if (cells.size() != header.size()) {
            throw std::invalid_argument("load_csv_dataset: line " + std::to_string(line_no) +
                                        ": expected " + std::to_string(header.size()) +
                                        " columns, got " + std::to_string(cells.size()));
        }
        for (std::size_t i = 0; i < cells.size(); ++i) {
            double v;
            std::size_t used = 0;
            try {
                v = std::stod(cells[i], &used);
            } catch (const std::exception&) {
                throw std::invalid_argument("load_csv_dataset: line " + std::to_string(line_no) +
                                            ": cannot parse '" + cells[i] + "'");
            }
            if (used != cells[i].size()) {
                throw std::invalid_argument("load_csv_dataset: line " + std::to_string(line_no) +
                                            ": trailing characters in '" + cells[i] + "'");
            }
            if (i == label_col) {
                const int y = static_cast<int>(v);
                if (static_cast<double>(y) != v || y < 0) {
                    throw std::invalid_argument("load_csv_dataset: line " +
                                                std::to_string(line_no) +
                                                ": label must be a non-negative integer");
                }
                labels.push_back(y);
                max_label = std::max(max_label, y);
            } else {
                values.push_back(v);
            }
        }
    }
    if (labels.empty()) {
        throw std::invalid_argument("load_csv_dataset: no data rows");
    }
    LabeledDataset ds;
    ds.features = Matrix(labels.size(), dim, std::move(values));
    ds.labels = std::move(labels);
    ds.num_classes = static_cast<std::size_t>(max_label) + 1;
    return ds;
}

}  // namespace ttaforge
