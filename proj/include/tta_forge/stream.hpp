#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tta_forge/dataset.hpp"
#include "tta_forge/matrix.hpp"
#include "tta_forge/rng.hpp"

namespace ttaforge {

// Sentinel for an "infinite" imbalance factor.
constexpr double kInfImbalance = 500000.0;

struct StreamSpec {
    std::size_t num_classes = 10;
    double imbalance_ratio = 1.0;  // rho = q_max / q_min, >= 1
    std::size_t samples_per_step = 100;
    std::size_t batch_size = 16;
    std::uint64_t seed = 0;
    std::size_t steps = 0;  // 0 means the default T = K
};

enum class CorruptionKind { None, GaussianNoise, FeatureScale, FeatureRotate };

CorruptionKind corruption_kind_from_name(const std::string& name);
std::string corruption_kind_name(CorruptionKind kind);

struct CorruptionSpec {
    CorruptionKind kind = CorruptionKind::GaussianNoise;
    int severity = 3;  // 1..5
};

// Q_t: probability q_max = rho/(rho + K - 1) on class t (1-indexed), the
// remaining mass split evenly. q_max/q_min == rho by construction.
// Throws std::invalid_argument when t is outside [1, K] or rho < 1.
std::vector<double> build_qt(std::size_t t, std::size_t num_classes, double rho);

struct StreamBatches {
    std::vector<Batch> inputs;
    std::vector<std::vector<int>> labels;

    std::size_t total_samples() const;
};

// Ordered test stream: at each step t the labels are drawn from Q_t, then
// instances of those labels are taken from per-class pools (shuffled, without
// replacement; an exhausted pool falls back to uniform draws with
// replacement). The concatenated sequence is chopped into batches of
// spec.batch_size, the last one possibly short. Steps beyond K wrap around to
// Q_1. Throws std::invalid_argument when some class has no samples.
StreamBatches generate_stream(const LabeledDataset& data, const StreamSpec& spec);

// Deterministic synthetic covariate shift. Severity scales:
//   gaussian_noise: sigma in {0.1, 0.25, 0.5, 0.75, 1.0}
//   feature_scale:  factor in {1.5, 2.0, 2.5, 3.0, 3.5}
//   feature_rotate: angle in {15, 30, 45, 60, 75} degrees, applied to a
//                   seeded random pairing of feature axes
LabeledDataset apply_corruption(const LabeledDataset& data, const CorruptionSpec& spec,
                                std::uint64_t seed);

// K Gaussian clusters with seeded means on a sphere; exactly n_per_class
// samples per class, ordered by class.
LabeledDataset synth_dataset(std::size_t num_classes, std::size_t dim, std::size_t n_per_class,
                             double cluster_spread, std::uint64_t seed);

// Source/target pair sharing the same cluster means but independent sample
// noise, so a model pretrained on `source` faces the same classes in
// `target`.
struct ShiftTask {
    LabeledDataset source;
    LabeledDataset target;
};
ShiftTask make_shift_task(std::size_t num_classes, std::size_t dim, std::size_t source_per_class,
                          std::size_t target_per_class, double cluster_spread, std::uint64_t seed);

// CSV ingestion: header row with a `label` column plus numeric feature
// columns. Malformed rows raise std::invalid_argument naming the line number.
LabeledDataset load_csv_dataset(const std::string& path);

}  // namespace ttaforge
