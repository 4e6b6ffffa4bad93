#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "tta_forge/matrix.hpp"

namespace ttaforge {

enum class NormKind { BatchNorm, BatchRenorm, GroupNorm, LayerNorm };

std::string norm_kind_name(NormKind kind);
NormKind norm_kind_from_name(const std::string& name);

// Whether statistics come from the current batch or the stored running
// estimates. Per-sample kinds (GroupNorm, LayerNorm) ignore the mode.
enum class StatsMode { TrainStats, FrozenStats };

struct NormalizationLayer {
    NormKind kind = NormKind::BatchNorm;
    std::vector<double> gamma;  // scale, per feature
    std::vector<double> beta;   // shift, per feature
    std::vector<double> running_mean;  // BatchNorm / BatchRenorm
    std::vector<double> running_var;
    double eps = 1e-5;
    double momentum = 0.1;  // running-stat EMA: run <- (1-m)*run + m*batch
    double r_max = 3.0;     // BatchRenorm clip bounds
    double d_max = 5.0;
    std::size_t groups = 1;  // GroupNorm

    std::size_t features() const { return gamma.size(); }
};

NormalizationLayer make_norm_layer(NormKind kind, std::size_t features, std::size_t groups = 1,
                                   double eps = 1e-5);

// Everything backward needs, captured by one forward call.
struct NormCache {
    StatsMode mode = StatsMode::TrainStats;
    Matrix x_std;   // (x - mu) * inv_std, before renorm correction and affine
    Matrix x_hat;   // what gamma multiplies; equals x_std except for BatchRenorm
    // inv_std layout: per feature (BN/BReN), per (row, group) row-major (GN),
    // per row (LN)
    std::vector<double> inv_std;
    std::vector<double> r, d;  // BatchRenorm correction factors, per feature
    std::vector<double> batch_mean, batch_var;  // TrainStats BN/BReN only
};

struct NormResult {
    Batch y;
    NormCache cache;
};

// Forward pass of one normalization layer. Pure: running statistics are not
// touched here; callers apply ema_update_running_stats when the step's policy
// says so.
//
// BatchNorm:   y = gamma * (x - mu_B) / sqrt(var_B + eps) + beta
// BatchRenorm: x_hat = x_std * r + d with
//              r = clip(sqrt((var_B+eps)/(var_run+eps)), 1/r_max, r_max)
//              d = clip((mu_B - mu_run)/sqrt(var_run+eps), -d_max, d_max)
//              r, d are constants in backprop.
// GroupNorm:   per-sample, per-group standardization.
// LayerNorm:   per-sample standardization over all features.
//
// Throws std::invalid_argument on a feature-count mismatch.
NormResult normalize(const NormalizationLayer& layer, const Batch& x, StatsMode mode);

// run <- (1-m)*run + m*batch, using the batch statistics captured in `cache`.
// No-op for per-sample kinds or FrozenStats caches.
void ema_update_running_stats(NormalizationLayer& layer, const NormCache& cache);

struct NormBackwardResult {
    std::vector<double> dgamma;
    std::vector<double> dbeta;
    Matrix dx;
};

// Gradient of the layer w.r.t. gamma, beta and its input, given dL/dy.
// TrainStats batch statistics are treated as functions of the input (full
// batch-norm backward); BatchRenorm's r and d are stop-gradients.
NormBackwardResult norm_backward(const NormalizationLayer& layer, const NormCache& cache,
                                 const Matrix& dy);

}  // namespace ttaforge
