#include "tta_forge/norm.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ttaforge {

std::string norm_kind_name(NormKind kind) {
    switch (kind) {
        case NormKind::BatchNorm: return "bn";
        case NormKind::BatchRenorm: return "bren";
        case NormKind::GroupNorm: return "gn";
        case NormKind::LayerNorm: return "ln";
    }
    throw std::invalid_argument("norm_kind_name: unknown kind");
}

NormKind norm_kind_from_name(const std::string& name) {
    if (name == "bn") return NormKind::BatchNorm;
    if (name == "bren") return NormKind::BatchRenorm;
    if (name == "gn") return NormKind::GroupNorm;
    if (name == "ln") return NormKind::LayerNorm;
    throw std::invalid_argument("norm_kind_from_name: unknown kind '" + name + "'");
}

NormalizationLayer make_norm_layer(NormKind kind, std::size_t features, std::size_t groups,
                                   double eps) {
    if (kind == NormKind::GroupNorm && (groups < 1 || features % groups != 0)) {
        throw std::invalid_argument("make_norm_layer: groups must divide the feature count");
    }
    NormalizationLayer layer;
    layer.kind = kind;
    layer.gamma.assign(features, 1.0);
    layer.beta.assign(features, 0.0);
    layer.running_mean.assign(features, 0.0);
    layer.running_var.assign(features, 1.0);
    layer.eps = eps;
    layer.groups = kind == NormKind::GroupNorm ? groups : 1;
    return layer;
}

namespace {

// BatchNorm / BatchRenorm: statistics per feature across the batch.
NormResult normalize_batchwise(const NormalizationLayer& layer, const Batch& x, StatsMode mode) {
    const std::size_t rows = x.rows(), cols = x.cols();
    NormResult res{Batch(rows, cols), {}};
    NormCache& c = res.cache;
    c.mode = mode;
    c.x_std = Matrix(rows, cols);
    c.inv_std.assign(cols, 0.0);

    const bool renorm = layer.kind == NormKind::BatchRenorm;
    std::vector<double> mean(cols), var(cols);
    if (mode == StatsMode::TrainStats) {
        for (std::size_t j = 0; j < cols; ++j) {
            double m = 0.0;
            for (std::size_t i = 0; i < rows; ++i) m += x(i, j);
            m /= static_cast<double>(rows);
            double v = 0.0;
            for (std::size_t i = 0; i < rows; ++i) {
                const double d = x(i, j) - m;
                v += d * d;
            }
            mean[j] = m;
            var[j] = v / static_cast<double>(rows);
        }
        c.batch_mean = mean;
        c.batch_var = var;
    } else {
        mean = layer.running_mean;
        var = layer.running_var;
    }

    for (std::size_t j = 0; j < cols; ++j) {
        c.inv_std[j] = 1.0 / std::sqrt(var[j] + layer.eps);
    }

    if (renorm && mode == StatsMode::TrainStats) {
        c.r.assign(cols, 1.0);
        c.d.assign(cols, 0.0);
        for (std::size_t j = 0; j < cols; ++j) {
            const double sigma_run = std::sqrt(layer.running_var[j] + layer.eps);
            const double r = std::sqrt((var[j] + layer.eps)) / sigma_run;
            c.r[j] = std::clamp(r, 1.0 / layer.r_max, layer.r_max);
            const double d = (mean[j] - layer.running_mean[j]) / sigma_run;
            c.d[j] = std::clamp(d, -layer.d_max, layer.d_max);
        }
    }

    const bool has_rd = !c.r.empty();
    if (has_rd) c.x_hat = Matrix(rows, cols);
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            const double s = (x(i, j) - mean[j]) * c.inv_std[j];
            c.x_std(i, j) = s;
            const double xhat = has_rd ? s * c.r[j] + c.d[j] : s;
            if (has_rd) c.x_hat(i, j) = xhat;
            res.y(i, j) = layer.gamma[j] * xhat + layer.beta[j];
        }
    }
    return res;
}

// GroupNorm / LayerNorm: statistics per (sample, group); LayerNorm is the
// single-group case.
NormResult normalize_samplewise(const NormalizationLayer& layer, const Batch& x) {
    const std::size_t rows = x.rows(), cols = x.cols();
    const std::size_t groups = layer.kind == NormKind::GroupNorm ? layer.groups : 1;
    const std::size_t gsize = cols / groups;
    NormResult res{Batch(rows, cols), {}};
    NormCache& c = res.cache;
    c.x_std = Matrix(rows, cols);
    c.inv_std.assign(rows * groups, 0.0);

    for (std::size_t i = 0; i < rows; ++i) {
        const double* r = x.row_ptr(i);
        for (std::size_t g = 0; g < groups; ++g) {
            const double* seg = r + g * gsize;
            double m = 0.0;
            for (std::size_t j = 0; j < gsize; ++j) m += seg[j];
            m /= static_cast<double>(gsize);
            double v = 0.0;
            for (std::size_t j = 0; j < gsize; ++j) {
                const double d = seg[j] - m;
                v += d * d;
            }
            v /= static_cast<double>(gsize);
            const double inv = 1.0 / std::sqrt(v + layer.eps);
            c.inv_std[i * groups + g] = inv;
            for (std::size_t j = 0; j < gsize; ++j) {
                const std::size_t col = g * gsize + j;
                const double s = (seg[j] - m) * inv;
                c.x_std(i, col) = s;
                res.y(i, col) = layer.gamma[col] * s + layer.beta[col];
            }
        }
    }
    return res;
}

}  // namespace

NormResult normalize(const NormalizationLayer& layer, const Batch& x, StatsMode mode) {
    if (x.cols() != layer.features()) {
        throw std::invalid_argument("normalize: feature count mismatch");
    }
    if (x.rows() == 0) {
        throw std::invalid_argument("normalize: empty batch");
    }
    switch (layer.kind) {
        case NormKind::BatchNorm:
        case NormKind::BatchRenorm:
            return normalize_batchwise(layer, x, mode);
        case NormKind::GroupNorm:
        case NormKind::LayerNorm: {
            NormResult res = normalize_samplewise(layer, x);
            res.cache.mode = mode;
            return res;
        }
    }
    throw std::invalid_argument("normalize: unknown kind");
}

void ema_update_running_stats(NormalizationLayer& layer, const NormCache& cache) {
    if (layer.kind != NormKind::BatchNorm && layer.kind != NormKind::BatchRenorm) return;
    if (cache.mode != StatsMode::TrainStats || cache.batch_mean.empty()) return;
    const double m = layer.momentum;
    for (std::size_t j = 0; j < layer.features(); ++j) {
        layer.running_mean[j] = (1.0 - m) * layer.running_mean[j] + m * cache.batch_mean[j];
        layer.running_var[j] = (1.0 - m) * layer.running_var[j] + m * cache.batch_var[j];
    }
}

namespace {

NormBackwardResult backward_batchwise(const NormalizationLayer& layer, const NormCache& c,
                                      const Matrix& dy) {
    const std::size_t rows = dy.rows(), cols = dy.cols();
    const double n = static_cast<double>(rows);
    const bool has_rd = !c.r.empty();
    const Matrix& xhat = has_rd ? c.x_hat : c.x_std;

    NormBackwardResult out;
    out.dgamma.assign(cols, 0.0);
    out.dbeta.assign(cols, 0.0);
    out.dx = Matrix(rows, cols);

    for (std::size_t j = 0; j < cols; ++j) {
        const double nu = c.inv_std[j];
        const double rj = has_rd ? c.r[j] : 1.0;
        double dgamma = 0.0, dbeta = 0.0;
        double sum_ds = 0.0;       // sum_i d(x_std)_ij
        double sum_ds_s = 0.0;     // sum_i d(x_std)_ij * x_std_ij
        for (std::size_t i = 0; i < rows; ++i) {
            const double g = dy(i, j);
            dgamma += g * xhat(i, j);
            dbeta += g;
            const double ds = g * layer.gamma[j] * rj;
            sum_ds += ds;
            sum_ds_s += ds * c.x_std(i, j);
        }
        out.dgamma[j] = dgamma;
        out.dbeta[j] = dbeta;

        if (c.mode == StatsMode::FrozenStats) {
            for (std::size_t i = 0; i < rows; ++i) {
                out.dx(i, j) = dy(i, j) * layer.gamma[j] * rj * nu;
            }
            continue;
        }

        // Full batch-norm backward: mu and var are functions of the input.
        const double dvar = -0.5 * nu * nu * sum_ds_s;
        double sum_s = 0.0;
        for (std::size_t i = 0; i < rows; ++i) sum_s += c.x_std(i, j);
        const double dmu = -nu * sum_ds - dvar * (2.0 / n) * sum_s / nu;
        for (std::size_t i = 0; i < rows; ++i) {
            const double ds = dy(i, j) * layer.gamma[j] * rj;
            out.dx(i, j) = ds * nu + dvar * 2.0 * c.x_std(i, j) / (nu * n) + dmu / n;
        }
    }
    return out;
}

NormBackwardResult backward_samplewise(const NormalizationLayer& layer, const NormCache& c,
                                       const Matrix& dy) {
    const std::size_t rows = dy.rows(), cols = dy.cols();
    const std::size_t groups = layer.kind == NormKind::GroupNorm ? layer.groups : 1;
    const std::size_t gsize = cols / groups;
    const double n = static_cast<double>(gsize);

    NormBackwardResult out;
    out.dgamma.assign(cols, 0.0);
    out.dbeta.assign(cols, 0.0);
    out.dx = Matrix(rows, cols);

    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t g = 0; g < groups; ++g) {
            const double nu = c.inv_std[i * groups + g];
            double sum_ds = 0.0, sum_ds_s = 0.0;
            for (std::size_t j = 0; j < gsize; ++j) {
                const std::size_t col = g * gsize + j;
                const double gd = dy(i, col);
                out.dgamma[col] += gd * c.x_std(i, col);
                out.dbeta[col] += gd;
                const double ds = gd * layer.gamma[col];
                sum_ds += ds;
                sum_ds_s += ds * c.x_std(i, col);
            }
            const double dvar = -0.5 * nu * nu * sum_ds_s;
            double sum_s = 0.0;
            for (std::size_t j = 0; j < gsize; ++j) sum_s += c.x_std(i, g * gsize + j);
            const double dmu = -nu * sum_ds - dvar * (2.0 / n) * sum_s / nu;
            for (std::size_t j = 0; j < gsize; ++j) {
                const std::size_t col = g * gsize + j;
                const double ds = dy(i, col) * layer.gamma[col];
                out.dx(i, col) = ds * nu + dvar * 2.0 * c.x_std(i, col) / (nu * n) + dmu / n;
            }
        }
    }
    return out;
}

}  // namespace

NormBackwardResult norm_backward(const NormalizationLayer& layer, const NormCache& cache,
                                 const Matrix& dy) {
    if (dy.cols() != layer.features() || dy.rows() != cache.x_std.rows()) {
        throw std::invalid_argument("norm_backward: shape mismatch with cache");
    }
    switch (layer.kind) {
        case NormKind::BatchNorm:
        case NormKind::BatchRenorm:
            return backward_batchwise(layer, cache, dy);
        case NormKind::GroupNorm:
        case NormKind::LayerNorm:
            return backward_samplewise(layer, cache, dy);
    }
    throw std::invalid_argument("norm_backward: unknown kind");
}

}  // namespace ttaforge
