#include "tta_forge/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace ttaforge {

namespace {

// Below this many output elements the OpenMP fork costs more than the loop.
constexpr std::size_t kParallelGrain = 4096;

void check_mul_shapes(std::size_t inner_a, std::size_t inner_b, const char* what) {
    if (inner_a != inner_b) {
        throw std::invalid_argument(std::string(what) + ": inner dimensions do not match");
    }
}

}  // namespace

Matrix gemm(const Matrix& a, const Matrix& b) {
    check_mul_shapes(a.cols(), b.rows(), "gemm");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Matrix c(m, n);
    const bool par = m * n * k > kParallelGrain;
#pragma omp parallel for schedule(static) if (par)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
        const double* arow = a.row_ptr(i);
        double* crow = c.row_ptr(i);
        for (std::size_t l = 0; l < k; ++l) {
            const double av = arow[l];
            const double* brow = b.row_ptr(l);
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
    return c;
}

Matrix gemm_at_b(const Matrix& a, const Matrix& b) {
    check_mul_shapes(a.rows(), b.rows(), "gemm_at_b");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Matrix c(k, n);
    const bool par = m * n * k > kParallelGrain;
#pragma omp parallel for schedule(static) if (par)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(k); ++i) {
        double* crow = c.row_ptr(i);
        for (std::size_t l = 0; l < m; ++l) {
            const double av = a(l, i);
            const double* brow = b.row_ptr(l);
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
    return c;
}

Matrix gemm_a_bt(const Matrix& a, const Matrix& b) {
    check_mul_shapes(a.cols(), b.cols(), "gemm_a_bt");
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    Matrix c(m, n);
    const bool par = m * n * k > kParallelGrain;
#pragma omp parallel for schedule(static) if (par)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
        const double* arow = a.row_ptr(i);
        double* crow = c.row_ptr(i);
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b.row_ptr(j);
            double sum = 0.0;
            for (std::size_t l = 0; l < k; ++l) {
                sum += arow[l] * brow[l];
            }
            crow[j] = sum;
        }
    }
    return c;
}

ProbMatrix softmax_with_temperature(const Logits& logits, double tau) {
    if (!(tau > 0.0) || !std::isfinite(tau)) {
        throw std::invalid_argument("softmax_with_temperature: tau must be positive and finite");
    }
    if (!logits.all_finite()) {
        throw std::invalid_argument("softmax_with_temperature: logits must be finite");
    }
    const std::size_t rows = logits.rows(), cols = logits.cols();
    ProbMatrix p(rows, cols);
    const bool par = rows * cols > kParallelGrain;
#pragma omp parallel for schedule(static) if (par)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(rows); ++i) {
        const double* z = logits.row_ptr(i);
        double* out = p.row_ptr(i);
        double zmax = z[0];
        for (std::size_t j = 1; j < cols; ++j) zmax = std::max(zmax, z[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            out[j] = std::exp((z[j] - zmax) / tau);
            sum += out[j];
        }
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < cols; ++j) out[j] *= inv;
    }
    return p;
}

std::vector<double> shannon_entropy(const ProbMatrix& probs) {
    const std::size_t rows = probs.rows(), cols = probs.cols();
    const double hmax = std::log(static_cast<double>(cols));
    std::vector<double> h(rows);
    bool bad = false;
    const bool par = rows * cols > kParallelGrain;
#pragma omp parallel for schedule(static) if (par)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(rows); ++i) {
        const double* p = probs.row_ptr(i);
        double sum = 0.0, acc = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            const double v = p[j];
            if (v < 0.0 || v > 1.0 || !std::isfinite(v)) {
                bad = true;
            } else if (v > 0.0) {
                acc -= v * std::log(v);
            }
            sum += v;
        }
        if (std::abs(sum - 1.0) > 1e-6) bad = true;
        // summation rounding can land a uniform row a few ulps under ln K;
        // snap those onto the mathematical maximum so the strict selection
        // threshold at F=1 treats uniform predictions as exactly ln K
        const double snap =
            hmax * static_cast<double>(cols) * 4.0 * std::numeric_limits<double>::epsilon();
        h[i] = acc >= hmax - snap ? hmax : std::clamp(acc, 0.0, hmax);
    }
    if (bad) {
        throw std::invalid_argument("shannon_entropy: rows must be stochastic");
    }
    return h;
}

Moments batch_moments(const Batch& x, MomentAxis axis) {
    const std::size_t rows = x.rows(), cols = x.cols();
    if (rows == 0 || cols == 0) {
        throw std::invalid_argument("batch_moments: empty batch");
    }
    Moments out;
    if (axis == MomentAxis::Feature) {
        out.mean.assign(cols, 0.0);
        out.var.assign(cols, 0.0);
        const bool par = rows * cols > kParallelGrain;
#pragma omp parallel for schedule(static) if (par)
        for (std::ptrdiff_t j = 0; j < static_cast<std::ptrdiff_t>(cols); ++j) {
            double m = 0.0;
            for (std::size_t i = 0; i < rows; ++i) m += x(i, j);
            m /= static_cast<double>(rows);
            double v = 0.0;
            for (std::size_t i = 0; i < rows; ++i) {
                const double d = x(i, j) - m;
                v += d * d;
            }
            out.mean[j] = m;
            out.var[j] = v / static_cast<double>(rows);
        }
    } else {
        out.mean.assign(rows, 0.0);
        out.var.assign(rows, 0.0);
        const bool par = rows * cols > kParallelGrain;
#pragma omp parallel for schedule(static) if (par)
        for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(rows); ++i) {
            const double* r = x.row_ptr(i);
            double m = 0.0;
            for (std::size_t j = 0; j < cols; ++j) m += r[j];
            m /= static_cast<double>(cols);
            double v = 0.0;
            for (std::size_t j = 0; j < cols; ++j) {
                const double d = r[j] - m;
                v += d * d;
            }
            out.mean[i] = m;
            out.var[i] = v / static_cast<double>(cols);
        }
    }
    return out;
}

Moments group_moments(const Batch& x, std::size_t groups) {
    const std::size_t rows = x.rows(), cols = x.cols();
    if (rows == 0 || cols == 0) {
        throw std::invalid_argument("group_moments: empty batch");
    }
    if (groups < 1 || cols % groups != 0) {
        throw std::invalid_argument("group_moments: groups must divide the feature count");
    }
    const std::size_t gsize = cols / groups;
    Moments out;
    out.mean.assign(rows * groups, 0.0);
    out.var.assign(rows * groups, 0.0);
    const bool par = rows * cols > kParallelGrain;
#pragma omp parallel for schedule(static) if (par)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(rows); ++i) {
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
            out.mean[i * groups + g] = m;
            out.var[i * groups + g] = v / static_cast<double>(gsize);
        }
    }
    return out;
}

std::vector<int> argmax_rows(const Matrix& m) {
    std::vector<int> out(m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        const double* r = m.row_ptr(i);
        int best = 0;
        for (std::size_t j = 1; j < m.cols(); ++j) {
            if (r[j] > r[best]) best = static_cast<int>(j);
        }
        out[i] = best;
    }
    return out;
}

}  // namespace ttaforge
