#include "tta_forge/serial_ref.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace ttaforge::serial {

Matrix gemm(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw std::invalid_argument("serial::gemm: shape mismatch");
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t l = 0; l < a.cols(); ++l) {
            const double av = a(i, l);
            for (std::size_t j = 0; j < b.cols(); ++j) {
                c(i, j) += av * b(l, j);
            }
        }
    }
    return c;
}

Matrix gemm_at_b(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) throw std::invalid_argument("serial::gemm_at_b: shape mismatch");
    Matrix c(a.cols(), b.cols());
    for (std::size_t i = 0; i < a.cols(); ++i) {
        for (std::size_t l = 0; l < a.rows(); ++l) {
            const double av = a(l, i);
            for (std::size_t j = 0; j < b.cols(); ++j) {
                c(i, j) += av * b(l, j);
            }
        }
    }
    return c;
}

Matrix gemm_a_bt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) throw std::invalid_argument("serial::gemm_a_bt: shape mismatch");
    Matrix c(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.rows(); ++j) {
            double sum = 0.0;
            for (std::size_t l = 0; l < a.cols(); ++l) {
                sum += a(i, l) * b(j, l);
            }
            c(i, j) = sum;
        }
    }
    return c;
}

ProbMatrix softmax_with_temperature(const Logits& logits, double tau) {
    if (!(tau > 0.0) || !std::isfinite(tau)) {
        throw std::invalid_argument("serial::softmax_with_temperature: bad tau");
    }
    if (!logits.all_finite()) {
        throw std::invalid_argument("serial::softmax_with_temperature: non-finite logits");
    }
    ProbMatrix p(logits.rows(), logits.cols());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        double zmax = logits(i, 0);
        for (std::size_t j = 1; j < logits.cols(); ++j) zmax = std::max(zmax, logits(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < logits.cols(); ++j) {
            p(i, j) = std::exp((logits(i, j) - zmax) / tau);
            sum += p(i, j);
        }
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < logits.cols(); ++j) p(i, j) *= inv;
    }
    return p;
}

std::vector<double> shannon_entropy(const ProbMatrix& probs) {
    const double hmax = std::log(static_cast<double>(probs.cols()));
    std::vector<double> h(probs.rows());
    for (std::size_t i = 0; i < probs.rows(); ++i) {
        double sum = 0.0, acc = 0.0;
        for (std::size_t j = 0; j < probs.cols(); ++j) {
            const double v = probs(i, j);
            if (v < 0.0 || v > 1.0 || !std::isfinite(v)) {
                throw std::invalid_argument("serial::shannon_entropy: bad probability");
            }
            if (v > 0.0) acc -= v * std::log(v);
            sum += v;
        }
        if (std::abs(sum - 1.0) > 1e-6) {
            throw std::invalid_argument("serial::shannon_entropy: row not stochastic");
        }
        const double snap = hmax * static_cast<double>(probs.cols()) * 4.0 *
                            std::numeric_limits<double>::epsilon();
        h[i] = acc >= hmax - snap ? hmax : std::clamp(acc, 0.0, hmax);
    }
    return h;
}

Moments batch_moments(const Batch& x, MomentAxis axis) {
    if (x.rows() == 0 || x.cols() == 0) {
        throw std::invalid_argument("serial::batch_moments: empty batch");
    }
    Moments out;
    if (axis == MomentAxis::Feature) {
        out.mean.assign(x.cols(), 0.0);
        out.var.assign(x.cols(), 0.0);
        for (std::size_t j = 0; j < x.cols(); ++j) {
            double m = 0.0;
            for (std::size_t i = 0; i < x.rows(); ++i) m += x(i, j);
            m /= static_cast<double>(x.rows());
            double v = 0.0;
            for (std::size_t i = 0; i < x.rows(); ++i) {
                const double d = x(i, j) - m;
                v += d * d;
            }
            out.mean[j] = m;
            out.var[j] = v / static_cast<double>(x.rows());
        }
    } else {
        out.mean.assign(x.rows(), 0.0);
        out.var.assign(x.rows(), 0.0);
        for (std::size_t i = 0; i < x.rows(); ++i) {
            double m = 0.0;
            for (std::size_t j = 0; j < x.cols(); ++j) m += x(i, j);
            m /= static_cast<double>(x.cols());
            double v = 0.0;
            for (std::size_t j = 0; j < x.cols(); ++j) {
                const double d = x(i, j) - m;
                v += d * d;
            }
            out.mean[i] = m;
            out.var[i] = v / static_cast<double>(x.cols());
        }
    }
    return out;
}

}  // namespace ttaforge::serial
