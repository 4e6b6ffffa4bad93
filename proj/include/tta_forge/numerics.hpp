#pragma once

#include <vector>

#include "tta_forge/matrix.hpp"

namespace ttaforge {

// Dense kernels used by the model and adaptation loop. The hot loops are
// OpenMP-parallel over independent output elements; each element accumulates
// serially in the same order as the serial reference in serial_ref.hpp, so
// results are bitwise identical to the reference for any thread count.

// c = a * b, (m x k) * (k x n) -> (m x n)
Matrix gemm(const Matrix& a, const Matrix& b);

// c = a^T * b, (m x k)^T * (m x n) -> (k x n)
Matrix gemm_at_b(const Matrix& a, const Matrix& b);

// c = a * b^T, (m x k) * (n x k)^T -> (m x n)
Matrix gemm_a_bt(const Matrix& a, const Matrix& b);

// softmax_tau(z)_ij = exp(z_ij / tau) / sum_k exp(z_ik / tau),
// computed with per-row max subtraction.
// Throws std::invalid_argument on tau <= 0 or non-finite logits.
ProbMatrix softmax_with_temperature(const Logits& logits, double tau);

// Per-row Shannon entropy in nats, -sum_j p_j ln p_j with 0 ln 0 := 0,
// clamped to the mathematical range [0, ln K].
// Throws std::invalid_argument when a row is not stochastic within 1e-6.
std::vector<double> shannon_entropy(const ProbMatrix& probs);

enum class MomentAxis {
    Feature,  // statistics per column, across the batch dimension
    Sample,   // statistics per row, across all features
};

struct Moments {
    std::vector<double> mean;
    std::vector<double> var;  // biased: divide by count
};

// Per-feature or per-sample mean and biased variance.
// Throws std::invalid_argument on an empty batch.
Moments batch_moments(const Batch& x, MomentAxis axis);

// Per-(sample, group) moments; features are split into `groups` contiguous
// groups. Output is row-major (rows x groups).
// Throws std::invalid_argument unless groups >= 1 and groups divides cols.
Moments group_moments(const Batch& x, std::size_t groups);

// Per-row argmax; ties broken by lowest column index.
std::vector<int> argmax_rows(const Matrix& m);

}  // namespace ttaforge
