#pragma once

#include <vector>

#include "tta_forge/matrix.hpp"
#include "tta_forge/numerics.hpp"

namespace ttaforge::serial {

// Plain-loop reference implementations of the parallel kernels. Kept for the
// equivalence tests and the kernel benchmark; not used on the product path.

Matrix gemm(const Matrix& a, const Matrix& b);
Matrix gemm_at_b(const Matrix& a, const Matrix& b);
Matrix gemm_a_bt(const Matrix& a, const Matrix& b);
ProbMatrix softmax_with_temperature(const Logits& logits, double tau);
std::vector<double> shannon_entropy(const ProbMatrix& probs);
Moments batch_moments(const Batch& x, MomentAxis axis);

}  // namespace ttaforge::serial
