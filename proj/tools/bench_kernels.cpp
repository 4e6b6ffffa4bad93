// Timing comparison between the OpenMP kernels and the serial reference.
// Run: bench_kernels [size] [reps]

#include <cstdio>
#include <cstdlib>
#include <omp.h>

#include "tta_forge/matrix.hpp"
#include "tta_forge/numerics.hpp"
#include "tta_forge/rng.hpp"
#include "tta_forge/serial_ref.hpp"

using namespace ttaforge;

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
    return Matrix(rows, cols, rng.normal_vector(rows * cols));
}

template <typename F>
double time_best_of(F&& fn, int reps) {
    double best = 1e300;
    for (int r = 0; r < reps; ++r) {
        const double t0 = omp_get_wtime();
        fn();
        const double t1 = omp_get_wtime();
        if (t1 - t0 < best) best = t1 - t0;
    }
    return best;
}

void report(const char* name, double serial_s, double parallel_s) {
    std::printf("%-18s serial %9.3f ms   omp %9.3f ms   speedup %5.2fx\n", name,
                1e3 * serial_s, 1e3 * parallel_s, serial_s / parallel_s);
}

}  // namespace

int main(int argc, char** argv) {
    const std::size_t n = argc > 1 ? std::strtoul(argv[1], nullptr, 10) : 512;
    const int reps = argc > 2 ? std::atoi(argv[2]) : 5;
    std::printf("threads=%d size=%zu reps=%d\n", omp_get_max_threads(), n, reps);

    Rng rng(42);
    const Matrix a = random_matrix(n, n, rng);
    const Matrix b = random_matrix(n, n, rng);

    Matrix out;
    report(
        "gemm", time_best_of([&] { out = serial::gemm(a, b); }, reps),
        time_best_of([&] { out = gemm(a, b); }, reps));
    report(
        "gemm_at_b", time_best_of([&] { out = serial::gemm_at_b(a, b); }, reps),
        time_best_of([&] { out = gemm_at_b(a, b); }, reps));
    report(
        "gemm_a_bt", time_best_of([&] { out = serial::gemm_a_bt(a, b); }, reps),
        time_best_of([&] { out = gemm_a_bt(a, b); }, reps));

    const Matrix logits = random_matrix(64 * n, 64, rng);
    ProbMatrix probs;
    report(
        "softmax",
        time_best_of([&] { probs = serial::softmax_with_temperature(logits, 1.2); }, reps),
        time_best_of([&] { probs = softmax_with_temperature(logits, 1.2); }, reps));

    std::vector<double> h;
    report(
        "entropy", time_best_of([&] { h = serial::shannon_entropy(probs); }, reps),
        time_best_of([&] { h = shannon_entropy(probs); }, reps));

    Moments m;
    report(
        "batch_moments",
        time_best_of([&] { m = serial::batch_moments(logits, MomentAxis::Feature); }, reps),
        time_best_of([&] { m = batch_moments(logits, MomentAxis::Feature); }, reps));

    return 0;
}
