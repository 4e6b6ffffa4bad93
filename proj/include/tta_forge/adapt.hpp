#pragma once

#include <cstddef>
#include <deque>
#include <vector>

#include "tta_forge/matrix.hpp"
#include "tta_forge/model.hpp"

namespace ttaforge {

struct AdaptConfig {
    double lr = 0.01;
    double entropy_factor = 0.4;  // F in [0,1]; threshold E0 = F ln K
    double tau = 1.2;             // temperature used when `temperature` is on
    bool class_rebalance = false;
    bool sample_selection = false;
    bool temperature = false;
    bool batch_renorm = false;
    std::size_t buffer_size = 1;  // N; 1 disables the single-sample buffer
    double z_momentum = 0.95;     // lambda
    double weight_floor = 1e-8;   // eps_w in w = 1/(z_y + eps_w)
    // BatchRenorm parameters applied when batch_renorm converts a BN backbone.
    double bren_r_max = 3.0;
    double bren_d_max = 5.0;
    double bren_momentum = 0.01;
};

// Momentum estimate of the online class frequencies plus the raw-weight
// buffer for the batch-size-1 path.
struct ClassFrequencyState {
    std::vector<double> z;  // probability vector, length K
    double lambda = 0.95;
    std::deque<double> buffer;    // at most capacity entries
    std::size_t capacity = 0;     // N - 1

    static ClassFrequencyState uniform(std::size_t k, double lambda, std::size_t buffer_n);
};

struct StepReport {
    std::vector<int> predictions;  // argmax labels from the pre-update forward
    std::vector<double> entropies;
    std::vector<bool> selection_mask;
    std::vector<double> weights;  // final per-sample weights
    double loss = 0.0;
    std::size_t selected = 0;
};

// E0 = F ln K. Throws std::invalid_argument for K < 2 or F outside [0,1].
double entropy_threshold(double entropy_factor, std::size_t num_classes);

// mask_i = entropies_i < e0 (strict).
std::vector<bool> select_samples(const std::vector<double>& entropies, double e0);

// z' = lambda z + (1-lambda) mean_rows(probs), renormalized to sum 1.
// Throws std::invalid_argument on a width mismatch.
void update_class_frequency(ClassFrequencyState& state, const ProbMatrix& probs);

// Raw DOT weight per sample: w_i = 1 / (z_{yhat_i} + eps_w) with yhat the
// pseudo label (row argmax, ties to the lowest class index).
std::vector<double> dot_weights(const ProbMatrix& probs, const std::vector<double>& z,
                                double eps_w);

// w~_i = raw_i * B / sum(raw); the output always averages to exactly 1.
std::vector<double> normalize_weights(const std::vector<double>& raw);

// Batch-size-1 weight as if the sample were part of a batch of size N: it is
// normalized against the N-1 most recent raw weights, then pushed into the
// buffer. While the buffer is filling, normalization runs over the values
// available so far. Throws std::logic_error when the buffer is disabled
// (N = 1); callers must use normalize_weights in that case.
double buffered_single_weight(double raw, ClassFrequencyState& state);

// One online step: forward, predict, select, weight, entropy-backprop,
// update. Predictions are recorded from the forward pass that precedes the
// parameter update. With every trick off and tau = 1 this is exactly Tent.
StepReport adapt_step(ModelState& model, const Batch& batch, const AdaptConfig& cfg,
                      ClassFrequencyState& freq_state);

// Per-backbone default entropy factor (the circled optima per batch size):
// batch sizes off the {16,8,4,2,1} grid use the nearest bucket below.
double default_entropy_factor(NormKind kind, std::size_t batch_size);

}  // namespace ttaforge
