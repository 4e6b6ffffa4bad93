#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "tta_forge/dataset.hpp"
#include "tta_forge/matrix.hpp"
#include "tta_forge/norm.hpp"
#include "tta_forge/rng.hpp"

namespace ttaforge {

struct AffineLayer {
    Matrix w;               // in x out
    std::vector<double> b;  // out
};

struct ReluLayer {};

using Layer = std::variant<AffineLayer, NormalizationLayer, ReluLayer>;

// Feed-forward classifier: input -> affine -> norm -> relu -> affine -> norm
// -> relu -> affine(K). Value type; an adaptation run mutates its own copy.
// Only normalization gamma/beta are adaptable; everything else stays frozen
// after pretraining.
struct ModelState {
    std::vector<Layer> layers;
    std::size_t input_dim = 0;
    std::size_t num_classes = 0;

    std::vector<std::size_t> norm_layer_indices() const;
    NormKind norm_kind() const;  // kind of the first normalization layer
};

struct ArchitectureSpec {
    std::size_t input_dim = 16;
    std::size_t hidden_dim = 64;
    std::size_t num_classes = 10;
    NormKind norm = NormKind::BatchNorm;
    std::size_t groups = 8;  // GroupNorm only
    double eps = 1e-5;
};

// He-normal affine init, gamma=1 / beta=0, running stats (0, 1).
ModelState build_model(const ArchitectureSpec& arch, Rng& rng);

// Reinterpret BatchNorm layers as BatchRenorm for test-time adaptation; the
// pretrained parameters and running statistics carry over unchanged.
// No-op for per-sample normalization kinds.
void convert_batchnorm_to_renorm(ModelState& model, double r_max, double d_max, double momentum);

struct AffineCache {
    Matrix input;
};
struct ReluCache {
    Matrix output;
};
using LayerCache = std::variant<AffineCache, NormCache, ReluCache>;

struct ForwardCache {
    std::vector<LayerCache> layers;
    Logits logits;
    StatsMode mode = StatsMode::TrainStats;
    std::size_t batch_size = 0;
    std::size_t input_dim = 0;
    std::size_t num_classes = 0;
    bool consumed = false;
};

// Deterministic forward pass; the cache is sufficient for one backward call.
// Throws std::invalid_argument on an input width mismatch.
std::pair<Logits, ForwardCache> forward(const ModelState& model, const Batch& x, StatsMode mode);

// Which running statistics to refresh after a TrainStats forward.
//   All        — pretraining: every batch-statistic layer tracks the EMA.
//   RenormOnly — adaptation: only BatchRenorm layers update (test-time
//                renormalization); plain BatchNorm keeps using batch stats.
enum class RunningStatUpdate { None, All, RenormOnly };

void apply_running_stat_updates(ModelState& model, const ForwardCache& cache,
                                RunningStatUpdate policy);

struct AffineGrad {
    Matrix dw;
    std::vector<double> db;
};
struct NormGrad {
    std::vector<double> dgamma;
    std::vector<double> dbeta;
};
using LayerGrad = std::variant<std::monostate, AffineGrad, NormGrad>;

struct Gradients {
    std::vector<LayerGrad> layers;  // aligned with ModelState::layers

    double max_abs_norm_grad() const;
};

// L = (1/|S|) * sum_{i in S} w_i * H(p_i); returns 0 on an empty selection.
double weighted_selected_entropy_loss(const ProbMatrix& probs, const std::vector<double>& weights,
                                      const std::vector<bool>& mask);

// Gradients of the weighted, selected, temperature-scaled entropy loss with
// respect to every normalization gamma/beta. Unselected samples contribute
// exactly zero; an empty selection yields all-zero gradients. Weights and the
// mask are constants of the loss. Consumes the cache.
// Throws std::logic_error on a cache/model mismatch or a reused cache.
Gradients backward_entropy(const ModelState& model, ForwardCache& cache, const ProbMatrix& probs,
                           double tau, const std::vector<double>& sample_weights,
                           const std::vector<bool>& selection_mask);

// Cross-entropy gradients for every parameter (pretraining path).
Gradients backward_cross_entropy(const ModelState& model, ForwardCache& cache,
                                 const ProbMatrix& probs, const std::vector<int>& labels);

// theta <- theta - lr * g for normalization gamma/beta only; every other
// parameter is bit-identical afterwards.
ModelState sgd_step(const ModelState& model, const Gradients& grads, double lr);

// Pretraining update over all parameters (affine weights included).
void sgd_step_all_parameters(ModelState& model, const Gradients& grads, double lr);

struct PretrainConfig {
    double lr = 0.05;
    std::size_t epochs = 40;
    std::size_t batch_size = 64;
    double val_fraction = 0.2;
    std::uint64_t seed = 0;
};

struct PretrainResult {
    ModelState model;
    double val_accuracy = 0.0;
};

// Cross-entropy source training with the architecture's normalization kind in
// TrainStats mode; running statistics are tracked and frozen into the result.
// Throws std::invalid_argument on a degenerate (single-class) dataset.
PretrainResult pretrain(const LabeledDataset& source, const ArchitectureSpec& arch,
                        const PretrainConfig& cfg);

// Classification accuracy with frozen statistics (inference mode).
double evaluate_accuracy(const ModelState& model, const LabeledDataset& data);

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Versioned JSON checkpoint; save -> load -> save is byte-identical.
// Field reference: docs/formats.md.
void save_checkpoint(const ModelState& model, const std::string& path);
ModelState load_checkpoint(const std::string& path);
std::string checkpoint_to_json(const ModelState& model);
ModelState checkpoint_from_json(const std::string& text);

bool models_equal(const ModelState& a, const ModelState& b);
bool parameters_equal(const ModelState& a, const ModelState& b);  // ignores running stats

}  // namespace ttaforge
