#include "tta_forge/adapt.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "tta_forge/numerics.hpp"

namespace ttaforge {

ClassFrequencyState ClassFrequencyState::uniform(std::size_t k, double lambda,
                                                 std::size_t buffer_n) {
    ClassFrequencyState s;
    s.z.assign(k, 1.0 / static_cast<double>(k));
    s.lambda = lambda;
    s.capacity = buffer_n >= 2 ? buffer_n - 1 : 0;
    return s;
}

double entropy_threshold(double entropy_factor, std::size_t num_classes) {
    if (num_classes < 2) {
        throw std::invalid_argument("entropy_threshold: need at least 2 classes");
    }
    if (entropy_factor < 0.0 || entropy_factor > 1.0) {
        throw std::invalid_argument("entropy_threshold: factor must be in [0,1]");
    }
    return entropy_factor * std::log(static_cast<double>(num_classes));
}

std::vector<bool> select_samples(const std::vector<double>& entropies, double e0) {
    std::vector<bool> mask(entropies.size());
    for (std::size_t i = 0; i < entropies.size(); ++i) {
        mask[i] = entropies[i] < e0;
    }
    return mask;
}

void update_class_frequency(ClassFrequencyState& state, const ProbMatrix& probs) {
    if (probs.cols() != state.z.size()) {
        throw std::invalid_argument("update_class_frequency: class count mismatch");
    }
    const std::size_t k = state.z.size();
    const double invb = 1.0 / static_cast<double>(probs.rows());
    std::vector<double> mean(k, 0.0);
    for (std::size_t i = 0; i < probs.rows(); ++i) {
        const double* row = probs.row_ptr(i);
        for (std::size_t j = 0; j < k; ++j) mean[j] += row[j];
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
        state.z[j] = state.lambda * state.z[j] + (1.0 - state.lambda) * mean[j] * invb;
        sum += state.z[j];
    }
    // keep z a probability vector against accumulated rounding drift
    for (std::size_t j = 0; j < k; ++j) state.z[j] /= sum;
}

std::vector<double> dot_weights(const ProbMatrix& probs, const std::vector<double>& z,
                                double eps_w) {
    if (probs.cols() != z.size()) {
        throw std::invalid_argument("dot_weights: class count mismatch");
    }
    const std::vector<int> pseudo = argmax_rows(probs);
    std::vector<double> raw(probs.rows());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        raw[i] = 1.0 / (z[pseudo[i]] + eps_w);
    }
    return raw;
}

std::vector<double> normalize_weights(const std::vector<double>& raw) {
    const double sum = std::accumulate(raw.begin(), raw.end(), 0.0);
    const double b = static_cast<double>(raw.size());
    std::vector<double> out(raw.size());
    // (raw*B)/sum rather than raw*(B/sum): x/x divides out exactly, so a
    // batch of one gets weight 1.0 and equal raws map to exact ones
    for (std::size_t i = 0; i < raw.size(); ++i) out[i] = raw[i] * b / sum;
    return out;
}

double buffered_single_weight(double raw, ClassFrequencyState& state) {
    if (state.capacity == 0) {
        throw std::logic_error("buffered_single_weight: buffer disabled (N=1)");
    }
    double sum = raw;
    for (double v : state.buffer) sum += v;
    const double count = static_cast<double>(state.buffer.size() + 1);
    const double weight = raw * count / sum;
    state.buffer.push_back(raw);
    if (state.buffer.size() > state.capacity) state.buffer.pop_front();
    return weight;
}

StepReport adapt_step(ModelState& model, const Batch& batch, const AdaptConfig& cfg,
                      ClassFrequencyState& freq_state) {
    const std::size_t b = batch.rows();
    const std::size_t k = model.num_classes;

    auto [logits, cache] = forward(model, batch, StatsMode::TrainStats);
    const double tau = cfg.temperature ? cfg.tau : 1.0;
    const ProbMatrix probs = softmax_with_temperature(logits, tau);

    StepReport report;
    report.predictions = argmax_rows(probs);
    report.entropies = shannon_entropy(probs);

    if (cfg.sample_selection) {
        report.selection_mask =
            select_samples(report.entropies, entropy_threshold(cfg.entropy_factor, k));
    } else {
        report.selection_mask.assign(b, true);
    }

    if (cfg.class_rebalance) {
        const std::vector<double> raw = dot_weights(probs, freq_state.z, cfg.weight_floor);
        if (b == 1 && cfg.buffer_size >= 2) {
            report.weights = {buffered_single_weight(raw[0], freq_state)};
        } else {
            report.weights = normalize_weights(raw);
        }
    } else {
        report.weights.assign(b, 1.0);
    }

    // z tracks every sample seen, independently of selection
    update_class_frequency(freq_state, probs);

    report.selected = static_cast<std::size_t>(
        std::count(report.selection_mask.begin(), report.selection_mask.end(), true));
    report.loss = weighted_selected_entropy_loss(probs, report.weights, report.selection_mask);

    // Running statistics refresh before the parameter update; BatchRenorm
    // only — plain BatchNorm adapts on current-batch statistics alone.
    apply_running_stat_updates(model, cache, RunningStatUpdate::RenormOnly);

    if (report.selected > 0) {
        const Gradients grads =
            backward_entropy(model, cache, probs, tau, report.weights, report.selection_mask);
        model = sgd_step(model, grads, cfg.lr);
    }
    return report;
}

double default_entropy_factor(NormKind kind, std::size_t batch_size) {
    // Circled per-backbone optima; rows are batch-size buckets 16/8/4/2/1.
    struct Row {
        std::size_t bs;
        double bn, gn, ln;
    };
    static constexpr Row kTable[] = {
        {16, 0.4, 0.2, 0.3}, {8, 0.3, 0.2, 0.3}, {4, 0.6, 0.2, 0.3},
        {2, 0.7, 0.2, 0.3},  {1, 1.0, 0.3, 0.4},
    };
    Row row = kTable[4];  // bs=1 bucket
    for (const Row& r : kTable) {
        if (batch_size >= r.bs) {
            row = r;
            break;
        }
    }
    switch (kind) {
        case NormKind::BatchNorm:
        case NormKind::BatchRenorm:
            return row.bn;
        case NormKind::GroupNorm:
            return row.gn;
        case NormKind::LayerNorm:
            return row.ln;
    }
    throw std::invalid_argument("default_entropy_factor: unknown norm kind");
}

}  // namespace ttaforge
