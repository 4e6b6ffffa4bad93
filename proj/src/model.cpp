#include "tta_forge/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "tta_forge/numerics.hpp"

namespace ttaforge {

std::vector<std::size_t> ModelState::norm_layer_indices() const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (std::holds_alternative<NormalizationLayer>(layers[i])) idx.push_back(i);
    }
    return idx;
}

NormKind ModelState::norm_kind() const {
    for (const auto& l : layers) {
        if (const auto* n = std::get_if<NormalizationLayer>(&l)) return n->kind;
    }
    throw std::logic_error("ModelState::norm_kind: model has no normalization layer");
}

ModelState build_model(const ArchitectureSpec& arch, Rng& rng) {
    auto make_affine = [&](std::size_t in, std::size_t out) {
        AffineLayer a;
        const double stddev = std::sqrt(2.0 / static_cast<double>(in));
        a.w = Matrix(in, out, rng.normal_vector(in * out, stddev));
        a.b.assign(out, 0.0);
        return a;
    };
    ModelState m;
    m.input_dim = arch.input_dim;
    m.num_classes = arch.num_classes;
    m.layers.push_back(make_affine(arch.input_dim, arch.hidden_dim));
    m.layers.push_back(make_norm_layer(arch.norm, arch.hidden_dim, arch.groups, arch.eps));
    m.layers.push_back(ReluLayer{});
    m.layers.push_back(make_affine(arch.hidden_dim, arch.hidden_dim));
    m.layers.push_back(make_norm_layer(arch.norm, arch.hidden_dim, arch.groups, arch.eps));
    m.layers.push_back(ReluLayer{});
    m.layers.push_back(make_affine(arch.hidden_dim, arch.num_classes));
    return m;
}

void convert_batchnorm_to_renorm(ModelState& model, double r_max, double d_max, double momentum) {
    for (auto& l : model.layers) {
        if (auto* n = std::get_if<NormalizationLayer>(&l)) {
            if (n->kind == NormKind::BatchNorm) {
                n->kind = NormKind::BatchRenorm;
                n->r_max = r_max;
                n->d_max = d_max;
                n->momentum = momentum;
            }
        }
    }
}

std::pair<Logits, ForwardCache> forward(const ModelState& model, const Batch& x, StatsMode mode) {
    if (x.cols() != model.input_dim) {
        throw std::invalid_argument("forward: input width mismatch");
    }
    ForwardCache cache;
    cache.mode = mode;
    cache.batch_size = x.rows();
    cache.input_dim = model.input_dim;
    cache.num_classes = model.num_classes;
    cache.layers.reserve(model.layers.size());

    Matrix cur = x;
    for (const auto& layer : model.layers) {
        if (const auto* a = std::get_if<AffineLayer>(&layer)) {
            cache.layers.emplace_back(AffineCache{cur});
            Matrix next = gemm(cur, a->w);
            for (std::size_t i = 0; i < next.rows(); ++i) {
                double* row = next.row_ptr(i);
                for (std::size_t j = 0; j < next.cols(); ++j) row[j] += a->b[j];
            }
            cur = std::move(next);
        } else if (const auto* n = std::get_if<NormalizationLayer>(&layer)) {
            NormResult res = normalize(*n, cur, mode);
            cur = std::move(res.y);
            cache.layers.emplace_back(std::move(res.cache));
        } else {
            for (double& v : cur.data()) v = std::max(0.0, v);
            cache.layers.emplace_back(ReluCache{cur});
        }
    }
    cache.logits = cur;
    return {std::move(cur), std::move(cache)};
}

void apply_running_stat_updates(ModelState& model, const ForwardCache& cache,
                                RunningStatUpdate policy) {
    if (policy == RunningStatUpdate::None) return;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        auto* n = std::get_if<NormalizationLayer>(&model.layers[i]);
        if (!n) continue;
        if (policy == RunningStatUpdate::RenormOnly && n->kind != NormKind::BatchRenorm) continue;
        ema_update_running_stats(*n, std::get<NormCache>(cache.layers[i]));
    }
}

double Gradients::max_abs_norm_grad() const {
    double m = 0.0;
    for (const auto& g : layers) {
        if (const auto* ng = std::get_if<NormGrad>(&g)) {
            for (double v : ng->dgamma) m = std::max(m, std::abs(v));
            for (double v : ng->dbeta) m = std::max(m, std::abs(v));
        }
    }
    return m;
}

double weighted_selected_entropy_loss(const ProbMatrix& probs, const std::vector<double>& weights,
                                      const std::vector<bool>& mask) {
    std::size_t selected = 0;
    for (bool b : mask) selected += b;
    if (selected == 0) return 0.0;
    const std::vector<double> h = shannon_entropy(probs);
    double loss = 0.0;
    for (std::size_t i = 0; i < h.size(); ++i) {
        if (mask[i]) loss += weights[i] * h[i];
    }
    return loss / static_cast<double>(selected);
}

namespace {

void check_cache(const ModelState& model, const ForwardCache& cache) {
    if (cache.consumed) {
        throw std::logic_error("backward: cache already consumed");
    }
    if (cache.layers.size() != model.layers.size() || cache.input_dim != model.input_dim ||
        cache.num_classes != model.num_classes) {
        throw std::logic_error("backward: cache does not match model");
    }
}

// Shared reverse walk from dL/dlogits. Affine weight gradients are collected
// only when `collect_affine` (pretraining); adaptation needs just the
// normalization affine parameters.
Gradients backward_walk(const ModelState& model, const ForwardCache& cache, Matrix dcur,
                        bool collect_affine) {
    Gradients grads;
    grads.layers.assign(model.layers.size(), std::monostate{});
    for (std::size_t li = model.layers.size(); li-- > 0;) {
        const auto& layer = model.layers[li];
        if (const auto* a = std::get_if<AffineLayer>(&layer)) {
            const auto& ac = std::get<AffineCache>(cache.layers[li]);
            if (collect_affine) {
                AffineGrad ag;
                ag.dw = gemm_at_b(ac.input, dcur);
                ag.db.assign(a->b.size(), 0.0);
                for (std::size_t i = 0; i < dcur.rows(); ++i) {
                    const double* row = dcur.row_ptr(i);
                    for (std::size_t j = 0; j < dcur.cols(); ++j) ag.db[j] += row[j];
                }
                grads.layers[li] = std::move(ag);
            }
            if (li == 0) break;  // no upstream layers left
            dcur = gemm_a_bt(dcur, a->w);
        } else if (const auto* n = std::get_if<NormalizationLayer>(&layer)) {
            NormBackwardResult nb =
                norm_backward(*n, std::get<NormCache>(cache.layers[li]), dcur);
            grads.layers[li] = NormGrad{std::move(nb.dgamma), std::move(nb.dbeta)};
            dcur = std::move(nb.dx);
        } else {
            const auto& rc = std::get<ReluCache>(cache.layers[li]);
            for (std::size_t i = 0; i < dcur.rows(); ++i) {
                for (std::size_t j = 0; j < dcur.cols(); ++j) {
                    if (rc.output(i, j) <= 0.0) dcur(i, j) = 0.0;
                }
            }
        }
    }
    return grads;
}

Gradients zero_gradients(const ModelState& model, bool with_affine) {
    Gradients grads;
    grads.layers.assign(model.layers.size(), std::monostate{});
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        if (const auto* n = std::get_if<NormalizationLayer>(&model.layers[i])) {
            grads.layers[i] = NormGrad{std::vector<double>(n->features(), 0.0),
                                       std::vector<double>(n->features(), 0.0)};
        } else if (with_affine) {
            if (const auto* a = std::get_if<AffineLayer>(&model.layers[i])) {
                grads.layers[i] =
                    AffineGrad{Matrix(a->w.rows(), a->w.cols()), std::vector<double>(a->b.size(), 0.0)};
            }
        }
    }
    return grads;
}

}  // namespace

Gradients backward_entropy(const ModelState& model, ForwardCache& cache, const ProbMatrix& probs,
                           double tau, const std::vector<double>& sample_weights,
                           const std::vector<bool>& selection_mask) {
    check_cache(model, cache);
    if (probs.rows() != cache.batch_size || selection_mask.size() != cache.batch_size ||
        sample_weights.size() != cache.batch_size) {
        throw std::logic_error("backward_entropy: batch size mismatch with cache");
    }
    cache.consumed = true;

    std::size_t selected = 0;
    for (bool b : selection_mask) selected += b;
    if (selected == 0) {
        return zero_gradients(model, false);
    }

    // dL/dz_ij = c_i * (-p_ij (ln p_ij + H_i)) / tau, c_i = w_i / |S| for
    // selected samples, 0 otherwise.
    const std::size_t rows = probs.rows(), cols = probs.cols();
    Matrix dlogits(rows, cols);
    for (std::size_t i = 0; i < rows; ++i) {
        if (!selection_mask[i]) continue;
        const double* p = probs.row_ptr(i);
        double h = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            if (p[j] > 0.0) h -= p[j] * std::log(p[j]);
        }
        const double c = sample_weights[i] / static_cast<double>(selected);
        double* out = dlogits.row_ptr(i);
        for (std::size_t j = 0; j < cols; ++j) {
            out[j] = p[j] > 0.0 ? -c * p[j] * (std::log(p[j]) + h) / tau : 0.0;
        }
    }
    return backward_walk(model, cache, std::move(dlogits), false);
}

Gradients backward_cross_entropy(const ModelState& model, ForwardCache& cache,
                                 const ProbMatrix& probs, const std::vector<int>& labels) {
    check_cache(model, cache);
    if (labels.size() != cache.batch_size) {
        throw std::logic_error("backward_cross_entropy: label count mismatch");
    }
    cache.consumed = true;
    const double invb = 1.0 / static_cast<double>(probs.rows());
    Matrix dlogits(probs.rows(), probs.cols());
    for (std::size_t i = 0; i < probs.rows(); ++i) {
        for (std::size_t j = 0; j < probs.cols(); ++j) {
            const double onehot = static_cast<int>(j) == labels[i] ? 1.0 : 0.0;
            dlogits(i, j) = (probs(i, j) - onehot) * invb;
        }
    }
    return backward_walk(model, cache, std::move(dlogits), true);
}

ModelState sgd_step(const ModelState& model, const Gradients& grads, double lr) {
    if (!(lr > 0.0) && lr != 0.0) {
        throw std::invalid_argument("sgd_step: learning rate must be non-negative");
    }
    ModelState out = model;
    for (std::size_t i = 0; i < out.layers.size(); ++i) {
        auto* n = std::get_if<NormalizationLayer>(&out.layers[i]);
        if (!n) continue;
        const auto* g = std::get_if<NormGrad>(&grads.layers[i]);
        if (!g) continue;
        for (std::size_t j = 0; j < n->features(); ++j) {
            n->gamma[j] -= lr * g->dgamma[j];
            n->beta[j] -= lr * g->dbeta[j];
        }
    }
    return out;
}

void sgd_step_all_parameters(ModelState& model, const Gradients& grads, double lr) {
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        if (auto* a = std::get_if<AffineLayer>(&model.layers[i])) {
            if (const auto* g = std::get_if<AffineGrad>(&grads.layers[i])) {
                for (std::size_t k = 0; k < a->w.size(); ++k) {
                    a->w.data()[k] -= lr * g->dw.data()[k];
                }
                for (std::size_t k = 0; k < a->b.size(); ++k) a->b[k] -= lr * g->db[k];
            }
        } else if (auto* n = std::get_if<NormalizationLayer>(&model.layers[i])) {
            if (const auto* g = std::get_if<NormGrad>(&grads.layers[i])) {
                for (std::size_t j = 0; j < n->features(); ++j) {
                    n->gamma[j] -= lr * g->dgamma[j];
                    n->beta[j] -= lr * g->dbeta[j];
                }
            }
        }
    }
}

double evaluate_accuracy(const ModelState& model, const LabeledDataset& data) {
    const std::size_t n = data.size();
    if (n == 0) return 0.0;
    std::size_t correct = 0;
    constexpr std::size_t kChunk = 256;
    for (std::size_t start = 0; start < n; start += kChunk) {
        const std::size_t count = std::min(kChunk, n - start);
        Matrix chunk(count, data.dim());
        for (std::size_t i = 0; i < count; ++i) {
            for (std::size_t j = 0; j < data.dim(); ++j) {
                chunk(i, j) = data.features(start + i, j);
            }
        }
        const std::vector<int> pred =
            argmax_rows(forward(model, chunk, StatsMode::FrozenStats).first);
        for (std::size_t i = 0; i < count; ++i) {
            if (pred[i] == data.labels[start + i]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(n);
}

PretrainResult pretrain(const LabeledDataset& source, const ArchitectureSpec& arch,
                        const PretrainConfig& cfg) {
    const std::size_t n = source.size();
    if (n == 0) throw std::invalid_argument("pretrain: empty dataset");
    {
        std::vector<bool> seen(arch.num_classes, false);
        std::size_t distinct = 0;
        for (int y : source.labels) {
            if (y < 0 || static_cast<std::size_t>(y) >= arch.num_classes) {
                throw std::invalid_argument("pretrain: label out of range");
            }
            if (!seen[y]) {
                seen[y] = true;
                ++distinct;
            }
        }
        if (distinct < 2) {
            throw std::invalid_argument("pretrain: dataset must contain at least 2 classes");
        }
    }

    Rng root(cfg.seed);
    Rng init_rng = root.fork("init");
    Rng split_rng = root.fork("split");
    Rng epoch_rng = root.fork("epochs");

    ModelState model = build_model(arch, init_rng);

    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    split_rng.shuffle(idx);
    const std::size_t val_count =
        std::min<std::size_t>(n - 1, static_cast<std::size_t>(std::llround(cfg.val_fraction * n)));
    std::vector<std::size_t> val_idx(idx.begin(), idx.begin() + val_count);
    std::vector<std::size_t> train_idx(idx.begin() + val_count, idx.end());

    auto gather = [&](const std::vector<std::size_t>& which, std::size_t start, std::size_t count) {
        Matrix xb(count, source.dim());
        std::vector<int> yb(count);
        for (std::size_t i = 0; i < count; ++i) {
            const std::size_t s = which[start + i];
            for (std::size_t j = 0; j < source.dim(); ++j) xb(i, j) = source.features(s, j);
            yb[i] = source.labels[s];
        }
        return std::make_pair(std::move(xb), std::move(yb));
    };

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        epoch_rng.shuffle(train_idx);
        for (std::size_t start = 0; start < train_idx.size(); start += cfg.batch_size) {
            const std::size_t count = std::min(cfg.batch_size, train_idx.size() - start);
            auto [xb, yb] = gather(train_idx, start, count);
            auto [logits, cache] = forward(model, xb, StatsMode::TrainStats);
            const ProbMatrix probs = softmax_with_temperature(logits, 1.0);
            const Gradients grads = backward_cross_entropy(model, cache, probs, yb);
            sgd_step_all_parameters(model, grads, cfg.lr);
            apply_running_stat_updates(model, cache, RunningStatUpdate::All);
        }
    }

    LabeledDataset val;
    if (val_count > 0) {
        auto [xv, yv] = gather(val_idx, 0, val_count);
        val = LabeledDataset{std::move(xv), std::move(yv), arch.num_classes};
    } else {
        val = source;
    }
    const double val_acc = evaluate_accuracy(model, val);
    return PretrainResult{std::move(model), val_acc};
}

// ---------------------------------------------------------------------------
// Checkpoint I/O (format reference: docs/formats.md)

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr int kFormatVersion = 1;

ordered_json layer_to_json(const Layer& layer) {
    ordered_json j;
    if (const auto* a = std::get_if<AffineLayer>(&layer)) {
        j["type"] = "affine";
        j["in"] = a->w.rows();
        j["out"] = a->w.cols();
        j["w"] = a->w.data();
        j["b"] = a->b;
    } else if (const auto* n = std::get_if<NormalizationLayer>(&layer)) {
        j["type"] = "norm";
        j["kind"] = norm_kind_name(n->kind);
        j["gamma"] = n->gamma;
        j["beta"] = n->beta;
        j["running_mean"] = n->running_mean;
        j["running_var"] = n->running_var;
        j["eps"] = n->eps;
        j["momentum"] = n->momentum;
        j["r_max"] = n->r_max;
        j["d_max"] = n->d_max;
        j["groups"] = n->groups;
    } else {
        j["type"] = "relu";
    }
    return j;
}

Layer layer_from_json(const ordered_json& j) {
    const std::string type = j.at("type").get<std::string>();
    if (type == "affine") {
        AffineLayer a;
        const auto rows = j.at("in").get<std::size_t>();
        const auto cols = j.at("out").get<std::size_t>();
        a.w = Matrix(rows, cols, j.at("w").get<std::vector<double>>());
        a.b = j.at("b").get<std::vector<double>>();
        if (a.b.size() != cols) throw CheckpointError("checkpoint: bias width mismatch");
        return a;
    }
    if (type == "norm") {
        NormalizationLayer n;
        n.kind = norm_kind_from_name(j.at("kind").get<std::string>());
        n.gamma = j.at("gamma").get<std::vector<double>>();
        n.beta = j.at("beta").get<std::vector<double>>();
        n.running_mean = j.at("running_mean").get<std::vector<double>>();
        n.running_var = j.at("running_var").get<std::vector<double>>();
        n.eps = j.at("eps").get<double>();
        n.momentum = j.at("momentum").get<double>();
        n.r_max = j.at("r_max").get<double>();
        n.d_max = j.at("d_max").get<double>();
        n.groups = j.at("groups").get<std::size_t>();
        const std::size_t f = n.gamma.size();
        if (n.beta.size() != f || n.running_mean.size() != f || n.running_var.size() != f) {
            throw CheckpointError("checkpoint: normalization vector length mismatch");
        }
        for (double v : n.running_var) {
            if (v < 0.0) throw CheckpointError("checkpoint: negative running variance");
        }
        return n;
    }
    if (type == "relu") return ReluLayer{};
    throw CheckpointError("checkpoint: unknown layer type '" + type + "'");
}

}  // namespace

std::string checkpoint_to_json(const ModelState& model) {
    ordered_json j;
    j["format_version"] = kFormatVersion;
    ordered_json arch;
    arch["input_dim"] = model.input_dim;
    arch["num_classes"] = model.num_classes;
    arch["norm_kind"] = norm_kind_name(model.norm_kind());
    j["architecture"] = arch;
    ordered_json layers = ordered_json::array();
    for (const auto& l : model.layers) layers.push_back(layer_to_json(l));
    j["layers"] = layers;
    return j.dump(2) + "\n";
}

ModelState checkpoint_from_json(const std::string& text) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint: parse failure: ") + e.what());
    }
    try {
        const int version = j.at("format_version").get<int>();
        if (version != kFormatVersion) {
            throw CheckpointError("checkpoint: unsupported format_version " +
                                  std::to_string(version));
        }
        ModelState m;
        m.input_dim = j.at("architecture").at("input_dim").get<std::size_t>();
        m.num_classes = j.at("architecture").at("num_classes").get<std::size_t>();
        for (const auto& lj : j.at("layers")) m.layers.push_back(layer_from_json(lj));
        if (m.layers.empty()) throw CheckpointError("checkpoint: no layers");
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint: malformed document: ") + e.what());
    }
}

void save_checkpoint(const ModelState& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("checkpoint: cannot open '" + path + "' for writing");
    out << checkpoint_to_json(model);
    if (!out) throw CheckpointError("checkpoint: write failure on '" + path + "'");
}

ModelState load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("checkpoint: cannot open '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return checkpoint_from_json(buf.str());
}

namespace {

bool norm_equal(const NormalizationLayer& a, const NormalizationLayer& b, bool with_stats) {
    if (a.kind != b.kind || a.gamma != b.gamma || a.beta != b.beta) return false;
    if (a.eps != b.eps || a.groups != b.groups) return false;
    if (with_stats) {
        if (a.running_mean != b.running_mean || a.running_var != b.running_var) return false;
        if (a.momentum != b.momentum || a.r_max != b.r_max || a.d_max != b.d_max) return false;
    }
    return true;
}

bool layers_equal(const ModelState& a, const ModelState& b, bool with_stats) {
    if (a.input_dim != b.input_dim || a.num_classes != b.num_classes) return false;
    if (a.layers.size() != b.layers.size()) return false;
    for (std::size_t i = 0; i < a.layers.size(); ++i) {
        if (a.layers[i].index() != b.layers[i].index()) return false;
        if (const auto* aa = std::get_if<AffineLayer>(&a.layers[i])) {
            const auto& bb = std::get<AffineLayer>(b.layers[i]);
            if (!(aa->w == bb.w) || aa->b != bb.b) return false;
        } else if (const auto* an = std::get_if<NormalizationLayer>(&a.layers[i])) {
            if (!norm_equal(*an, std::get<NormalizationLayer>(b.layers[i]), with_stats)) {
                return false;
            }
        }
    }
    return true;
}

}  // namespace

bool models_equal(const ModelState& a, const ModelState& b) { return layers_equal(a, b, true); }

bool parameters_equal(const ModelState& a, const ModelState& b) {
    return layers_equal(a, b, false);
}

}  // namespace ttaforge
