#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "support/oracles.hpp"
#include "support/reference_model.hpp"
#include "tta_forge/model.hpp"
#include "tta_forge/numerics.hpp"
#include "tta_forge/stream.hpp"

using namespace ttaforge;

namespace {

ModelState small_model(NormKind kind, std::uint64_t seed, std::size_t input = 6,
                       std::size_t hidden = 16, std::size_t classes = 5) {
    ArchitectureSpec arch;
    arch.input_dim = input;
    arch.hidden_dim = hidden;
    arch.num_classes = classes;
    arch.norm = kind;
    arch.groups = 4;
    Rng rng(seed);
    return build_model(arch, rng);
}

Matrix random_batch(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    Rng rng(seed);
    return Matrix(rows, cols, rng.normal_vector(rows * cols, 1.2));
}

}  // namespace

TEST_CASE("forward: zero-weight head produces all-zero logits") {
    ModelState m = small_model(NormKind::LayerNorm, 1);
    auto& head = std::get<AffineLayer>(m.layers.back());
    for (double& v : head.w.data()) v = 0.0;
    for (double& v : head.b) v = 0.0;
    const auto [logits, cache] = forward(m, random_batch(3, 6, 2), StatsMode::TrainStats);
    for (double v : logits.data()) CHECK(v == 0.0);
}

TEST_CASE("forward: identical samples give identical rows under layer norm") {
    ModelState m = small_model(NormKind::LayerNorm, 3);
    Matrix x(2, 6);
    for (std::size_t j = 0; j < 6; ++j) x(0, j) = x(1, j) = 0.3 * static_cast<double>(j) - 1.0;
    const auto [logits, cache] = forward(m, x, StatsMode::TrainStats);
    for (std::size_t j = 0; j < logits.cols(); ++j) CHECK(logits(0, j) == logits(1, j));
}

TEST_CASE("forward: deterministic across repeated calls; width mismatch rejected") {
    ModelState m = small_model(NormKind::BatchNorm, 4);
    const Matrix x = random_batch(4, 6, 5);
    const auto a = forward(m, x, StatsMode::TrainStats);
    const auto b = forward(m, x, StatsMode::TrainStats);
    CHECK(a.first == b.first);
    CHECK_THROWS_AS(forward(m, Matrix(2, 7), StatsMode::TrainStats), std::invalid_argument);
}

TEST_CASE("forward matches the independent reference for all norm kinds") {
    for (NormKind kind : {NormKind::BatchNorm, NormKind::BatchRenorm, NormKind::GroupNorm,
                          NormKind::LayerNorm}) {
        ModelState m = small_model(kind, 21);
        const Matrix x = random_batch(4, 6, 22);
        const refmodel::FrozenRenorm fr = refmodel::compute_renorm_factors(m, x);
        const Matrix want = refmodel::forward_logits(m, x, fr);
        const auto [got, cache] = forward(m, x, StatsMode::TrainStats);
        for (std::size_t i = 0; i < want.size(); ++i) {
            CHECK(std::abs(got.data()[i] - want.data()[i]) < 1e-10);
        }
    }
}

TEST_CASE("backward_entropy: uniform logits are a stationary point") {
    ModelState m = small_model(NormKind::BatchNorm, 6);
    auto& head = std::get<AffineLayer>(m.layers.back());
    for (double& v : head.w.data()) v = 0.0;
    for (double& v : head.b) v = 0.0;  // logits all zero -> uniform softmax
    auto [logits, cache] = forward(m, random_batch(4, 6, 7), StatsMode::TrainStats);
    const ProbMatrix probs = softmax_with_temperature(logits, 1.0);
    const Gradients g = backward_entropy(m, cache, probs, 1.0, std::vector<double>(4, 1.0),
                                         std::vector<bool>(4, true));
    CHECK(g.max_abs_norm_grad() < 1e-12);
}

TEST_CASE("backward_entropy: empty selection yields zero gradients") {
    ModelState m = small_model(NormKind::GroupNorm, 8);
    auto [logits, cache] = forward(m, random_batch(4, 6, 9), StatsMode::TrainStats);
    const ProbMatrix probs = softmax_with_temperature(logits, 1.0);
    const Gradients g = backward_entropy(m, cache, probs, 1.0, std::vector<double>(4, 1.0),
                                         std::vector<bool>(4, false));
    CHECK(g.max_abs_norm_grad() == 0.0);
}

TEST_CASE("backward_entropy: cache cannot be reused and must match the model") {
    ModelState m = small_model(NormKind::LayerNorm, 10);
    auto [logits, cache] = forward(m, random_batch(2, 6, 11), StatsMode::TrainStats);
    const ProbMatrix probs = softmax_with_temperature(logits, 1.0);
    const std::vector<double> w(2, 1.0);
    const std::vector<bool> mask(2, true);
    backward_entropy(m, cache, probs, 1.0, w, mask);
    CHECK_THROWS_AS(backward_entropy(m, cache, probs, 1.0, w, mask), std::logic_error);
}

// Analytic gradients against central finite differences of the independent
// reference loss, selection and weights frozen, all four normalization kinds.
TEST_CASE("backward_entropy matches finite differences for every norm kind") {
    for (NormKind kind : {NormKind::BatchNorm, NormKind::BatchRenorm, NormKind::GroupNorm,
                          NormKind::LayerNorm}) {
        CAPTURE(norm_kind_name(kind));
        for (std::uint64_t seed = 0; seed < 3; ++seed) {
            ModelState m = small_model(kind, 100 + seed);
            if (kind == NormKind::BatchRenorm) {
                // plausible adaptation state: running stats away from batch stats
                for (std::size_t li : m.norm_layer_indices()) {
                    auto& n = std::get<NormalizationLayer>(m.layers[li]);
                    Rng rr(seed * 31 + li);
                    for (std::size_t j = 0; j < n.features(); ++j) {
                        n.running_mean[j] = 0.3 * rr.normal();
                        n.running_var[j] = 0.5 + rr.uniform();
                    }
                }
            }
            const Matrix x = random_batch(4, 6, 200 + seed);
            const double tau = 1.2;

            auto [logits, cache] = forward(m, x, StatsMode::TrainStats);
            const ProbMatrix probs = softmax_with_temperature(logits, tau);
            const std::vector<double> h = shannon_entropy(probs);
            // exercise a non-trivial mask and non-uniform weights
            std::vector<bool> mask(4);
            for (std::size_t i = 0; i < 4; ++i) mask[i] = i != 2;
            std::vector<double> weights = {1.4, 0.6, 1.0, 1.0};

            const Gradients grads = backward_entropy(m, cache, probs, tau, weights, mask);
            const refmodel::FrozenRenorm fr = refmodel::compute_renorm_factors(m, x);

            for (std::size_t li : m.norm_layer_indices()) {
                const auto& ng = std::get<NormGrad>(grads.layers[li]);
                const auto& n = std::get<NormalizationLayer>(m.layers[li]);
                for (std::size_t j = 0; j < n.features(); ++j) {
                    const double fg =
                        refmodel::fd_norm_gradient(m, li, true, j, x, tau, weights, mask, fr);
                    const double fb =
                        refmodel::fd_norm_gradient(m, li, false, j, x, tau, weights, mask, fr);
                    CHECK(refmodel::relative_error(ng.dgamma[j], fg) < 1e-5);
                    CHECK(refmodel::relative_error(ng.dbeta[j], fb) < 1e-5);
                }
            }
        }
    }
}

TEST_CASE("backward_cross_entropy matches finite differences on affine weights") {
    ModelState m = small_model(NormKind::LayerNorm, 50);
    const Matrix x = random_batch(5, 6, 51);
    const std::vector<int> labels = {0, 3, 1, 4, 2};
    auto [logits, cache] = forward(m, x, StatsMode::TrainStats);
    const ProbMatrix probs = softmax_with_temperature(logits, 1.0);
    const Gradients grads = backward_cross_entropy(m, cache, probs, labels);
    const refmodel::FrozenRenorm fr = refmodel::compute_renorm_factors(m, x);

    // a few probe coordinates in the first affine layer
    const auto& ag = std::get<AffineGrad>(grads.layers[0]);
    for (const auto& [r, c] : {std::pair<std::size_t, std::size_t>{0, 0}, {2, 5}, {5, 11}}) {
        auto eval = [&](double delta) {
            ModelState mm = m;
            std::get<AffineLayer>(mm.layers[0]).w(r, c) += delta;
            return refmodel::cross_entropy_loss(refmodel::forward_logits(mm, x, fr), labels);
        };
        const double fd = (eval(1e-5) - eval(-1e-5)) / 2e-5;
        CHECK(refmodel::relative_error(ag.dw(r, c), fd) < 1e-5);
    }
}

TEST_CASE("sgd_step: zero gradients and lr=0 leave the model unchanged") {
    ModelState m = small_model(NormKind::BatchNorm, 60);
    auto [logits, cache] = forward(m, random_batch(3, 6, 61), StatsMode::TrainStats);
    const ProbMatrix probs = softmax_with_temperature(logits, 1.0);
    const Gradients zero = backward_entropy(m, cache, probs, 1.0, std::vector<double>(3, 1.0),
                                            std::vector<bool>(3, false));
    CHECK(models_equal(sgd_step(m, zero, 0.1), m));

    auto [logits2, cache2] = forward(m, random_batch(3, 6, 62), StatsMode::TrainStats);
    const ProbMatrix probs2 = softmax_with_temperature(logits2, 1.0);
    const Gradients g = backward_entropy(m, cache2, probs2, 1.0, std::vector<double>(3, 1.0),
                                         std::vector<bool>(3, true));
    CHECK(models_equal(sgd_step(m, g, 0.0), m));
}

TEST_CASE("sgd_step: single-coordinate update moves by lr * g") {
    ModelState m = small_model(NormKind::LayerNorm, 63);
    Gradients g;
    g.layers.assign(m.layers.size(), std::monostate{});
    const std::size_t li = m.norm_layer_indices()[0];
    const auto& n = std::get<NormalizationLayer>(m.layers[li]);
    NormGrad ng{std::vector<double>(n.features(), 0.0), std::vector<double>(n.features(), 0.0)};
    ng.dgamma[2] = 1.0;
    g.layers[li] = ng;
    const ModelState updated = sgd_step(m, g, 0.1);
    const auto& un = std::get<NormalizationLayer>(updated.layers[li]);
    CHECK(un.gamma[2] == doctest::Approx(n.gamma[2] - 0.1).epsilon(1e-15));
    // everything else bit-identical
    ModelState reverted = updated;
    std::get<NormalizationLayer>(reverted.layers[li]).gamma[2] = n.gamma[2];
    CHECK(models_equal(reverted, m));
}

TEST_CASE("sgd_step never touches parameters outside the adaptable mask") {
    ModelState m = small_model(NormKind::BatchNorm, 64);
    ModelState cur = m;
    Rng rng(65);
    for (int step = 0; step < 5; ++step) {
        auto [logits, cache] =
            forward(cur, Matrix(3, 6, rng.normal_vector(18)), StatsMode::TrainStats);
        const ProbMatrix probs = softmax_with_temperature(logits, 1.0);
        const Gradients g = backward_entropy(cur, cache, probs, 1.0, std::vector<double>(3, 1.0),
                                             std::vector<bool>(3, true));
        cur = sgd_step(cur, g, 0.05);
    }
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        if (const auto* a = std::get_if<AffineLayer>(&m.layers[i])) {
            const auto& b = std::get<AffineLayer>(cur.layers[i]);
            CHECK(a->w == b.w);
            CHECK(a->b == b.b);
        }
    }
}

TEST_CASE("pretrain: separable 3-class blobs reach 95% source accuracy") {
    const LabeledDataset blobs = synth_dataset(3, 6, 150, 0.35, 77);
    // independent check that the task is linearly separable
    CHECK(oracles::logistic_regression_accuracy(blobs, blobs) >= 0.95);

    ArchitectureSpec arch;
    arch.input_dim = 6;
    arch.hidden_dim = 32;
    arch.num_classes = 3;
    arch.norm = NormKind::BatchNorm;
    arch.groups = 4;
    PretrainConfig cfg;
    cfg.epochs = 30;
    cfg.seed = 5;
    const PretrainResult res = pretrain(blobs, arch, cfg);
    CHECK(res.val_accuracy >= 0.95);
}

TEST_CASE("pretrain: zero epochs stays at chance accuracy") {
    const LabeledDataset blobs = synth_dataset(10, 8, 200, 0.5, 78);
    ArchitectureSpec arch;
    arch.input_dim = 8;
    arch.hidden_dim = 32;
    arch.num_classes = 10;
    arch.norm = NormKind::LayerNorm;
    PretrainConfig cfg;
    cfg.epochs = 0;
    cfg.seed = 6;
    const PretrainResult res = pretrain(blobs, arch, cfg);
    CHECK(res.val_accuracy < 0.25);  // chance is 0.10
}

TEST_CASE("pretrain: single-class dataset rejected; fixed seed reproduces bytes") {
    LabeledDataset degenerate = synth_dataset(2, 4, 50, 0.3, 79);
    for (int& y : degenerate.labels) y = 0;
    ArchitectureSpec arch;
    arch.input_dim = 4;
    arch.num_classes = 2;
    CHECK_THROWS_AS(pretrain(degenerate, arch, PretrainConfig{}), std::invalid_argument);

    const LabeledDataset blobs = synth_dataset(3, 4, 60, 0.3, 80);
    ArchitectureSpec a2;
    a2.input_dim = 4;
    a2.hidden_dim = 16;
    a2.num_classes = 3;
    a2.norm = NormKind::GroupNorm;
    a2.groups = 4;
    PretrainConfig cfg;
    cfg.epochs = 3;
    cfg.seed = 7;
    const std::string j1 = checkpoint_to_json(pretrain(blobs, a2, cfg).model);
    const std::string j2 = checkpoint_to_json(pretrain(blobs, a2, cfg).model);
    CHECK(j1 == j2);
}

TEST_CASE("checkpoint: round trip is exact; re-save is byte-identical") {
    const auto dir = std::filesystem::temp_directory_path() / "ttaforge_ckpt_test";
    std::filesystem::create_directories(dir);
    const std::string path = (dir / "m.json").string();

    for (NormKind kind : {NormKind::BatchNorm, NormKind::BatchRenorm, NormKind::GroupNorm,
                          NormKind::LayerNorm}) {
        ModelState m = small_model(kind, 90);
        // non-trivial running stats
        for (std::size_t li : m.norm_layer_indices()) {
            auto& n = std::get<NormalizationLayer>(m.layers[li]);
            Rng rr(li);
            for (auto& v : n.running_mean) v = rr.normal();
            for (auto& v : n.running_var) v = 0.2 + rr.uniform();
        }
        save_checkpoint(m, path);
        const ModelState loaded = load_checkpoint(path);
        CHECK(models_equal(m, loaded));
        CHECK(checkpoint_to_json(m) == checkpoint_to_json(loaded));
    }

    std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoint: truncation and version mismatch raise decode errors") {
    ModelState m = small_model(NormKind::BatchNorm, 91);
    const std::string text = checkpoint_to_json(m);
    CHECK_THROWS_AS(checkpoint_from_json(text.substr(0, text.size() / 2)), CheckpointError);
    std::string wrong = text;
    wrong.replace(wrong.find("\"format_version\": 1"), 19, "\"format_version\": 9");
    CHECK_THROWS_AS(checkpoint_from_json(wrong), CheckpointError);
}

TEST_CASE("convert_batchnorm_to_renorm keeps parameters and stats") {
    ModelState m = small_model(NormKind::BatchNorm, 92);
    ModelState converted = m;
    convert_batchnorm_to_renorm(converted, 3.0, 5.0, 0.01);
    CHECK(converted.norm_kind() == NormKind::BatchRenorm);
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        if (const auto* a = std::get_if<AffineLayer>(&m.layers[i])) {
            const auto& b = std::get<AffineLayer>(converted.layers[i]);
            CHECK(a->w == b.w);
            CHECK(a->b == b.b);
        }
    }
    for (std::size_t li : m.norm_layer_indices()) {
        const auto& a = std::get<NormalizationLayer>(m.layers[li]);
        const auto& b = std::get<NormalizationLayer>(converted.layers[li]);
        CHECK(a.gamma == b.gamma);
        CHECK(a.beta == b.beta);
        CHECK(a.running_mean == b.running_mean);
        CHECK(a.running_var == b.running_var);
    }
    // per-sample kinds are untouched
    ModelState gn = small_model(NormKind::GroupNorm, 93);
    ModelState gn2 = gn;
    convert_batchnorm_to_renorm(gn2, 3.0, 5.0, 0.01);
    CHECK(models_equal(gn, gn2));
}
