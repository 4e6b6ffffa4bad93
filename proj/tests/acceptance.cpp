// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Criteria 6-9 share one desk-scale task with pretrained
// checkpoints; all runs are seeded, so results are reproducible.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "support/oracles.hpp"
#include "support/reference_model.hpp"
#include "tta_forge/adapt.hpp"
#include "tta_forge/experiment.hpp"
#include "tta_forge/model.hpp"
#include "tta_forge/numerics.hpp"
#include "tta_forge/stream.hpp"

using namespace ttaforge;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int g_failures = 0;

void report_line(int number, const char* title, bool pass, const std::string& detail) {
    std::printf("[%s] criterion %2d: %s%s%s\n", pass ? "PASS" : "FAIL", number, title,
                detail.empty() ? "" : " — ", detail.c_str());
    if (!pass) ++g_failures;
}

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

ModelState grad_check_model(NormKind kind, std::uint64_t seed) {
    ArchitectureSpec arch;
    arch.input_dim = 6;
    arch.hidden_dim = 16;
    arch.num_classes = 5;
    arch.norm = kind;
    arch.groups = 4;
    Rng rng(seed);
    return build_model(arch, rng);
}

// Shared desk-scale task for the directional criteria: hard enough that the
// corrupted accuracy sits mid-range and adaptation dynamics matter.
ExperimentConfig desk_config(const std::string& out_dir) {
    ExperimentConfig cfg;
    cfg.dataset.classes = 10;
    cfg.dataset.features = 16;
    cfg.dataset.source_per_class = 200;
    cfg.dataset.target_per_class = 400;
    cfg.dataset.spread = 1.2;
    cfg.dataset.data_seed = 7;
    cfg.corruption = {CorruptionKind::GaussianNoise, 5};
    cfg.samples_per_step = 100;
    cfg.hidden_dim = 64;
    cfg.groups = 8;
    cfg.norms = {NormKind::BatchNorm, NormKind::GroupNorm, NormKind::LayerNorm};
    cfg.seeds = {1, 2, 3};
    cfg.pretrain.epochs = 40;
    cfg.adapt.lr = 0.025;
    cfg.out_dir = out_dir;
    return cfg;
}

double mean_accuracy(const ExperimentConfig& cfg, const CellSpec& cell,
                     double* selected_fraction = nullptr) {
    double sum = 0.0;
    std::size_t selected = 0, total = 0;
    for (std::uint64_t seed : cfg.seeds) {
        const SingleRunResult r = run_single_cell(cfg, cell, seed, "");
        sum += r.final_accuracy;
        selected += r.selected;
        total += r.total;
    }
    if (selected_fraction) {
        *selected_fraction = static_cast<double>(selected) / static_cast<double>(total);
    }
    return sum / static_cast<double>(cfg.seeds.size());
}

std::string pct(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.1f", 100.0 * v);
    return buf;
}

// --------------------------------------------------------------------------

void criterion_1_gradient_fidelity() {
    const auto start = Clock::now();
    double worst = 0.0;
    std::string where;
    for (NormKind kind : {NormKind::BatchNorm, NormKind::BatchRenorm, NormKind::GroupNorm,
                          NormKind::LayerNorm}) {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            ModelState m = grad_check_model(kind, 1000 + seed);
            if (kind == NormKind::BatchRenorm) {
                for (std::size_t li : m.norm_layer_indices()) {
                    auto& n = std::get<NormalizationLayer>(m.layers[li]);
                    Rng rr(seed * 13 + li);
                    for (std::size_t j = 0; j < n.features(); ++j) {
                        n.running_mean[j] = 0.3 * rr.normal();
                        n.running_var[j] = 0.5 + rr.uniform();
                    }
                }
            }
            Rng rng(2000 + seed);
            const Matrix x(4, 6, rng.normal_vector(24, 1.2));
            const double tau = 1.2;
            auto [logits, cache] = forward(m, x, StatsMode::TrainStats);
            const ProbMatrix probs = softmax_with_temperature(logits, tau);
            const std::vector<double> weights = {1.3, 0.7, 1.0, 1.1};
            std::vector<bool> mask(4, true);
            mask[seed % 4] = false;

            const Gradients grads = backward_entropy(m, cache, probs, tau, weights, mask);
            const refmodel::FrozenRenorm fr = refmodel::compute_renorm_factors(m, x);
            for (std::size_t li : m.norm_layer_indices()) {
                const auto& ng = std::get<NormGrad>(grads.layers[li]);
                const auto& n = std::get<NormalizationLayer>(m.layers[li]);
                for (std::size_t j = 0; j < n.features(); ++j) {
                    for (bool is_gamma : {true, false}) {
                        const double fd = refmodel::fd_norm_gradient(m, li, is_gamma, j, x, tau,
                                                                     weights, mask, fr);
                        const double an = is_gamma ? ng.dgamma[j] : ng.dbeta[j];
                        const double err = refmodel::relative_error(an, fd);
                        if (err > worst) {
                            worst = err;
                            where = norm_kind_name(kind) + " seed " + std::to_string(seed);
                        }
                    }
                }
            }
        }
    }
    const double elapsed = seconds_since(start);
    std::ostringstream detail;
    detail << "max rel err " << worst << " (" << where << "), " << pct(elapsed / 10.0)
           << "% of the 10 s budget";
    report_line(1, "gradient fidelity across all normalization kinds",
                worst < 1e-5 && elapsed < 10.0, detail.str());
}

void criterion_2_tent_equivalence() {
    double worst = 0.0;
    ModelState with_dot = grad_check_model(NormKind::GroupNorm, 30);
    ModelState tent = with_dot;
    AdaptConfig dot_cfg;
    dot_cfg.lr = 0.02;
    dot_cfg.class_rebalance = true;
    dot_cfg.buffer_size = 1;  // N=1: buffer disabled
    AdaptConfig tent_cfg;
    tent_cfg.lr = 0.02;
    ClassFrequencyState f1 = ClassFrequencyState::uniform(5, dot_cfg.z_momentum, 1);
    ClassFrequencyState f2 = ClassFrequencyState::uniform(5, tent_cfg.z_momentum, 1);
    Rng rng(31);
    for (int step = 0; step < 100; ++step) {
        const Matrix batch(1, 6, rng.normal_vector(6, 1.2));
        adapt_step(with_dot, batch, dot_cfg, f1);
        adapt_step(tent, batch, tent_cfg, f2);
        for (std::size_t li : tent.norm_layer_indices()) {
            const auto& a = std::get<NormalizationLayer>(with_dot.layers[li]);
            const auto& b = std::get<NormalizationLayer>(tent.layers[li]);
            for (std::size_t j = 0; j < a.features(); ++j) {
                worst = std::max(worst, std::abs(a.gamma[j] - b.gamma[j]));
                worst = std::max(worst, std::abs(a.beta[j] - b.beta[j]));
            }
        }
    }
    report_line(2, "DOT with B=1, N=1 walks the exact Tent trajectory", worst <= 1e-12,
                "max coordinate gap " + format_double(worst) + " over 100 steps");
}

void criterion_3_selection_semantics() {
    bool ok = true;
    std::string detail;

    // F=1 keeps exactly the samples with entropy < ln K
    Rng rng(40);
    const double lnk = std::log(10.0);
    for (int rep = 0; rep < 200 && ok; ++rep) {
        std::vector<double> h(16);
        for (auto& v : h) v = rng.uniform() * (lnk + 0.1);
        const auto mask = select_samples(h, entropy_threshold(1.0, 10));
        for (std::size_t i = 0; i < h.size(); ++i) {
            if (mask[i] != (h[i] < lnk)) ok = false;
        }
    }
    if (!ok) detail = "F=1 mask mismatch";

    // an exactly-uniform prediction is never selected at F=1
    const ProbMatrix uniform = softmax_with_temperature(Matrix(1, 10), 1.0);
    const auto umask = select_samples(shannon_entropy(uniform), entropy_threshold(1.0, 10));
    if (umask[0]) {
        ok = false;
        detail = "uniform row selected at F=1";
    }

    // F=0 leaves the model bit-identical over 50 steps
    ModelState m = grad_check_model(NormKind::GroupNorm, 41);
    const ModelState before = m;
    AdaptConfig cfg;
    cfg.sample_selection = true;
    cfg.entropy_factor = 0.0;
    ClassFrequencyState freq = ClassFrequencyState::uniform(5, cfg.z_momentum, 1);
    Rng srng(42);
    for (int step = 0; step < 50; ++step) {
        adapt_step(m, Matrix(4, 6, srng.normal_vector(24)), cfg, freq);
    }
    if (!models_equal(m, before)) {
        ok = false;
        detail = "model changed under F=0";
    }

    // monotonicity of the selected set in F over 1000 random entropy vectors
    Rng mrng(43);
    for (int rep = 0; rep < 1000 && ok; ++rep) {
        const std::size_t n = 1 + mrng.uniform_int(32);
        std::vector<double> h(n);
        for (auto& v : h) v = mrng.uniform() * lnk;
        double f1 = mrng.uniform(), f2 = mrng.uniform();
        if (f1 > f2) std::swap(f1, f2);
        const auto m1 = select_samples(h, entropy_threshold(f1, 10));
        const auto m2 = select_samples(h, entropy_threshold(f2, 10));
        for (std::size_t i = 0; i < n; ++i) {
            if (m1[i] && !m2[i]) {
                ok = false;
                detail = "monotonicity violated";
            }
        }
    }
    report_line(3, "selection semantics (F=1 threshold, F=0 freeze, monotone in F)", ok, detail);
}

void criterion_4_bren_degeneracy() {
    Rng rng(50);
    double worst_seeded = 0.0, worst_clip = 0.0;
    for (int rep = 0; rep < 25; ++rep) {
        const std::size_t cols = 3 + rng.uniform_int(6);
        const std::size_t rows = 2 + rng.uniform_int(6);
        Matrix x(rows, cols, rng.normal_vector(rows * cols, 2.0));
        NormalizationLayer bn = make_norm_layer(NormKind::BatchNorm, cols);
        for (std::size_t j = 0; j < cols; ++j) {
            bn.gamma[j] = 0.5 + rng.uniform();
            bn.beta[j] = rng.normal();
        }

        // running stats seeded to batch stats
        NormalizationLayer bren = bn;
        bren.kind = NormKind::BatchRenorm;
        const Moments mo = batch_moments(x, MomentAxis::Feature);
        bren.running_mean = mo.mean;
        bren.running_var = mo.var;
        const NormResult a = normalize(bn, x, StatsMode::TrainStats);
        const NormResult b = normalize(bren, x, StatsMode::TrainStats);
        for (std::size_t i = 0; i < a.y.size(); ++i) {
            worst_seeded = std::max(worst_seeded, std::abs(a.y.data()[i] - b.y.data()[i]));
        }

        // r_max=1, d_max=0 with arbitrary running stats
        NormalizationLayer clipped = bn;
        clipped.kind = NormKind::BatchRenorm;
        clipped.r_max = 1.0;
        clipped.d_max = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            clipped.running_mean[j] = rng.normal() * 4.0;
            clipped.running_var[j] = 0.05 + rng.uniform() * 8.0;
        }
        const NormResult c = normalize(clipped, x, StatsMode::TrainStats);
        for (std::size_t i = 0; i < a.y.size(); ++i) {
            worst_clip = std::max(worst_clip, std::abs(a.y.data()[i] - c.y.data()[i]));
        }
    }
    report_line(4, "batch renorm degenerates to batch norm",
                worst_seeded < 1e-12 && worst_clip < 1e-12,
                "seeded-stats gap " + format_double(worst_seeded) + ", clipped gap " +
                    format_double(worst_clip));
}

void criterion_5_stream_statistics() {
    const auto start = Clock::now();
    const LabeledDataset ds = synth_dataset(10, 4, 2000, 0.5, 60);
    StreamSpec spec;
    spec.num_classes = 10;
    spec.imbalance_ratio = 1000.0;
    spec.samples_per_step = 10000;
    spec.batch_size = 10000;
    spec.seed = 61;
    const StreamBatches stream = generate_stream(ds, spec);

    std::size_t modal = 0, total = 0;
    bool chi_ok = true;
    double worst_stat = 0.0;
    for (std::size_t t = 0; t < 10; ++t) {
        std::vector<std::size_t> counts(10, 0);
        for (int y : stream.labels[t]) ++counts[y];
        modal += counts[t];
        total += stream.labels[t].size();
        const double stat =
            oracles::chi_square_statistic(counts, build_qt(t + 1, 10, 1000.0), 10000);
        worst_stat = std::max(worst_stat, stat);
        if (stat >= oracles::chi_square_crit_001(9)) chi_ok = false;
    }
    const double qmax_hat = static_cast<double>(modal) / static_cast<double>(total);
    const double ratio = qmax_hat * 9.0 / (1.0 - qmax_hat);
    const double elapsed = seconds_since(start);
    std::ostringstream detail;
    detail << "empirical ratio " << pct(ratio / 100.0) << ", worst chi2 "
           << format_double(worst_stat) << " (crit 21.666), " << format_double(elapsed) << " s";
    report_line(5, "imbalanced stream statistics (ratio band + chi-square GOF)",
                ratio >= 800.0 && ratio <= 1200.0 && chi_ok && elapsed < 5.0, detail.str());
}

void criterion_6_small_batch_failure(const ExperimentConfig& cfg) {
    const auto start = Clock::now();
    ExperimentConfig c = cfg;
    const double chance = 1.0 / static_cast<double>(c.dataset.classes);

    const double bn_b1 = mean_accuracy(c, {"tent", NormKind::BatchNorm, 1, 1.0});
    const double gn_b16 = mean_accuracy(c, {"tent", NormKind::GroupNorm, 16, 1.0});
    const double gn_b1 = mean_accuracy(c, {"tent", NormKind::GroupNorm, 1, 1.0});
    const double ln_b16 = mean_accuracy(c, {"tent", NormKind::LayerNorm, 16, 1.0});
    const double ln_b1 = mean_accuracy(c, {"tent", NormKind::LayerNorm, 1, 1.0});
    const double elapsed = seconds_since(start);

    const bool bn_collapses = bn_b1 <= chance + 0.05;
    const bool gn_stable = std::abs(gn_b16 - gn_b1) <= 0.05;
    const bool ln_stable = std::abs(ln_b16 - ln_b1) <= 0.05;
    std::ostringstream detail;
    detail << "bn@1 " << pct(bn_b1) << " (chance " << pct(chance) << "), gn " << pct(gn_b16)
           << "->" << pct(gn_b1) << ", ln " << pct(ln_b16) << "->" << pct(ln_b1) << ", "
           << format_double(elapsed) << " s";
    report_line(6, "batch-norm collapse at B=1 while GN/LN stay stable",
                bn_collapses && gn_stable && ln_stable && elapsed < 180.0, detail.str());
}

void criterion_7_bot_superiority(const ExperimentConfig& cfg) {
    const auto start = Clock::now();
    bool ok = true;
    std::ostringstream detail;
    double min_margin = 1.0;
    for (NormKind norm : cfg.norms) {
        for (std::size_t bs : {std::size_t{8}, std::size_t{4}, std::size_t{2}, std::size_t{1}}) {
            const double tent = mean_accuracy(cfg, {"tent", norm, bs, 1000.0});
            const double bot = mean_accuracy(cfg, {"bot", norm, bs, 1000.0});
            min_margin = std::min(min_margin, bot - tent);
            if (bot <= tent) {
                ok = false;
                detail << norm_kind_name(norm) << "@" << bs << " tent " << pct(tent) << " vs bot "
                       << pct(bot) << "; ";
            }
        }
    }
    const double elapsed = seconds_since(start);
    detail << "min margin " << pct(min_margin) << " pts, " << format_double(elapsed) << " s";
    report_line(7, "BoT beats Tent on every backbone and batch size at rho=1000",
                ok && elapsed < 600.0, detail.str());
}

void criterion_8_buffer_trick(const ExperimentConfig& cfg) {
    ExperimentConfig with_buffer = cfg;
    with_buffer.adapt.buffer = 2;
    ExperimentConfig without = cfg;
    without.adapt.buffer = 1;
    const double n2 = mean_accuracy(with_buffer, {"dot", NormKind::GroupNorm, 1, 1000.0});
    const double n1 = mean_accuracy(without, {"dot", NormKind::GroupNorm, 1, 1000.0});
    report_line(8, "size-2 weight buffer beats the degenerate B=1 weighting", n2 > n1,
                "N=2 " + pct(n2) + " vs N=1 " + pct(n1));
}

void criterion_9_selection_economy(const ExperimentConfig& cfg) {
    bool ok = true;
    std::ostringstream detail;
    for (NormKind norm : cfg.norms) {
        ExperimentConfig def = cfg;
        def.adapt.entropy_factor = -1.0;  // per-backbone default
        double frac = 1.0;
        const double acc_def = mean_accuracy(def, {"select", norm, 16, 1.0}, &frac);

        ExperimentConfig full = cfg;
        full.adapt.entropy_factor = 1.0;
        const double acc_full = mean_accuracy(full, {"select", norm, 16, 1.0});

        const bool cell_ok = frac < 0.6 && acc_def >= acc_full - 0.01;
        if (!cell_ok) ok = false;
        detail << norm_kind_name(norm) << ": " << pct(frac) << "% used, acc " << pct(acc_def)
               << " vs F=1 " << pct(acc_full) << "; ";
    }
    report_line(9, "default-F selection uses <60% of samples without losing accuracy", ok,
                detail.str());
}

void criterion_10_determinism(const ExperimentConfig& base) {
    ExperimentConfig cfg = base;
    cfg.presets = {"tent", "bot"};
    cfg.norms = {NormKind::GroupNorm};
    cfg.batch_sizes = {4, 1};
    cfg.imbalance_factors = {1000.0};
    cfg.seeds = {1, 2, 3};
    cfg.out_dir = (fs::path(base.out_dir) / "determinism").string();
    fs::create_directories(cfg.out_dir);
    for (NormKind kind : cfg.norms) {
        fs::copy_file(checkpoint_path(base.out_dir, kind), checkpoint_path(cfg.out_dir, kind),
                      fs::copy_options::overwrite_existing);
    }
    auto slurp = [](const std::string& p) {
        std::ifstream in(p, std::ios::binary);
        std::ostringstream buf;
        buf << in.rdbuf();
        return buf.str();
    };
    const ExperimentResult r1 = run_experiment(cfg);
    const std::string bytes1 = slurp(r1.summary_path);
    cfg.workers = 1;
    const ExperimentResult r2 = run_experiment(cfg);
    const std::string bytes2 = slurp(r2.summary_path);
    report_line(10, "sweep reruns reproduce byte-identical summary CSVs",
                !bytes1.empty() && bytes1 == bytes2,
                std::to_string(bytes1.size()) + " bytes compared");
}

}  // namespace

int main() {
    std::printf("acceptance suite\n================\n");

    criterion_1_gradient_fidelity();
    criterion_2_tent_equivalence();
    criterion_3_selection_semantics();
    criterion_4_bren_degeneracy();
    criterion_5_stream_statistics();

    const std::string dir =
        (fs::temp_directory_path() / "ttaforge_acceptance").string();
    fs::remove_all(dir);
    ExperimentConfig desk = desk_config(dir);
    const auto t0 = Clock::now();
    pretrain_checkpoints(desk);
    std::printf("-- desk task pretrained in %.1f s\n", seconds_since(t0));

    criterion_6_small_batch_failure(desk);
    criterion_7_bot_superiority(desk);
    criterion_8_buffer_trick(desk);
    criterion_9_selection_economy(desk);
    criterion_10_determinism(desk);

    fs::remove_all(dir);
    if (g_failures == 0) {
        std::printf("all criteria passed\n");
    } else {
        std::printf("%d criterion(s) FAILED\n", g_failures);
    }
    return g_failures == 0 ? 0 : 1;
}
