#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tta_forge/adapt.hpp"
#include "tta_forge/norm.hpp"
#include "tta_forge/stream.hpp"

namespace ttaforge {

struct DatasetSettings {
    std::string kind = "synthetic";  // "synthetic" | "csv"
    std::size_t classes = 10;
    std::size_t features = 16;
    std::size_t source_per_class = 200;
    std::size_t target_per_class = 400;
    double spread = 1.2;
    std::uint64_t data_seed = 7;
    std::string csv_path;  // target stream source when kind == "csv"
};

struct PretrainSettings {
    double lr = 0.05;
    std::size_t epochs = 40;
    std::size_t batch_size = 64;
    double val_fraction = 0.2;
};

struct AdaptSettings {
    double lr = 0.01;  // plain SGD, no momentum
    double entropy_factor = -1.0;  // < 0: per-backbone default at the cell's batch size
    double tau = 1.2;
    std::size_t buffer = 2;  // N for the batch-size-1 path
    double z_momentum = 0.95;
    double weight_floor = 1e-8;
    double bren_r_max = 3.0;
    double bren_d_max = 5.0;
    double bren_momentum = 0.01;
};

struct ExperimentConfig {
    DatasetSettings dataset;
    CorruptionSpec corruption{CorruptionKind::GaussianNoise, 5};
    std::size_t samples_per_step = 100;
    std::size_t steps = 0;  // 0: T = K
    std::size_t hidden_dim = 64;
    std::size_t groups = 8;

    std::vector<std::string> presets = {"tent", "bot"};
    std::vector<NormKind> norms = {NormKind::BatchNorm, NormKind::GroupNorm, NormKind::LayerNorm};
    std::vector<std::size_t> batch_sizes = {16, 8, 4, 2, 1};
    std::vector<double> imbalance_factors = {1, 10, 100, 1000, kInfImbalance};
    std::vector<std::uint64_t> seeds = {1, 2, 3};

    PretrainSettings pretrain;
    AdaptSettings adapt;

    int workers = 4;
    std::string out_dir = "results";
};

// Load a config JSON document; unknown keys are rejected, missing keys keep
// their defaults. Schema reference: docs/formats.md.
ExperimentConfig load_config(const std::string& path);
ExperimentConfig config_from_json(const std::string& text);

// Trick flags for the named method preset {tent, tent+br, dot, select, temp,
// bot}. Throws std::invalid_argument for unknown names.
struct PresetFlags {
    bool class_rebalance = false;
    bool sample_selection = false;
    bool temperature = false;
    bool batch_renorm = false;
};
PresetFlags preset_flags(const std::string& preset);

AdaptConfig make_adapt_config(const std::string& preset, const AdaptSettings& settings,
                              NormKind backbone, std::size_t batch_size);

std::string checkpoint_path(const std::string& out_dir, NormKind kind);

// Pretrain one checkpoint per configured normalization kind into
// out_dir/ckpt_<kind>.json; returns their source validation accuracies in
// config order.
std::vector<double> pretrain_checkpoints(const ExperimentConfig& cfg);

struct CellSpec {
    std::string preset;
    NormKind norm = NormKind::BatchNorm;
    std::size_t batch_size = 16;
    double imbalance = 1.0;
};

struct CellSummary {
    CellSpec cell;
    std::vector<double> finals;  // per-seed final online accuracy
    double mean = 0.0;
    double stddev = 0.0;
    double selected_fraction = 0.0;  // of stream samples used in backward passes
};

struct ExperimentResult {
    std::vector<CellSummary> cells;
    std::string summary_path;
};

// Run every (preset x norm x batch size x imbalance) cell over the configured
// seeds, write one JSONL trace per (cell, seed) plus summary.csv. Cells run
// in parallel up to cfg.workers; output bytes do not depend on the worker
// count. Throws std::runtime_error when a checkpoint is missing.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

// Adapt one cell/seed and return its final accuracy (test and CLI helper).
struct SingleRunResult {
    double final_accuracy = 0.0;
    std::size_t selected = 0;
    std::size_t total = 0;
};
SingleRunResult run_single_cell(const ExperimentConfig& cfg, const CellSpec& cell,
                                std::uint64_t seed, const std::string& trace_path);

struct ReportResult {
    std::string text;
    int warnings = 0;  // count of missing grid cells
};

// Render method-by-batch-size and method-by-imbalance tables from
// summary.csv; writes report.txt and report_cells.csv next to it.
// Throws std::runtime_error when the directory holds no summary.
ReportResult report(const std::string& results_dir);

// Recompute every summary row from its trace files; true when all match.
bool verify_summary(const std::string& results_dir);

// Shortest round-trip decimal formatting used in CSV and report output.
std::string format_double(double v);

}  // namespace ttaforge
