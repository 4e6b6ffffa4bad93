// Experiment driver: pretrain backbones, run single adaptation cells, sweep
// the method/batch-size/imbalance grid, and render report tables.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "tta_forge/experiment.hpp"
#include "tta_forge/model.hpp"

namespace {

struct CommonFlags {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> batch_size;
    std::optional<std::string> imbalance;
    std::optional<std::string> norm;
    std::optional<std::string> preset;
    std::optional<double> entropy_factor;
    std::optional<double> temperature;
    std::optional<std::size_t> buffer;
    std::optional<std::string> out_dir;
    std::optional<int> workers;
};

void add_common_flags(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config_path, "Experiment config JSON");
    cmd->add_option("--seed", f.seed, "Run seed (replaces the config seed list)")
        ->envname("TTA_FORGE_SEED");
    cmd->add_option("--batch-size", f.batch_size, "Stream batch size");
    cmd->add_option("--imbalance", f.imbalance, "Imbalance factor rho, or 'inf'");
    cmd->add_option("--norm", f.norm, "Normalization kind: bn, bren, gn, ln");
    cmd->add_option("--preset", f.preset, "Method preset: tent, tent+br, dot, select, temp, bot");
    cmd->add_option("--entropy-factor", f.entropy_factor, "Selection threshold factor F in [0,1]");
    cmd->add_option("--temperature", f.temperature, "Softmax temperature tau");
    cmd->add_option("--buffer", f.buffer, "Batch-size-1 weight buffer size N");
    cmd->add_option("--out", f.out_dir, "Output directory");
    cmd->add_option("--workers", f.workers, "Parallel sweep workers");
}

ttaforge::ExperimentConfig resolve_config(const CommonFlags& f, bool narrow_to_single_cell) {
    ttaforge::ExperimentConfig cfg;
    if (!f.config_path.empty()) cfg = ttaforge::load_config(f.config_path);
    if (f.seed) cfg.seeds = {*f.seed};
    if (f.batch_size) cfg.batch_sizes = {*f.batch_size};
    if (f.imbalance) {
        cfg.imbalance_factors = {*f.imbalance == "inf" ? ttaforge::kInfImbalance
                                                       : std::stod(*f.imbalance)};
    }
    if (f.norm) cfg.norms = {ttaforge::norm_kind_from_name(*f.norm)};
    if (f.preset) {
        ttaforge::preset_flags(*f.preset);  // validate
        cfg.presets = {*f.preset};
    }
    if (f.entropy_factor) cfg.adapt.entropy_factor = *f.entropy_factor;
    if (f.temperature) cfg.adapt.tau = *f.temperature;
    if (f.buffer) cfg.adapt.buffer = *f.buffer;
    if (f.out_dir) cfg.out_dir = *f.out_dir;
    if (f.workers) cfg.workers = *f.workers;
    if (narrow_to_single_cell) {
        cfg.presets.resize(1);
        cfg.norms.resize(1);
        cfg.batch_sizes.resize(1);
        cfg.imbalance_factors.resize(1);
    }
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"tta_forge: streaming test-time adaptation experiments"};
    app.require_subcommand(1);

    CommonFlags pre_f, adapt_f, sweep_f, report_f;
    CLI::App* pre = app.add_subcommand("pretrain", "Train source checkpoints per norm kind");
    add_common_flags(pre, pre_f);
    CLI::App* adapt = app.add_subcommand("adapt", "Run one adaptation cell");
    add_common_flags(adapt, adapt_f);
    CLI::App* sweep = app.add_subcommand("sweep", "Run the configured experiment grid");
    add_common_flags(sweep, sweep_f);
    CLI::App* rep = app.add_subcommand("report", "Render tables from a results directory");
    add_common_flags(rep, report_f);

    CLI11_PARSE(app, argc, argv);

    try {
        if (pre->parsed()) {
            ttaforge::ExperimentConfig cfg = resolve_config(pre_f, false);
            if (pre_f.seed) cfg.dataset.data_seed = *pre_f.seed;
            const std::vector<double> accs = ttaforge::pretrain_checkpoints(cfg);
            for (std::size_t i = 0; i < cfg.norms.size(); ++i) {
                std::cout << "pretrained " << ttaforge::norm_kind_name(cfg.norms[i])
                          << " -> " << ttaforge::checkpoint_path(cfg.out_dir, cfg.norms[i])
                          << " (val acc " << ttaforge::format_double(accs[i]) << ")\n";
            }
        } else if (adapt->parsed() || sweep->parsed()) {
            const bool single = adapt->parsed();
            ttaforge::ExperimentConfig cfg =
                resolve_config(single ? adapt_f : sweep_f, single);
            const ttaforge::ExperimentResult result = ttaforge::run_experiment(cfg);
            std::cout << "wrote " << result.summary_path << " (" << result.cells.size()
                      << " cells x " << cfg.seeds.size() << " seeds)\n";
            for (const auto& cell : result.cells) {
                if (result.cells.size() <= 8) {
                    std::cout << "  " << cell.cell.preset << "/"
                              << ttaforge::norm_kind_name(cell.cell.norm) << " bs="
                              << cell.cell.batch_size << " rho="
                              << (cell.cell.imbalance >= ttaforge::kInfImbalance
                                      ? std::string("inf")
                                      : ttaforge::format_double(cell.cell.imbalance))
                              << ": acc " << ttaforge::format_double(cell.mean) << " ± "
                              << ttaforge::format_double(cell.stddev) << "\n";
                }
            }
        } else if (rep->parsed()) {
            ttaforge::ExperimentConfig cfg = resolve_config(report_f, false);
            const ttaforge::ReportResult res = ttaforge::report(cfg.out_dir);
            std::cout << res.text;
            if (!ttaforge::verify_summary(cfg.out_dir)) {
                std::cerr << "warning: summary.csv does not match its trace files\n";
                return 1;
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
