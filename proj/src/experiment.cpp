#include "tta_forge/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "tta_forge/eval.hpp"
#include "tta_forge/model.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ttaforge {

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

namespace {

std::string imbalance_label(double rho) {
    if (rho >= kInfImbalance) return "inf";
    return format_double(rho);
}

double imbalance_from_label(const std::string& label) {
    if (label == "inf") return kInfImbalance;
    return std::stod(label);
}

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& ctx) {
    for (const auto& [key, value] : j.items()) {
        if (!allowed.count(key)) {
            throw std::invalid_argument("config: unknown key '" + key + "' in " + ctx);
        }
    }
}

}  // namespace

PresetFlags preset_flags(const std::string& preset) {
    if (preset == "tent") return {};
    if (preset == "tent+br") return {.batch_renorm = true};
    if (preset == "dot") return {.class_rebalance = true};
    if (preset == "select") return {.sample_selection = true};
    if (preset == "temp") return {.temperature = true};
    if (preset == "bot") {
        return {.class_rebalance = true,
                .sample_selection = true,
                .temperature = true,
                .batch_renorm = true};
    }
    throw std::invalid_argument("preset_flags: unknown preset '" + preset + "'");
}

AdaptConfig make_adapt_config(const std::string& preset, const AdaptSettings& settings,
                              NormKind backbone, std::size_t batch_size) {
    const PresetFlags flags = preset_flags(preset);
    AdaptConfig c;
    c.lr = settings.lr;
    c.entropy_factor = settings.entropy_factor >= 0.0
                           ? settings.entropy_factor
                           : default_entropy_factor(backbone, batch_size);
    c.tau = settings.tau;
    c.class_rebalance = flags.class_rebalance;
    c.sample_selection = flags.sample_selection;
    c.temperature = flags.temperature;
    c.batch_renorm = flags.batch_renorm;
    c.buffer_size = settings.buffer;
    c.z_momentum = settings.z_momentum;
    c.weight_floor = settings.weight_floor;
    c.bren_r_max = settings.bren_r_max;
    c.bren_d_max = settings.bren_d_max;
    c.bren_momentum = settings.bren_momentum;
    return c;
}

ExperimentConfig config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("config: parse failure: ") + e.what());
    }
    ExperimentConfig cfg;
    check_keys(j,
               {"dataset", "corruption", "stream", "model", "presets", "norms", "batch_sizes",
                "imbalance_factors", "seeds", "pretrain", "adapt", "workers", "out"},
               "top level");
    if (j.contains("dataset")) {
        const json& d = j["dataset"];
        check_keys(d,
                   {"kind", "classes", "features", "source_per_class", "target_per_class",
                    "spread", "data_seed", "csv"},
                   "dataset");
        auto& s = cfg.dataset;
        s.kind = d.value("kind", s.kind);
        if (s.kind != "synthetic" && s.kind != "csv") {
            throw std::invalid_argument("config: dataset.kind must be 'synthetic' or 'csv'");
        }
        s.classes = d.value("classes", s.classes);
        s.features = d.value("features", s.features);
        s.source_per_class = d.value("source_per_class", s.source_per_class);
        s.target_per_class = d.value("target_per_class", s.target_per_class);
        s.spread = d.value("spread", s.spread);
        s.data_seed = d.value("data_seed", s.data_seed);
        s.csv_path = d.value("csv", s.csv_path);
    }
    if (j.contains("corruption")) {
        const json& c = j["corruption"];
        check_keys(c, {"kind", "severity"}, "corruption");
        cfg.corruption.kind =
            corruption_kind_from_name(c.value("kind", corruption_kind_name(cfg.corruption.kind)));
        cfg.corruption.severity = c.value("severity", cfg.corruption.severity);
    }
    if (j.contains("stream")) {
        const json& s = j["stream"];
        check_keys(s, {"samples_per_step", "steps"}, "stream");
        cfg.samples_per_step = s.value("samples_per_step", cfg.samples_per_step);
        cfg.steps = s.value("steps", cfg.steps);
    }
    if (j.contains("model")) {
        const json& m = j["model"];
        check_keys(m, {"hidden", "groups"}, "model");
        cfg.hidden_dim = m.value("hidden", cfg.hidden_dim);
        cfg.groups = m.value("groups", cfg.groups);
    }
    if (j.contains("presets")) {
        cfg.presets = j["presets"].get<std::vector<std::string>>();
        for (const auto& p : cfg.presets) preset_flags(p);  // validate early
    }
    if (j.contains("norms")) {
        cfg.norms.clear();
        for (const auto& n : j["norms"]) {
            cfg.norms.push_back(norm_kind_from_name(n.get<std::string>()));
        }
    }
    if (j.contains("batch_sizes")) {
        cfg.batch_sizes = j["batch_sizes"].get<std::vector<std::size_t>>();
    }
    if (j.contains("imbalance_factors")) {
        cfg.imbalance_factors.clear();
        for (const auto& r : j["imbalance_factors"]) {
            if (r.is_string()) {
                cfg.imbalance_factors.push_back(imbalance_from_label(r.get<std::string>()));
            } else {
                cfg.imbalance_factors.push_back(r.get<double>());
            }
        }
    }
    if (j.contains("seeds")) {
        cfg.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    }
    if (j.contains("pretrain")) {
        const json& p = j["pretrain"];
        check_keys(p, {"lr", "epochs", "batch_size", "val_fraction"}, "pretrain");
        cfg.pretrain.lr = p.value("lr", cfg.pretrain.lr);
        cfg.pretrain.epochs = p.value("epochs", cfg.pretrain.epochs);
        cfg.pretrain.batch_size = p.value("batch_size", cfg.pretrain.batch_size);
        cfg.pretrain.val_fraction = p.value("val_fraction", cfg.pretrain.val_fraction);
    }
    if (j.contains("adapt")) {
        const json& a = j["adapt"];
        check_keys(a,
                   {"lr", "entropy_factor", "temperature", "buffer", "z_momentum", "weight_floor",
                    "bren_r_max", "bren_d_max", "bren_momentum"},
                   "adapt");
        cfg.adapt.lr = a.value("lr", cfg.adapt.lr);
        cfg.adapt.entropy_factor = a.value("entropy_factor", cfg.adapt.entropy_factor);
        cfg.adapt.tau = a.value("temperature", cfg.adapt.tau);
        cfg.adapt.buffer = a.value("buffer", cfg.adapt.buffer);
        cfg.adapt.z_momentum = a.value("z_momentum", cfg.adapt.z_momentum);
        cfg.adapt.weight_floor = a.value("weight_floor", cfg.adapt.weight_floor);
        cfg.adapt.bren_r_max = a.value("bren_r_max", cfg.adapt.bren_r_max);
        cfg.adapt.bren_d_max = a.value("bren_d_max", cfg.adapt.bren_d_max);
        cfg.adapt.bren_momentum = a.value("bren_momentum", cfg.adapt.bren_momentum);
    }
    cfg.workers = j.value("workers", cfg.workers);
    cfg.out_dir = j.value("out", cfg.out_dir);
    return cfg;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("config: cannot open '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return config_from_json(buf.str());
}

std::string checkpoint_path(const std::string& out_dir, NormKind kind) {
    return (fs::path(out_dir) / ("ckpt_" + norm_kind_name(kind) + ".json")).string();
}

namespace {

ShiftTask resolve_task(const ExperimentConfig& cfg) {
    if (cfg.dataset.kind == "csv") {
        LabeledDataset csv = load_csv_dataset(cfg.dataset.csv_path);
        return ShiftTask{csv, csv};
    }
    return make_shift_task(cfg.dataset.classes, cfg.dataset.features,
                           cfg.dataset.source_per_class, cfg.dataset.target_per_class,
                           cfg.dataset.spread, cfg.dataset.data_seed);
}

LabeledDataset resolve_corrupted_target(const ExperimentConfig& cfg) {
    LabeledDataset target = resolve_task(cfg).target;
    const std::uint64_t corruption_seed = Rng(cfg.dataset.data_seed).fork("corruption").seed();
    return apply_corruption(target, cfg.corruption, corruption_seed);
}

std::string trace_path(const ExperimentConfig& cfg, const CellSpec& cell, std::uint64_t seed) {
    std::ostringstream name;
    name << "trace_" << cell.preset << "_" << norm_kind_name(cell.norm) << "_bs"
         << cell.batch_size << "_rho" << imbalance_label(cell.imbalance) << "_seed" << seed
         << ".jsonl";
    return (fs::path(cfg.out_dir) / name.str()).string();
}

}  // namespace

std::vector<double> pretrain_checkpoints(const ExperimentConfig& cfg) {
    fs::create_directories(cfg.out_dir);
    const ShiftTask task = resolve_task(cfg);
    std::vector<double> val_accs;
    for (NormKind kind : cfg.norms) {
        ArchitectureSpec arch;
        arch.input_dim = task.source.dim();
        arch.hidden_dim = cfg.hidden_dim;
        arch.num_classes = task.source.num_classes;
        arch.norm = kind;
        arch.groups = cfg.groups;
        PretrainConfig pc;
        pc.lr = cfg.pretrain.lr;
        pc.epochs = cfg.pretrain.epochs;
        pc.batch_size = cfg.pretrain.batch_size;
        pc.val_fraction = cfg.pretrain.val_fraction;
        pc.seed = Rng(cfg.dataset.data_seed).fork("pretrain").fork(norm_kind_name(kind)).seed();
        PretrainResult res = pretrain(task.source, arch, pc);
        save_checkpoint(res.model, checkpoint_path(cfg.out_dir, kind));
        val_accs.push_back(res.val_accuracy);
    }
    return val_accs;
}

SingleRunResult run_single_cell(const ExperimentConfig& cfg, const CellSpec& cell,
                                std::uint64_t seed, const std::string& trace_file) {
    const std::string ckpt = checkpoint_path(cfg.out_dir, cell.norm);
    if (!fs::exists(ckpt)) {
        throw std::runtime_error("checkpoint '" + ckpt + "' not found; run `pretrain` first");
    }
    ModelState model = load_checkpoint(ckpt);
    AdaptConfig ac = make_adapt_config(cell.preset, cfg.adapt, cell.norm, cell.batch_size);
    if (ac.batch_renorm) {
        convert_batchnorm_to_renorm(model, ac.bren_r_max, ac.bren_d_max, ac.bren_momentum);
    }

    const LabeledDataset target = resolve_corrupted_target(cfg);
    StreamSpec ss;
    ss.num_classes = target.num_classes;
    ss.imbalance_ratio = cell.imbalance;
    ss.samples_per_step = cfg.samples_per_step;
    ss.batch_size = cell.batch_size;
    ss.seed = seed;
    ss.steps = cfg.steps;
    const StreamBatches stream = generate_stream(target, ss);

    ClassFrequencyState freq =
        ClassFrequencyState::uniform(target.num_classes, ac.z_momentum, ac.buffer_size);
    OnlineAccuracy acc;
    std::ofstream trace;
    if (!trace_file.empty()) {
        trace.open(trace_file, std::ios::binary);
        if (!trace) throw std::runtime_error("cannot open trace file '" + trace_file + "'");
    }
    std::size_t selected_total = 0;
    for (std::size_t i = 0; i < stream.inputs.size(); ++i) {
        const StepReport rep = adapt_step(model, stream.inputs[i], ac, freq);
        record(acc, rep.predictions, stream.labels[i]);
        selected_total += rep.selected;
        if (trace.is_open()) {
            write_trace_line(trace, static_cast<int>(seed), i + 1, acc, rep.selected, rep.loss);
        }
    }
    return SingleRunResult{acc.accuracy(), selected_total, acc.total};
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    if (cfg.presets.empty() || cfg.norms.empty() || cfg.batch_sizes.empty() ||
        cfg.imbalance_factors.empty() || cfg.seeds.empty()) {
        throw std::invalid_argument("run_experiment: every sweep axis needs at least one value");
    }
    fs::create_directories(cfg.out_dir);
    for (NormKind kind : cfg.norms) {
        const std::string ckpt = checkpoint_path(cfg.out_dir, kind);
        if (!fs::exists(ckpt)) {
            throw std::runtime_error("checkpoint '" + ckpt + "' not found; run `pretrain` first");
        }
    }

    std::vector<CellSpec> cells;
    for (const auto& preset : cfg.presets) {
        for (NormKind norm : cfg.norms) {
            for (std::size_t bs : cfg.batch_sizes) {
                for (double rho : cfg.imbalance_factors) {
                    cells.push_back(CellSpec{preset, norm, bs, rho});
                }
            }
        }
    }

    struct RunSlot {
        double final_acc = 0.0;
        std::size_t selected = 0;
        std::size_t total = 0;
        std::string error;
    };
    const std::size_t runs = cells.size() * cfg.seeds.size();
    std::vector<RunSlot> slots(runs);

    const int workers = std::max(1, cfg.workers);
#pragma omp parallel for schedule(dynamic) num_threads(workers)
    for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(runs); ++r) {
        const CellSpec& cell = cells[r / cfg.seeds.size()];
        const std::uint64_t seed = cfg.seeds[r % cfg.seeds.size()];
        try {
            const SingleRunResult res =
                run_single_cell(cfg, cell, seed, trace_path(cfg, cell, seed));
            slots[r] = RunSlot{res.final_accuracy, res.selected, res.total, {}};
        } catch (const std::exception& e) {
            slots[r].error = e.what();
        }
    }
    for (const RunSlot& s : slots) {
        if (!s.error.empty()) throw std::runtime_error("run failed: " + s.error);
    }

    ExperimentResult result;
    for (std::size_t c = 0; c < cells.size(); ++c) {
        CellSummary summary;
        summary.cell = cells[c];
        std::size_t selected = 0, total = 0;
        for (std::size_t s = 0; s < cfg.seeds.size(); ++s) {
            const RunSlot& slot = slots[c * cfg.seeds.size() + s];
            summary.finals.push_back(slot.final_acc);
            selected += slot.selected;
            total += slot.total;
        }
        const RunAggregate agg = aggregate(summary.finals);
        summary.mean = agg.mean;
        summary.stddev = agg.stddev;
        summary.selected_fraction =
            total == 0 ? 0.0 : static_cast<double>(selected) / static_cast<double>(total);
        result.cells.push_back(std::move(summary));
    }

    const std::string summary_path = (fs::path(cfg.out_dir) / "summary.csv").string();
    std::ofstream out(summary_path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + summary_path + "'");
    out << "preset,norm,batch_size,imbalance,seeds,finals,mean_acc,std_acc,selected_fraction\n";
    for (const CellSummary& s : result.cells) {
        out << s.cell.preset << "," << norm_kind_name(s.cell.norm) << "," << s.cell.batch_size
            << "," << imbalance_label(s.cell.imbalance) << ",";
        for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
            out << (i ? ";" : "") << cfg.seeds[i];
        }
        out << ",";
        for (std::size_t i = 0; i < s.finals.size(); ++i) {
            out << (i ? ";" : "") << format_double(s.finals[i]);
        }
        out << "," << format_double(s.mean) << "," << format_double(s.stddev) << ","
            << format_double(s.selected_fraction) << "\n";
    }
    out.close();
    result.summary_path = summary_path;
    return result;
}

// ---------------------------------------------------------------------------
// Summary parsing, report rendering, trace verification

namespace {

struct SummaryRow {
    CellSpec cell;
    std::vector<std::uint64_t> seeds;
    std::vector<double> finals;
    double mean = 0.0;
    double stddev = 0.0;
    double selected_fraction = 0.0;
};

std::vector<std::string> split_on(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::stringstream ss(s);
    while (std::getline(ss, cur, sep)) out.push_back(cur);
    return out;
}

std::vector<SummaryRow> parse_summary(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("report: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("report: empty summary");
    std::vector<SummaryRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const std::vector<std::string> f = split_on(line, ',');
        if (f.size() != 9) throw std::runtime_error("report: malformed summary row: " + line);
        SummaryRow row;
        row.cell.preset = f[0];
        row.cell.norm = norm_kind_from_name(f[1]);
        row.cell.batch_size = std::stoul(f[2]);
        row.cell.imbalance = imbalance_from_label(f[3]);
        for (const auto& s : split_on(f[4], ';')) row.seeds.push_back(std::stoull(s));
        for (const auto& s : split_on(f[5], ';')) row.finals.push_back(std::stod(s));
        row.mean = std::stod(f[6]);
        row.stddev = std::stod(f[7]);
        row.selected_fraction = std::stod(f[8]);
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string percent(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * v);
    return buf;
}

template <typename Key>
std::vector<Key> sorted_unique(std::vector<Key> v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    return v;
}

}  // namespace

ReportResult report(const std::string& results_dir) {
    const std::string summary_path = (fs::path(results_dir) / "summary.csv").string();
    if (!fs::exists(summary_path)) {
        throw std::runtime_error("report: no summary.csv in '" + results_dir + "'");
    }
    const std::vector<SummaryRow> rows = parse_summary(summary_path);
    if (rows.empty()) throw std::runtime_error("report: summary.csv has no rows");

    std::map<std::tuple<std::string, std::string, std::size_t, double>, const SummaryRow*> index;
    std::vector<std::string> presets, norms;
    std::vector<std::size_t> batches;
    std::vector<double> rhos;
    for (const auto& r : rows) {
        index[{r.cell.preset, norm_kind_name(r.cell.norm), r.cell.batch_size, r.cell.imbalance}] =
            &r;
        presets.push_back(r.cell.preset);
        norms.push_back(norm_kind_name(r.cell.norm));
        batches.push_back(r.cell.batch_size);
        rhos.push_back(r.cell.imbalance);
    }
    presets = sorted_unique(std::move(presets));
    norms = sorted_unique(std::move(norms));
    batches = sorted_unique(std::move(batches));
    std::reverse(batches.begin(), batches.end());  // large to small, as reported
    rhos = sorted_unique(std::move(rhos));

    int warnings = 0;
    std::ostringstream text;
    auto pad = [&](std::string s, std::size_t width) {
        if (s.size() < width) s.append(width - s.size(), ' ');
        return s;
    };
    auto emit_cell = [&](const std::string& preset, const std::string& norm, std::size_t bs,
                         double rho) {
        auto it = index.find({preset, norm, bs, rho});
        if (it == index.end()) {
            ++warnings;
            text << pad("—", 16);  // note: multi-byte glyph, width is approximate
            return;
        }
        text << pad(percent(it->second->mean) + "±" + percent(it->second->stddev), 14);
    };

    text << "online accuracy (%), mean±std over seeds\n";
    for (const auto& norm : norms) {
        for (double rho : rhos) {
            text << "\n== method x batch size | norm=" << norm
                 << " imbalance=" << imbalance_label(rho) << "\n";
            text << pad("method", 10);
            for (std::size_t bs : batches) text << pad("bs=" + std::to_string(bs), 14);
            text << "\n";
            for (const auto& preset : presets) {
                text << pad(preset, 10);
                for (std::size_t bs : batches) emit_cell(preset, norm, bs, rho);
                text << "\n";
            }
        }
        for (std::size_t bs : batches) {
            text << "\n== method x imbalance | norm=" << norm << " batch_size=" << bs << "\n";
            text << pad("method", 10);
            for (double rho : rhos) text << pad("rho=" + imbalance_label(rho), 14);
            text << "\n";
            for (const auto& preset : presets) {
                text << pad(preset, 10);
                for (double rho : rhos) emit_cell(preset, norm, bs, rho);
                text << "\n";
            }
        }
    }
    if (warnings > 0) {
        text << "\nwarnings: " << warnings << " missing grid cell(s)\n";
    }

    ReportResult res{text.str(), warnings};
    std::ofstream txt((fs::path(results_dir) / "report.txt").string(), std::ios::binary);
    txt << res.text;

    std::ofstream csv((fs::path(results_dir) / "report_cells.csv").string(), std::ios::binary);
    csv << "norm,imbalance,preset,batch_size,mean_acc,std_acc\n";
    for (const auto& norm : norms) {
        for (double rho : rhos) {
            for (const auto& preset : presets) {
                for (std::size_t bs : batches) {
                    auto it = index.find({preset, norm, bs, rho});
                    if (it == index.end()) continue;
                    csv << norm << "," << imbalance_label(rho) << "," << preset << "," << bs << ","
                        << format_double(it->second->mean) << ","
                        << format_double(it->second->stddev) << "\n";
                }
            }
        }
    }
    return res;
}

bool verify_summary(const std::string& results_dir) {
    const std::string summary_path = (fs::path(results_dir) / "summary.csv").string();
    const std::vector<SummaryRow> rows = parse_summary(summary_path);
    for (const SummaryRow& row : rows) {
        std::vector<double> finals;
        std::size_t selected = 0, total = 0;
        for (std::uint64_t seed : row.seeds) {
            std::ostringstream name;
            name << "trace_" << row.cell.preset << "_" << norm_kind_name(row.cell.norm) << "_bs"
                 << row.cell.batch_size << "_rho" << imbalance_label(row.cell.imbalance)
                 << "_seed" << seed << ".jsonl";
            std::ifstream in((fs::path(results_dir) / name.str()).string());
            if (!in) return false;
            std::string line, last;
            std::size_t run_selected = 0;
            while (std::getline(in, line)) {
                if (line.empty()) continue;
                last = line;
                run_selected += json::parse(line).at("selected").get<std::size_t>();
            }
            if (last.empty()) return false;
            const json j = json::parse(last);
            finals.push_back(j.at("acc").get<double>());
            selected += run_selected;
            total += j.at("seen").get<std::size_t>();
        }
        const RunAggregate agg = aggregate(finals);
        const double sel_frac =
            total == 0 ? 0.0 : static_cast<double>(selected) / static_cast<double>(total);
        if (finals != row.finals) return false;
        if (agg.mean != row.mean || agg.stddev != row.stddev) return false;
        if (sel_frac != row.selected_fraction) return false;
    }
    return true;
}

}  // namespace ttaforge
