#include "tta_forge/eval.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <json.hpp>

namespace ttaforge {

void record(OnlineAccuracy& acc, const std::vector<int>& predictions,
            const std::vector<int>& labels) {
    if (predictions.size() != labels.size()) {
        throw std::invalid_argument("record: prediction/label length mismatch");
    }
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        if (predictions[i] == labels[i]) ++acc.correct;
    }
    acc.total += predictions.size();
    acc.trace.push_back({acc.trace.size() + 1, acc.accuracy()});
}

RunAggregate aggregate(const std::vector<double>& run_finals) {
    if (run_finals.empty()) {
        throw std::invalid_argument("aggregate: no runs");
    }
    RunAggregate agg;
    agg.finals = run_finals;
    const auto [lo, hi] = std::minmax_element(run_finals.begin(), run_finals.end());
    if (*lo == *hi) {  // identical runs: exactly their value, zero spread
        agg.mean = *lo;
        agg.stddev = 0.0;
        return agg;
    }
    double sum = 0.0;
    for (double v : run_finals) sum += v;
    agg.mean = std::clamp(sum / static_cast<double>(run_finals.size()), *lo, *hi);
    double ss = 0.0;
    for (double v : run_finals) ss += (v - agg.mean) * (v - agg.mean);
    agg.stddev = std::sqrt(ss / static_cast<double>(run_finals.size() - 1));
    return agg;
}

void write_trace_line(std::ostream& out, int run, std::size_t step, const OnlineAccuracy& acc,
                      std::size_t selected, double loss) {
    nlohmann::ordered_json j;
    j["run"] = run;
    j["step"] = step;
    j["seen"] = acc.total;
    j["correct"] = acc.correct;
    j["acc"] = acc.accuracy();
    j["selected"] = selected;
    j["loss"] = loss;
    out << j.dump() << "\n";
}

}  // namespace ttaforge
