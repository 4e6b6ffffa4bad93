#pragma once

#include <cstddef>
#include <ostream>
#include <vector>

namespace ttaforge {

// Accuracy accumulated over the predictions emitted at each batch, not
// recomputed after the run.
struct OnlineAccuracy {
    std::size_t correct = 0;
    std::size_t total = 0;

    struct TracePoint {
        std::size_t step;
        double accuracy;
    };
    std::vector<TracePoint> trace;

    double accuracy() const {
        return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
    }
};

// Count one batch of predictions against labels and append a trace point.
// Throws std::invalid_argument on a length mismatch.
void record(OnlineAccuracy& acc, const std::vector<int>& predictions,
            const std::vector<int>& labels);

struct RunAggregate {
    std::vector<double> finals;
    double mean = 0.0;
    double stddev = 0.0;  // sample (n-1) standard deviation; 0 for a single run
};

// Mean and sample standard deviation of per-run final accuracies.
// Throws std::invalid_argument on an empty list.
RunAggregate aggregate(const std::vector<double>& run_finals);

// One JSON Lines record:
// {"run":int,"step":int,"seen":int,"correct":int,"acc":float,"selected":int,"loss":float}
void write_trace_line(std::ostream& out, int run, std::size_t step, const OnlineAccuracy& acc,
                      std::size_t selected, double loss);

}  // namespace ttaforge
