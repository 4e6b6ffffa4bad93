#pragma once

#include <cstddef>
#include <vector>

#include "tta_forge/matrix.hpp"

namespace ttaforge {

struct LabeledDataset {
    Matrix features;          // n x D
    std::vector<int> labels;  // n, each in [0, num_classes)
    std::size_t num_classes = 0;

    std::size_t size() const { return labels.size(); }
    std::size_t dim() const { return features.cols(); }
};

}  // namespace ttaforge
