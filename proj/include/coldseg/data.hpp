#pragma once

// Shared dataset vocabulary: an example is an image tensor plus its label
// map. Kept separate from the synthetic generator so the training code does
// not depend on where the data came from.

#include <string>
#include <vector>

#include "coldseg/tensor.hpp"

namespace coldseg {

template <typename S>
struct Example {
    Tensor<S> image;  // [C,H,W] for segmentation, [d] for vector models
    LabelMap label;   // [H,W] class ids; [1,1] for vector models
    std::string id;
};

template <typename S>
using Dataset = std::vector<Example<S>>;

struct DatasetBundle {
    Dataset<float> train, val, test_in, test_shift;
};

}  // namespace coldseg
