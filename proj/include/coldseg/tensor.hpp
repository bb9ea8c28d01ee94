#pragma once

// Dense row-major tensor of rank 0..4. Shapes are small, so a plain
// std::vector<int> shape plus flat storage is all we need.

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace coldseg {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw std::invalid_argument("tensor dimensions must be positive");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

template <typename S>
struct Tensor {
    Shape shape;
    std::vector<S> v;

    Tensor() = default;
    explicit Tensor(Shape sh, S fill = S(0)) : shape(std::move(sh)), v(shape_numel(shape), fill) {}

    std::size_t numel() const { return v.size(); }
    int rank() const { return static_cast<int>(shape.size()); }

    int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }

    // Rank-3 [C,H,W] access, the common case for images and feature maps.
    S& at(int c, int y, int x) {
        return v[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
    }
    S at(int c, int y, int x) const {
        return v[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
    }

    // Rank-2 [H,W] access.
    S& at(int y, int x) { return v[static_cast<std::size_t>(y) * shape[1] + x]; }
    S at(int y, int x) const { return v[static_cast<std::size_t>(y) * shape[1] + x]; }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }
};

template <typename S, typename T>
Tensor<S> tensor_cast(const Tensor<T>& t) {
    Tensor<S> out(t.shape);
    for (std::size_t i = 0; i < t.v.size(); ++i) out.v[i] = static_cast<S>(t.v[i]);
    return out;
}

// Segmentation label map, one class id per pixel.
using LabelMap = Tensor<std::uint8_t>;

// One-hot encode a [H,W] label map to [C,H,W].
template <typename S>
Tensor<S> one_hot(const LabelMap& label, int classes) {
    if (label.rank() != 2) throw std::invalid_argument("one_hot expects a [H,W] label map");
    Tensor<S> out({classes, label.dim(0), label.dim(1)});
    for (int y = 0; y < label.dim(0); ++y)
        for (int x = 0; x < label.dim(1); ++x) {
            const int c = label.at(y, x);
            if (c < 0 || c >= classes) throw std::invalid_argument("label id out of range");
            out.at(c, y, x) = S(1);
        }
    return out;
}

}  // namespace coldseg
