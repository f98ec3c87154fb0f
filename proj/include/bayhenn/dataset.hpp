#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bayhenn/errors.hpp"

namespace bayhenn {

struct Dataset {
    uint32_t count = 0, dim = 0, classes = 0;
    std::vector<float> pixels;  // count x dim, scaled to [0, 1]
    std::vector<uint8_t> labels;

    const float* sample(uint32_t i) const { return pixels.data() + static_cast<size_t>(i) * dim; }
};

// IDX (big-endian magic + dims, u8 payload); transparently inflates
// gzip-compressed files. Throws ModelDataError on malformed input.
Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 uint32_t classes = 10);

// CSV rows "label,p0,p1,...", pixel range 0..255.
Dataset load_csv(const std::string& path, uint32_t classes = 10);

// The conventional four-file layout: train-images-idx3-ubyte etc.
Dataset load_mnist_dir(const std::string& dir, bool train);

}  // namespace bayhenn
