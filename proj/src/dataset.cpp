#include "bayhenn/dataset.hpp"

#include <zlib.h>

#include <array>
#include <cstring>
#include <fstream>
#include <sstream>

namespace bayhenn {

namespace {

std::vector<uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ModelDataError("dataset: cannot open '" + path + "'");
    return std::vector<uint8_t>(std::istreambuf_iterator<char>(f),
                                std::istreambuf_iterator<char>());
}

std::vector<uint8_t> gunzip(const std::vector<uint8_t>& in) {
    z_stream zs{};
    if (inflateInit2(&zs, 16 + MAX_WBITS) != Z_OK)
        throw ModelDataError("dataset: zlib init failed");
    std::vector<uint8_t> out(1 << 20);
    size_t produced = 0;
    zs.next_in = const_cast<Bytef*>(in.data());
    zs.avail_in = static_cast<uInt>(in.size());
    int rc = Z_OK;
    while (rc != Z_STREAM_END) {
        if (produced == out.size()) out.resize(out.size() * 2);
        zs.next_out = out.data() + produced;
        zs.avail_out = static_cast<uInt>(out.size() - produced);
        rc = inflate(&zs, Z_NO_FLUSH);
        produced = out.size() - zs.avail_out;
        if (rc != Z_OK && rc != Z_STREAM_END) {
            inflateEnd(&zs);
            throw ModelDataError("dataset: corrupt gzip stream");
        }
    }
    inflateEnd(&zs);
    out.resize(produced);
    return out;
}

std::vector<uint8_t> read_maybe_gz(const std::string& path) {
    std::vector<uint8_t> bytes = read_file_bytes(path);
    if (bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b) return gunzip(bytes);
    return bytes;
}

uint32_t be32(const std::vector<uint8_t>& b, size_t pos) {
    if (pos + 4 > b.size()) throw ModelDataError("dataset: truncated IDX header");
    return (uint32_t(b[pos]) << 24) | (uint32_t(b[pos + 1]) << 16) | (uint32_t(b[pos + 2]) << 8) |
           uint32_t(b[pos + 3]);
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 uint32_t classes) {
    std::vector<uint8_t> img = read_maybe_gz(images_path);
    std::vector<uint8_t> lab = read_maybe_gz(labels_path);

    if (be32(img, 0) != 0x00000803)
        throw ModelDataError("dataset: bad image magic in '" + images_path + "'");
    uint32_t count = be32(img, 4);
    uint32_t rows = be32(img, 8);
    uint32_t cols = be32(img, 12);
    size_t expect = 16 + static_cast<size_t>(count) * rows * cols;
    if (img.size() != expect)
        throw ModelDataError("dataset: image payload size mismatch in '" + images_path + "'");

    if (be32(lab, 0) != 0x00000801)
        throw ModelDataError("dataset: bad label magic in '" + labels_path + "'");
    uint32_t lcount = be32(lab, 4);
    if (lab.size() != 8 + static_cast<size_t>(lcount))
        throw ModelDataError("dataset: label payload size mismatch in '" + labels_path + "'");
    if (lcount != count) throw ModelDataError("dataset: image/label count mismatch");

    Dataset d;
    d.count = count;
    d.dim = rows * cols;
    d.classes = classes;
    d.pixels.resize(static_cast<size_t>(count) * d.dim);
    for (size_t i = 0; i < d.pixels.size(); ++i)
        d.pixels[i] = static_cast<float>(img[16 + i]) / 255.0f;
    d.labels.assign(lab.begin() + 8, lab.end());
    for (uint8_t l : d.labels)
        if (l >= classes) throw ModelDataError("dataset: label out of range");
    return d;
}

Dataset load_csv(const std::string& path, uint32_t classes) {
    std::ifstream f(path);
    if (!f) throw ModelDataError("dataset: cannot open '" + path + "'");
    Dataset d;
    d.classes = classes;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        if (!std::getline(ss, cell, ',')) throw ModelDataError("dataset: malformed CSV row");
        int label = std::stoi(cell);
        if (label < 0 || static_cast<uint32_t>(label) >= classes)
            throw ModelDataError("dataset: label out of range in CSV");
        std::vector<float> row;
        while (std::getline(ss, cell, ','))
            row.push_back(std::stof(cell) / 255.0f);
        if (row.empty()) throw ModelDataError("dataset: CSV row has no pixels");
        if (d.dim == 0) d.dim = static_cast<uint32_t>(row.size());
        if (row.size() != d.dim) throw ModelDataError("dataset: ragged CSV rows");
        d.labels.push_back(static_cast<uint8_t>(label));
        d.pixels.insert(d.pixels.end(), row.begin(), row.end());
        ++d.count;
    }
    if (d.count == 0) throw ModelDataError("dataset: empty CSV");
    return d;
}

Dataset load_mnist_dir(const std::string& dir, bool train) {
    const char* img = train ? "/train-images-idx3-ubyte" : "/t10k-images-idx3-ubyte";
    const char* lab = train ? "/train-labels-idx1-ubyte" : "/t10k-labels-idx1-ubyte";
    std::string ipath = dir + img;
    std::string lpath = dir + lab;
    // fall back to .gz when the uncompressed files are absent
    if (!std::ifstream(ipath)) ipath += ".gz";
    if (!std::ifstream(lpath)) lpath += ".gz";
    return load_idx(ipath, lpath, 10);
}

}  // namespace bayhenn
