#pragma once

// Dataset persistence: a directory holding manifest.json plus one raw
// float32 .img and one raw u8 .lab file per example. Raw planes keep the
// reader trivial and the files diffable with standard tools.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "coldseg/data.hpp"
#include "coldseg/tensor.hpp"

namespace coldseg {

namespace detail {

inline void write_blob(const std::filesystem::path& path, const void* data, std::size_t bytes) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
    if (!os) throw std::runtime_error("write failed for " + path.string());
}

inline void read_blob(const std::filesystem::path& path, void* data, std::size_t bytes) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    is.read(static_cast<char*>(data), static_cast<std::streamsize>(bytes));
    if (!is || is.gcount() != static_cast<std::streamsize>(bytes))
        throw std::runtime_error("short read from " + path.string());
    char extra;
    if (is.read(&extra, 1))
        throw std::runtime_error("unexpected trailing bytes in " + path.string());
}

inline nlohmann::json split_manifest(const Dataset<float>& split) {
    nlohmann::json rows = nlohmann::json::array();
    for (const Example<float>& ex : split) {
        if (ex.image.rank() != 3 || ex.label.rank() != 2)
            throw std::invalid_argument("save_dataset: expects [C,H,W] images and [H,W] labels");
        rows.push_back({{"id", ex.id},
                        {"channels", ex.image.dim(0)},
                        {"height", ex.image.dim(1)},
                        {"width", ex.image.dim(2)}});
    }
    return rows;
}

inline void save_split(const std::filesystem::path& dir, const Dataset<float>& split) {
    for (const Example<float>& ex : split) {
        write_blob(dir / (ex.id + ".img"), ex.image.v.data(), ex.image.v.size() * sizeof(float));
        write_blob(dir / (ex.id + ".lab"), ex.label.v.data(), ex.label.v.size());
    }
}

inline Dataset<float> load_split(const std::filesystem::path& dir, const nlohmann::json& rows) {
    Dataset<float> out;
    out.reserve(rows.size());
    for (const nlohmann::json& row : rows) {
        Example<float> ex;
        ex.id = row.at("id").get<std::string>();
        const int c = row.at("channels").get<int>();
        const int h = row.at("height").get<int>();
        const int w = row.at("width").get<int>();
        ex.image = Tensor<float>({c, h, w});
        ex.label = LabelMap({h, w});
        read_blob(dir / (ex.id + ".img"), ex.image.v.data(), ex.image.v.size() * sizeof(float));
        read_blob(dir / (ex.id + ".lab"), ex.label.v.data(), ex.label.v.size());
        out.push_back(std::move(ex));
    }
    return out;
}

}  // namespace detail

inline void save_dataset(const std::filesystem::path& dir, const DatasetBundle& bundle,
                         int classes = 4) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["classes"] = classes;
    manifest["splits"] = {{"train", detail::split_manifest(bundle.train)},
                          {"val", detail::split_manifest(bundle.val)},
                          {"test_in", detail::split_manifest(bundle.test_in)},
                          {"test_shift", detail::split_manifest(bundle.test_shift)}};
    detail::save_split(dir, bundle.train);
    detail::save_split(dir, bundle.val);
    detail::save_split(dir, bundle.test_in);
    detail::save_split(dir, bundle.test_shift);
    std::ofstream os(dir / "manifest.json");
    if (!os) throw std::runtime_error("cannot write dataset manifest in " + dir.string());
    os << manifest.dump(2) << "\n";
}

struct LoadedDataset {
    DatasetBundle bundle;
    int classes = 0;
};

inline LoadedDataset load_dataset(const std::filesystem::path& dir) {
    std::ifstream is(dir / "manifest.json");
    if (!is) throw std::runtime_error("missing dataset manifest in " + dir.string());
    nlohmann::json manifest;
    try {
        is >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("bad dataset manifest in " + dir.string() + ": " + e.what());
    }
    LoadedDataset out;
    out.classes = manifest.at("classes").get<int>();
    const nlohmann::json& splits = manifest.at("splits");
    out.bundle.train = detail::load_split(dir, splits.at("train"));
    out.bundle.val = detail::load_split(dir, splits.at("val"));
    out.bundle.test_in = detail::load_split(dir, splits.at("test_in"));
    out.bundle.test_shift = detail::load_split(dir, splits.at("test_shift"));
    return out;
}

}  // namespace coldseg
