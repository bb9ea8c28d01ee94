#pragma once

// Binary persistence for sampler checkpoints. Each file is self-describing:
// a fixed header identifying the producing run, a float32 weight payload,
// and a trailing CRC so silent corruption is caught on load instead of
// surfacing as a mysteriously bad model. Directories of checkpoints carry a
// JSON manifest to preserve order and chain-level metadata.
//
// Layout (all integers little-endian):
//   bytes 0..3    magic "SGHC"
//   bytes 4..5    format version, currently 1
//   header        config_hash u64, epoch u32, cycle u32, eta f64,
//                 temperature f64, lambda f64, seed u64, count u64
//   payload       count float32 values
//   trailer       CRC32 of the payload bytes

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "coldseg/sampler.hpp"

namespace coldseg {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian; big-endian hosts need byte swapping");

inline std::uint32_t crc32_update(std::uint32_t crc, const void* data, std::size_t len) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? (0xedb88320u ^ (c >> 1)) : (c >> 1);
            t[i] = c;
        }
        return t;
    }();
    const auto* p = static_cast<const unsigned char*>(data);
    crc = ~crc;
    for (std::size_t i = 0; i < len; ++i) crc = table[(crc ^ p[i]) & 0xff] ^ (crc >> 8);
    return ~crc;
}

inline std::uint32_t crc32(const void* data, std::size_t len) {
    return crc32_update(0, data, len);
}

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct CheckpointMeta {
    std::uint64_t config_hash = 0;
    std::uint32_t epoch = 0;  // 1-based epoch whose end produced the weights
    std::uint32_t cycle = 0;
    double eta = 0.0;
    double temperature = 0.0;
    double lambda = 0.0;
    std::uint64_t seed = 0;
};

namespace detail {

template <typename T>
void write_raw(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_raw(std::istream& is, T& v, const char* what) {
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error(std::string("truncated checkpoint file: missing ") + what);
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const CheckpointMeta& meta,
                            const std::vector<float>& w) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open checkpoint file for writing: " + path.string());
    os.write("SGHC", 4);
    detail::write_raw(os, kCheckpointVersion);
    detail::write_raw(os, meta.config_hash);
    detail::write_raw(os, meta.epoch);
    detail::write_raw(os, meta.cycle);
    detail::write_raw(os, meta.eta);
    detail::write_raw(os, meta.temperature);
    detail::write_raw(os, meta.lambda);
    detail::write_raw(os, meta.seed);
    detail::write_raw(os, static_cast<std::uint64_t>(w.size()));
    if (!w.empty())
        os.write(reinterpret_cast<const char*>(w.data()),
                 static_cast<std::streamsize>(w.size() * sizeof(float)));
    detail::write_raw(os, crc32(w.data(), w.size() * sizeof(float)));
    if (!os) throw std::runtime_error("write failed for checkpoint file: " + path.string());
}

struct LoadedCheckpoint {
    CheckpointMeta meta;
    std::vector<float> w;
};

// expected_hash, when nonzero, must match the stored config hash; this is
// how downstream commands refuse checkpoints from a different run setup.
inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path,
                                        std::uint64_t expected_hash = 0) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint file: " + path.string());

    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "SGHC", 4) != 0)
        throw std::runtime_error("not a checkpoint file (bad magic): " + path.string());

    std::uint16_t version = 0;
    detail::read_raw(is, version, "version");
    if (version != kCheckpointVersion)
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version) +
                                 " in " + path.string());

    LoadedCheckpoint out;
    std::uint64_t count = 0;
    detail::read_raw(is, out.meta.config_hash, "config hash");
    detail::read_raw(is, out.meta.epoch, "epoch");
    detail::read_raw(is, out.meta.cycle, "cycle");
    detail::read_raw(is, out.meta.eta, "eta");
    detail::read_raw(is, out.meta.temperature, "temperature");
    detail::read_raw(is, out.meta.lambda, "lambda");
    detail::read_raw(is, out.meta.seed, "seed");
    detail::read_raw(is, count, "weight count");

    out.w.resize(count);
    if (count > 0) {
        is.read(reinterpret_cast<char*>(out.w.data()),
                static_cast<std::streamsize>(count * sizeof(float)));
        if (!is) throw std::runtime_error("truncated checkpoint file: missing weights in " + path.string());
    }
    std::uint32_t stored_crc = 0;
    detail::read_raw(is, stored_crc, "CRC");
    const std::uint32_t actual = crc32(out.w.data(), out.w.size() * sizeof(float));
    if (stored_crc != actual)
        throw std::runtime_error("checkpoint payload CRC mismatch in " + path.string());
    if (expected_hash != 0 && out.meta.config_hash != expected_hash)
        throw std::runtime_error("checkpoint config hash mismatch in " + path.string());
    return out;
}

// A chain's checkpoints as a directory: NNN.sghc files plus store.json with
// the shared metadata and the file order.
inline void save_store(const std::filesystem::path& dir, const CheckpointStore<float>& store,
                       std::uint64_t config_hash, std::uint64_t seed, double temperature,
                       double lambda) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["config_hash"] = config_hash;
    manifest["seed"] = seed;
    manifest["temperature"] = temperature;
    manifest["lambda"] = lambda;
    manifest["checkpoints"] = nlohmann::json::array();
    for (std::size_t i = 0; i < store.entries.size(); ++i) {
        const ChainCheckpoint<float>& e = store.entries[i];
        std::string name = std::to_string(i);
        while (name.size() < 3) name.insert(name.begin(), '0');
        name += ".sghc";
        CheckpointMeta meta;
        meta.config_hash = config_hash;
        meta.epoch = static_cast<std::uint32_t>(e.epoch);
        meta.cycle = static_cast<std::uint32_t>(e.cycle);
        meta.eta = e.eta;
        meta.temperature = temperature;
        meta.lambda = lambda;
        meta.seed = seed;
        save_checkpoint(dir / name, meta, e.w);
        manifest["checkpoints"].push_back(
            {{"file", name}, {"epoch", e.epoch}, {"cycle", e.cycle}, {"eta", e.eta}});
    }
    std::ofstream os(dir / "store.json");
    if (!os) throw std::runtime_error("cannot write store manifest in " + dir.string());
    os << manifest.dump(2) << "\n";
}

struct LoadedStore {
    CheckpointStore<float> store;
    std::uint64_t config_hash = 0;
    std::uint64_t seed = 0;
    double temperature = 0.0;
    double lambda = 0.0;
};

inline LoadedStore load_store(const std::filesystem::path& dir, std::uint64_t expected_hash = 0) {
    std::ifstream is(dir / "store.json");
    if (!is) throw std::runtime_error("missing store manifest in " + dir.string());
    nlohmann::json manifest;
    try {
        is >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("bad store manifest in " + dir.string() + ": " + e.what());
    }
    LoadedStore out;
    out.config_hash = manifest.at("config_hash").get<std::uint64_t>();
    out.seed = manifest.at("seed").get<std::uint64_t>();
    out.temperature = manifest.at("temperature").get<double>();
    out.lambda = manifest.at("lambda").get<double>();
    if (expected_hash != 0 && out.config_hash != expected_hash)
        throw std::runtime_error("store config hash mismatch in " + dir.string());
    for (const nlohmann::json& row : manifest.at("checkpoints")) {
        LoadedCheckpoint ck = load_checkpoint(dir / row.at("file").get<std::string>(), expected_hash);
        ChainCheckpoint<float> e;
        e.epoch = static_cast<int>(ck.meta.epoch);
        e.cycle = static_cast<int>(ck.meta.cycle);
        e.eta = ck.meta.eta;
        e.w = std::move(ck.w);
        out.store.entries.push_back(std::move(e));
    }
    return out;
}

}  // namespace coldseg
