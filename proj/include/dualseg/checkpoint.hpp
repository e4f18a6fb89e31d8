#pragma once

#include <cstring>
#include <filesystem>
#include <vector>

#include "dualseg/model.hpp"

namespace dualseg {

// Checkpoint container: little-endian binary, magic "DSEG", format version,
// entry count; each entry is path (u16 length + UTF-8), dtype tag (0 = f32,
// 1 = f64), rank, u32 dims, raw values. Model checkpoints hold the
// trainable parameters followed by the batchnorm buffers; the trainer's
// resume file appends optimizer entries under "opt." using the same
// container.
inline constexpr uint32_t kCheckpointVersion = 1;

enum class DType : uint8_t { F32 = 0, F64 = 1 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() {
    return DType::F32;
}
template <>
constexpr DType dtype_of<double>() {
    return DType::F64;
}

struct RawEntry {
    std::string path;
    uint8_t dtype = 0;
    Shape dims;
    std::vector<char> raw;
};

void write_entries(const std::filesystem::path& file, const std::vector<RawEntry>& entries);
std::vector<RawEntry> read_entries(const std::filesystem::path& file);

template <typename T>
RawEntry to_entry(const std::string& path, const Tensor<T>& t) {
    RawEntry e;
    e.path = path;
    e.dtype = static_cast<uint8_t>(dtype_of<T>());
    e.dims = t.shape();
    e.raw.resize(static_cast<size_t>(t.numel()) * sizeof(T));
    std::memcpy(e.raw.data(), t.data(), e.raw.size());
    return e;
}

template <typename T>
void entry_into(const RawEntry& e, Tensor<T>& t) {
    if (e.dtype != static_cast<uint8_t>(dtype_of<T>()))
        throw CheckpointError("checkpoint entry " + e.path + " has dtype tag " +
                              std::to_string(e.dtype) + ", expected " +
                              std::to_string(static_cast<int>(dtype_of<T>())));
    if (e.dims != t.shape())
        throw CheckpointError("checkpoint entry " + e.path + " has shape " + shape_str(e.dims) +
                              ", expected " + shape_str(t.shape()));
    std::memcpy(t.data(), e.raw.data(), e.raw.size());
}

template <typename T>
void save_checkpoint(const std::filesystem::path& file, const ModelParams<T>& mp) {
    std::vector<RawEntry> entries;
    entries.reserve(mp.trainable.size() + mp.buffers.size());
    for (const auto& [path, t] : mp.trainable) entries.push_back(to_entry(path, t));
    for (const auto& [path, t] : mp.buffers) entries.push_back(to_entry(path, t));
    write_entries(file, entries);
}

// Loads and validates against the config: the entry set must equal the
// parameter set the config defines, path by path and shape by shape.
template <typename T>
ModelParams<T> load_checkpoint(const std::filesystem::path& file, const ModelConfig& cfg) {
    ModelParams<T> mp = build_model<T>(cfg, 0);
    std::vector<RawEntry> entries = read_entries(file);
    size_t used = 0;
    for (const RawEntry& e : entries) {
        auto it = mp.trainable.find(e.path);
        if (it != mp.trainable.end()) {
            entry_into(e, it->second);
            ++used;
            continue;
        }
        auto ib = mp.buffers.find(e.path);
        if (ib != mp.buffers.end()) {
            entry_into(e, ib->second);
            ++used;
            continue;
        }
        throw CheckpointError("checkpoint entry " + e.path + " does not exist in the configured model");
    }
    if (used != mp.trainable.size() + mp.buffers.size())
        throw CheckpointError("checkpoint " + file.string() + " holds " + std::to_string(used) +
                              " of " + std::to_string(mp.trainable.size() + mp.buffers.size()) +
                              " required entries");
    return mp;
}

}  // namespace dualseg
