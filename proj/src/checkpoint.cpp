#include "dualseg/checkpoint.hpp"

#include <fstream>

namespace dualseg {

namespace {

constexpr char kMagic[4] = {'D', 'S', 'E', 'G'};

template <typename U>
void put(std::ostream& out, U v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U get(std::istream& in, const std::filesystem::path& file) {
    U v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(U));
    if (!in) throw CheckpointError("truncated checkpoint: " + file.string());
    return v;
}

}  // namespace

void write_entries(const std::filesystem::path& file, const std::vector<RawEntry>& entries) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw CheckpointError("cannot open checkpoint for writing: " + file.string());
    out.write(kMagic, 4);
    put<uint32_t>(out, kCheckpointVersion);
    put<uint32_t>(out, static_cast<uint32_t>(entries.size()));
    for (const RawEntry& e : entries) {
        if (e.path.size() > 0xffff) throw CheckpointError("checkpoint path too long: " + e.path);
        put<uint16_t>(out, static_cast<uint16_t>(e.path.size()));
        out.write(e.path.data(), static_cast<std::streamsize>(e.path.size()));
        put<uint8_t>(out, e.dtype);
        put<uint8_t>(out, static_cast<uint8_t>(e.dims.size()));
        for (int64_t d : e.dims) put<uint32_t>(out, static_cast<uint32_t>(d));
        out.write(e.raw.data(), static_cast<std::streamsize>(e.raw.size()));
    }
    if (!out) throw CheckpointError("write failed for checkpoint: " + file.string());
}

std::vector<RawEntry> read_entries(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint: " + file.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw CheckpointError("not a checkpoint file: " + file.string());
    const auto version = get<uint32_t>(in, file);
    if (version != kCheckpointVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " in " +
                              file.string());
    const auto count = get<uint32_t>(in, file);
    std::vector<RawEntry> entries;
    entries.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        RawEntry e;
        const auto plen = get<uint16_t>(in, file);
        e.path.resize(plen);
        in.read(e.path.data(), plen);
        e.dtype = get<uint8_t>(in, file);
        const auto rank = get<uint8_t>(in, file);
        int64_t n = 1;
        for (uint8_t r = 0; r < rank; ++r) {
            const auto d = get<uint32_t>(in, file);
            e.dims.push_back(static_cast<int64_t>(d));
            n *= d;
        }
        const size_t elem = e.dtype == static_cast<uint8_t>(DType::F64) ? 8 : 4;
        e.raw.resize(static_cast<size_t>(n) * elem);
        in.read(e.raw.data(), static_cast<std::streamsize>(e.raw.size()));
        if (!in) throw CheckpointError("truncated checkpoint: " + file.string());
        entries.push_back(std::move(e));
    }
    return entries;
}

}  // namespace dualseg
