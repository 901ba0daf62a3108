#pragma once

// Checkpoint format: one binary file per named tensor plus a text manifest.
// Each tensor file is magic "LMBF0001", little-endian u32 rank, rank
// little-endian u32 extents, then the payload as raw little-endian 32-bit
// floats. The manifest lists one tensor per line as
// "<name>\t<file>\t<d0>x<d1>x...". Batch-norm running statistics are stored
// alongside the learnable tensors so a reloaded model evaluates identically.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lmbf/net.hpp"

namespace lmbf {

inline constexpr char kCheckpointMagic[8] = {'L', 'M', 'B', 'F', '0', '0', '0', '1'};
inline constexpr const char* kManifestName = "manifest.txt";

namespace detail {

inline void put_u32_le(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xffu), static_cast<unsigned char>((v >> 8) & 0xffu),
                          static_cast<unsigned char>((v >> 16) & 0xffu),
                          static_cast<unsigned char>((v >> 24) & 0xffu)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t get_u32_le(std::istream& is, const std::string& path) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw parse_error(path + ": truncated header");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline std::string shape_file_str(const Shape& s) {
    std::string out;
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += 'x';
        out += std::to_string(s[i]);
    }
    return out.empty() ? "scalar" : out;
}

} // namespace detail

template <typename T>
inline void save_tensor_file(const std::filesystem::path& path, const Tensor<T>& t) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw parse_error(path.string() + ": cannot open for writing");
    os.write(kCheckpointMagic, 8);
    detail::put_u32_le(os, static_cast<uint32_t>(t.shape().size()));
    for (int64_t d : t.shape()) detail::put_u32_le(os, static_cast<uint32_t>(d));
    // Payload is float32 regardless of the in-memory scalar type.
    static_assert(sizeof(float) == 4);
    std::vector<float> payload(t.data().begin(), t.data().end());
    if (!payload.empty()) {
        // Assumes a little-endian host for the raw float write; the integer
        // fields above are byte-ordered explicitly.
        os.write(reinterpret_cast<const char*>(payload.data()),
                 static_cast<std::streamsize>(payload.size() * sizeof(float)));
    }
    if (!os) throw parse_error(path.string() + ": write failed");
}

template <typename T>
inline Tensor<T> load_tensor_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw parse_error(path.string() + ": cannot open");
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw parse_error(path.string() + ": bad magic");
    const uint32_t rank = detail::get_u32_le(is, path.string());
    if (rank > 8) throw parse_error(path.string() + ": implausible rank " + std::to_string(rank));
    Shape shape(rank);
    int64_t count = 1;
    for (uint32_t i = 0; i < rank; ++i) {
        shape[i] = static_cast<int64_t>(detail::get_u32_le(is, path.string()));
        count *= shape[i];
    }
    std::vector<float> payload(static_cast<size_t>(count));
    if (count > 0 &&
        !is.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(count * sizeof(float))))
        throw parse_error(path.string() + ": truncated payload");
    std::vector<T> data(payload.begin(), payload.end());
    return Tensor<T>::from_data(shape, std::move(data));
}

// Writes every parameter and buffer of the model into `dir` (created if
// absent) plus a manifest.
template <typename T>
inline void save_checkpoint(LmbfNet<T>& m, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ostringstream manifest;
    auto dump = [&](const std::string& name, Tensor<T>& t) {
        const std::string file = name + ".bin";
        save_tensor_file(dir / file, t);
        manifest << name << '\t' << file << '\t' << detail::shape_file_str(t.shape()) << '\n';
    };
    visit_params(m, dump);
    visit_buffers(m, dump);
    std::ofstream os(dir / kManifestName, std::ios::trunc);
    if (!os) throw parse_error((dir / kManifestName).string() + ": cannot open for writing");
    os << manifest.str();
    if (!os) throw parse_error((dir / kManifestName).string() + ": write failed");
}

// Loads a checkpoint saved by save_checkpoint into an already-built model.
// Every manifest entry must name a tensor of the model with the same shape,
// and every model tensor must be covered.
template <typename T>
inline void load_checkpoint(LmbfNet<T>& m, const std::filesystem::path& dir) {
    std::ifstream is(dir / kManifestName);
    if (!is) throw parse_error((dir / kManifestName).string() + ": cannot open");

    std::map<std::string, Tensor<T>*> slots;
    auto collect = [&slots](const std::string& name, Tensor<T>& t) { slots[name] = &t; };
    visit_params(m, collect);
    visit_buffers(m, collect);

    std::map<std::string, bool> seen;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const size_t t1 = line.find('\t');
        const size_t t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
        if (t2 == std::string::npos)
            throw parse_error((dir / kManifestName).string() + ": malformed line '" + line + "'");
        const std::string name = line.substr(0, t1);
        const std::string file = line.substr(t1 + 1, t2 - t1 - 1);
        auto it = slots.find(name);
        if (it == slots.end())
            throw contract_error("checkpoint: tensor '" + name + "' does not exist in this model");
        Tensor<T> loaded = load_tensor_file<T>(dir / file);
        if (loaded.shape() != it->second->shape())
            throw shape_error("checkpoint: '" + name + "' has shape " + shape_str(loaded.shape()) +
                              ", model wants " + shape_str(it->second->shape()));
        it->second->data() = loaded.data();
        seen[name] = true;
    }
    for (const auto& [name, ptr] : slots) {
        (void)ptr;
        if (!seen.count(name)) throw contract_error("checkpoint: missing tensor '" + name + "'");
    }
}

} // namespace lmbf
