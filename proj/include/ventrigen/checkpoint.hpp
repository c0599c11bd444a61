#pragma once

// VGCK parameter checkpoints: magic "VGCK", version u32, parameter count u32,
// then per parameter: name length u32 + UTF-8 name, rank u32, dims u64 each,
// little-endian f64 payload.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "ventrigen/tensor.hpp"

namespace vgen {

namespace detail {

template <class T>
void write_raw(std::ofstream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_raw(std::ifstream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) fail("checkpoint: unexpected end of file");
    return v;
}

}  // namespace detail

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, const ParamList& params) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) fail("checkpoint: cannot open '" + path + "' for writing");
    os.write("VGCK", 4);
    detail::write_raw(os, kCheckpointVersion);
    detail::write_raw(os, static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
        detail::write_raw(os, static_cast<std::uint32_t>(p.name.size()));
        os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        const Shape& shape = p.tensor.shape();
        detail::write_raw(os, static_cast<std::uint32_t>(shape.size()));
        for (std::size_t d : shape) detail::write_raw(os, static_cast<std::uint64_t>(d));
        os.write(reinterpret_cast<const char*>(p.tensor.data()),
                 static_cast<std::streamsize>(p.tensor.size() * sizeof(double)));
    }
    if (!os) fail("checkpoint: write failed for '" + path + "'");
}

inline std::map<std::string, Tensor> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail("checkpoint: cannot open '" + path + "'");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "VGCK", 4) != 0) {
        fail("checkpoint: '" + path + "' is not a VGCK file");
    }
    std::uint32_t version = detail::read_raw<std::uint32_t>(is);
    if (version != kCheckpointVersion) {
        fail("checkpoint: unsupported version " + std::to_string(version));
    }
    std::uint32_t count = detail::read_raw<std::uint32_t>(is);
    std::map<std::string, Tensor> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint32_t name_len = detail::read_raw<std::uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        std::uint32_t rank = detail::read_raw<std::uint32_t>(is);
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<std::size_t>(detail::read_raw<std::uint64_t>(is));
        std::vector<double> values(shape_size(shape));
        is.read(reinterpret_cast<char*>(values.data()),
                static_cast<std::streamsize>(values.size() * sizeof(double)));
        if (!is) fail("checkpoint: truncated payload in '" + path + "'");
        out.emplace(name, Tensor::from_values(shape, std::move(values)));
    }
    return out;
}

// Copies stored values into an existing parameter list; shapes must agree.
inline void load_checkpoint_into(const std::string& path, ParamList& params) {
    auto stored = load_checkpoint(path);
    for (auto& p : params) {
        auto it = stored.find(p.name);
        if (it == stored.end()) fail("checkpoint: '" + path + "' missing parameter '" + p.name + "'");
        if (it->second.shape() != p.tensor.shape()) {
            fail("checkpoint: shape mismatch for '" + p.name + "': stored " +
                 shape_str(it->second.shape()) + " vs model " + shape_str(p.tensor.shape()));
        }
        p.tensor.values() = it->second.values();
    }
}

}  // namespace vgen
