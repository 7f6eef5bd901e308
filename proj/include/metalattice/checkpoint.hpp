#pragma once

// Checkpoint container: magic "MLCK", format version u32, then repeated
// records (name length u32, UTF-8 name, ndim u32, dims u32 each, payload
// little-endian f32). Adam state rides in the same container under
// "<name>.m", "<name>.v", "<name>.t".

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>

#include "metalattice/adam.hpp"
#include "metalattice/tensor.hpp"

namespace metalattice::nn {

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("checkpoint: truncated stream");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_record(std::ostream& os, const std::string& name, const Tensor& t) {
    write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(os, static_cast<std::uint32_t>(t.ndim()));
    for (int d : t.dims) write_u32(os, static_cast<std::uint32_t>(d));
    static_assert(sizeof(float) == 4);
    os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.v.size() * 4));
}

} // namespace detail

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_tensor_map(const std::string& path, const std::map<std::string, Tensor>& tensors) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open for write: " + path);
    os.write("MLCK", 4);
    detail::write_u32(os, kCheckpointVersion);
    for (const auto& [name, t] : tensors) detail::write_record(os, name, t);
    if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

inline std::map<std::string, Tensor> load_tensor_map(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "MLCK", 4) != 0) throw std::runtime_error("checkpoint: bad magic in " + path);
    const std::uint32_t version = detail::read_u32(is);
    if (version != kCheckpointVersion) throw std::runtime_error("checkpoint: unsupported version");
    std::map<std::string, Tensor> out;
    for (;;) {
        std::uint32_t name_len;
        unsigned char b[4];
        is.read(reinterpret_cast<char*>(b), 4);
        if (is.eof()) break;
        if (!is) throw std::runtime_error("checkpoint: truncated record");
        name_len = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                   (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const std::uint32_t ndim = detail::read_u32(is);
        std::vector<int> dims(ndim);
        for (auto& d : dims) d = static_cast<int>(detail::read_u32(is));
        Tensor t(dims);
        is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.v.size() * 4));
        if (!is) throw std::runtime_error("checkpoint: truncated payload for " + name);
        out.emplace(std::move(name), std::move(t));
    }
    return out;
}

inline void save_params(const std::string& path, const ParamSet& params, bool with_optimizer_state = true) {
    std::map<std::string, Tensor> m;
    for (const auto& [name, e] : params.entries) {
        m.emplace(name, e.value);
        if (with_optimizer_state) {
            m.emplace(name + ".m", e.m);
            m.emplace(name + ".v", e.v);
            Tensor step({1});
            step.v[0] = static_cast<float>(e.step);
            m.emplace(name + ".t", std::move(step));
        }
    }
    save_tensor_map(path, m);
}

inline ParamSet load_params(const std::string& path) {
    auto m = load_tensor_map(path);
    ParamSet ps;
    for (auto& [name, t] : m) {
        const auto n = name.size();
        if (n > 2 && name[n - 2] == '.' && (name[n - 1] == 'm' || name[n - 1] == 'v' || name[n - 1] == 't'))
            continue;
        ParamSet::Entry e;
        e.value = t;
        auto im = m.find(name + ".m");
        auto iv = m.find(name + ".v");
        auto it = m.find(name + ".t");
        e.m = im != m.end() ? im->second : Tensor(e.value.dims);
        e.v = iv != m.end() ? iv->second : Tensor(e.value.dims);
        e.step = it != m.end() ? static_cast<std::int64_t>(it->second.v[0]) : 0;
        if (!e.m.same_dims(e.value) || !e.v.same_dims(e.value))
            throw std::runtime_error("checkpoint: optimizer state shape mismatch for " + name);
        ps.entries.emplace(name, std::move(e));
    }
    return ps;
}

} // namespace metalattice::nn
