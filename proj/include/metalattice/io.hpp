#pragma once

// Binary artifact formats and hashing.
//   Design file:  magic "MMDG", version u32, height u32, width u32,
//                 payload u8 per pixel row-major.
//   Field tensor: magic "MMFS", version u32, frames u32, H u32, W u32,
//                 channels u32, payload little-endian f32.
//   Curve file:   CSV with header "strain,stress".
// PNG previews use the fixed design palette (void white, material 1 orange,
// 2 navy, 3 gray).

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "metalattice/designgen.hpp"
#include "metalattice/solver.hpp"

namespace metalattice::io {

inline constexpr std::uint32_t kFormatVersion = 1;

namespace detail {

inline void put_u32(std::string& s, std::uint32_t v) {
    s.push_back(static_cast<char>(v & 0xff));
    s.push_back(static_cast<char>((v >> 8) & 0xff));
    s.push_back(static_cast<char>((v >> 16) & 0xff));
    s.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline std::uint32_t get_u32(const std::string& s, std::size_t& pos) {
    if (pos + 4 > s.size()) throw std::runtime_error("truncated stream");
    const auto* b = reinterpret_cast<const unsigned char*>(s.data() + pos);
    pos += 4;
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32(std::string& s, float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32(s, v);
}

inline float get_f32(const std::string& s, std::size_t& pos) {
    const std::uint32_t v = get_u32(s, pos);
    float f;
    std::memcpy(&f, &v, 4);
    return f;
}

} // namespace detail

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw std::runtime_error("write failed: " + path);
}

inline std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

// ------------------------------------------------------------------ designs

inline std::string encode_design(const gen::FullDesign& d) {
    std::string s = "MMDG";
    detail::put_u32(s, kFormatVersion);
    detail::put_u32(s, gen::kFull);
    detail::put_u32(s, gen::kFull);
    s.append(reinterpret_cast<const char*>(d.grid.data()), d.grid.size());
    return s;
}

inline gen::FullDesign decode_design(const std::string& s) {
    if (s.size() < 16 || s.compare(0, 4, "MMDG") != 0) throw std::runtime_error("bad MMDG magic");
    std::size_t pos = 4;
    const std::uint32_t version = detail::get_u32(s, pos);
    if (version != kFormatVersion) throw std::runtime_error("unsupported MMDG version");
    const std::uint32_t h = detail::get_u32(s, pos);
    const std::uint32_t w = detail::get_u32(s, pos);
    if (h != gen::kFull || w != gen::kFull) throw std::runtime_error("unexpected MMDG dimensions");
    if (s.size() != pos + static_cast<std::size_t>(h) * w) throw std::runtime_error("MMDG size mismatch");
    gen::FullDesign d;
    std::memcpy(d.grid.data(), s.data() + pos, d.grid.size());
    for (auto v : d.grid)
        if (v > 3) throw std::runtime_error("MMDG material id out of range");
    return d;
}

inline void save_design(const std::string& path, const gen::FullDesign& d) {
    write_file(path, encode_design(d));
}

inline gen::FullDesign load_design(const std::string& path) { return decode_design(read_file(path)); }

// ------------------------------------------------------------- field stacks

inline std::string encode_fields(const fem::FieldStack& fs) {
    std::string s = "MMFS";
    detail::put_u32(s, kFormatVersion);
    detail::put_u32(s, static_cast<std::uint32_t>(fs.frames));
    detail::put_u32(s, static_cast<std::uint32_t>(fs.height));
    detail::put_u32(s, static_cast<std::uint32_t>(fs.width));
    detail::put_u32(s, static_cast<std::uint32_t>(fs.channels));
    s.reserve(s.size() + fs.data.size() * 4);
    for (float f : fs.data) detail::put_f32(s, f);
    return s;
}

inline fem::FieldStack decode_fields(const std::string& s) {
    if (s.size() < 24 || s.compare(0, 4, "MMFS") != 0) throw std::runtime_error("bad MMFS magic");
    std::size_t pos = 4;
    const std::uint32_t version = detail::get_u32(s, pos);
    if (version != kFormatVersion) throw std::runtime_error("unsupported MMFS version");
    const int frames = static_cast<int>(detail::get_u32(s, pos));
    const int h = static_cast<int>(detail::get_u32(s, pos));
    const int w = static_cast<int>(detail::get_u32(s, pos));
    const int c = static_cast<int>(detail::get_u32(s, pos));
    if (frames < 1 || h < 1 || w < 1 || c < 1) throw std::runtime_error("bad MMFS dimensions");
    fem::FieldStack fs(frames, h, w, c);
    if (s.size() != pos + fs.data.size() * 4) throw std::runtime_error("MMFS size mismatch");
    for (auto& f : fs.data) f = detail::get_f32(s, pos);
    return fs;
}

inline void save_fields(const std::string& path, const fem::FieldStack& fs) {
    write_file(path, encode_fields(fs));
}

inline fem::FieldStack load_fields(const std::string& path) { return decode_fields(read_file(path)); }

// ------------------------------------------------------------------- curves

inline std::string encode_curve(const fem::StressStrainCurve& c) {
    c.validate();
    std::ostringstream ss;
    ss << "strain,stress\n";
    ss.precision(17); // exact double round trip
    for (std::size_t i = 0; i < c.strains.size(); ++i) ss << c.strains[i] << "," << c.stresses[i] << "\n";
    return ss.str();
}

inline fem::StressStrainCurve decode_curve(const std::string& text) {
    std::istringstream ss(text);
    std::string line;
    if (!std::getline(ss, line) || line.rfind("strain,stress", 0) != 0)
        throw std::runtime_error("curve CSV must start with 'strain,stress'");
    fem::StressStrainCurve c;
    while (std::getline(ss, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw std::runtime_error("malformed curve row: " + line);
        c.strains.push_back(std::stod(line.substr(0, comma)));
        c.stresses.push_back(std::stod(line.substr(comma + 1)));
    }
    c.validate();
    return c;
}

inline void save_curve(const std::string& path, const fem::StressStrainCurve& c) {
    write_file(path, encode_curve(c));
}

inline fem::StressStrainCurve load_curve(const std::string& path) { return decode_curve(read_file(path)); }

// ------------------------------------------------------------------ hashing

// SHA-256, self contained; used for the manifest's artifact digests.
class Sha256 {
public:
    Sha256() { reset(); }

    void reset() {
        static constexpr std::uint32_t init[8] = {0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a,
                                                  0x510e527f, 0x9b05688c, 0x1f83d9ab, 0x5be0cd19};
        std::memcpy(h_, init, sizeof(h_));
        len_ = 0;
        buf_used_ = 0;
    }

    void update(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        len_ += n;
        while (n > 0) {
            const std::size_t take = std::min<std::size_t>(64 - buf_used_, n);
            std::memcpy(buf_ + buf_used_, p, take);
            buf_used_ += take;
            p += take;
            n -= take;
            if (buf_used_ == 64) {
                compress(buf_);
                buf_used_ = 0;
            }
        }
    }

    std::string hex_digest() {
        unsigned char tail[128];
        std::size_t tail_len = 0;
        tail[tail_len++] = 0x80;
        std::size_t pad = (buf_used_ < 56) ? (56 - buf_used_) : (120 - buf_used_);
        while (tail_len < pad) tail[tail_len++] = 0;
        const std::uint64_t bits = len_ * 8;
        for (int i = 7; i >= 0; --i) tail[tail_len++] = static_cast<unsigned char>(bits >> (8 * i));
        update_final(tail, tail_len);
        static const char* hexd = "0123456789abcdef";
        std::string out(64, '0');
        for (int i = 0; i < 8; ++i)
            for (int b = 0; b < 4; ++b) {
                const unsigned byte = (h_[i] >> (24 - 8 * b)) & 0xff;
                out[static_cast<std::size_t>(i * 8 + b * 2)] = hexd[byte >> 4];
                out[static_cast<std::size_t>(i * 8 + b * 2 + 1)] = hexd[byte & 0xf];
            }
        return out;
    }

private:
    void update_final(const unsigned char* p, std::size_t n) {
        while (n > 0) {
            const std::size_t take = std::min<std::size_t>(64 - buf_used_, n);
            std::memcpy(buf_ + buf_used_, p, take);
            buf_used_ += take;
            p += take;
            n -= take;
            if (buf_used_ == 64) {
                compress(buf_);
                buf_used_ = 0;
            }
        }
    }

    static std::uint32_t rotr(std::uint32_t x, int k) { return (x >> k) | (x << (32 - k)); }

    void compress(const unsigned char* block) {
        static constexpr std::uint32_t K[64] = {
            0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1, 0x923f82a4, 0xab1c5ed5,
            0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3, 0x72be5d74, 0x80deb1fe, 0x9bdc06a7, 0xc19bf174,
            0xe49b69c1, 0xefbe4786, 0x0fc19dc6, 0x240ca1cc, 0x2de92c6f, 0x4a7484aa, 0x5cb0a9dc, 0x76f988da,
            0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7, 0xc6e00bf3, 0xd5a79147, 0x06ca6351, 0x14292967,
            0x27b70a85, 0x2e1b2138, 0x4d2c6dfc, 0x53380d13, 0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85,
            0xa2bfe8a1, 0xa81a664b, 0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070,
            0x19a4c116, 0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a, 0x5b9cca4f, 0x682e6ff3,
            0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208, 0x90befffa, 0xa4506ceb, 0xbef9a3f7, 0xc67178f2};
        std::uint32_t w[64];
        for (int i = 0; i < 16; ++i)
            w[i] = (static_cast<std::uint32_t>(block[4 * i]) << 24) | (static_cast<std::uint32_t>(block[4 * i + 1]) << 16) |
                   (static_cast<std::uint32_t>(block[4 * i + 2]) << 8) | block[4 * i + 3];
        for (int i = 16; i < 64; ++i) {
            const std::uint32_t s0 = rotr(w[i - 15], 7) ^ rotr(w[i - 15], 18) ^ (w[i - 15] >> 3);
            const std::uint32_t s1 = rotr(w[i - 2], 17) ^ rotr(w[i - 2], 19) ^ (w[i - 2] >> 10);
            w[i] = w[i - 16] + s0 + w[i - 7] + s1;
        }
        std::uint32_t a = h_[0], b = h_[1], c = h_[2], d = h_[3], e = h_[4], f = h_[5], g = h_[6], hh = h_[7];
        for (int i = 0; i < 64; ++i) {
            const std::uint32_t S1 = rotr(e, 6) ^ rotr(e, 11) ^ rotr(e, 25);
            const std::uint32_t ch = (e & f) ^ (~e & g);
            const std::uint32_t t1 = hh + S1 + ch + K[i] + w[i];
            const std::uint32_t S0 = rotr(a, 2) ^ rotr(a, 13) ^ rotr(a, 22);
            const std::uint32_t maj = (a & b) ^ (a & c) ^ (b & c);
            const std::uint32_t t2 = S0 + maj;
            hh = g; g = f; f = e; e = d + t1;
            d = c; c = b; b = a; a = t1 + t2;
        }
        h_[0] += a; h_[1] += b; h_[2] += c; h_[3] += d;
        h_[4] += e; h_[5] += f; h_[6] += g; h_[7] += hh;
    }

    std::uint32_t h_[8];
    std::uint64_t len_ = 0;
    unsigned char buf_[64];
    std::size_t buf_used_ = 0;
};

inline std::string sha256_hex(const std::string& bytes) {
    Sha256 h;
    h.update(bytes.data(), bytes.size());
    return h.hex_digest();
}

inline std::string sha256_file(const std::string& path) { return sha256_hex(read_file(path)); }

// --------------------------------------------------------------------- PNG

// Minimal RGB8 PNG writer (zlib-deflated, filter 0 scanlines).
inline void write_png_rgb(const std::string& path, const std::vector<unsigned char>& rgb, int w, int h) {
    if (rgb.size() != static_cast<std::size_t>(w) * h * 3) throw std::invalid_argument("write_png_rgb: size mismatch");
    std::string raw;
    raw.reserve(static_cast<std::size_t>(h) * (1 + static_cast<std::size_t>(w) * 3));
    for (int i = 0; i < h; ++i) {
        raw.push_back('\0'); // filter type 0
        raw.append(reinterpret_cast<const char*>(rgb.data() + static_cast<std::size_t>(i) * w * 3),
                   static_cast<std::size_t>(w) * 3);
    }
    uLongf comp_bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<unsigned char> comp(comp_bound);
    if (compress2(comp.data(), &comp_bound, reinterpret_cast<const Bytef*>(raw.data()),
                  static_cast<uLong>(raw.size()), 9) != Z_OK)
        throw std::runtime_error("png deflate failed");
    comp.resize(comp_bound);

    std::string out;
    out.append("\x89PNG\r\n\x1a\n", 8);
    auto chunk = [&](const char* type, const std::string& payload) {
        std::string be_len;
        const std::uint32_t n = static_cast<std::uint32_t>(payload.size());
        be_len.push_back(static_cast<char>((n >> 24) & 0xff));
        be_len.push_back(static_cast<char>((n >> 16) & 0xff));
        be_len.push_back(static_cast<char>((n >> 8) & 0xff));
        be_len.push_back(static_cast<char>(n & 0xff));
        out += be_len;
        std::string body = std::string(type, 4) + payload;
        out += body;
        const auto crc = crc32(0, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()));
        out.push_back(static_cast<char>((crc >> 24) & 0xff));
        out.push_back(static_cast<char>((crc >> 16) & 0xff));
        out.push_back(static_cast<char>((crc >> 8) & 0xff));
        out.push_back(static_cast<char>(crc & 0xff));
    };
    std::string ihdr;
    auto be32 = [&](std::string& s, std::uint32_t v) {
        s.push_back(static_cast<char>((v >> 24) & 0xff));
        s.push_back(static_cast<char>((v >> 16) & 0xff));
        s.push_back(static_cast<char>((v >> 8) & 0xff));
        s.push_back(static_cast<char>(v & 0xff));
    };
    be32(ihdr, static_cast<std::uint32_t>(w));
    be32(ihdr, static_cast<std::uint32_t>(h));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(2);  // color type RGB
    ihdr.push_back(0);  // compression
    ihdr.push_back(0);  // filter
    ihdr.push_back(0);  // interlace
    chunk("IHDR", ihdr);
    chunk("IDAT", std::string(reinterpret_cast<const char*>(comp.data()), comp.size()));
    chunk("IEND", "");
    write_file(path, out);
}

// design preview with the fixed material palette
inline void save_design_png(const std::string& path, const gen::FullDesign& d, int scale = 4) {
    static constexpr unsigned char palette[4][3] = {
        {255, 255, 255}, // void: white
        {255, 140, 0},   // material 1: orange
        {0, 0, 128},     // material 2: navy
        {128, 128, 128}, // material 3: gray
    };
    const int w = gen::kFull * scale, h = gen::kFull * scale;
    std::vector<unsigned char> rgb(static_cast<std::size_t>(w) * h * 3);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const unsigned char m = d.at(i / scale, j / scale);
            for (int c = 0; c < 3; ++c)
                rgb[(static_cast<std::size_t>(i) * w + j) * 3 + static_cast<std::size_t>(c)] = palette[m][c];
        }
    write_png_rgb(path, rgb, w, h);
}

} // namespace metalattice::io
