#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "vitdrive/vit.hpp"

namespace vitdrive {

struct FingerprintError : ConfigError {
    using ConfigError::ConfigError;
};

// Named-array container for learnable parameters.
//
// Layout (all integers little-endian):
//   magic   8 bytes  "VDRVCKPT"
//   version u32      1
//   fprint  u64      config fingerprint
//   count   u32      number of arrays
//   per array:
//     name_len u32, name bytes,
//     ndim u32, dims u32[ndim],
//     data f32[numel] little-endian
struct NamedArray {
    std::string name;
    std::vector<int> shape;
    std::vector<float> data;
};

struct Checkpoint {
    uint64_t fingerprint = 0;
    std::vector<NamedArray> arrays;
};

namespace detail {

inline constexpr char kCkptMagic[8] = {'V', 'D', 'R', 'V', 'C', 'K', 'P', 'T'};
inline constexpr uint32_t kCkptVersion = 1;

inline void put_u32(std::string& buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& buf, uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::string& buf, float v) {
    put_u32(buf, std::bit_cast<uint32_t>(v));
}

struct Reader {
    std::string buf;
    size_t pos = 0;
    explicit Reader(std::string b) : buf(std::move(b)) {}
    void need(size_t n, const char* what) {
        if (pos + n > buf.size())
            throw std::runtime_error(std::string("checkpoint: truncated reading ") + what);
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos++])) << (8 * i);
        return v;
    }
    uint64_t u64(const char* what) {
        need(8, what);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(buf[pos++])) << (8 * i);
        return v;
    }
    float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
};

}  // namespace detail

inline void save_checkpoint(const std::string& path, uint64_t fingerprint,
                            const std::vector<NamedArray>& arrays) {
    std::string buf;
    buf.append(detail::kCkptMagic, sizeof(detail::kCkptMagic));
    detail::put_u32(buf, detail::kCkptVersion);
    detail::put_u64(buf, fingerprint);
    detail::put_u32(buf, static_cast<uint32_t>(arrays.size()));
    for (const auto& a : arrays) {
        detail::put_u32(buf, static_cast<uint32_t>(a.name.size()));
        buf.append(a.name);
        detail::put_u32(buf, static_cast<uint32_t>(a.shape.size()));
        for (int d : a.shape) detail::put_u32(buf, static_cast<uint32_t>(d));
        for (float v : a.data) detail::put_f32(buf, v);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot open for write: " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw std::runtime_error("checkpoint: write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open: " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    detail::Reader r(std::move(buf));
    r.need(sizeof(detail::kCkptMagic), "magic");
    if (std::memcmp(r.buf.data(), detail::kCkptMagic, sizeof(detail::kCkptMagic)) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    r.pos += sizeof(detail::kCkptMagic);
    const uint32_t version = r.u32("version");
    if (version != detail::kCkptVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    Checkpoint ckpt;
    ckpt.fingerprint = r.u64("fingerprint");
    const uint32_t count = r.u32("array count");
    ckpt.arrays.resize(count);
    for (auto& a : ckpt.arrays) {
        const uint32_t name_len = r.u32("name length");
        r.need(name_len, "name");
        a.name.assign(r.buf.data() + r.pos, name_len);
        r.pos += name_len;
        const uint32_t ndim = r.u32("ndim");
        a.shape.resize(ndim);
        int64_t numel = 1;
        for (auto& d : a.shape) {
            d = static_cast<int>(r.u32("dim"));
            numel *= d;
        }
        a.data.resize(static_cast<size_t>(numel));
        for (auto& v : a.data) v = r.f32("array data");
    }
    return ckpt;
}

// Fingerprint-checked load: refuses before touching any array content.
inline Checkpoint load_checkpoint(const std::string& path, uint64_t expected_fingerprint) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open: " + path);
    char header[20];
    in.read(header, sizeof(header));
    if (!in) throw std::runtime_error("checkpoint: truncated header in " + path);
    if (std::memcmp(header, detail::kCkptMagic, sizeof(detail::kCkptMagic)) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    uint64_t fp = 0;
    for (int i = 0; i < 8; ++i)
        fp |= static_cast<uint64_t>(static_cast<uint8_t>(header[12 + i])) << (8 * i);
    if (fp != expected_fingerprint)
        throw FingerprintError("checkpoint fingerprint mismatch: file has " + std::to_string(fp) +
                               ", config expects " + std::to_string(expected_fingerprint));
    return load_checkpoint(path);
}

// --- ViT parameter round-trip -----------------------------------------------

inline void save_params(const std::string& path, const ViTConfig& cfg,
                        EncoderParamsT<float>& params) {
    std::vector<NamedArray> arrays;
    params.for_each([&arrays](const std::string& name, Tensor& t) {
        auto v = t.values();
        arrays.push_back({name, t.shape(), std::vector<float>(v.begin(), v.end())});
    });
    save_checkpoint(path, cfg.fingerprint(), arrays);
}

inline EncoderParamsT<float> load_params(const std::string& path, const ViTConfig& cfg) {
    Checkpoint ckpt = load_checkpoint(path, cfg.fingerprint());
    std::map<std::string, const NamedArray*> by_name;
    for (const auto& a : ckpt.arrays) by_name[a.name] = &a;
    auto params = EncoderParamsT<float>::init(cfg, 0);
    size_t used = 0;
    params.for_each([&](const std::string& name, Tensor& t) {
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw std::runtime_error("checkpoint: missing array '" + name + "' in " + path);
        const auto& a = *it->second;
        if (a.shape != t.shape())
            throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
        std::copy(a.data.begin(), a.data.end(), t.values().begin());
        ++used;
    });
    if (used != ckpt.arrays.size())
        throw std::runtime_error("checkpoint: unexpected extra arrays in " + path);
    return params;
}

}  // namespace vitdrive
