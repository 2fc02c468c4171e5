#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "volflow/errors.hpp"
#include "volflow/flow/model.hpp"

namespace volflow {

// Checkpoint container: "RFLW" magic, u32 version, the config (five u32
// fields then scale_clamp f32), then a named tensor table (count u32;
// per tensor: name length u16, UTF-8 name, rank u8, dims u32*rank, f32
// little-endian data). Trainables are stored in registry order followed
// by the frozen invconv perm/sign and actnorm init flags.

inline constexpr char kCheckpointMagic[4] = {'R', 'F', 'L', 'W'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void ck_put_u16(std::vector<std::uint8_t>& b, std::uint16_t v) {
    b.push_back(std::uint8_t(v & 0xff));
    b.push_back(std::uint8_t(v >> 8));
}
inline void ck_put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(std::uint8_t((v >> (8 * i)) & 0xff));
}
inline void ck_put_f32(std::vector<std::uint8_t>& b, float v) {
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    ck_put_u32(b, u);
}

struct CkReader {
    const std::vector<std::uint8_t>& b;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > b.size()) throw LengthError("truncated checkpoint");
    }
    std::uint8_t u8() {
        need(1);
        return b[pos++];
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = std::uint16_t(b[pos]) | std::uint16_t(b[pos + 1]) << 8;
        pos += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    float f32() {
        const std::uint32_t u = u32();
        float v;
        std::memcpy(&v, &u, 4);
        return v;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(&b[pos]), n);
        pos += n;
        return s;
    }
};

template <typename T>
void ck_emit_tensor(std::vector<std::uint8_t>& buf, const std::string& name,
                    const std::vector<T>& data) {
    if (name.size() > 0xffff) throw ArgumentError("tensor name too long");
    ck_put_u16(buf, std::uint16_t(name.size()));
    buf.insert(buf.end(), name.begin(), name.end());
    buf.push_back(1);  // rank
    ck_put_u32(buf, std::uint32_t(data.size()));
    for (const T v : data) ck_put_f32(buf, float(v));
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const FlowModel<T>& model) {
    std::vector<std::uint8_t> buf;
    buf.insert(buf.end(), kCheckpointMagic, kCheckpointMagic + 4);
    detail::ck_put_u32(buf, kCheckpointVersion);
    detail::ck_put_u32(buf, model.config.levels);
    detail::ck_put_u32(buf, model.config.flows);
    detail::ck_put_u32(buf, model.config.patch_edge);
    detail::ck_put_u32(buf, model.config.in_channels);
    detail::ck_put_u32(buf, model.config.coupling_hidden);
    detail::ck_put_f32(buf, model.config.scale_clamp);

    std::uint32_t count = 0;
    for_each_param(model.params,
                   [&](const std::string&, const std::vector<T>&) { ++count; });
    count += 3 * model.config.levels * model.config.flows;  // perm, sign, flag
    detail::ck_put_u32(buf, count);

    for_each_param(model.params,
                   [&](const std::string& name, const std::vector<T>& v) {
                       detail::ck_emit_tensor(buf, name, v);
                   });
    for (std::size_t l = 0; l < model.params.levels.size(); ++l) {
        for (std::size_t k = 0; k < model.params.levels[l].size(); ++k) {
            const auto& s = model.params.levels[l][k];
            const std::string base =
                "level" + std::to_string(l) + ".flow" + std::to_string(k) + ".";
            std::vector<float> perm(s.invconv.perm.begin(), s.invconv.perm.end());
            std::vector<float> sign(s.invconv.sign.begin(), s.invconv.sign.end());
            std::vector<float> flag{s.actnorm.initialized ? 1.0f : 0.0f};
            detail::ck_emit_tensor(buf, base + "invconv.perm", perm);
            detail::ck_emit_tensor(buf, base + "invconv.sign", sign);
            detail::ck_emit_tensor(buf, base + "actnorm.initialized", flag);
        }
    }

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(reinterpret_cast<const char*>(buf.data()),
            std::streamsize(buf.size()));
    if (!f) throw IoError("write failed: " + path);
}

template <typename T>
FlowModel<T> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::vector<std::uint8_t> buf(
        (std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    detail::CkReader r{buf};

    const std::string magic = r.str(4);
    if (std::memcmp(magic.data(), kCheckpointMagic, 4) != 0)
        throw FormatError("bad checkpoint magic");
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " +
                          std::to_string(version));

    FlowConfig cfg;
    cfg.levels = r.u32();
    cfg.flows = r.u32();
    cfg.patch_edge = r.u32();
    cfg.in_channels = r.u32();
    cfg.coupling_hidden = r.u32();
    cfg.scale_clamp = r.f32();
    validate(cfg);

    const std::uint32_t count = r.u32();
    std::map<std::string, std::vector<float>> table;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t name_len = r.u16();
        const std::string name = r.str(name_len);
        const std::uint8_t rank = r.u8();
        std::size_t n = 1;
        for (std::uint8_t d = 0; d < rank; ++d) n *= r.u32();
        std::vector<float> data(n);
        for (std::size_t j = 0; j < n; ++j) data[j] = r.f32();
        if (!table.emplace(name, std::move(data)).second)
            throw FormatError("duplicate tensor name: " + name);
    }
    if (r.pos != buf.size())
        throw LengthError("trailing bytes after checkpoint table");

    FlowModel<T> model(cfg, InitMode::Identity, 0);
    auto take = [&](const std::string& name) -> std::vector<float> {
        auto it = table.find(name);
        if (it == table.end())
            throw FormatError("checkpoint missing tensor: " + name);
        auto v = std::move(it->second);
        table.erase(it);
        return v;
    };

    for_each_param(model.params,
                   [&](const std::string& name, std::vector<T>& dst) {
                       const auto src = take(name);
                       if (src.size() != dst.size())
                           throw FormatError("tensor " + name +
                                             " has wrong element count");
                       for (std::size_t i = 0; i < src.size(); ++i)
                           dst[i] = T(src[i]);
                   });
    for (std::size_t l = 0; l < model.params.levels.size(); ++l) {
        for (std::size_t k = 0; k < model.params.levels[l].size(); ++k) {
            auto& s = model.params.levels[l][k];
            const std::string base =
                "level" + std::to_string(l) + ".flow" + std::to_string(k) + ".";
            const auto perm = take(base + "invconv.perm");
            const auto sign = take(base + "invconv.sign");
            const auto flag = take(base + "actnorm.initialized");
            const std::uint32_t C = s.invconv.channels;
            if (perm.size() != C || sign.size() != C || flag.size() != 1)
                throw FormatError("frozen tensor shape mismatch at " + base);
            std::vector<bool> seen(C, false);
            for (std::uint32_t i = 0; i < C; ++i) {
                const auto idx = std::int64_t(perm[i]);
                if (idx < 0 || idx >= std::int64_t(C) || seen[std::size_t(idx)])
                    throw FormatError("invalid permutation at " + base);
                seen[std::size_t(idx)] = true;
                s.invconv.perm[i] = std::int32_t(idx);
                if (sign[i] != 1.0f && sign[i] != -1.0f)
                    throw FormatError("invalid sign at " + base);
                s.invconv.sign[i] = T(sign[i]);
            }
            s.actnorm.initialized = flag[0] != 0.0f;
        }
    }
    if (!table.empty())
        throw FormatError("unexpected tensor in checkpoint: " +
                          table.begin()->first);
    return model;
}

}  // namespace volflow
