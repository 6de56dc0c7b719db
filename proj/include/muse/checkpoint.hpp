#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "muse/optim.hpp"
#include "muse/param.hpp"

namespace muse {

// Checkpoint file: 8-byte magic "MUSECKP1" (version digit in the magic),
// u32 record count, then per record: u32 name length, name bytes, u32 ndim,
// u32 dims, float32 little-endian values. Round trips are byte-exact.

struct CheckpointRecord {
    std::string name;
    std::vector<int> shape;
    std::vector<float> values;
};

namespace detail {

inline constexpr char kCkptMagic[8] = {'M', 'U', 'S', 'E', 'C', 'K', 'P', '1'};

inline void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("checkpoint: truncated file");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& os, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
}

inline float get_f32(std::istream& is) {
    uint32_t bits = get_u32(is);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

} // namespace detail

inline void write_checkpoint(const std::string& path, const std::vector<CheckpointRecord>& records) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open for write: " + path);
    os.write(detail::kCkptMagic, 8);
    detail::put_u32(os, static_cast<uint32_t>(records.size()));
    for (const auto& r : records) {
        detail::put_u32(os, static_cast<uint32_t>(r.name.size()));
        os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
        detail::put_u32(os, static_cast<uint32_t>(r.shape.size()));
        int64_t n = 1;
        for (int d : r.shape) {
            detail::put_u32(os, static_cast<uint32_t>(d));
            n *= d;
        }
        if (n != static_cast<int64_t>(r.values.size()))
            throw std::invalid_argument("checkpoint: record " + r.name + " shape/value mismatch");
        for (float v : r.values) detail::put_f32(os, v);
    }
    if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

inline std::vector<CheckpointRecord> read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
    char magic[8];
    if (!is.read(magic, 8)) throw std::runtime_error("checkpoint: truncated header: " + path);
    if (std::memcmp(magic, detail::kCkptMagic, 8) != 0)
        throw std::runtime_error("checkpoint: bad magic/version in " + path);
    uint32_t count = detail::get_u32(is);
    std::vector<CheckpointRecord> records;
    records.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        CheckpointRecord r;
        uint32_t name_len = detail::get_u32(is);
        r.name.resize(name_len);
        if (!is.read(r.name.data(), name_len)) throw std::runtime_error("checkpoint: truncated name");
        uint32_t ndim = detail::get_u32(is);
        int64_t n = 1;
        for (uint32_t d = 0; d < ndim; ++d) {
            int e = static_cast<int>(detail::get_u32(is));
            r.shape.push_back(e);
            n *= e;
        }
        r.values.resize(static_cast<size_t>(n));
        for (int64_t k = 0; k < n; ++k) r.values[static_cast<size_t>(k)] = detail::get_f32(is);
        if (!is) throw std::runtime_error("checkpoint: truncated values in record " + r.name);
        records.push_back(std::move(r));
    }
    return records;
}

// ---- model + optimizer snapshots over the record format ----

template <class Real>
inline std::vector<CheckpointRecord> snapshot_records(const ParamList<Real>& params, const AdamW<Real>* opt) {
    std::vector<CheckpointRecord> recs;
    auto to_f32 = [](const Tensor<Real>& t) {
        std::vector<float> v(t.data.size());
        for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(t.data[i]);
        return v;
    };
    for (const auto* p : params) {
        recs.push_back({"param." + p->name, p->value.shape, to_f32(p->value)});
        recs.push_back({"flags." + p->name, {2}, {p->trainable ? 1.0f : 0.0f, p->frozen ? 1.0f : 0.0f}});
    }
    if (opt) {
        recs.push_back({"adam.t", {1}, {static_cast<float>(opt->t)}});
        recs.push_back({"adam.hyper", {5},
                        {static_cast<float>(opt->lr), static_cast<float>(opt->beta1), static_cast<float>(opt->beta2),
                         static_cast<float>(opt->eps), static_cast<float>(opt->weight_decay)}});
        for (const auto* p : params) {
            auto mi = opt->m.find(p->name);
            auto vi = opt->v.find(p->name);
            if (mi != opt->m.end()) recs.push_back({"adam.m." + p->name, mi->second.shape, to_f32(mi->second)});
            if (vi != opt->v.end()) recs.push_back({"adam.v." + p->name, vi->second.shape, to_f32(vi->second)});
        }
    }
    return recs;
}

template <class Real>
inline void save_snapshot(const std::string& path, const ParamList<Real>& params, const AdamW<Real>* opt) {
    write_checkpoint(path, snapshot_records(params, opt));
}

template <class Real>
inline void load_snapshot(const std::string& path, const ParamList<Real>& params, AdamW<Real>* opt = nullptr) {
    auto records = read_checkpoint(path);
    std::map<std::string, const CheckpointRecord*> by_name;
    for (const auto& r : records) by_name[r.name] = &r;

    auto fetch = [&](const std::string& name, const std::vector<int>& want_shape) -> const CheckpointRecord* {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw std::runtime_error("checkpoint: missing record " + name);
        if (!want_shape.empty() && it->second->shape != want_shape)
            throw std::runtime_error("checkpoint: shape mismatch for " + name);
        return it->second;
    };
    auto to_real = [](const CheckpointRecord& r, Tensor<Real>& t) {
        t = Tensor<Real>(r.shape);
        for (size_t i = 0; i < r.values.size(); ++i) t.data[i] = static_cast<Real>(r.values[i]);
    };

    for (auto* p : params) {
        const CheckpointRecord* rv = fetch("param." + p->name, p->value.shape);
        to_real(*rv, p->value);
        p->grad = Tensor<Real>(p->value.shape);
        const CheckpointRecord* rf = fetch("flags." + p->name, {2});
        p->trainable = rf->values[0] != 0.0f;
        p->frozen = rf->values[1] != 0.0f;
    }
    if (opt) {
        opt->reset();
        auto it = by_name.find("adam.t");
        if (it != by_name.end()) opt->t = static_cast<int64_t>(it->second->values[0]);
        it = by_name.find("adam.hyper");
        if (it != by_name.end()) {
            opt->lr = static_cast<Real>(it->second->values[0]);
            opt->beta1 = static_cast<Real>(it->second->values[1]);
            opt->beta2 = static_cast<Real>(it->second->values[2]);
            opt->eps = static_cast<Real>(it->second->values[3]);
            opt->weight_decay = static_cast<Real>(it->second->values[4]);
        }
        for (auto* p : params) {
            auto mi = by_name.find("adam.m." + p->name);
            if (mi != by_name.end()) to_real(*mi->second, opt->m[p->name]);
            auto vi = by_name.find("adam.v." + p->name);
            if (vi != by_name.end()) to_real(*vi->second, opt->v[p->name]);
        }
    }
}

} // namespace muse
