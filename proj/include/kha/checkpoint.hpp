#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "kha/model.hpp"
#include "kha/tensor.hpp"
#include "kha/trainer.hpp"

// Checkpoint container. Layout, all little-endian:
//   "KHAC"  magic
//   u32     format version (currently 1)
//   u32     tensor count
//   then per tensor:
//   u16     name length, followed by that many UTF-8 bytes
//   u8      dtype: 0 = f32, 1 = f64
//   u8      rank
//   u64[r]  dims
//   raw element bytes (IEEE-754 bit patterns, little-endian)
// Model configuration rides along as rank-1 "meta.*" f64 scalars so a
// checkpoint is self-describing.

namespace kha {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
    std::string name;
    std::uint8_t dtype = 0;  // 0 f32, 1 f64
    Shape dims;
    std::vector<unsigned char> raw;

    std::size_t elem_count() const { return shape_numel(dims); }
};

namespace detail {

inline void put_bytes(std::vector<unsigned char>& out, std::uint64_t v, int nbytes) {
    for (int i = 0; i < nbytes; ++i) {
        out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
    }
}

class ByteReader {
  public:
    ByteReader(const unsigned char* p, std::size_t n) : p_(p), n_(n) {}

    std::uint64_t take(int nbytes) {
        if (pos_ + static_cast<std::size_t>(nbytes) > n_) {
            throw value_error("checkpoint: truncated file");
        }
        std::uint64_t v = 0;
        for (int i = 0; i < nbytes; ++i) {
            v |= static_cast<std::uint64_t>(p_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
        }
        pos_ += static_cast<std::size_t>(nbytes);
        return v;
    }

    const unsigned char* take_span(std::size_t n) {
        if (pos_ + n > n_) {
            throw value_error("checkpoint: truncated file");
        }
        const unsigned char* p = p_ + pos_;
        pos_ += n;
        return p;
    }

    bool empty() const { return pos_ == n_; }

  private:
    const unsigned char* p_;
    std::size_t n_;
    std::size_t pos_ = 0;
};

}  // namespace detail

template <typename T>
constexpr std::uint8_t dtype_of() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? 0 : 1;
}

inline std::size_t dtype_size(std::uint8_t dtype) {
    if (dtype > 1) {
        throw value_error("checkpoint: unknown dtype " + std::to_string(dtype));
    }
    return dtype == 0 ? 4 : 8;
}

template <typename T>
CheckpointEntry to_entry(const std::string& name, const Tensor<T>& t) {
    CheckpointEntry e;
    e.name = name;
    e.dtype = dtype_of<T>();
    e.dims = t.shape();
    e.raw.reserve(t.numel() * sizeof(T));
    for (T v : t.value()) {
        if constexpr (std::is_same_v<T, float>) {
            detail::put_bytes(e.raw, std::bit_cast<std::uint32_t>(v), 4);
        } else {
            detail::put_bytes(e.raw, std::bit_cast<std::uint64_t>(v), 8);
        }
    }
    return e;
}

template <typename T>
Tensor<T> from_entry(const CheckpointEntry& e) {
    if (e.dtype != dtype_of<T>()) {
        throw value_error("checkpoint: tensor " + e.name + " has dtype " +
                          std::to_string(e.dtype) + ", expected " +
                          std::to_string(dtype_of<T>()));
    }
    const std::size_t n = e.elem_count();
    if (e.raw.size() != n * sizeof(T)) {
        throw value_error("checkpoint: tensor " + e.name + " has " +
                          std::to_string(e.raw.size()) + " bytes for " + shape_str(e.dims));
    }
    std::vector<T> values(n);
    detail::ByteReader r(e.raw.data(), e.raw.size());
    for (std::size_t i = 0; i < n; ++i) {
        if constexpr (std::is_same_v<T, float>) {
            values[i] = std::bit_cast<float>(static_cast<std::uint32_t>(r.take(4)));
        } else {
            values[i] = std::bit_cast<double>(r.take(8));
        }
    }
    return Tensor<T>(e.dims, std::move(values));
}

inline void write_checkpoint(const std::string& path,
                             const std::vector<CheckpointEntry>& entries) {
    std::vector<unsigned char> out;
    out.push_back('K');
    out.push_back('H');
    out.push_back('A');
    out.push_back('C');
    detail::put_bytes(out, kCheckpointVersion, 4);
    detail::put_bytes(out, entries.size(), 4);
    for (const auto& e : entries) {
        if (e.name.size() > 0xFFFF) {
            throw value_error("checkpoint: tensor name too long");
        }
        detail::put_bytes(out, e.name.size(), 2);
        out.insert(out.end(), e.name.begin(), e.name.end());
        out.push_back(e.dtype);
        if (e.dims.size() > 0xFF) {
            throw value_error("checkpoint: rank too large for " + e.name);
        }
        out.push_back(static_cast<unsigned char>(e.dims.size()));
        for (std::size_t d : e.dims) detail::put_bytes(out, d, 8);
        if (e.raw.size() != e.elem_count() * dtype_size(e.dtype)) {
            throw value_error("checkpoint: byte count mismatch for " + e.name);
        }
        out.insert(out.end(), e.raw.begin(), e.raw.end());
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw config_error("checkpoint: cannot open " + path + " for writing");
    }
    f.write(reinterpret_cast<const char*>(out.data()),
            static_cast<std::streamsize>(out.size()));
    if (!f) {
        throw config_error("checkpoint: write failed for " + path);
    }
}

inline std::vector<CheckpointEntry> read_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw config_error("checkpoint: cannot open " + path);
    }
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());
    detail::ByteReader r(bytes.data(), bytes.size());
    const unsigned char* magic = r.take_span(4);
    if (std::memcmp(magic, "KHAC", 4) != 0) {
        throw value_error("checkpoint: bad magic in " + path);
    }
    const std::uint64_t version = r.take(4);
    if (version != kCheckpointVersion) {
        throw value_error("checkpoint: unsupported version " + std::to_string(version));
    }
    const std::uint64_t count = r.take(4);
    std::vector<CheckpointEntry> entries;
    entries.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        CheckpointEntry e;
        const std::uint64_t name_len = r.take(2);
        const unsigned char* name = r.take_span(name_len);
        e.name.assign(reinterpret_cast<const char*>(name), name_len);
        e.dtype = static_cast<std::uint8_t>(r.take(1));
        const std::uint64_t rank = r.take(1);
        e.dims.resize(rank);
        for (std::uint64_t d = 0; d < rank; ++d) e.dims[d] = r.take(8);
        const std::size_t nbytes = e.elem_count() * dtype_size(e.dtype);
        const unsigned char* raw = r.take_span(nbytes);
        e.raw.assign(raw, raw + nbytes);
        entries.push_back(std::move(e));
    }
    if (!r.empty()) {
        throw value_error("checkpoint: trailing bytes in " + path);
    }
    return entries;
}

// ----------------------------- model round trip -----------------------------

namespace detail {

inline CheckpointEntry meta_entry(const std::string& key, double v) {
    CheckpointEntry e;
    e.name = "meta." + key;
    e.dtype = 1;
    e.dims = Shape{1};
    put_bytes(e.raw, std::bit_cast<std::uint64_t>(v), 8);
    return e;
}

}  // namespace detail

class CheckpointMeta {
  public:
    explicit CheckpointMeta(const std::vector<CheckpointEntry>& entries) {
        for (const auto& e : entries) {
            if (e.name.rfind("meta.", 0) != 0) continue;
            if (e.dtype != 1 || e.elem_count() != 1) {
                throw value_error("checkpoint: malformed meta tensor " + e.name);
            }
            detail::ByteReader r(e.raw.data(), e.raw.size());
            values_[e.name.substr(5)] = std::bit_cast<double>(r.take(8));
        }
    }

    double get(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) {
            throw value_error("checkpoint: missing meta." + key);
        }
        return it->second;
    }

    std::uint64_t get_u64(const std::string& key) const {
        return static_cast<std::uint64_t>(get(key));
    }

    bool get_flag(const std::string& key) const { return get(key) != 0.0; }

  private:
    std::map<std::string, double> values_;
};

inline std::vector<CheckpointEntry> meta_entries(const ModelConfig& cfg, ElemType elem_type,
                                                 bool absorbed) {
    using detail::meta_entry;
    std::vector<CheckpointEntry> out;
    out.push_back(meta_entry("layers", static_cast<double>(cfg.layers)));
    out.push_back(meta_entry("d", static_cast<double>(cfg.attn.d)));
    out.push_back(meta_entry("n_heads", static_cast<double>(cfg.attn.n)));
    out.push_back(meta_entry("kv_groups", static_cast<double>(cfg.attn.g)));
    out.push_back(meta_entry("d_k", static_cast<double>(cfg.attn.d_k)));
    out.push_back(meta_entry("d_v", static_cast<double>(cfg.attn.d_v)));
    out.push_back(meta_entry("causal", cfg.attn.causal ? 1.0 : 0.0));
    out.push_back(meta_entry("qk_rmsnorm", cfg.attn.use_qk_rmsnorm ? 1.0 : 0.0));
    out.push_back(meta_entry("rope", cfg.attn.use_rope ? 1.0 : 0.0));
    out.push_back(meta_entry("rope_base", cfg.attn.rope_base));
    out.push_back(meta_entry("d_ff", static_cast<double>(cfg.ffn_width())));
    out.push_back(meta_entry("vocab", static_cast<double>(cfg.vocab)));
    double kind = 0.0;
    if (cfg.use_kha) {
        kind = cfg.kha.kind == KnockKind::linear ? 1.0
               : cfg.kha.kind == KnockKind::mlp ? 2.0
                                                : 3.0;
    }
    out.push_back(meta_entry("kha_kind", kind));
    out.push_back(meta_entry("kha_on_q", cfg.use_kha && cfg.kha.on_q ? 1.0 : 0.0));
    out.push_back(meta_entry("kha_on_k", cfg.use_kha && cfg.kha.on_k ? 1.0 : 0.0));
    out.push_back(meta_entry("kha_on_v", cfg.use_kha && cfg.kha.on_v ? 1.0 : 0.0));
    out.push_back(meta_entry("kha_init",
                             cfg.use_kha && cfg.kha.init == KnockInit::random_normal ? 1.0 : 0.0));
    out.push_back(meta_entry("kha_random_std", cfg.use_kha ? cfg.kha.random_std : 0.0));
    out.push_back(meta_entry("elem_type", elem_type == ElemType::f32 ? 0.0 : 1.0));
    out.push_back(meta_entry("absorbed", absorbed ? 1.0 : 0.0));
    return out;
}

inline ModelConfig config_from_meta(const CheckpointMeta& meta) {
    ModelConfig cfg;
    cfg.layers = meta.get_u64("layers");
    cfg.attn.d = meta.get_u64("d");
    cfg.attn.n = meta.get_u64("n_heads");
    cfg.attn.g = meta.get_u64("kv_groups");
    cfg.attn.d_k = meta.get_u64("d_k");
    cfg.attn.d_v = meta.get_u64("d_v");
    cfg.attn.causal = meta.get_flag("causal");
    cfg.attn.use_qk_rmsnorm = meta.get_flag("qk_rmsnorm");
    cfg.attn.use_rope = meta.get_flag("rope");
    cfg.attn.rope_base = meta.get("rope_base");
    cfg.d_ff = meta.get_u64("d_ff");
    cfg.vocab = meta.get_u64("vocab");
    const std::uint64_t kind = meta.get_u64("kha_kind");
    cfg.use_kha = kind != 0;
    if (cfg.use_kha) {
        cfg.kha.kind = kind == 1 ? KnockKind::linear : kind == 2 ? KnockKind::mlp : KnockKind::gate;
        cfg.kha.on_q = meta.get_flag("kha_on_q");
        cfg.kha.on_k = meta.get_flag("kha_on_k");
        cfg.kha.on_v = meta.get_flag("kha_on_v");
        cfg.kha.init = meta.get_flag("kha_init") ? KnockInit::random_normal : KnockInit::diagonal;
        cfg.kha.random_std = meta.get("kha_random_std");
    }
    cfg.validate();
    return cfg;
}

inline ElemType checkpoint_elem_type(const std::vector<CheckpointEntry>& entries) {
    CheckpointMeta meta(entries);
    return meta.get("elem_type") == 0.0 ? ElemType::f32 : ElemType::f64;
}

template <typename T>
void save_model(const std::string& path, const Model<T>& m, bool absorbed = false) {
    std::vector<CheckpointEntry> entries = meta_entries(m.cfg, std::is_same_v<T, float>
                                                                   ? ElemType::f32
                                                                   : ElemType::f64,
                                                        absorbed);
    for (const auto& [name, t] : m.named_params()) {
        entries.push_back(to_entry(name, t));
    }
    write_checkpoint(path, entries);
}

// Rebuilds the model recorded in `entries`. Second member of the result is
// the absorbed flag.
template <typename T>
std::pair<Model<T>, bool> load_model(const std::vector<CheckpointEntry>& entries) {
    CheckpointMeta meta(entries);
    if (checkpoint_elem_type(entries) != (std::is_same_v<T, float> ? ElemType::f32
                                                                   : ElemType::f64)) {
        throw value_error("checkpoint: element type does not match requested load type");
    }
    const ModelConfig cfg = config_from_meta(meta);
    Model<T> m = Model<T>::init(cfg, 0);
    std::map<std::string, const CheckpointEntry*> by_name;
    for (const auto& e : entries) {
        if (e.name.rfind("meta.", 0) != 0) by_name[e.name] = &e;
    }
    for (auto& [name, t] : m.named_params()) {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw value_error("checkpoint: missing tensor " + name);
        }
        Tensor<T> loaded = from_entry<T>(*it->second);
        if (loaded.shape() != t.shape()) {
            throw value_error("checkpoint: tensor " + name + " has shape " +
                              shape_str(loaded.shape()) + ", expected " + shape_str(t.shape()));
        }
        std::copy(loaded.value().begin(), loaded.value().end(), t.value().begin());
        by_name.erase(it);
    }
    if (!by_name.empty()) {
        throw value_error("checkpoint: unexpected tensor " + by_name.begin()->first);
    }
    return {std::move(m), meta.get_flag("absorbed")};
}

}  // namespace kha
