#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "kha/model.hpp"
#include "kha/trainer.hpp"

// Run configuration file: flat `key = value` lines, `#` comments, blank
// lines allowed. Unknown and duplicate keys are rejected; missing keys take
// the defaults below. Key order never matters.

namespace kha {

struct RunSpec {
    ModelConfig model;
    TrainConfig train;
    std::string corpus_path = "data/corpus.txt";
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw config_error("config: " + key + " wants true/false, got '" + v + "'");
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    unsigned long long out = 0;
    try {
        out = std::stoull(v, &pos);
    } catch (const std::exception&) {
        throw config_error("config: " + key + " wants a non-negative integer, got '" + v + "'");
    }
    if (pos != v.size()) {
        throw config_error("config: " + key + " wants a non-negative integer, got '" + v + "'");
    }
    return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    double out = 0;
    try {
        out = std::stod(v, &pos);
    } catch (const std::exception&) {
        throw config_error("config: " + key + " wants a number, got '" + v + "'");
    }
    if (pos != v.size()) {
        throw config_error("config: " + key + " wants a number, got '" + v + "'");
    }
    return out;
}

}  // namespace detail

inline RunSpec parse_runspec(const std::string& text) {
    static const std::set<std::string> known = {
        "model.layers",  "model.d",        "model.n_heads",    "model.kv_groups",
        "model.d_k",     "model.d_v",      "model.causal",     "model.qk_rmsnorm",
        "model.rope",    "kha.kind",       "kha.sites",        "kha.init",
        "kha.random_std", "train.lr_peak", "train.steps",      "train.seq_len",
        "train.batch_tokens", "train.seed", "train.elem_type", "data.corpus_path"};
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        lineno += 1;
        const std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw config_error("config: line " + std::to_string(lineno) +
                               " is not key = value: '" + t + "'");
        }
        const std::string key = detail::trim(t.substr(0, eq));
        const std::string value = detail::trim(t.substr(eq + 1));
        if (known.find(key) == known.end()) {
            throw config_error("config: unknown key '" + key + "'");
        }
        if (!kv.emplace(key, value).second) {
            throw config_error("config: duplicate key '" + key + "'");
        }
    }

    RunSpec spec;
    auto has = [&kv](const char* k) { return kv.count(k) != 0; };
    auto get = [&kv](const char* k) { return kv.at(k); };

    ModelConfig& m = spec.model;
    m.layers = has("model.layers") ? detail::parse_u64("model.layers", get("model.layers")) : 2;
    m.attn.d = has("model.d") ? detail::parse_u64("model.d", get("model.d")) : 128;
    m.attn.n = has("model.n_heads") ? detail::parse_u64("model.n_heads", get("model.n_heads")) : 8;
    m.attn.g =
        has("model.kv_groups") ? detail::parse_u64("model.kv_groups", get("model.kv_groups")) : 2;
    if (has("model.d_k")) {
        m.attn.d_k = detail::parse_u64("model.d_k", get("model.d_k"));
    } else {
        if (m.attn.n == 0 || m.attn.d % m.attn.n != 0) {
            throw config_error("config: model.d_k missing and model.d not divisible by heads");
        }
        m.attn.d_k = m.attn.d / m.attn.n;
    }
    if (has("model.d_v")) {
        m.attn.d_v = detail::parse_u64("model.d_v", get("model.d_v"));
    } else {
        if (m.attn.n == 0 || m.attn.d % m.attn.n != 0) {
            throw config_error("config: model.d_v missing and model.d not divisible by heads");
        }
        m.attn.d_v = m.attn.d / m.attn.n;
    }
    m.attn.causal = has("model.causal") ? detail::parse_bool("model.causal", get("model.causal"))
                                        : true;
    m.attn.use_qk_rmsnorm =
        has("model.qk_rmsnorm") ? detail::parse_bool("model.qk_rmsnorm", get("model.qk_rmsnorm"))
                                : true;
    m.attn.use_rope = has("model.rope") ? detail::parse_bool("model.rope", get("model.rope"))
                                        : true;

    const std::string kind = has("kha.kind") ? get("kha.kind") : "none";
    if (kind == "none") {
        m.use_kha = false;
    } else {
        m.use_kha = true;
        if (kind == "linear") {
            m.kha.kind = KnockKind::linear;
        } else if (kind == "mlp") {
            m.kha.kind = KnockKind::mlp;
        } else if (kind == "gate") {
            m.kha.kind = KnockKind::gate;
        } else {
            throw config_error("config: kha.kind wants none|linear|mlp|gate, got '" + kind + "'");
        }
        const std::string sites = has("kha.sites") ? get("kha.sites") : "v";
        m.kha.on_q = m.kha.on_k = m.kha.on_v = false;
        for (char c : sites) {
            if (c == 'q' && !m.kha.on_q) {
                m.kha.on_q = true;
            } else if (c == 'k' && !m.kha.on_k) {
                m.kha.on_k = true;
            } else if (c == 'v' && !m.kha.on_v) {
                m.kha.on_v = true;
            } else {
                throw config_error("config: kha.sites wants a subset of \"qkv\", got '" + sites +
                                   "'");
            }
        }
        const std::string init = has("kha.init") ? get("kha.init") : "diagonal";
        if (init == "diagonal") {
            m.kha.init = KnockInit::diagonal;
        } else if (init == "random") {
            m.kha.init = KnockInit::random_normal;
        } else {
            throw config_error("config: kha.init wants diagonal|random, got '" + init + "'");
        }
        m.kha.random_std =
            has("kha.random_std") ? detail::parse_real("kha.random_std", get("kha.random_std"))
                                  : 0.0;
    }

    TrainConfig& t = spec.train;
    t.lr_peak = has("train.lr_peak") ? detail::parse_real("train.lr_peak", get("train.lr_peak"))
                                     : 3e-3;
    t.steps = has("train.steps") ? detail::parse_u64("train.steps", get("train.steps")) : 200;
    t.seq_len = has("train.seq_len") ? detail::parse_u64("train.seq_len", get("train.seq_len"))
                                     : 128;
    t.batch_tokens = has("train.batch_tokens")
                         ? detail::parse_u64("train.batch_tokens", get("train.batch_tokens"))
                         : 256;
    t.seed = has("train.seed") ? detail::parse_u64("train.seed", get("train.seed")) : 1;
    if (has("train.elem_type")) {
        const std::string et = get("train.elem_type");
        if (et == "f32") {
            t.elem_type = ElemType::f32;
        } else if (et == "f64") {
            t.elem_type = ElemType::f64;
        } else {
            throw config_error("config: train.elem_type wants f32|f64, got '" + et + "'");
        }
    }
    if (has("data.corpus_path")) spec.corpus_path = get("data.corpus_path");

    spec.model.validate();
    spec.train.validate();
    return spec;
}

inline RunSpec load_runspec(const std::string& path) {
    std::ifstream f(path);
    if (!f) {
        throw config_error("config: cannot open " + path);
    }
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_runspec(ss.str());
}

}  // namespace kha
