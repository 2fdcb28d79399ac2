// Command-line front end: training runs, run comparison, projection
// absorption, FLOP reports, and weight heatmap export.
//
// Exit codes: 0 success, 2 usage or configuration problem, 3 numerical
// failure (non-finite loss, failed verification).

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "kha/kha.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw kha::config_error("cannot open " + path);
    }
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// ----------------------------- train -----------------------------

void write_loss_csv(const std::string& path, const kha::RunRecord& rec) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw kha::config_error("cannot open " + path + " for writing");
    }
    f << "step,loss,lr,grad_norm\n";
    for (std::size_t i = 0; i < rec.losses.size(); ++i) {
        f << i << ',' << fmt(rec.losses[i]) << ',' << fmt(rec.lrs[i]) << ','
          << fmt(rec.grad_norms[i]) << '\n';
    }
}

json record_to_json(const kha::RunRecord& rec, const kha::RunSpec& spec) {
    json j;
    j["seed"] = rec.seed;
    j["steps"] = rec.losses.size();
    j["elem_type"] = spec.train.elem_type == kha::ElemType::f32 ? "f32" : "f64";
    j["initial_loss"] = rec.initial_loss;
    j["final_loss"] = rec.final_loss;
    j["spike_count"] = rec.spike_count;
    j["spike_max"] = rec.spike_max;
    j["elapsed_s"] = rec.elapsed_s;
    j["losses"] = rec.losses;
    j["lrs"] = rec.lrs;
    j["grad_norms"] = rec.grad_norms;
    json cfg;
    cfg["layers"] = spec.model.layers;
    cfg["d"] = spec.model.attn.d;
    cfg["n_heads"] = spec.model.attn.n;
    cfg["kv_groups"] = spec.model.attn.g;
    cfg["d_k"] = spec.model.attn.d_k;
    cfg["d_v"] = spec.model.attn.d_v;
    cfg["kha_kind"] = spec.model.use_kha ? kha::to_string(spec.model.kha.kind) : "none";
    j["config"] = cfg;
    return j;
}

template <typename T>
void run_train(const kha::RunSpec& spec, const std::string& out_dir) {
    const std::string text = read_text_file(spec.corpus_path);
    const std::vector<std::int32_t> tokens = kha::tokenize_bytes(text);
    kha::Model<T> model;
    const kha::RunRecord rec = kha::train_run<T>(spec.model, spec.train, tokens, &model);
    fs::create_directories(out_dir);
    write_loss_csv(out_dir + "/loss.csv", rec);
    kha::save_model(out_dir + "/model.khac", model);
    std::ofstream jf(out_dir + "/run.json", std::ios::binary | std::ios::trunc);
    jf << record_to_json(rec, spec).dump(2) << '\n';
    std::printf("trained %zu steps, initial %.6f, final %.6f, spikes %zu\n", rec.losses.size(),
                rec.initial_loss, rec.final_loss, rec.spike_count);
}

// ----------------------------- compare -----------------------------

kha::RunRecord record_from_json(const std::string& path) {
    json j = json::parse(read_text_file(path));
    kha::RunRecord rec;
    rec.losses = j.at("losses").get<std::vector<double>>();
    rec.seed = j.at("seed").get<std::uint64_t>();
    rec.initial_loss = j.at("initial_loss").get<double>();
    rec.final_loss = j.at("final_loss").get<double>();
    rec.spike_count = j.at("spike_count").get<std::size_t>();
    rec.spike_max = j.at("spike_max").get<double>();
    return rec;
}

void run_compare(const std::string& path_a, const std::string& path_b,
                 const std::string& csv_path) {
    const kha::RunRecord a = record_from_json(path_a);
    const kha::RunRecord b = record_from_json(path_b);
    const kha::CompareReport rep = kha::compare_runs(a, b);
    std::printf("run A: final %.6f, spikes %zu\n", rep.final_a, a.spike_count);
    std::printf("run B: final %.6f, spikes %zu\n", rep.final_b, b.spike_count);
    std::printf("delta_final (B - A): %.3f\n", rep.delta_final);
    std::printf("delta_spikes (B - A): %td\n", rep.delta_spikes);
    std::ofstream f(csv_path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw kha::config_error("cannot open " + csv_path + " for writing");
    }
    f << "step,loss_a,loss_b,diff\n";
    for (std::size_t i = 0; i < a.losses.size(); ++i) {
        f << i << ',' << fmt(a.losses[i]) << ',' << fmt(b.losses[i]) << ','
          << fmt(rep.loss_diff[i]) << '\n';
    }
}

// ----------------------------- absorb -----------------------------

template <typename T>
void run_absorb(const std::vector<kha::CheckpointEntry>& entries, const std::string& out_path,
                bool verify) {
    auto [model, absorbed] = kha::load_model<T>(entries);
    if (absorbed) {
        throw kha::config_error("checkpoint is already absorbed");
    }
    kha::Model<T> folded = model;
    folded.cfg.use_kha = false;
    folded.cfg.kha = kha::KhaConfig{};
    folded.layers.clear();
    for (const auto& lw : model.layers) {
        kha::LayerWeights<T> nl = lw;
        nl.attn = kha::absorb_linear(lw.attn, model.cfg.attn, lw.kha);
        nl.kha = kha::KhaWeights<T>{};
        folded.layers.push_back(std::move(nl));
    }
    kha::save_model(out_path, folded, true);
    if (verify) {
        std::mt19937_64 rng(0xBEEF);
        std::vector<std::int32_t> probe(64);
        for (auto& t : probe) {
            t = static_cast<std::int32_t>(rng() % model.cfg.vocab);
        }
        kha::Tensor<T> orig = model.forward(nullptr, probe);
        kha::Tensor<T> fold = folded.forward(nullptr, probe);
        double max_diff = 0.0;
        for (std::size_t i = 0; i < orig.numel(); ++i) {
            max_diff = std::max(max_diff, std::abs(static_cast<double>(orig.value()[i]) -
                                                   static_cast<double>(fold.value()[i])));
        }
        const double tol = std::is_same_v<T, float> ? 1e-5 : 1e-10;
        std::printf("verify: max |delta| = %.3e (tolerance %.0e)\n", max_diff, tol);
        if (!(max_diff < tol)) {
            throw kha::numeric_error("absorb verification failed: max |delta| " +
                                     std::to_string(max_diff));
        }
    }
    std::printf("absorbed checkpoint written to %s\n", out_path.c_str());
}

// ----------------------------- heatmap -----------------------------

void run_export_heatmap(const std::string& model_path, std::size_t layer,
                        const std::string& matrix, const std::string& csv_path,
                        const std::string& pgm_path) {
    static const std::map<std::string, std::string> name_map = {
        {"tq", "t_q"}, {"tk", "t_k"},     {"tv", "t_v"},
        {"up", "w_up"}, {"gate", "w_gate"}, {"down", "w_down"}};
    auto nm = name_map.find(matrix);
    if (nm == name_map.end()) {
        throw kha::config_error("unknown matrix '" + matrix + "' (want tq|tk|tv|up|gate|down)");
    }
    const std::string tensor_name = "layers." + std::to_string(layer) + ".kha." + nm->second;
    const auto entries = kha::read_checkpoint(model_path);
    const kha::CheckpointEntry* found = nullptr;
    for (const auto& e : entries) {
        if (e.name == tensor_name) {
            found = &e;
            break;
        }
    }
    if (!found) {
        throw kha::config_error("checkpoint has no tensor " + tensor_name);
    }
    std::vector<double> values;
    if (found->dtype == 0) {
        kha::Tensor<float> t = kha::from_entry<float>(*found);
        values.assign(t.value().begin(), t.value().end());
    } else {
        kha::Tensor<double> t = kha::from_entry<double>(*found);
        values.assign(t.value().begin(), t.value().end());
    }
    if (found->dims.size() != 2) {
        throw kha::config_error("tensor " + tensor_name + " is not a matrix");
    }
    const std::size_t rows = found->dims[0], cols = found->dims[1];

    // Every knocking matrix is clipped to [0,1] for export except the gate,
    // which keeps raw values.
    const bool is_gate = nm->second == "w_gate";
    std::vector<double> exported = values;
    if (!is_gate) {
        for (double& v : exported) v = std::min(1.0, std::max(0.0, v));
    }
    std::ofstream f(csv_path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw kha::config_error("cannot open " + csv_path + " for writing");
    }
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            if (j) f << ',';
            f << fmt(exported[i * cols + j]);
        }
        f << '\n';
    }
    if (!pgm_path.empty()) {
        double lo = 0.0, hi = 1.0;
        if (is_gate) {
            lo = exported[0];
            hi = exported[0];
            for (double v : exported) {
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
        }
        const double span = hi > lo ? hi - lo : 1.0;
        std::ofstream p(pgm_path, std::ios::binary | std::ios::trunc);
        if (!p) {
            throw kha::config_error("cannot open " + pgm_path + " for writing");
        }
        p << "P5\n" << cols << ' ' << rows << "\n255\n";
        for (double v : exported) {
            const double unit = (v - lo) / span;
            const int g = static_cast<int>(std::lround(255.0 * std::min(1.0, std::max(0.0, unit))));
            p.put(static_cast<char>(g));
        }
    }
    std::printf("exported %s (%zux%zu) to %s%s\n", tensor_name.c_str(), rows, cols,
                csv_path.c_str(), pgm_path.empty() ? "" : (" and " + pgm_path).c_str());
}

// ----------------------------- flops -----------------------------

void run_flops(std::uint64_t L, std::uint64_t d, std::uint64_t n, std::uint64_t dff_ratio,
               const std::string& json_path) {
    const kha::FlopsInput in{L, d, n, dff_ratio};
    const kha::FlopsReport r = kha::flops_report(in);
    std::printf("L=%" PRIu64 " d=%" PRIu64 " n=%" PRIu64 " d_ff=%" PRIu64 "d\n", L, d, n,
                dff_ratio);
    std::printf("mha        %s\n", kha::u128_str(r.mha).c_str());
    std::printf("ffn        %s\n", kha::u128_str(r.ffn).c_str());
    std::printf("total      %s\n", kha::u128_str(r.total).c_str());
    std::printf("kha        %s\n", kha::u128_str(r.kha).c_str());
    std::printf("kha/total  %.2f%%\n", 100.0 * r.kha_over_total);
    std::printf("kha/mha    %.2f%%\n", 100.0 * r.kha_over_mha);
    if (!json_path.empty()) {
        json j;
        j["L"] = L;
        j["d"] = d;
        j["n"] = n;
        j["d_ff_ratio"] = dff_ratio;
        j["mha"] = kha::u128_str(r.mha);
        j["ffn"] = kha::u128_str(r.ffn);
        j["total"] = kha::u128_str(r.total);
        j["kha"] = kha::u128_str(r.kha);
        j["kha_over_total"] = r.kha_over_total;
        j["kha_over_mha"] = r.kha_over_mha;
        std::ofstream f(json_path, std::ios::binary | std::ios::trunc);
        if (!f) {
            throw kha::config_error("cannot open " + json_path + " for writing");
        }
        f << j.dump(2) << '\n';
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Knocking-heads attention workbench"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out";
    CLI::App* train = app.add_subcommand("train", "Train a model from a run config");
    train->add_option("--config", config_path, "run config file")->required();
    train->add_option("--out", out_dir, "output directory");

    std::string cmp_a, cmp_b, cmp_csv = "compare.csv";
    CLI::App* compare = app.add_subcommand("compare", "Compare two run.json records");
    compare->add_option("run_a", cmp_a, "first run.json")->required();
    compare->add_option("run_b", cmp_b, "second run.json")->required();
    compare->add_option("--out", cmp_csv, "comparison CSV path");

    std::string ab_in, ab_out;
    bool ab_verify = false;
    CLI::App* absorb = app.add_subcommand("absorb", "Fold linear knocking into projections");
    absorb->add_option("input", ab_in, "input checkpoint")->required();
    absorb->add_option("output", ab_out, "output checkpoint")->required();
    absorb->add_flag("--verify", ab_verify, "check forward equivalence on a probe batch");

    std::uint64_t fl_L = 2048, fl_d = 1024, fl_n = 32, fl_ratio = 3;
    std::string fl_json;
    CLI::App* flops = app.add_subcommand("flops", "Report per-layer FLOP counts");
    flops->add_option("--L", fl_L, "sequence length");
    flops->add_option("--d", fl_d, "model width");
    flops->add_option("--n", fl_n, "head count");
    flops->add_option("--dff-ratio", fl_ratio, "d_ff / d");
    flops->add_option("--json", fl_json, "also write a JSON report here");

    std::string hm_model, hm_matrix, hm_csv, hm_pgm;
    std::uint64_t hm_layer = 0;
    CLI::App* heatmap = app.add_subcommand("export-heatmap", "Export a knocking matrix");
    heatmap->add_option("model", hm_model, "checkpoint path")->required();
    heatmap->add_option("csv", hm_csv, "output CSV path")->required();
    heatmap->add_option("pgm", hm_pgm, "optional output PGM path");
    heatmap->add_option("--layer", hm_layer, "layer index");
    heatmap->add_option("--matrix", hm_matrix, "tq|tk|tv|up|gate|down")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*train) {
            const kha::RunSpec spec = kha::load_runspec(config_path);
            if (spec.train.elem_type == kha::ElemType::f32) {
                run_train<float>(spec, out_dir);
            } else {
                run_train<double>(spec, out_dir);
            }
        } else if (*compare) {
            run_compare(cmp_a, cmp_b, cmp_csv);
        } else if (*absorb) {
            const auto entries = kha::read_checkpoint(ab_in);
            const kha::CheckpointMeta meta(entries);
            const std::uint64_t kind = meta.get_u64("kha_kind");
            if (kind == 0) {
                throw kha::config_error("checkpoint has no knocking projections to absorb");
            }
            if (kind == 2) {
                throw kha::config_error("MLP knocking projections are not absorbable");
            }
            if (kind == 3) {
                throw kha::config_error("gate knocking projections are not absorbable");
            }
            if (kha::checkpoint_elem_type(entries) == kha::ElemType::f32) {
                run_absorb<float>(entries, ab_out, ab_verify);
            } else {
                run_absorb<double>(entries, ab_out, ab_verify);
            }
        } else if (*flops) {
            run_flops(fl_L, fl_d, fl_n, fl_ratio, fl_json);
        } else if (*heatmap) {
            run_export_heatmap(hm_model, hm_layer, hm_matrix, hm_csv, hm_pgm);
        }
    } catch (const kha::numeric_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    } catch (const kha::error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
