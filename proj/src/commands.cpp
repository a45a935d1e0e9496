#include "lorablend/commands.hpp"

#include "lorablend/attention.hpp"
#include "lorablend/format.hpp"
#include "lorablend/lora_model.hpp"
#include "lorablend/random.hpp"
#include "lorablend/tensor_store.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace lorablend::cli {

namespace {

template <typename F>
int guarded(std::ostream& err, F&& body) {
    try {
        return body();
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return exit_code_for(e.code());
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kFailure;
    }
}

std::string label_for(const std::filesystem::path& p) {
    return p.filename().string();
}

LoraAdapter load_adapter(const std::filesystem::path& path) {
    return normalize_scale(extract_adapter(read_container(path), label_for(path)));
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
    return s + "]";
}

void write_text(const std::optional<std::filesystem::path>& path, const std::string& text, std::ostream& out) {
    if (!path) {
        out << text;
        return;
    }
    std::ofstream f(*path, std::ios::binary | std::ios::trunc);
    if (!f) fail(Errc::IoFailure, "cannot open '" + path->string() + "' for writing");
    f << text;
    if (!f) fail(Errc::IoFailure, "write error on '" + path->string() + "'");
}

std::vector<double> parse_number_list(const std::string& csv, const char* what) {
    std::vector<double> values;
    std::string_view rest = csv;
    while (!rest.empty()) {
        const auto comma = rest.find(',');
        std::string_view item = rest.substr(0, comma);
        rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
        while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
        while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
        if (item.empty()) continue;
        double v = 0.0;
        auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
        if (ec != std::errc() || ptr != item.data() + item.size()) {
            fail(Errc::InvalidParameter, std::string(what) + ": '" + std::string(item) + "' is not a number");
        }
        values.push_back(v);
    }
    return values;
}

AgeAnchors parse_anchors(const std::string& text) {
    const auto colon = text.find(':');
    if (colon == std::string::npos) fail(Errc::InvalidParameter, "--anchors expects young:old, got '" + text + "'");
    const auto young = parse_number_list(text.substr(0, colon), "--anchors");
    const auto old = parse_number_list(text.substr(colon + 1), "--anchors");
    if (young.size() != 1 || old.size() != 1) {
        fail(Errc::InvalidParameter, "--anchors expects young:old, got '" + text + "'");
    }
    AgeAnchors anchors{young[0], old[0]};
    anchors.validate();
    return anchors;
}

FusionMethod method_from(const std::string& name) {
    const auto m = parse_method(name);
    if (!m) fail(Errc::InvalidParameter, "unknown method '" + name + "' (expected svd or linear)");
    return *m;
}

void write_fused(const std::filesystem::path& path, const LoraAdapter& fused, FusionMethod method, double alpha,
                 const std::string& young, const std::string& old) {
    TensorMap map = adapter_to_tensor_map(fused);
    map.metadata()["fusion.method"] = std::string(method_name(method));
    map.metadata()["fusion.alpha"] = format_double(alpha);
    map.metadata()["fusion.young"] = young;
    map.metadata()["fusion.old"] = old;
    write_container(path, map);
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <typename F>
double time_seconds(F&& f) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    const auto t1 = std::chrono::steady_clock::now();
    return std::max(std::chrono::duration<double>(t1 - t0).count(), 1e-9);
}

} // namespace

int exit_code_for(Errc code) {
    switch (code) {
    case Errc::MalformedHeader:
    case Errc::OffsetOverlap:
    case Errc::UnknownDtype:
    case Errc::IoFailure:
    case Errc::OrphanedTensor:
    case Errc::ParseFailure:
        return kInputError;
    case Errc::DimensionMismatch:
    case Errc::ShapeIncompatible:
    case Errc::RankShrinkRequested:
    case Errc::ShapeMismatch:
    case Errc::UnnormalizedScale:
        return kIncompatible;
    case Errc::AlphaOutOfRange:
    case Errc::InvalidParameter:
    case Errc::NonMonotoneTable:
    case Errc::EmptyTable:
        return kInvalidParameter;
    case Errc::EmptyAgeList:
    case Errc::EmptyWorkSet:
        return kEmptyWork;
    case Errc::ConvergenceFailure:
        return kFailure;
    }
    return kFailure;
}

int cmd_inspect(const InspectArgs& args, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        const TensorMap map = read_container(args.path);
        const AdapterScan scan = scan_adapter(map, label_for(args.path));

        if (args.json) {
            nlohmann::ordered_json j;
            j["file"] = args.path.string();
            j["tensors"] = nlohmann::ordered_json::array();
            for (const auto& [name, t] : map.tensors()) {
                j["tensors"].push_back({{"name", name}, {"dtype", dtype_name(t.dtype())}, {"shape", t.shape()}});
            }
            j["metadata"] = map.metadata();
            j["layers"] = nlohmann::ordered_json::array();
            for (const auto& [name, l] : scan.adapter.layers) {
                j["layers"].push_back({{"name", name},
                                       {"m", l.out_features()},
                                       {"n", l.in_features()},
                                       {"r", l.rank()},
                                       {"scale", l.scale()}});
            }
            j["orphans"] = scan.orphans;
            out << j.dump(2) << '\n';
        } else {
            out << "file: " << args.path.string() << '\n';
            out << "tensors: " << map.size() << '\n';
            for (const auto& [name, t] : map.tensors()) {
                out << "  " << std::left << std::setw(48) << name << ' ' << std::setw(5) << dtype_name(t.dtype())
                    << ' ' << shape_str(t.shape()) << '\n';
            }
            if (!map.metadata().empty()) {
                out << "metadata:\n";
                for (const auto& [k, v] : map.metadata()) out << "  " << k << " = " << v << '\n';
            }
            out << "lora layers: " << scan.adapter.layers.size() << '\n';
            if (!scan.adapter.layers.empty()) {
                out << "  " << std::left << std::setw(40) << "layer" << std::right << std::setw(7) << "m"
                    << std::setw(7) << "n" << std::setw(5) << "r" << "  scale\n";
            }
            for (const auto& [name, l] : scan.adapter.layers) {
                out << "  " << std::left << std::setw(40) << name << std::right << std::setw(7) << l.out_features()
                    << std::setw(7) << l.in_features() << std::setw(5) << l.rank() << "  "
                    << format_double(l.scale()) << '\n';
            }
        }
        for (const auto& o : scan.orphans) err << "warning: orphaned LoRA tensor '" << o << "'\n";
        return kOk;
    });
}

int cmd_fuse(const FuseArgs& args, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        const BlendSpec spec(args.alpha, args.method);
        const LoraAdapter young = load_adapter(args.young);
        const LoraAdapter old = load_adapter(args.old);
        const LoraAdapter fused = fuse_adapter(young, old, spec);
        write_fused(args.out, fused, spec.method(), spec.alpha(), young.label, old.label);
        out << "wrote " << args.out.string() << ": " << fused.layers.size() << " layers, method "
            << method_name(spec.method()) << ", alpha " << format_double(spec.alpha()) << '\n';
        return kOk;
    });
}

int cmd_sweep(const SweepArgs& args, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        std::optional<CalibrationTable> table;
        if (args.calibration) table = read_calibration_file(*args.calibration);
        const SweepPlan plan = build_sweep(args.ages, args.anchors, table, args.method);

        const LoraAdapter young = load_adapter(args.young);
        const LoraAdapter old = load_adapter(args.old);
        std::error_code ec;
        std::filesystem::create_directories(args.out_dir, ec);
        if (ec) fail(Errc::IoFailure, "cannot create '" + args.out_dir.string() + "': " + ec.message());

        std::string manifest = "age,alpha,method,file\n";
        for (const SweepEntry& e : plan.entries) {
            const std::string file = e.output_name + ".safetensors";
            const LoraAdapter fused = fuse_adapter(young, old, BlendSpec(e.alpha, plan.method));
            write_fused(args.out_dir / file, fused, plan.method, e.alpha, young.label, old.label);
            manifest += format_double(e.target_age) + "," + format_double(e.alpha) + "," +
                        std::string(method_name(plan.method)) + "," + file + "\n";
            out << "age " << format_double(e.target_age) << " -> alpha " << format_double(e.alpha) << ": " << file
                << '\n';
        }
        write_text(args.out_dir / "manifest.csv", manifest, out);
        return kOk;
    });
}

int cmd_prompt_fuse(const PromptFuseArgs& args, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        check_alpha(args.alpha);
        auto load = [](const std::filesystem::path& p) {
            const TensorMap map = read_container(p);
            const Tensor* t = map.find(kPromptTensor);
            if (!t) fail(Errc::MalformedHeader, "'" + p.string() + "' has no tensor named '" + kPromptTensor + "'");
            return PromptEmbedding{*t, label_for(p)};
        };
        const PromptEmbedding young = load(args.young_emb);
        const PromptEmbedding old = load(args.old_emb);
        const PromptEmbedding fused = fuse_prompt(young, old, args.alpha);
        TensorMap map;
        map.insert(fused.values.renamed(kPromptTensor));
        map.metadata()["fusion.alpha"] = format_double(args.alpha);
        map.metadata()["fusion.young"] = young.source_label;
        map.metadata()["fusion.old"] = old.source_label;
        write_container(args.out, map);
        out << "wrote " << args.out.string() << ": " << kPromptTensor << ' ' << shape_str(fused.values.shape())
            << '\n';
        return kOk;
    });
}

BenchReport run_bench(const BenchArgs& args) {
    if (args.sizes.empty()) fail(Errc::EmptyWorkSet, "no benchmark sizes given");
    if (args.rank == 0) fail(Errc::InvalidParameter, "rank must be at least 1");
    if (args.repeats == 0) fail(Errc::InvalidParameter, "repeats must be at least 1");
    for (std::size_t s : args.sizes) {
        if (args.rank > s) {
            fail(Errc::InvalidParameter, "rank " + std::to_string(args.rank) + " exceeds size " + std::to_string(s));
        }
    }

    BenchReport report;
    Rng rng(args.seed);
    for (std::size_t size : args.sizes) {
        const LoraLayer young("bench", random_matrix(args.rank, size, rng), random_matrix(size, args.rank, rng));
        const LoraLayer old("bench", random_matrix(args.rank, size, rng), random_matrix(size, args.rank, rng));
        const Matrix dy = materialize_delta(young);
        const Matrix dold = materialize_delta(old);

        std::vector<double> t_factor;
        std::vector<double> t_full;
        std::optional<LoraLayer> fused;
        Matrix full;
        for (std::size_t i = 0; i < args.repeats; ++i) {
            t_factor.push_back(time_seconds([&] { fused = fuse_layer_svd(young, old, 0.5); }));
        }
        for (std::size_t i = 0; i < args.repeats; ++i) {
            t_full.push_back(time_seconds([&] { full = svdmix_full_reference(dy, dold, 0.5); }));
        }

        BenchRow row;
        row.size = size;
        row.rank = args.rank;
        row.t_factorwise = median(t_factor);
        row.t_fullref = median(t_full);
        row.speedup = row.t_fullref / row.t_factorwise;
        row.norm_factorwise = frobenius_norm(materialize_delta(*fused));
        row.norm_fullref = frobenius_norm(full);
        report.rows.push_back(row);
    }
    return report;
}

std::string bench_csv(const BenchReport& report) {
    std::string csv = "size,rank,t_factorwise,t_fullref,speedup,norm_factorwise,norm_fullref\n";
    for (const BenchRow& r : report.rows) {
        csv += std::to_string(r.size) + "," + std::to_string(r.rank) + "," + format_double(r.t_factorwise) + "," +
               format_double(r.t_fullref) + "," + format_double(r.speedup) + "," + format_double(r.norm_factorwise) +
               "," + format_double(r.norm_fullref) + "\n";
    }
    return csv;
}

int cmd_bench(const BenchArgs& args, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        write_text(args.out, bench_csv(run_bench(args)), out);
        return kOk;
    });
}

int cmd_attn_demo(const AttnDemoArgs& args, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        if (args.gammas.empty() || args.alphas.empty()) fail(Errc::EmptyWorkSet, "empty alpha or gamma grid");
        for (double a : args.alphas) check_alpha(a);
        std::vector<GammaConfig> gammas;
        for (double g : args.gammas) gammas.emplace_back(g);

        // Toy layer: head_dim 8, 16 latent tokens, 8 text tokens, 4 identity tokens.
        constexpr std::size_t d = 8;
        constexpr std::size_t latent_tokens = 16;
        constexpr std::size_t text_tokens = 8;
        constexpr std::size_t id_tokens = 4;
        constexpr std::size_t lora_rank = 2;
        Rng rng(args.seed);
        const Matrix x = random_matrix(latent_tokens, d, rng);
        const Matrix c_text = random_matrix(text_tokens, d, rng);
        const Matrix c_id = random_matrix(id_tokens, d, rng);
        AttentionWeights base;
        base.wq = random_matrix(d, d, rng, -0.5, 0.5);
        base.wk = random_matrix(d, d, rng, -0.5, 0.5);
        base.wv = random_matrix(d, d, rng, -0.5, 0.5);
        base.wk_id = random_matrix(d, d, rng, -0.5, 0.5);
        base.wv_id = random_matrix(d, d, rng, -0.5, 0.5);
        auto lora = [&](const char* name) {
            Matrix down = random_matrix(lora_rank, d, rng, -0.5, 0.5);
            Matrix up = random_matrix(d, lora_rank, rng, -0.5, 0.5);
            return LoraLayer(name, std::move(down), std::move(up));
        };
        const LoraLayer young_k = lora("to_k_id");
        const LoraLayer young_v = lora("to_v_id");
        const LoraLayer old_k = lora("to_k_id");
        const LoraLayer old_v = lora("to_v_id");

        std::string csv = "alpha,gamma,fused_norm,identity_norm,text_norm\n";
        for (double alpha : args.alphas) {
            AttentionWeights w = base;
            w.wk_id = apply_lora(base.wk_id, fuse_layer(young_k, old_k, alpha, args.method));
            w.wv_id = apply_lora(base.wv_id, fuse_layer(young_v, old_v, alpha, args.method));
            for (const GammaConfig& g : gammas) {
                const FusedAttention parts = id_fused_attention_parts(x, c_text, c_id, w, g);
                csv += format_double(alpha) + "," + format_double(g.gamma()) + "," +
                       format_double(frobenius_norm(parts.fused)) + "," +
                       format_double(g.gamma() * frobenius_norm(parts.identity)) + "," +
                       format_double(frobenius_norm(parts.text)) + "\n";
            }
        }
        write_text(args.out, csv, out);
        return kOk;
    });
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"lorablend: fuse low-rank adapters by SVD or linear blending"};
    app.require_subcommand(1);

    InspectArgs inspect;
    auto* c_inspect = app.add_subcommand("inspect", "List tensors and detected LoRA layers of a container");
    c_inspect->add_option("path", inspect.path, "Container file")->required();
    c_inspect->add_flag("--json", inspect.json, "Machine-readable output");

    FuseArgs fuse;
    std::string fuse_method = "svd";
    auto* c_fuse = app.add_subcommand("fuse", "Fuse a young and an old adapter at one alpha");
    c_fuse->add_option("--young", fuse.young, "Young adapter")->required();
    c_fuse->add_option("--old", fuse.old, "Old adapter")->required();
    c_fuse->add_option("--alpha", fuse.alpha, "Weight of the young adapter, in [0, 1]")->required();
    c_fuse->add_option("--method", fuse_method, "svd or linear")->capture_default_str();
    c_fuse->add_option("--out", fuse.out, "Output container")->required();

    SweepArgs sweep;
    std::string sweep_ages;
    std::string sweep_anchors = "15:75";
    std::string sweep_method = "svd";
    std::string sweep_calibration;
    auto* c_sweep = app.add_subcommand("sweep", "Fuse one adapter per target age");
    c_sweep->add_option("--young", sweep.young, "Young adapter")->required();
    c_sweep->add_option("--old", sweep.old, "Old adapter")->required();
    c_sweep->add_option("--ages", sweep_ages, "Comma-separated target ages")->required();
    c_sweep->add_option("--anchors", sweep_anchors, "young:old anchor ages")->capture_default_str();
    c_sweep->add_option("--calibration", sweep_calibration, "age,alpha calibration table");
    c_sweep->add_option("--method", sweep_method, "svd or linear")->capture_default_str();
    c_sweep->add_option("--out-dir", sweep.out_dir, "Output directory")->required();

    PromptFuseArgs prompt;
    auto* c_prompt = app.add_subcommand("prompt-fuse", "Blend two prompt embeddings");
    c_prompt->add_option("--young-emb", prompt.young_emb, "Young prompt embedding container")->required();
    c_prompt->add_option("--old-emb", prompt.old_emb, "Old prompt embedding container")->required();
    c_prompt->add_option("--alpha", prompt.alpha, "Weight of the young embedding, in [0, 1]")->required();
    c_prompt->add_option("--out", prompt.out, "Output container")->required();

    BenchArgs bench;
    std::string bench_sizes = "256,512,1024";
    std::string bench_out;
    auto* c_bench = app.add_subcommand("bench", "Time factor-wise against full-matrix SVD fusion");
    c_bench->add_option("--sizes", bench_sizes, "Comma-separated m = n sizes")->capture_default_str();
    c_bench->add_option("--rank", bench.rank, "LoRA rank")->capture_default_str();
    c_bench->add_option("--repeats", bench.repeats, "Timed repeats per size (median reported)")
        ->capture_default_str();
    c_bench->add_option("--seed", bench.seed, "Random seed")->capture_default_str();
    c_bench->add_option("--out", bench_out, "CSV output (stdout if omitted)");

    AttnDemoArgs demo;
    std::optional<double> demo_gamma;
    std::string demo_gamma_grid = "0.1,0.3,0.5";
    std::string demo_alpha_grid = "0,0.25,0.5,0.75,1";
    std::string demo_method = "svd";
    std::string demo_out;
    auto* c_demo = app.add_subcommand("attn-demo", "Identity-modulated attention under fused adapters");
    c_demo->add_option("--gamma", demo_gamma, "Single gamma (overrides --gamma-grid)");
    c_demo->add_option("--gamma-grid", demo_gamma_grid, "Comma-separated gammas")->capture_default_str();
    c_demo->add_option("--alpha-grid", demo_alpha_grid, "Comma-separated alphas")->capture_default_str();
    c_demo->add_option("--seed", demo.seed, "Random seed")->capture_default_str();
    c_demo->add_option("--method", demo_method, "svd or linear")->capture_default_str();
    c_demo->add_option("--out", demo_out, "CSV output (stdout if omitted)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kInvalidParameter;
    }

    return guarded(err, [&] {
        if (c_inspect->parsed()) return cmd_inspect(inspect, out, err);
        if (c_fuse->parsed()) {
            fuse.method = method_from(fuse_method);
            return cmd_fuse(fuse, out, err);
        }
        if (c_sweep->parsed()) {
            sweep.ages = parse_number_list(sweep_ages, "--ages");
            sweep.anchors = parse_anchors(sweep_anchors);
            sweep.method = method_from(sweep_method);
            if (!sweep_calibration.empty()) sweep.calibration = sweep_calibration;
            return cmd_sweep(sweep, out, err);
        }
        if (c_prompt->parsed()) return cmd_prompt_fuse(prompt, out, err);
        if (c_bench->parsed()) {
            bench.sizes.clear();
            for (double s : parse_number_list(bench_sizes, "--sizes")) {
                if (!(s >= 1.0) || s != std::floor(s)) fail(Errc::InvalidParameter, "--sizes must be positive integers");
                bench.sizes.push_back(static_cast<std::size_t>(s));
            }
            if (!bench_out.empty()) bench.out = bench_out;
            return cmd_bench(bench, out, err);
        }
        if (c_demo->parsed()) {
            demo.gammas = demo_gamma ? std::vector<double>{*demo_gamma} : parse_number_list(demo_gamma_grid, "--gamma-grid");
            demo.alphas = parse_number_list(demo_alpha_grid, "--alpha-grid");
            demo.method = method_from(demo_method);
            if (!demo_out.empty()) demo.out = demo_out;
            return cmd_attn_demo(demo, out, err);
        }
        return static_cast<int>(kFailure);
    });
}

} // namespace lorablend::cli
