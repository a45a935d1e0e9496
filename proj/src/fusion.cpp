#include "lorablend/fusion.hpp"

#include "lorablend/error.hpp"
#include "lorablend/format.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <thread>
#include <vector>

namespace lorablend {

namespace {

std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_unit_scale(const LoraLayer& layer) {
    if (layer.scale() != 1.0) {
        fail(Errc::UnnormalizedScale, "layer '" + layer.name() + "' has scale " + format_double(layer.scale()) +
                                          "; normalize_scale first");
    }
}

void require_same_io(const LoraLayer& young, const LoraLayer& old) {
    if (young.out_features() != old.out_features() || young.in_features() != old.in_features()) {
        fail(Errc::ShapeMismatch, "layer '" + young.name() + "': young delta is " +
                                      std::to_string(young.out_features()) + "x" + std::to_string(young.in_features()) +
                                      ", old delta is " + std::to_string(old.out_features()) + "x" +
                                      std::to_string(old.in_features()));
    }
}

LoraLayer scale_layer(const LoraLayer& layer, double factor) {
    return LoraLayer(layer.name(), layer.down(), scaled(layer.up(), factor), 1.0);
}

} // namespace

std::string_view method_name(FusionMethod method) {
    return method == FusionMethod::Svd ? "svd" : "linear";
}

std::optional<FusionMethod> parse_method(std::string_view name) {
    if (name == "svd") return FusionMethod::Svd;
    if (name == "linear") return FusionMethod::Linear;
    return std::nullopt;
}

void check_alpha(double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
        fail(Errc::AlphaOutOfRange, "alpha " + format_double(alpha) + " outside [0, 1]");
    }
}

BlendSpec::BlendSpec(double alpha, FusionMethod method) : alpha_(alpha), method_(method) {
    check_alpha(alpha);
}

SvdFactors blend_factors(const SvdFactors& f0, const SvdFactors& f1, double alpha) {
    if (!f0.u.same_shape(f1.u) || !f0.v.same_shape(f1.v) || f0.s.size() != f1.s.size()) {
        fail(Errc::ShapeMismatch, "factor shapes differ: U " + shape_str(f0.u) + " vs " + shape_str(f1.u) + ", V " +
                                      shape_str(f0.v) + " vs " + shape_str(f1.v));
    }
    const double beta = 1.0 - alpha;
    SvdFactors out;
    out.u = axpby(alpha, f0.u, beta, f1.u);
    out.v = axpby(alpha, f0.v, beta, f1.v);
    out.s.resize(f0.s.size());
    for (std::size_t i = 0; i < out.s.size(); ++i) out.s[i] = alpha * f0.s[i] + beta * f1.s[i];
    return out;
}

Matrix svdmix(const Matrix& m0, const Matrix& m1, double alpha) {
    if (!m0.same_shape(m1)) fail(Errc::ShapeMismatch, "svdmix operands " + shape_str(m0) + " and " + shape_str(m1));
    check_alpha(alpha);
    return reconstruct(blend_factors(thin_svd(m0), thin_svd(m1), alpha));
}

Matrix svdmix_full_reference(const Matrix& d0, const Matrix& d1, double alpha) {
    return svdmix(d0, d1, alpha);
}

LoraLayer fuse_layer_svd(const LoraLayer& young, const LoraLayer& old, double alpha) {
    require_unit_scale(young);
    require_unit_scale(old);
    require_same_io(young, old);
    if (young.rank() != old.rank()) {
        fail(Errc::ShapeMismatch, "layer '" + young.name() + "': ranks " + std::to_string(young.rank()) + " and " +
                                      std::to_string(old.rank()) + " differ; pad_rank first");
    }
    check_alpha(alpha);
    Matrix up = svdmix(young.up(), old.up(), alpha);
    Matrix down = svdmix(young.down(), old.down(), alpha);
    return LoraLayer(young.name(), std::move(down), std::move(up), 1.0);
}

LoraLayer fuse_layer_linear(const LoraLayer& young, const LoraLayer& old, double alpha) {
    require_unit_scale(young);
    require_unit_scale(old);
    require_same_io(young, old);
    check_alpha(alpha);
    const double wy = std::sqrt(alpha);
    const double wo = std::sqrt(1.0 - alpha);
    const std::size_t ry = young.rank();
    const std::size_t r = ry + old.rank();
    const std::size_t m = young.out_features();
    const std::size_t n = young.in_features();

    Matrix up(m, r);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t k = 0; k < ry; ++k) up(i, k) = wy * young.up()(i, k);
        for (std::size_t k = ry; k < r; ++k) up(i, k) = wo * old.up()(i, k - ry);
    }
    Matrix down(r, n);
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t k = 0; k < ry; ++k) down(k, j) = wy * young.down()(k, j);
        for (std::size_t k = ry; k < r; ++k) down(k, j) = wo * old.down()(k - ry, j);
    }
    return LoraLayer(young.name(), std::move(down), std::move(up), 1.0);
}

LoraLayer fuse_layer(const LoraLayer& young, const LoraLayer& old, double alpha, FusionMethod method) {
    if (method == FusionMethod::Linear) return fuse_layer_linear(young, old, alpha);
    require_same_io(young, old);
    const std::size_t r = std::max(young.rank(), old.rank());
    return fuse_layer_svd(pad_rank(young, r), pad_rank(old, r), alpha);
}

std::size_t default_thread_count() {
    if (const char* env = std::getenv("LORABLEND_THREADS")) {
        std::size_t n = 0;
        const char* end = env + std::char_traits<char>::length(env);
        auto [ptr, ec] = std::from_chars(env, end, n);
        if (ec == std::errc() && ptr == end && n > 0) return n;
    }
    return 1;
}

LoraAdapter fuse_adapter(const LoraAdapter& young, const LoraAdapter& old, const BlendSpec& spec,
                         const FuseOptions& options) {
    const double alpha = spec.alpha();
    for (const LoraAdapter* ad : {&young, &old}) {
        for (const auto& [name, layer] : ad->layers) require_unit_scale(layer);
    }

    struct Job {
        const LoraLayer* young;
        const LoraLayer* old;
    };
    std::vector<Job> jobs;
    {
        auto y = young.layers.begin();
        auto o = old.layers.begin();
        while (y != young.layers.end() || o != old.layers.end()) {
            if (o == old.layers.end() || (y != young.layers.end() && y->first < o->first)) {
                jobs.push_back({&y->second, nullptr});
                ++y;
            } else if (y == young.layers.end() || o->first < y->first) {
                jobs.push_back({nullptr, &o->second});
                ++o;
            } else {
                jobs.push_back({&y->second, &o->second});
                ++y;
                ++o;
            }
        }
    }

    std::vector<std::optional<LoraLayer>> results(jobs.size());
    std::vector<std::exception_ptr> errors(jobs.size());
    auto run = [&](std::size_t i) {
        const Job& job = jobs[i];
        try {
            if (job.young && job.old) results[i] = fuse_layer(*job.young, *job.old, alpha, spec.method());
            else if (job.young) results[i] = scale_layer(*job.young, alpha);
            else results[i] = scale_layer(*job.old, 1.0 - alpha);
        } catch (...) {
            errors[i] = std::current_exception();
        }
    };

    const std::size_t threads = std::min(options.threads ? options.threads : default_thread_count(),
                                         std::max<std::size_t>(jobs.size(), 1));
    if (threads <= 1) {
        for (std::size_t i = 0; i < jobs.size(); ++i) run(i);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < threads; ++t) {
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < jobs.size(); i = next++) run(i);
            });
        }
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }

    LoraAdapter out;
    out.dtype = widest(young.dtype, old.dtype);
    out.label = "fused(method=" + std::string(method_name(spec.method())) + ", alpha=" + format_double(alpha) +
                ", young=" + young.label + ", old=" + old.label + ")";
    for (auto& layer : results) {
        std::string name = layer->name();
        out.layers.emplace(std::move(name), std::move(*layer));
    }
    return out;
}

PromptEmbedding fuse_prompt(const PromptEmbedding& young, const PromptEmbedding& old, double alpha) {
    const Tensor& y = young.values;
    const Tensor& o = old.values;
    if (y.shape() != o.shape()) fail(Errc::ShapeMismatch, "prompt embeddings '" + y.name() + "' and '" + o.name() +
                                                              "' have different shapes");
    check_alpha(alpha);
    const DType dtype = widest(y.dtype(), o.dtype());
    const std::string label = "fused(alpha=" + format_double(alpha) + ", young=" + young.source_label +
                              ", old=" + old.source_label + ")";
    if (alpha == 1.0) return {cast_tensor(y, dtype), label};
    if (alpha == 0.0) return {cast_tensor(o, dtype).renamed(y.name()), label};

    const std::vector<double> yv = y.to_f64();
    const std::vector<double> ov = o.to_f64();
    std::vector<double> out(yv.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!std::isfinite(yv[i]) || !std::isfinite(ov[i])) {
            fail(Errc::InvalidParameter, "prompt embedding has non-finite values");
        }
        out[i] = std::lerp(ov[i], yv[i], alpha);
    }
    return {Tensor::from_f64(y.name(), dtype, y.shape(), out), label};
}

double estimate_lipschitz(const LoraLayer& young, const LoraLayer& old, FusionMethod method, std::size_t grid_points,
                          double margin) {
    if (grid_points < 2) fail(Errc::InvalidParameter, "Lipschitz grid needs at least two points");
    const LoraLayer y = normalize_scale(young);
    const LoraLayer o = normalize_scale(old);
    const double h = 1.0 / static_cast<double>(grid_points - 1);
    Matrix prev = materialize_delta(fuse_layer(y, o, 0.0, method));
    double slope = 0.0;
    for (std::size_t i = 1; i < grid_points; ++i) {
        const double a = i + 1 == grid_points ? 1.0 : static_cast<double>(i) * h;
        Matrix cur = materialize_delta(fuse_layer(y, o, a, method));
        slope = std::max(slope, frobenius_norm(cur - prev) / h);
        prev = std::move(cur);
    }
    return margin * slope;
}

} // namespace lorablend
