#pragma once

#include "lorablend/linalg.hpp"
#include "lorablend/lora_model.hpp"
#include "lorablend/tensor_store.hpp"

#include <optional>
#include <string>
#include <string_view>

namespace lorablend {

enum class FusionMethod { Svd, Linear };

std::string_view method_name(FusionMethod method);
std::optional<FusionMethod> parse_method(std::string_view name);

// Throws AlphaOutOfRange unless 0 <= alpha <= 1.
void check_alpha(double alpha);

// Blend coefficient alpha weights the "young" operand: alpha = 1 reproduces
// young, alpha = 0 reproduces old.
class BlendSpec {
public:
    explicit BlendSpec(double alpha, FusionMethod method = FusionMethod::Svd);

    double alpha() const noexcept { return alpha_; }
    FusionMethod method() const noexcept { return method_; }

private:
    double alpha_;
    FusionMethod method_;
};

struct PromptEmbedding {
    Tensor values;
    std::string source_label;
};

// Factor-wise affine blend X = alpha * X0 + (1 - alpha) * X1 for X in {U, S, V}.
// The blended U and V are not re-orthogonalized.
SvdFactors blend_factors(const SvdFactors& f0, const SvdFactors& f1, double alpha);

// SVDMix: decompose both operands with the canonical thin SVD, blend the
// factors and multiply back.
Matrix svdmix(const Matrix& m0, const Matrix& m1, double alpha);

// SVDMix on the dense m x n updates. Same operator as svdmix, kept as the
// O(min(m,n)^2 max(m,n)) baseline the factor-wise path is measured against.
Matrix svdmix_full_reference(const Matrix& d0, const Matrix& d1, double alpha);

// B = SVDMix(B_young, B_old), A = SVDMix(A_young, A_old). Both layers must
// have scale 1 and identical (m, n, r).
LoraLayer fuse_layer_svd(const LoraLayer& young, const LoraLayer& old, double alpha);

// B = [sqrt(a) B_y | sqrt(1-a) B_o], A = [sqrt(a) A_y ; sqrt(1-a) A_o], so
// B * A = a * dY + (1 - a) * dO with rank r_y + r_o.
LoraLayer fuse_layer_linear(const LoraLayer& young, const LoraLayer& old, double alpha);

struct FuseOptions {
    // 0 means: LORABLEND_THREADS if set, otherwise 1. Output never depends on it.
    std::size_t threads = 0;
};

// Shared layers are fused per spec.method(); ranks are zero-padded to match
// for the SVD method. A layer present in only one adapter is scaled by alpha
// (young only) or 1 - alpha (old only).
LoraAdapter fuse_adapter(const LoraAdapter& young, const LoraAdapter& old, const BlendSpec& spec,
                         const FuseOptions& options = {});

// c = alpha * c_young + (1 - alpha) * c_old, evaluated in binary64 and stored
// in the wider of the two dtypes. Endpoints return the operands unchanged.
PromptEmbedding fuse_prompt(const PromptEmbedding& young, const PromptEmbedding& old, double alpha);

// Largest secant slope of alpha -> materialized fused delta over a uniform
// grid of `grid_points` on [0, 1], times `margin`.
double estimate_lipschitz(const LoraLayer& young, const LoraLayer& old, FusionMethod method,
                          std::size_t grid_points = 101, double margin = 1.5);

// Fused layer for one alpha, dispatching on method (pads ranks for SVD).
LoraLayer fuse_layer(const LoraLayer& young, const LoraLayer& old, double alpha, FusionMethod method);

std::size_t default_thread_count();

} // namespace lorablend
