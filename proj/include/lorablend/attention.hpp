#pragma once

#include "lorablend/linalg.hpp"
#include "lorablend/lora_model.hpp"

namespace lorablend {

inline constexpr double kDefaultGamma = 0.3;

// Projection weights of one cross-attention layer with an identity branch.
// Weights are (out x in); every projection maps into head_dim.
struct AttentionWeights {
    Matrix wq;
    Matrix wk;
    Matrix wv;
    Matrix wk_id;
    Matrix wv_id;

    std::size_t head_dim() const noexcept { return wq.rows(); }
    // Throws DimensionMismatch unless all five projections output head_dim rows.
    void validate() const;
};

class GammaConfig {
public:
    explicit GammaConfig(double gamma = kDefaultGamma);
    double gamma() const noexcept { return gamma_; }

private:
    double gamma_;
};

// Row-wise softmax with the row maximum subtracted first.
Matrix softmax_rows(const Matrix& logits);

// softmax(q k^T / sqrt(d)) v, with q: s_q x d, k: s_k x d, v: s_k x d_v.
Matrix scaled_dot_attention(const Matrix& q, const Matrix& k, const Matrix& v);

struct FusedAttention {
    Matrix text;     // Attn(q, k_T, v_T)
    Matrix identity; // Attn(q, k_I, v_I)
    Matrix fused;    // text + gamma * identity
};

// x: s_q x d_x latent tokens, c_text: s_t x d_text, c_id: s_i x d_id. Tokens
// are rows, so q = x Wq^T and likewise for the other projections.
FusedAttention id_fused_attention_parts(const Matrix& x, const Matrix& c_text, const Matrix& c_id,
                                        const AttentionWeights& w, const GammaConfig& g);
Matrix id_fused_attention(const Matrix& x, const Matrix& c_text, const Matrix& c_id, const AttentionWeights& w,
                          const GammaConfig& g);

// theta0 + scale * B * A.
Matrix apply_lora(const Matrix& theta0, const LoraLayer& layer);

} // namespace lorablend
