#include "lorablend/attention.hpp"

#include "lorablend/error.hpp"
#include "lorablend/format.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace lorablend {

namespace {

std::string dims(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

// x W^T for token-major x.
Matrix project(const Matrix& x, const Matrix& w, const char* what) {
    if (x.cols() != w.cols()) {
        fail(Errc::DimensionMismatch, std::string(what) + ": input " + dims(x) + " does not fit weight " + dims(w));
    }
    return matmul(x, transpose(w));
}

} // namespace

void AttentionWeights::validate() const {
    const std::size_t d = head_dim();
    if (d == 0) fail(Errc::DimensionMismatch, "head_dim must be positive");
    for (const Matrix* w : {&wk, &wv, &wk_id, &wv_id}) {
        if (w->rows() != d) {
            fail(Errc::DimensionMismatch, "projection " + dims(*w) + " does not output head_dim " + std::to_string(d));
        }
    }
}

GammaConfig::GammaConfig(double gamma) : gamma_(gamma) {
    if (!(gamma >= 0.0) || !std::isfinite(gamma)) {
        fail(Errc::InvalidParameter, "gamma " + format_double(gamma) + " must be finite and non-negative");
    }
}

Matrix softmax_rows(const Matrix& logits) {
    Matrix p(logits.rows(), logits.cols());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        const auto row = logits.row(i);
        const double mx = *std::max_element(row.begin(), row.end());
        double sum = 0.0;
        for (std::size_t j = 0; j < row.size(); ++j) {
            p(i, j) = std::exp(row[j] - mx);
            sum += p(i, j);
        }
        for (std::size_t j = 0; j < row.size(); ++j) p(i, j) /= sum;
    }
    return p;
}

Matrix scaled_dot_attention(const Matrix& q, const Matrix& k, const Matrix& v) {
    if (q.cols() != k.cols() || k.rows() != v.rows() || q.cols() == 0 || k.rows() == 0) {
        fail(Errc::DimensionMismatch, "attention: q " + dims(q) + ", k " + dims(k) + ", v " + dims(v));
    }
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    Matrix logits = matmul(q, transpose(k));
    for (double& z : logits.values()) z *= inv_sqrt_d;
    return matmul(softmax_rows(logits), v);
}

FusedAttention id_fused_attention_parts(const Matrix& x, const Matrix& c_text, const Matrix& c_id,
                                        const AttentionWeights& w, const GammaConfig& g) {
    w.validate();
    const Matrix q = project(x, w.wq, "Wq");
    FusedAttention out;
    out.text = scaled_dot_attention(q, project(c_text, w.wk, "Wk"), project(c_text, w.wv, "Wv"));
    out.identity = scaled_dot_attention(q, project(c_id, w.wk_id, "Wk_id"), project(c_id, w.wv_id, "Wv_id"));
    if (g.gamma() == 0.0) {
        out.fused = out.text;
    } else {
        out.fused = axpby(1.0, out.text, g.gamma(), out.identity);
    }
    return out;
}

Matrix id_fused_attention(const Matrix& x, const Matrix& c_text, const Matrix& c_id, const AttentionWeights& w,
                          const GammaConfig& g) {
    return id_fused_attention_parts(x, c_text, c_id, w, g).fused;
}

Matrix apply_lora(const Matrix& theta0, const LoraLayer& layer) {
    if (theta0.rows() != layer.out_features() || theta0.cols() != layer.in_features()) {
        fail(Errc::ShapeMismatch, "apply_lora: base weight " + dims(theta0) + " vs layer '" + layer.name() + "' delta " +
                                      std::to_string(layer.out_features()) + "x" +
                                      std::to_string(layer.in_features()));
    }
    return theta0 + materialize_delta(layer);
}

} // namespace lorablend
