#include "lorablend/linalg.hpp"

#include "lorablend/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace lorablend {

namespace {

std::string dims(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_same_shape(const Matrix& x, const Matrix& y, const char* op) {
    if (!x.same_shape(y)) {
        fail(Errc::DimensionMismatch, std::string(op) + ": " + dims(x) + " vs " + dims(y));
    }
}

// Column-major scratch copy; the Jacobi sweeps touch whole columns.
struct ColumnBlock {
    std::size_t len = 0;
    std::size_t count = 0;
    std::vector<double> data;

    double* col(std::size_t j) { return data.data() + j * len; }
    const double* col(std::size_t j) const { return data.data() + j * len; }
};

double dot(const double* x, const double* y, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
    return s;
}

void rotate(double* x, double* y, std::size_t n, double c, double s) {
    for (std::size_t i = 0; i < n; ++i) {
        const double xi = x[i];
        const double yi = y[i];
        x[i] = c * xi - s * yi;
        y[i] = s * xi + c * yi;
    }
}

// One-sided (Hestenes) Jacobi on a tall matrix (rows >= cols). On return `a`
// holds A*V with mutually orthogonal non-negligible columns and `v` the
// accumulated rotations.
void hestenes(ColumnBlock& a, ColumnBlock& v, double negligible_sq, const SvdOptions& opt) {
    const std::size_t n = a.count;
    std::vector<double> norm_sq(n);
    for (std::size_t j = 0; j < n; ++j) norm_sq[j] = dot(a.col(j), a.col(j), a.len);

    for (int sweep = 0; sweep < opt.max_sweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double alpha = norm_sq[p];
                const double beta = norm_sq[q];
                if (alpha <= negligible_sq || beta <= negligible_sq) continue;
                const double gamma = dot(a.col(p), a.col(q), a.len);
                if (std::fabs(gamma) <= opt.tolerance * std::sqrt(alpha) * std::sqrt(beta)) continue;

                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                rotate(a.col(p), a.col(q), a.len, c, s);
                rotate(v.col(p), v.col(q), v.len, c, s);
                norm_sq[p] = dot(a.col(p), a.col(p), a.len);
                norm_sq[q] = dot(a.col(q), a.col(q), a.len);
                rotated = true;
            }
        }
        if (!rotated) return;
    }
    fail(Errc::ConvergenceFailure, "one-sided Jacobi did not converge in " + std::to_string(opt.max_sweeps) +
                                       " sweeps (" + std::to_string(a.len) + "x" + std::to_string(n) + ")");
}

// Fills the columns flagged in `missing` with unit vectors orthogonal to all
// other columns, trying e_0, e_1, ... in order.
void complete_basis(ColumnBlock& u, const std::vector<bool>& missing) {
    const std::size_t m = u.len;
    std::vector<std::size_t> basis;
    for (std::size_t j = 0; j < u.count; ++j) {
        if (!missing[j]) basis.push_back(j);
    }
    std::vector<double> w(m);
    std::size_t next_e = 0;
    const double accept_sq = 0.5 / static_cast<double>(m);
    for (std::size_t j = 0; j < u.count; ++j) {
        if (!missing[j]) continue;
        for (;; ++next_e) {
            if (next_e >= m) fail(Errc::ConvergenceFailure, "could not complete orthonormal basis");
            std::fill(w.begin(), w.end(), 0.0);
            w[next_e] = 1.0;
            for (int pass = 0; pass < 2; ++pass) {
                for (std::size_t b : basis) {
                    const double proj = dot(u.col(b), w.data(), m);
                    const double* ub = u.col(b);
                    for (std::size_t i = 0; i < m; ++i) w[i] -= proj * ub[i];
                }
            }
            const double nsq = dot(w.data(), w.data(), m);
            if (nsq > accept_sq) {
                const double inv = 1.0 / std::sqrt(nsq);
                double* uj = u.col(j);
                for (std::size_t i = 0; i < m; ++i) uj[i] = w[i] * inv;
                basis.push_back(j);
                ++next_e;
                break;
            }
        }
    }
}

SvdFactors svd_tall(const Matrix& m, bool transposed, const SvdOptions& opt) {
    // Work on A = M (rows >= cols) or A = M^T.
    const std::size_t rows = transposed ? m.cols() : m.rows();
    const std::size_t cols = transposed ? m.rows() : m.cols();

    double max_abs = 0.0;
    for (double x : m.values()) max_abs = std::max(max_abs, std::fabs(x));
    // Power-of-two rescaling is exact and keeps the squared norms in range.
    int scale_exp = 0;
    if (max_abs > 0.0) std::frexp(max_abs, &scale_exp);

    ColumnBlock a{rows, cols, std::vector<double>(rows * cols)};
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) {
            const double x = std::ldexp(m(i, j), -scale_exp);
            if (transposed) a.col(i)[j] = x;
            else a.col(j)[i] = x;
        }
    }
    ColumnBlock v{cols, cols, std::vector<double>(cols * cols, 0.0)};
    for (std::size_t j = 0; j < cols; ++j) v.col(j)[j] = 1.0;

    double fro_sq = 0.0;
    for (double x : a.data) fro_sq += x * x;
    const double negligible = opt.negligible * std::sqrt(fro_sq);
    const double negligible_sq = negligible * negligible;

    hestenes(a, v, negligible_sq, opt);

    std::vector<double> sigma(cols);
    for (std::size_t j = 0; j < cols; ++j) {
        const double s = std::sqrt(dot(a.col(j), a.col(j), rows));
        sigma[j] = (fro_sq == 0.0 || s <= negligible) ? 0.0 : s;
    }
    std::vector<std::size_t> order(cols);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

    ColumnBlock left{rows, cols, std::vector<double>(rows * cols, 0.0)};
    ColumnBlock right{cols, cols, std::vector<double>(cols * cols)};
    std::vector<double> s_sorted(cols);
    std::vector<bool> missing(cols, false);
    for (std::size_t k = 0; k < cols; ++k) {
        const std::size_t j = order[k];
        s_sorted[k] = sigma[j];
        std::copy(v.col(j), v.col(j) + cols, right.col(k));
        if (sigma[j] == 0.0) {
            missing[k] = true;
        } else {
            const double inv = 1.0 / sigma[j];
            for (std::size_t i = 0; i < rows; ++i) left.col(k)[i] = a.col(j)[i] * inv;
        }
    }
    complete_basis(left, missing);

    // Canonical sign, decided on the final U (which is `right` when transposed).
    ColumnBlock& u_side = transposed ? right : left;
    ColumnBlock& v_side = transposed ? left : right;
    for (std::size_t k = 0; k < cols; ++k) {
        const double* uc = u_side.col(k);
        std::size_t best = 0;
        for (std::size_t i = 1; i < u_side.len; ++i) {
            if (std::fabs(uc[i]) > std::fabs(uc[best])) best = i;
        }
        if (uc[best] < 0.0) {
            for (std::size_t i = 0; i < u_side.len; ++i) u_side.col(k)[i] = -u_side.col(k)[i];
            for (std::size_t i = 0; i < v_side.len; ++i) v_side.col(k)[i] = -v_side.col(k)[i];
        }
    }

    SvdFactors f;
    f.s.resize(cols);
    for (std::size_t k = 0; k < cols; ++k) f.s[k] = std::ldexp(s_sorted[k], scale_exp);
    auto to_matrix = [cols](const ColumnBlock& b) {
        Matrix out(b.len, cols);
        for (std::size_t k = 0; k < cols; ++k) {
            for (std::size_t i = 0; i < b.len; ++i) out(i, k) = b.col(k)[i];
        }
        return out;
    };
    f.u = to_matrix(u_side);
    f.v = to_matrix(v_side);
    return f;
}

} // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), values_(rows * cols, 0.0) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != rows * cols) {
        fail(Errc::DimensionMismatch, std::to_string(values_.size()) + " values for a " + std::to_string(rows) + "x" +
                                          std::to_string(cols) + " matrix");
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::diagonal(std::span<const double> diag) {
    Matrix m(diag.size(), diag.size());
    for (std::size_t i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
    return m;
}

bool all_finite(const Matrix& m) {
    return std::all_of(m.values().begin(), m.values().end(), [](double x) { return std::isfinite(x); });
}

Matrix transpose(const Matrix& m) {
    Matrix t(m.cols(), m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
    }
    return t;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) fail(Errc::DimensionMismatch, "matmul: " + dims(a) + " * " + dims(b));
    Matrix c(a.rows(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* ci = c.values().data() + i * n;
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            const double* bk = b.values().data() + k * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
        }
    }
    return c;
}

double frobenius_norm(const Matrix& m) {
    double s = 0.0;
    for (double x : m.values()) s += x * x;
    return std::sqrt(s);
}

Matrix axpby(double a, const Matrix& x, double b, const Matrix& y) {
    require_same_shape(x, y, "axpby");
    Matrix out(x.rows(), x.cols());
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = a * x.values()[i] + b * y.values()[i];
    return out;
}

Matrix scaled(const Matrix& m, double s) {
    Matrix out = m;
    for (double& x : out.values()) x *= s;
    return out;
}

Matrix operator+(const Matrix& x, const Matrix& y) {
    require_same_shape(x, y, "add");
    Matrix out = x;
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] += y.values()[i];
    return out;
}

Matrix operator-(const Matrix& x, const Matrix& y) {
    require_same_shape(x, y, "subtract");
    Matrix out = x;
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] -= y.values()[i];
    return out;
}

SvdFactors thin_svd(const Matrix& m, const SvdOptions& options) {
    if (m.rows() == 0 || m.cols() == 0) fail(Errc::DimensionMismatch, "thin_svd of an empty " + dims(m) + " matrix");
    if (!all_finite(m)) fail(Errc::InvalidParameter, "thin_svd: matrix has non-finite entries");
    return svd_tall(m, m.rows() < m.cols(), options);
}

SvdFactors thin_svd(const Matrix& m, std::size_t rank, const SvdOptions& options) {
    SvdFactors full = thin_svd(m, options);
    if (rank == 0 || rank > full.rank()) {
        fail(Errc::InvalidParameter, "requested rank " + std::to_string(rank) + " outside [1, " +
                                         std::to_string(full.rank()) + "]");
    }
    if (rank == full.rank()) return full;
    auto keep = [rank](const Matrix& x) {
        Matrix out(x.rows(), rank);
        for (std::size_t i = 0; i < x.rows(); ++i) {
            for (std::size_t k = 0; k < rank; ++k) out(i, k) = x(i, k);
        }
        return out;
    };
    SvdFactors t;
    t.u = keep(full.u);
    t.v = keep(full.v);
    t.s.assign(full.s.begin(), full.s.begin() + static_cast<std::ptrdiff_t>(rank));
    return t;
}

Matrix reconstruct(const SvdFactors& f) {
    const std::size_t k = f.s.size();
    if (f.u.cols() != k || f.v.cols() != k) {
        fail(Errc::DimensionMismatch, "reconstruct: U " + dims(f.u) + ", " + std::to_string(k) + " singular values, V " +
                                          dims(f.v));
    }
    Matrix us = f.u;
    for (std::size_t i = 0; i < us.rows(); ++i) {
        for (std::size_t j = 0; j < k; ++j) us(i, j) *= f.s[j];
    }
    return matmul(us, transpose(f.v));
}

} // namespace lorablend
