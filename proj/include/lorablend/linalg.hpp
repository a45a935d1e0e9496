#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

namespace lorablend {

// Dense row-major binary64 matrix.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

    static Matrix identity(std::size_t n);
    static Matrix diagonal(std::span<const double> diag);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return values_.size(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return values_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return values_[r * cols_ + c]; }

    std::span<double> values() noexcept { return values_; }
    std::span<const double> values() const noexcept { return values_; }
    std::span<const double> row(std::size_t r) const noexcept { return {values_.data() + r * cols_, cols_}; }

    bool same_shape(const Matrix& other) const noexcept { return rows_ == other.rows_ && cols_ == other.cols_; }
    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> values_;
};

bool all_finite(const Matrix& m);
Matrix transpose(const Matrix& m);

// C = A * B. Each output entry accumulates its k terms in increasing k order,
// so results are reproducible bit-for-bit.
Matrix matmul(const Matrix& a, const Matrix& b);
double frobenius_norm(const Matrix& m);

// a*x + b*y, elementwise.
Matrix axpby(double a, const Matrix& x, double b, const Matrix& y);
Matrix scaled(const Matrix& m, double s);
Matrix operator+(const Matrix& x, const Matrix& y);
Matrix operator-(const Matrix& x, const Matrix& y);

// Thin SVD M = U diag(S) V^T with k = min(m, n) (or a requested smaller rank).
//
// Canonical form: S is non-increasing; in every column of U the entry of
// largest magnitude (lowest row on ties) is non-negative, with the matching
// column of V flipped alongside. Columns belonging to zero singular values are
// completed deterministically from the standard basis.
struct SvdFactors {
    Matrix u;              // m x k
    std::vector<double> s; // k
    Matrix v;              // n x k

    std::size_t rank() const noexcept { return s.size(); }
};

struct SvdOptions {
    // A column pair is left alone once |<a_p, a_q>| <= tolerance * |a_p| |a_q|.
    double tolerance = 1e-13;
    int max_sweeps = 60;
    // Columns with norm <= negligible * |M|_F are treated as exact zeros.
    double negligible = 1e-13;
};

SvdFactors thin_svd(const Matrix& m, const SvdOptions& options = {});
SvdFactors thin_svd(const Matrix& m, std::size_t rank, const SvdOptions& options = {});

Matrix reconstruct(const SvdFactors& f);

} // namespace lorablend
