#pragma once

// Dense double-precision linear algebra for direction fitting. Everything is
// deterministic: fixed iteration orders, no libm-dependent branching, and a
// hand-rolled cyclic Jacobi eigensolver instead of an external LAPACK.

#include <cstddef>
#include <vector>

#include "repe/common.hpp"

namespace repe {

using Vec = std::vector<double>;

struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;  // row-major

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    double* row(std::size_t i) { return data.data() + i * cols; }
    const double* row(std::size_t i) const { return data.data() + i * cols; }

    Vec row_vec(std::size_t i) const { return Vec(row(i), row(i) + cols); }

    void push_row(const Vec& v);

    static Matrix from_rows(const std::vector<Vec>& rows);
};

// Per-dimension location/scale fitted on a sample; scale is the population
// (1/n) standard deviation with zero-variance dimensions pinned to 1.
struct StandardizationStats {
    Vec mean;
    Vec scale;
};

struct FitReport {
    Vec direction;                  // unit Euclidean norm
    Vec explained_variance_ratio;   // PCA only, leading components
    int iterations_used = 0;
};

double dot(const Vec& a, const Vec& b);
double norm(const Vec& v);
Vec normalized(const Vec& v);  // throws ZeroVector on zero input
double cosine(const Vec& a, const Vec& b);
Vec softmax(const Vec& logits);

void check_finite(const Vec& v, const char* what);
void check_finite(const Matrix& m, const char* what);

StandardizationStats standardize_fit(const Matrix& x);
Vec standardize_apply(const StandardizationStats& stats, const Vec& v);

// Cyclic Jacobi eigendecomposition of a symmetric matrix. Eigenpairs are
// returned sorted by descending eigenvalue. Exposed for reuse; the PCA
// fitter is its only in-library client.
struct EigenResult {
    Vec values;
    Matrix vectors;  // row i = eigenvector for values[i]
    int sweeps = 0;
};
EigenResult jacobi_eigen_symmetric(const Matrix& a, double tol = 1e-12, int max_sweeps = 100);

FitReport pca_first_component(const Matrix& x);
FitReport kmeans2_direction(const Matrix& x, std::uint64_t seed = 0);
FitReport mean_difference(const Matrix& x_high, const Matrix& x_low);
FitReport logistic_direction(const Matrix& x, const std::vector<int>& y);
FitReport prompt_difference(const Vec& a, const Vec& b);

}  // namespace repe
