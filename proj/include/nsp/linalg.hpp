#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>
#include <utility>

namespace nsp {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Thrown when an operation's input contract is violated (shape mismatch,
/// non-symmetric input, non-finite entries, ...).
class ContractViolation : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw ContractViolation(what);
}

bool all_finite(const Matrix& m);

/// Per-row first and second moments. `std` is sqrt(var + eps) with the
/// population variance convention (divide by the column count), so the
/// LayerNorm shift identity holds exactly with these values.
struct RowStats {
    Vector mean;
    Vector std;
};

/// Result of a symmetric PSD eigendecomposition, reported in SVD convention:
/// singular values descending, right singular vectors as orthonormal columns.
struct Spectrum {
    Vector singular_values;
    Matrix right_vectors;
};

/// Row-wise LayerNorm with affine parameters:
///   out[i,d] = (rows[i,d] - mean_i) / sqrt(var_i + eps) * alpha[d] + beta[d]
std::pair<Matrix, RowStats> layer_norm(const Matrix& rows, const Vector& alpha,
                                       const Vector& beta, double eps);

/// Numerically stable row softmax (max subtraction); each output row sums to 1.
Matrix softmax_rows(const Matrix& logits);

/// Eigendecomposition of a symmetric PSD matrix. Negative round-off
/// eigenvalues are clamped to zero; values returned in descending order.
Spectrum eig_sym_psd(const Matrix& c);

double frobenius_norm(const Matrix& m);

}  // namespace nsp
