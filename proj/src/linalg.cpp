#include "nsp/linalg.hpp"

#include <cmath>

namespace nsp {

bool all_finite(const Matrix& m) { return m.allFinite(); }

std::pair<Matrix, RowStats> layer_norm(const Matrix& rows, const Vector& alpha,
                                       const Vector& beta, double eps) {
    const Eigen::Index d = rows.cols();
    require(alpha.size() == d && beta.size() == d,
            "layer_norm: alpha/beta length must equal column count");
    require(eps >= 0.0, "layer_norm: eps must be non-negative");

    RowStats stats;
    stats.mean = rows.rowwise().mean();
    Matrix centered = rows.colwise() - stats.mean;
    Vector var = centered.array().square().rowwise().mean();
    stats.std = (var.array() + eps).sqrt();

    Matrix out =
        ((centered.array().colwise() / stats.std.array()).rowwise() *
         alpha.transpose().array())
            .rowwise() +
        beta.transpose().array();
    return {std::move(out), std::move(stats)};
}

Matrix softmax_rows(const Matrix& logits) {
    require(all_finite(logits), "softmax_rows: input must be finite");
    Vector rowmax = logits.rowwise().maxCoeff();
    Matrix shifted = (logits.colwise() - rowmax).array().exp();
    Vector rowsum = shifted.rowwise().sum();
    return shifted.array().colwise() / rowsum.array();
}

Spectrum eig_sym_psd(const Matrix& c) {
    require(c.rows() == c.cols(), "eig_sym_psd: matrix must be square");
    const double scale = std::max(1.0, c.cwiseAbs().maxCoeff());
    require((c - c.transpose()).cwiseAbs().maxCoeff() <= 1e-8 * scale,
            "eig_sym_psd: matrix must be symmetric");

    Eigen::SelfAdjointEigenSolver<Matrix> solver(0.5 * (c + c.transpose()));
    require(solver.info() == Eigen::Success, "eig_sym_psd: decomposition failed");

    // Eigen returns ascending eigenvalues; flip to descending.
    const Eigen::Index n = c.rows();
    Spectrum s;
    s.singular_values = solver.eigenvalues().reverse();
    s.right_vectors = solver.eigenvectors().rowwise().reverse();
    for (Eigen::Index i = 0; i < n; ++i) {
        if (s.singular_values[i] < 0.0) s.singular_values[i] = 0.0;
    }
    return s;
}

double frobenius_norm(const Matrix& m) { return m.norm(); }

}  // namespace nsp
