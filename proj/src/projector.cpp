#include "nsp/projector.hpp"

#include <cmath>
#include <limits>

namespace nsp {

Matrix accumulate_covariance(const Matrix& c, const Matrix& j) {
    require(c.rows() == c.cols(), "accumulate_covariance: C must be square");
    require(j.cols() == c.cols(),
            "accumulate_covariance: J column count must match C dimension");
    if (j.rows() == 0) return c;
    return c + j.transpose() * j;
}

int adaptive_nullity(const Vector& lambda) {
    const auto dim = lambda.size();
    if (dim < 3) return exact_zero_nullity(lambda);
    // 1-based j in [2, dim-1]; second difference lambda_{j-1}-2*lambda_j+lambda_{j+1}.
    int best_j = 2;
    double best = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 2; j <= dim - 1; ++j) {
        double second = lambda[j - 2] - 2.0 * lambda[j - 1] + lambda[j];
        if (second > best) {
            best = second;
            best_j = static_cast<int>(j);
        }
    }
    return static_cast<int>(dim) - best_j;
}

int gamma_nullity(const Vector& lambda, double gamma) {
    require(lambda.size() > 0, "gamma_nullity: empty spectrum");
    const double min = lambda.minCoeff();
    int count = 0;
    if (min == 0.0) {
        for (Eigen::Index i = 0; i < lambda.size(); ++i)
            if (lambda[i] == 0.0) ++count;
    } else {
        const double threshold = gamma * min;
        for (Eigen::Index i = 0; i < lambda.size(); ++i)
            if (lambda[i] <= threshold) ++count;
    }
    return count;
}

int exact_zero_nullity(const Vector& lambda) {
    if (lambda.size() == 0) return 0;
    const double threshold = 1e-10 * std::max(lambda.maxCoeff(), 1.0);
    int count = 0;
    for (Eigen::Index i = 0; i < lambda.size(); ++i)
        if (lambda[i] <= threshold) ++count;
    return count;
}

ProjectorBuild build_projector(const Matrix& c, NullityMode mode, double gamma,
                               double eta) {
    require(eta >= 0.0 && eta <= 1.0, "build_projector: eta must be in [0,1]");
    ProjectorBuild out;
    out.spectrum = eig_sym_psd(c);
    switch (mode) {
        case NullityMode::Adaptive:
            out.nullity = adaptive_nullity(out.spectrum.singular_values);
            break;
        case NullityMode::Gamma:
            out.nullity = gamma_nullity(out.spectrum.singular_values, gamma);
            break;
        case NullityMode::ExactZero:
            out.nullity = exact_zero_nullity(out.spectrum.singular_values);
            break;
    }
    const Eigen::Index dim = c.rows();
    Matrix b_raw;
    if (out.nullity == 0) {
        b_raw = Matrix::Zero(dim, dim);
    } else {
        const auto u0 = out.spectrum.right_vectors.rightCols(out.nullity);
        b_raw = u0 * u0.transpose();
        b_raw /= b_raw.norm();  // ||U0 U0^T||_F = sqrt(R)
    }
    out.b = eta * b_raw + (1.0 - eta) * Matrix::Identity(dim, dim);
    return out;
}

Matrix project_update(const Matrix& p_g, const Matrix& b1, const Matrix& b2) {
    require(b2.cols() == p_g.rows() && p_g.cols() == b1.rows(),
            "project_update: shapes not conformable");
    return b2 * p_g * b1;
}

}  // namespace nsp
