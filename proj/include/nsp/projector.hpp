#pragma once

#include "nsp/linalg.hpp"

namespace nsp {

enum class NullityMode { Adaptive, Gamma, ExactZero };

/// C' = C + J^T J. Symmetry and positive semidefiniteness are preserved.
Matrix accumulate_covariance(const Matrix& c, const Matrix& j);

/// Nullity from the elbow of the descending singular-value curve: the index
/// of the maximum second difference splits signal from (approximate) null
/// directions. Ties break toward the smallest index, i.e. the largest
/// nullity. For fewer than 3 values the second difference is undefined and
/// exact-zero counting is used instead.
int adaptive_nullity(const Vector& lambda);

/// Count of singular values <= gamma * lambda_min (inclusive). When the
/// minimum is zero, counts the exact zeros instead.
int gamma_nullity(const Vector& lambda, double gamma);

/// Count of singular values below the numerical-zero threshold
/// 1e-10 * max(lambda_max, 1).
int exact_zero_nullity(const Vector& lambda);

struct ProjectorBuild {
    Matrix b;  // eta-blended projection matrix
    int nullity = 0;
    Spectrum spectrum;
};

/// Null-space projection matrix from an accumulated covariance:
/// B_raw = U0 U0^T / ||U0 U0^T||_F over the R trailing singular vectors
/// (zero matrix when R = 0), then B = eta * B_raw + (1 - eta) * I.
ProjectorBuild build_projector(const Matrix& c, NullityMode mode, double gamma,
                               double eta);

/// Two-sided projected update: dP = B2 * P_G * B1.
Matrix project_update(const Matrix& p_g, const Matrix& b1, const Matrix& b2);

}  // namespace nsp
