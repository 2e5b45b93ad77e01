#pragma once

#include "nsp/linalg.hpp"

namespace nsp {

/// Per-row mean and population std of a prompt matrix, with eps inside the
/// std exactly as in layer_norm so the LN shift identity holds as written.
RowStats prompt_row_stats(const Matrix& p, double eps);

struct DriftLoss {
    double value = 0.0;
    Matrix grad;  // w.r.t. the prompt entries
};

/// L1 drift of prompt row statistics from a frozen target:
///   L = sum_rows |mu - mu_target| + |sigma - sigma_target|
/// Subgradient at exact ties is 0.
DriftLoss ln_drift_loss(const Matrix& p, double eps, const RowStats& target);

/// Residual of LN(P + dP) - LN(P) - (dP / sigma_P) .* alpha, valid when
/// P + dP has the same row stats as P (checked to 1e-12; a violation throws
/// a ContractViolation carrying the drift magnitude).
double ln_shift_check(const Matrix& p, const Matrix& dp, const Vector& alpha,
                      double eps);

}  // namespace nsp
