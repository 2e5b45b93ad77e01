#include "nsp/ln_constraint.hpp"

#include <cmath>
#include <sstream>

namespace nsp {

RowStats prompt_row_stats(const Matrix& p, double eps) {
    require(p.rows() >= 1, "prompt_row_stats: empty prompt matrix");
    RowStats st;
    st.mean = p.rowwise().mean();
    Vector var = (p.colwise() - st.mean).array().square().rowwise().mean();
    st.std = (var.array() + eps).sqrt();
    return st;
}

DriftLoss ln_drift_loss(const Matrix& p, double eps, const RowStats& target) {
    require(p.rows() == target.mean.size() && p.rows() == target.std.size(),
            "ln_drift_loss: target row count mismatch");
    const auto cols = static_cast<double>(p.cols());
    RowStats current = prompt_row_stats(p, eps);

    DriftLoss out;
    out.grad = Matrix::Zero(p.rows(), p.cols());
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
        const double d_mu = current.mean[r] - target.mean[r];
        const double d_sigma = current.std[r] - target.std[r];
        out.value += std::abs(d_mu) + std::abs(d_sigma);
        const double sgn_mu = d_mu > 0 ? 1.0 : (d_mu < 0 ? -1.0 : 0.0);
        const double sgn_sigma = d_sigma > 0 ? 1.0 : (d_sigma < 0 ? -1.0 : 0.0);
        // d(mu_r)/dP[r,c] = 1/D; d(sigma_r)/dP[r,c] = (P[r,c]-mu_r)/(D*sigma_r)
        out.grad.row(r).array() += sgn_mu / cols;
        if (sgn_sigma != 0.0 && current.std[r] > 0.0) {
            out.grad.row(r) +=
                (sgn_sigma / (cols * current.std[r])) *
                (p.row(r).array() - current.mean[r]).matrix();
        }
    }
    return out;
}

double ln_shift_check(const Matrix& p, const Matrix& dp, const Vector& alpha,
                      double eps) {
    require(p.rows() == dp.rows() && p.cols() == dp.cols(),
            "ln_shift_check: shape mismatch");
    RowStats before = prompt_row_stats(p, eps);
    RowStats after = prompt_row_stats(p + dp, eps);
    const double drift =
        std::max((before.mean - after.mean).cwiseAbs().maxCoeff(),
                 (before.std - after.std).cwiseAbs().maxCoeff());
    if (drift > 1e-12) {
        std::ostringstream msg;
        msg << "ln_shift_check: row stats drift " << drift
            << " exceeds 1e-12; the shift identity does not apply";
        throw ContractViolation(msg.str());
    }
    const Vector beta = Vector::Zero(p.cols());
    Matrix ln_before = layer_norm(p, alpha, beta, eps).first;
    Matrix ln_after = layer_norm(p + dp, alpha, beta, eps).first;
    Matrix shift = (dp.array().colwise() / before.std.array()).rowwise() *
                   alpha.transpose().array();
    return (ln_after - ln_before - shift).norm();
}

}  // namespace nsp
