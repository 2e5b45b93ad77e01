#pragma once

#include <string>
#include <vector>

namespace nsp {

struct PropertyResult {
    std::string name;
    bool pass = false;
    double measured = 0.0;  // worst observed residual/error for the property
    double threshold = 0.0;
};

/// The cross-module property suite behind `check`: projector residuals, the
/// LN shift identity, LN-bypass self-attention consistency, gradient checks
/// and the metric formulas. `inject_fault` perturbs a projection matrix off
/// the null space so the residual check must fail (harness self-test).
std::vector<PropertyResult> run_property_suite(bool inject_fault = false);

}  // namespace nsp
