#pragma once

#include <string>

#include "nsp/config.hpp"
#include "nsp/harness.hpp"

namespace nsp {

/// Shortest round-trip decimal formatting ('.' separator).
std::string format_double(double v);

/// Write summary.csv, per-run detail CSVs (accuracy matrix, residuals,
/// loss drift, spectra) and the reproducing config echo into `dir`.
void write_reports(const ExperimentReport& report, const RunConfig& config,
                   const std::string& dir);

/// Sweep CSV: one row per (eta, seed) with final metrics.
void write_sweep_csv(const std::vector<std::pair<double, RunResult>>& rows,
                     const std::string& path);

}  // namespace nsp
