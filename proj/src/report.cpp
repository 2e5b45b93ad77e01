#include "nsp/report.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>

namespace nsp {

std::string format_double(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    require(ec == std::errc(), "format_double: conversion failed");
    return std::string(buf, ptr);
}

namespace {

std::ofstream open_csv(const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot open output file: " + path.string());
    }
    return out;
}

std::string run_basename(const RunResult& run) {
    return run.method + "_seed" + std::to_string(run.seed);
}

}  // namespace

void write_reports(const ExperimentReport& report, const RunConfig& config,
                   const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const fs::path base(dir);

    {
        auto out = open_csv(base / "summary.csv");
        out << "method,seed,final_avg_accuracy,final_avg_forgetting\n";
        for (const auto& run : report.runs) {
            out << run.method << "," << run.seed << ","
                << format_double(run.metrics.accuracy) << ",";
            if (run.metrics.forgetting_defined)
                out << format_double(run.metrics.forgetting);
            out << "\n";
        }
    }
    {
        auto out = open_csv(base / "summary_by_method.csv");
        out << "method,accuracy_mean,accuracy_std,forgetting_mean,"
               "forgetting_std\n";
        for (const auto& s : report.summaries) {
            out << s.method << "," << format_double(s.acc_mean) << ","
                << format_double(s.acc_std) << ","
                << format_double(s.forget_mean) << ","
                << format_double(s.forget_std) << "\n";
        }
    }

    for (const auto& run : report.runs) {
        const std::string name = run_basename(run);
        const int tasks = static_cast<int>(run.acc.size());
        {
            auto out = open_csv(base / (name + "_accuracy_matrix.csv"));
            out << "after_task";
            for (int i = 1; i <= tasks; ++i) out << ",task_" << i;
            out << "\n";
            for (int j = 0; j < tasks; ++j) {
                out << (j + 1);
                for (int i = 0; i < tasks; ++i) {
                    out << ",";
                    if (i <= j) out << format_double(run.acc[j][i]);
                }
                out << "\n";
            }
        }
        {
            auto out = open_csv(base / (name + "_residuals.csv"));
            out << "task,layer,residual_omega1,residual_omega2\n";
            for (const auto& r : run.residuals) {
                out << r.task << "," << r.layer << ","
                    << format_double(r.omega1) << ","
                    << format_double(r.omega2) << "\n";
            }
        }
        {
            auto out = open_csv(base / (name + "_loss_drift.csv"));
            out << "tracked_task,after_task,train_loss\n";
            for (std::size_t i = 0; i < run.loss_drift.size(); ++i) {
                for (std::size_t k = 0; k < run.loss_drift[i].size(); ++k) {
                    out << (i + 1) << "," << (i + 1 + k) << ","
                        << format_double(run.loss_drift[i][k]) << "\n";
                }
            }
        }
        {
            auto out = open_csv(base / (name + "_spectrum.csv"));
            out << "task,side,layer,index,singular_value,chosen_nullity\n";
            for (const auto& s : run.spectra) {
                for (Eigen::Index idx = 0; idx < s.values.size(); ++idx) {
                    out << s.task << ",omega" << s.side << "," << s.layer
                        << "," << (idx + 1) << ","
                        << format_double(s.values[idx]) << "," << s.nullity
                        << "\n";
                }
            }
        }
    }

    std::ofstream echo(base / "config_echo.conf");
    echo << render_config(config);
}

void write_sweep_csv(const std::vector<std::pair<double, RunResult>>& rows,
                     const std::string& path) {
    namespace fs = std::filesystem;
    const fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    auto out = open_csv(p);
    out << "eta,seed,final_avg_accuracy,final_avg_forgetting\n";
    for (const auto& [eta, run] : rows) {
        out << format_double(eta) << "," << run.seed << ","
            << format_double(run.metrics.accuracy) << ",";
        if (run.metrics.forgetting_defined)
            out << format_double(run.metrics.forgetting);
        out << "\n";
    }
}

}  // namespace nsp
