#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nsp/check.hpp"
#include "nsp/config.hpp"
#include "nsp/report.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfigError = 1;
constexpr int kExitRuntimeError = 2;
constexpr int kExitCheckFailure = 3;

int cmd_run(const std::string& config_path) {
    nsp::RunConfig config;
    try {
        config = nsp::parse_config_file(config_path);
    } catch (const nsp::ConfigError& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return kExitConfigError;
    }
    try {
        nsp::ExperimentReport report = nsp::run_experiment(config.experiment);
        nsp::write_reports(report, config, config.output_dir);
        for (const auto& s : report.summaries) {
            std::printf("%-16s acc %.4f (+/- %.4f)  forgetting %.4f (+/- %.4f)\n",
                        s.method.c_str(), s.acc_mean, s.acc_std,
                        s.forget_mean, s.forget_std);
        }
        std::printf("reports written to %s\n", config.output_dir.c_str());
        return kExitOk;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "runtime error: %s\n", e.what());
        return kExitRuntimeError;
    }
}

int cmd_check(bool inject_fault) {
    try {
        auto results = nsp::run_property_suite(inject_fault);
        bool all_pass = true;
        for (const auto& r : results) {
            std::printf("%s %-28s measured %.3e (threshold %.0e)\n",
                        r.pass ? "PASS" : "FAIL", r.name.c_str(), r.measured,
                        r.threshold);
            all_pass = all_pass && r.pass;
        }
        return all_pass ? kExitOk : kExitCheckFailure;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "runtime error: %s\n", e.what());
        return kExitRuntimeError;
    }
}

int cmd_sweep(const std::string& config_path, const std::string& eta_list) {
    nsp::RunConfig config;
    std::vector<double> etas;
    try {
        config = nsp::parse_config_file(config_path);
        std::size_t pos = 0;
        while (pos < eta_list.size()) {
            auto comma = eta_list.find(',', pos);
            if (comma == std::string::npos) comma = eta_list.size();
            std::size_t used = 0;
            const std::string item = eta_list.substr(pos, comma - pos);
            double eta = std::stod(item, &used);
            if (used != item.size() || eta < 0.0 || eta > 1.0) {
                throw nsp::ConfigError("sweep: eta values must be in [0, 1]");
            }
            etas.push_back(eta);
            pos = comma + 1;
        }
        if (etas.empty()) throw nsp::ConfigError("sweep: empty eta grid");
    } catch (const nsp::ConfigError& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return kExitConfigError;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "config error: bad eta list '%s'\n",
                     eta_list.c_str());
        return kExitConfigError;
    }

    try {
        nsp::MethodConfig method = config.experiment.methods.front();
        method.method = nsp::Method::Nsp2;
        std::vector<std::pair<double, nsp::RunResult>> rows;
        for (double eta : etas) {
            nsp::MethodConfig mc = method;
            mc.eta1 = eta;
            mc.eta2 = eta;
            for (auto seed : config.experiment.seeds) {
                rows.emplace_back(
                    eta, nsp::run_single(config.experiment, mc, seed));
            }
        }
        const std::string path = config.output_dir + "/sweep.csv";
        nsp::write_sweep_csv(rows, path);
        std::printf("sweep written to %s\n", path.c_str());
        return kExitOk;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "runtime error: %s\n", e.what());
        return kExitRuntimeError;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Null-space projected prompt tuning on synthetic "
                 "class-incremental streams"};
    app.require_subcommand(1);

    std::string config_path;
    auto* run = app.add_subcommand("run", "Run the configured experiment");
    run->add_option("--config", config_path, "Path to key=value config")
        ->required();

    bool inject_fault = false;
    auto* check = app.add_subcommand("check", "Run the property suite");
    check->add_flag("--inject-fault", inject_fault,
                    "Perturb a projector off the null space (self-test)");

    std::string sweep_config, eta_list;
    auto* sweep = app.add_subcommand("sweep", "Sweep the projection weight");
    sweep->add_option("--config", sweep_config, "Path to key=value config")
        ->required();
    sweep->add_option("--eta", eta_list, "Comma-separated eta grid in [0,1]")
        ->required();

    CLI11_PARSE(app, argc, argv);

    if (run->parsed()) return cmd_run(config_path);
    if (check->parsed()) return cmd_check(inject_fault);
    if (sweep->parsed()) return cmd_sweep(sweep_config, eta_list);
    return kExitConfigError;
}
