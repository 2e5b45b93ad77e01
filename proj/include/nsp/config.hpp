#pragma once

#include <stdexcept>
#include <string>

#include "nsp/harness.hpp"

namespace nsp {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Flat key=value run configuration ('#' comments, dotted keys, strict:
/// unknown keys are rejected). One shared hyperparameter block; run.methods
/// selects which variants of the grid to execute with it.
struct RunConfig {
    ExperimentConfig experiment;
    std::string output_dir = "out";
};

RunConfig default_run_config();

/// Parse from text; errors name the offending line and key.
RunConfig parse_config_text(const std::string& text);
RunConfig parse_config_file(const std::string& path);

/// Full echo of every key; feeding the result back reproduces the run.
std::string render_config(const RunConfig& config);

}  // namespace nsp
