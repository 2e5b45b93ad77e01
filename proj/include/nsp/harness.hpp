#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nsp/linalg.hpp"
#include "nsp/projector.hpp"
#include "nsp/vit.hpp"

namespace nsp {

// ---------------------------------------------------------------------------
// Synthetic class-incremental task streams
// ---------------------------------------------------------------------------

struct SyntheticTaskSpec {
    int image_size = 16;
    int patch_size = 4;
    int classes_per_task = 2;
    int num_tasks = 5;
    int train_per_class = 100;
    int test_per_class = 100;
    double prototype_scale = 1.8;
    double noise_scale = 0.6;
    std::uint64_t seed = 1;
};

struct Sample {
    Vector image;
    int label;  // global class id
};

struct Task {
    std::vector<int> classes;
    std::vector<Sample> train, test;
};

struct TaskStream {
    std::vector<Task> tasks;
    int classes_per_task = 0;
    std::uint64_t seed = 0;
};

/// Each class is a fixed random prototype image plus Gaussian noise;
/// byte-identical streams for identical specs.
TaskStream generate_task_stream(const SyntheticTaskSpec& spec);

// ---------------------------------------------------------------------------
// Method configuration (one-to-one with the ablation grid)
// ---------------------------------------------------------------------------

enum class Method {
    Seq,
    Nsp2,
    Nsp2B1Only,
    Nsp2B2Only,
    Nsp2NoLnLoss,
    Nsp2B1LnLoss,
    Nsp2B2LnLoss,
    Pgp,
};

std::string method_name(Method m);
bool parse_method(const std::string& name, Method* out);

bool method_uses_b1(Method m);
bool method_uses_b2(Method m);
bool method_uses_lnloss(Method m);

struct MethodConfig {
    Method method = Method::Nsp2;
    double eta1 = 1.0, eta2 = 1.0;
    NullityMode nullity_mode = NullityMode::Adaptive;
    double gamma = 10.0;
    double lnloss_coeff = 1.0;
    double lr = 0.2;
    int epochs = 80;
    int batch_size = 16;
    double tau = 10.0;
    double head_decay = 0.015;  // L2 decay on the current head's weight matrix
    int j_subsample = 0;  // 0 = collect J over the full training set
    bool use_adam = false;
    double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
    bool audit_residuals = true;
};

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct Metrics {
    double accuracy = 0.0;
    double forgetting = 0.0;
    bool forgetting_defined = false;  // absent when T = 1
};

/// Final average accuracy and forgetting from a complete lower-triangular
/// accuracy matrix acc[j][i] (after task j, on task i, 0-based).
Metrics final_metrics(const std::vector<std::vector<double>>& acc);

// ---------------------------------------------------------------------------
// Training engine
// ---------------------------------------------------------------------------

struct ResidualRecord {
    int task = 0, layer = 0;  // 1-based task
    double omega1 = 0.0, omega2 = 0.0;  // normalized condition residuals
};

struct SpectrumRecord {
    int task = 0, layer = 0;
    char side = '1';  // '1' for C1, '2' for C2
    Vector values;
    int nullity = 0;
};

struct LayerProjState {
    Matrix c1, c2, c_pgp;
    Matrix b1, b2, b_pgp;
    int r1 = 0, r2 = 0, r_pgp = 0;
    RowStats prompt_target;
    bool has_target = false;
};

class Trainer {
public:
    Trainer(BackboneModel model, MethodConfig config, std::uint64_t seed);

    /// Algorithm: task 1 trains with raw candidate updates (B = I); later
    /// tasks add the drift loss and project every candidate prompt update.
    void train_task(const TaskStream& stream, int task_index);

    /// Collect J1/J2 over the task's training set, accumulate covariances,
    /// rebuild the projection matrices, and capture the prompt targets.
    void end_of_task_update(const Task& task);

    /// Class-incremental accuracy on tasks 0..upto (inclusive).
    std::vector<double> evaluate(const TaskStream& stream, int upto) const;

    /// Mean temperature-scaled cross-entropy of a task's training data
    /// through its own head only (loss-retention diagnostic).
    double task_train_loss(const Task& task, int head_index) const;

    const BackboneModel& model() const { return model_; }
    BackboneModel& mutable_model() { return model_; }
    const std::vector<LayerProjState>& projection_state() const {
        return proj_;
    }
    std::vector<LayerProjState>& mutable_projection_state() { return proj_; }
    const std::vector<ResidualRecord>& residuals() const { return residuals_; }
    const std::vector<SpectrumRecord>& spectra() const { return spectra_; }

private:
    BackboneModel model_;
    MethodConfig config_;
    std::uint64_t seed_;
    std::vector<LayerProjState> proj_;
    std::vector<ResidualRecord> residuals_;
    std::vector<SpectrumRecord> spectra_;
    // Adam state, lazily sized.
    std::vector<Matrix> adam_m_, adam_v_;
    Matrix adam_mw_, adam_vw_;
    Vector adam_mb_, adam_vb_;
    long adam_step_ = 0;
};

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

struct ExperimentConfig {
    SyntheticTaskSpec stream;
    ModelSpec model;
    int pretrain_epochs = 0;
    int pretrain_classes = 4;
    double pretrain_lr = 0.05;
    std::vector<MethodConfig> methods;
    std::vector<std::uint64_t> seeds;
};

struct RunResult {
    std::string method;
    std::uint64_t seed = 0;
    std::vector<std::vector<double>> acc;  // acc[j][i]
    Metrics metrics;
    std::vector<ResidualRecord> residuals;
    // loss_drift[i][k]: training loss of tracked task i after task i+k.
    std::vector<std::vector<double>> loss_drift;
    std::vector<SpectrumRecord> spectra;
    double wall_seconds = 0.0;
};

struct MethodSummary {
    std::string method;
    double acc_mean = 0, acc_std = 0;
    double forget_mean = 0, forget_std = 0;
};

struct ExperimentReport {
    std::vector<RunResult> runs;
    std::vector<MethodSummary> summaries;
};

RunResult run_single(const ExperimentConfig& config,
                     const MethodConfig& method, std::uint64_t seed);

/// Per method x seed grid; streams and model init depend only on the seed,
/// so methods see identical data for paired comparison.
ExperimentReport run_experiment(const ExperimentConfig& config);

/// Backbone construction shared by all methods for a given seed: random
/// init plus the optional pretext pretraining phase, then frozen.
BackboneModel make_backbone(const ExperimentConfig& config,
                            std::uint64_t seed);

}  // namespace nsp
