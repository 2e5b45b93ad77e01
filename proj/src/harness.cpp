#include "nsp/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

#include "nsp/ln_constraint.hpp"
#include "nsp/rng.hpp"

namespace nsp {

// ---------------------------------------------------------------------------
// Synthetic streams
// ---------------------------------------------------------------------------

namespace {

Vector gaussian_image(int pixels, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, stddev);
    Vector v(pixels);
    for (int i = 0; i < pixels; ++i) v[i] = gauss(rng);
    return v;
}

std::vector<Sample> draw_samples(const Vector& prototype, int label, int count,
                                 double noise, std::mt19937_64& rng) {
    std::vector<Sample> out;
    out.reserve(count);
    const int pixels = static_cast<int>(prototype.size());
    for (int i = 0; i < count; ++i) {
        out.push_back({prototype + gaussian_image(pixels, noise, rng), label});
    }
    return out;
}

}  // namespace

TaskStream generate_task_stream(const SyntheticTaskSpec& spec) {
    const int pixels = spec.image_size * spec.image_size;
    const int total_classes = spec.classes_per_task * spec.num_tasks;
    require(spec.classes_per_task >= 1 && spec.num_tasks >= 1,
            "generate_task_stream: need at least one class and one task");
    require(total_classes <= pixels,
            "generate_task_stream: more classes than the generator can "
            "represent (classes_per_task * tasks must not exceed the pixel "
            "count)");

    TaskStream stream;
    stream.classes_per_task = spec.classes_per_task;
    stream.seed = spec.seed;
    for (int t = 0; t < spec.num_tasks; ++t) {
        Task task;
        for (int k = 0; k < spec.classes_per_task; ++k) {
            const int cls = t * spec.classes_per_task + k;
            task.classes.push_back(cls);
            auto proto_rng = make_rng(
                spec.seed, "stream/class" + std::to_string(cls) + "/prototype");
            Vector prototype =
                gaussian_image(pixels, spec.prototype_scale, proto_rng);
            auto train_rng = make_rng(
                spec.seed, "stream/class" + std::to_string(cls) + "/train");
            auto test_rng = make_rng(
                spec.seed, "stream/class" + std::to_string(cls) + "/test");
            auto train = draw_samples(prototype, cls, spec.train_per_class,
                                      spec.noise_scale, train_rng);
            auto test = draw_samples(prototype, cls, spec.test_per_class,
                                     spec.noise_scale, test_rng);
            task.train.insert(task.train.end(), train.begin(), train.end());
            task.test.insert(task.test.end(), test.begin(), test.end());
        }
        stream.tasks.push_back(std::move(task));
    }
    return stream;
}

// ---------------------------------------------------------------------------
// Methods
// ---------------------------------------------------------------------------

std::string method_name(Method m) {
    switch (m) {
        case Method::Seq: return "seq";
        case Method::Nsp2: return "nsp2";
        case Method::Nsp2B1Only: return "nsp2_b1_only";
        case Method::Nsp2B2Only: return "nsp2_b2_only";
        case Method::Nsp2NoLnLoss: return "nsp2_no_lnloss";
        case Method::Nsp2B1LnLoss: return "nsp2_b1_lnloss";
        case Method::Nsp2B2LnLoss: return "nsp2_b2_lnloss";
        case Method::Pgp: return "pgp";
    }
    return "unknown";
}

bool parse_method(const std::string& name, Method* out) {
    for (Method m : {Method::Seq, Method::Nsp2, Method::Nsp2B1Only,
                     Method::Nsp2B2Only, Method::Nsp2NoLnLoss,
                     Method::Nsp2B1LnLoss, Method::Nsp2B2LnLoss, Method::Pgp}) {
        if (method_name(m) == name) {
            *out = m;
            return true;
        }
    }
    return false;
}

bool method_uses_b1(Method m) {
    return m == Method::Nsp2 || m == Method::Nsp2B1Only ||
           m == Method::Nsp2NoLnLoss || m == Method::Nsp2B1LnLoss;
}

bool method_uses_b2(Method m) {
    return m == Method::Nsp2 || m == Method::Nsp2B2Only ||
           m == Method::Nsp2NoLnLoss || m == Method::Nsp2B2LnLoss;
}

bool method_uses_lnloss(Method m) {
    return m == Method::Nsp2 || m == Method::Nsp2B1LnLoss ||
           m == Method::Nsp2B2LnLoss;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

Metrics final_metrics(const std::vector<std::vector<double>>& acc) {
    const int t = static_cast<int>(acc.size());
    require(t >= 1, "final_metrics: empty accuracy matrix");
    for (int j = 0; j < t; ++j) {
        require(static_cast<int>(acc[j].size()) == j + 1,
                "final_metrics: accuracy matrix is not lower-triangular "
                "complete");
    }
    Metrics m;
    m.accuracy =
        std::accumulate(acc[t - 1].begin(), acc[t - 1].end(), 0.0) / t;
    if (t > 1) {
        double total = 0.0;
        for (int i = 0; i < t - 1; ++i) {
            double best = -std::numeric_limits<double>::infinity();
            for (int j = i; j < t - 1; ++j) best = std::max(best, acc[j][i]);
            total += best - acc[t - 1][i];
        }
        m.forgetting = total / (t - 1);
        m.forgetting_defined = true;
    }
    return m;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

Trainer::Trainer(BackboneModel model, MethodConfig config, std::uint64_t seed)
    : model_(std::move(model)), config_(config), seed_(seed) {
    const int dim = model_.dim();
    const int m = model_.num_prompts();
    proj_.resize(model_.layers.size());
    for (auto& st : proj_) {
        st.c1 = Matrix::Zero(dim, dim);
        st.c2 = Matrix::Zero(m, m);
        st.c_pgp = Matrix::Zero(dim, dim);
        st.b1 = Matrix::Identity(dim, dim);
        st.b2 = Matrix::Identity(m, m);
        st.b_pgp = Matrix::Identity(dim, dim);
    }
    adam_m_.assign(model_.layers.size(), Matrix::Zero(m, dim));
    adam_v_.assign(model_.layers.size(), Matrix::Zero(m, dim));
}

void Trainer::train_task(const TaskStream& stream, int task_index) {
    require(static_cast<int>(model_.task_heads.size()) == task_index,
            "train_task: tasks must be trained strictly in order");
    const Task& task = stream.tasks[task_index];
    const int classes = static_cast<int>(task.classes.size());
    const int dim = model_.dim();
    const auto num_layers = model_.layers.size();

    auto head_rng =
        make_rng(seed_, "head/task" + std::to_string(task_index));
    std::normal_distribution<double> gauss(0.0, 0.01);
    ClassifierHead head;
    head.w = Matrix(dim, classes);
    for (int i = 0; i < dim; ++i)
        for (int j = 0; j < classes; ++j) head.w(i, j) = gauss(head_rng);
    head.b = Vector::Zero(classes);
    model_.task_heads.push_back(std::move(head));

    adam_mw_ = Matrix::Zero(dim, classes);
    adam_vw_ = Matrix::Zero(dim, classes);
    adam_mb_ = Vector::Zero(classes);
    adam_vb_ = Vector::Zero(classes);
    adam_step_ = 0;
    for (std::size_t l = 0; l < num_layers; ++l) {
        adam_m_[l].setZero();
        adam_v_[l].setZero();
    }

    // Pre-tokenize with local class indices: training optimizes each task
    // head against its own softmax so logit levels stay comparable across
    // heads; concatenation happens only at evaluation.
    std::vector<std::pair<Matrix, int>> data;
    data.reserve(task.train.size());
    for (const auto& sample : task.train) {
        int local = static_cast<int>(
            std::find(task.classes.begin(), task.classes.end(), sample.label) -
            task.classes.begin());
        data.emplace_back(model_.tokenize(sample.image), local);
    }

    const bool ln_on = method_uses_lnloss(config_.method) && task_index > 0;
    const bool pgp = config_.method == Method::Pgp;
    std::vector<double> max_r1(num_layers, 0.0), max_r2(num_layers, 0.0);

    std::vector<int> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < config_.epochs; ++epoch) {
        auto shuffle_rng =
            make_rng(seed_, "shuffle/task" + std::to_string(task_index) +
                                "/epoch" + std::to_string(epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        for (std::size_t start = 0; start < order.size();
             start += config_.batch_size) {
            const auto stop =
                std::min(order.size(), start + config_.batch_size);
            std::vector<std::pair<Matrix, int>> batch;
            batch.reserve(stop - start);
            for (std::size_t i = start; i < stop; ++i)
                batch.push_back(data[order[i]]);

            PromptGradients grads =
                classification_gradients(model_, batch, config_.tau,
                                         /*local_softmax=*/true);
            if (ln_on) {
                for (std::size_t l = 0; l < num_layers; ++l) {
                    if (!proj_[l].has_target) continue;
                    DriftLoss drift =
                        ln_drift_loss(model_.prompts[l], model_.ln_eps,
                                      proj_[l].prompt_target);
                    grads.loss += config_.lnloss_coeff * drift.value;
                    grads.prompts[l] += config_.lnloss_coeff * drift.grad;
                }
            }
            if (!std::isfinite(grads.loss)) {
                throw std::runtime_error(
                    "train_task: training diverged (non-finite loss) at task " +
                    std::to_string(task_index + 1));
            }

            ++adam_step_;
            ClassifierHead& cur = model_.task_heads.back();
            if (config_.use_adam) {
                const double b1 = config_.adam_beta1, b2 = config_.adam_beta2;
                const double c1 = 1.0 - std::pow(b1, adam_step_);
                const double c2 = 1.0 - std::pow(b2, adam_step_);
                adam_mw_ = b1 * adam_mw_ + (1 - b1) * grads.head_w;
                adam_vw_ = b2 * adam_vw_.array() +
                           (1 - b2) * grads.head_w.array().square();
                adam_mb_ = b1 * adam_mb_ + (1 - b1) * grads.head_b;
                adam_vb_ = b2 * adam_vb_.array() +
                           (1 - b2) * grads.head_b.array().square();
                grads.head_w = (adam_mw_.array() / c1) /
                               ((adam_vw_.array() / c2).sqrt() + config_.adam_eps);
                grads.head_b = ((adam_mb_.array() / c1) /
                                ((adam_vb_.array() / c2).sqrt() + config_.adam_eps))
                                   .matrix();
            }
            // Decay on the head weights prunes components outside the task's
            // discriminative directions; those components are what makes a
            // head respond unpredictably to other tasks' embeddings at the
            // concatenated-argmax evaluation.
            cur.w -= config_.lr * (grads.head_w + config_.head_decay * cur.w);
            cur.b -= config_.lr * grads.head_b;

            for (std::size_t l = 0; l < num_layers; ++l) {
                Matrix p_g = grads.prompts[l];
                if (config_.use_adam) {
                    const double b1 = config_.adam_beta1,
                                 b2 = config_.adam_beta2;
                    const double c1 = 1.0 - std::pow(b1, adam_step_);
                    const double c2 = 1.0 - std::pow(b2, adam_step_);
                    adam_m_[l] = b1 * adam_m_[l] + (1 - b1) * p_g;
                    adam_v_[l] = b2 * adam_v_[l].array() +
                                 (1 - b2) * p_g.array().square();
                    p_g = (adam_m_[l].array() / c1) /
                          ((adam_v_[l].array() / c2).sqrt() + config_.adam_eps);
                }

                Matrix delta;
                if (task_index == 0) {
                    delta = p_g;
                } else if (pgp) {
                    delta = p_g * proj_[l].b_pgp;
                } else {
                    delta = p_g;
                    if (method_uses_b1(config_.method)) delta = delta * proj_[l].b1;
                    if (method_uses_b2(config_.method)) delta = proj_[l].b2 * delta;
                }

                if (config_.audit_residuals && task_index > 0) {
                    const double dp_norm = delta.norm();
                    const double o1_norm =
                        std::sqrt(std::max(0.0, proj_[l].c1.trace()));
                    const double o2_norm =
                        std::sqrt(std::max(0.0, proj_[l].c2.trace()));
                    // ||Omega dP^T||_F^2 = tr(dP C dP^T) since C = Omega^T Omega.
                    const double r1 = std::sqrt(std::max(
                        0.0, (delta * proj_[l].c1 * delta.transpose()).trace()));
                    const double r2 = std::sqrt(std::max(
                        0.0,
                        (delta.transpose() * proj_[l].c2 * delta).trace()));
                    max_r1[l] = std::max(
                        max_r1[l], r1 / ((1 + o1_norm) * (1 + dp_norm)));
                    max_r2[l] = std::max(
                        max_r2[l], r2 / ((1 + o2_norm) * (1 + dp_norm)));
                }

                model_.prompts[l] -= config_.lr * delta;
            }
        }
    }

    if (config_.audit_residuals && task_index > 0) {
        for (std::size_t l = 0; l < num_layers; ++l) {
            residuals_.push_back({task_index + 1, static_cast<int>(l) + 1,
                                  max_r1[l], max_r2[l]});
        }
    }
}

void Trainer::end_of_task_update(const Task& task) {
    const int task_number = static_cast<int>(model_.task_heads.size());
    std::vector<Matrix> token_batch;
    const std::size_t count =
        config_.j_subsample > 0
            ? std::min<std::size_t>(config_.j_subsample, task.train.size())
            : task.train.size();
    token_batch.reserve(count);
    for (std::size_t i = 0; i < count; ++i)
        token_batch.push_back(model_.tokenize(task.train[i].image));

    auto inputs = collect_projection_inputs(model_, token_batch);
    for (std::size_t l = 0; l < proj_.size(); ++l) {
        LayerProjState& st = proj_[l];
        st.c1 = accumulate_covariance(st.c1, inputs[l].j1);
        st.c2 = accumulate_covariance(st.c2, inputs[l].j2);
        st.c_pgp = accumulate_covariance(st.c_pgp, inputs[l].x_in);

        ProjectorBuild p1 = build_projector(st.c1, config_.nullity_mode,
                                            config_.gamma, config_.eta1);
        ProjectorBuild p2 = build_projector(st.c2, config_.nullity_mode,
                                            config_.gamma, config_.eta2);
        st.b1 = std::move(p1.b);
        st.b2 = std::move(p2.b);
        st.r1 = p1.nullity;
        st.r2 = p2.nullity;
        spectra_.push_back({task_number, static_cast<int>(l) + 1, '1',
                            p1.spectrum.singular_values, p1.nullity});
        spectra_.push_back({task_number, static_cast<int>(l) + 1, '2',
                            p2.spectrum.singular_values, p2.nullity});
        if (config_.method == Method::Pgp) {
            ProjectorBuild pp = build_projector(st.c_pgp, config_.nullity_mode,
                                                config_.gamma, config_.eta1);
            st.b_pgp = std::move(pp.b);
            st.r_pgp = pp.nullity;
        }

        st.prompt_target = prompt_row_stats(model_.prompts[l], model_.ln_eps);
        st.has_target = true;
    }
}

std::vector<double> Trainer::evaluate(const TaskStream& stream,
                                      int upto) const {
    const int cpt = stream.classes_per_task;
    std::vector<double> row;
    for (int i = 0; i <= upto; ++i) {
        const Task& task = stream.tasks[i];
        int correct = 0;
        for (const auto& sample : task.test) {
            Vector logits = model_forward(
                model_, model_.tokenize(sample.image), nullptr, nullptr);
            Eigen::Index best;
            logits.maxCoeff(&best);
            const int pred_task = static_cast<int>(best) / cpt;
            const int pred_class =
                stream.tasks[pred_task].classes[best % cpt];
            if (pred_class == sample.label) ++correct;
        }
        row.push_back(static_cast<double>(correct) /
                      static_cast<double>(task.test.size()));
    }
    return row;
}

double Trainer::task_train_loss(const Task& task, int head_index) const {
    require(head_index >= 0 &&
                head_index < static_cast<int>(model_.task_heads.size()),
            "task_train_loss: head not available");
    Eigen::Index offset = 0;
    for (int k = 0; k < head_index; ++k)
        offset += model_.task_heads[k].b.size();
    const Eigen::Index classes = model_.task_heads[head_index].b.size();

    double total = 0.0;
    for (const auto& sample : task.train) {
        Vector logits = model_forward(model_, model_.tokenize(sample.image),
                                      nullptr, nullptr);
        Vector scaled = config_.tau * logits.segment(offset, classes);
        int local = static_cast<int>(
            std::find(task.classes.begin(), task.classes.end(), sample.label) -
            task.classes.begin());
        double mx = scaled.maxCoeff();
        double lse = mx + std::log((scaled.array() - mx).exp().sum());
        total += lse - scaled[local];
    }
    return total / static_cast<double>(task.train.size());
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

namespace {

void pretrain_backbone(BackboneModel& model, const ExperimentConfig& config,
                       std::uint64_t seed) {
    const int pixels = config.stream.image_size * config.stream.image_size;
    const int samples_per_class = 50;
    std::vector<Sample> data;
    for (int c = 0; c < config.pretrain_classes; ++c) {
        auto rng =
            make_rng(seed, "pretrain/class" + std::to_string(c));
        Vector prototype =
            gaussian_image(pixels, config.stream.prototype_scale, rng);
        auto samples = draw_samples(prototype, c, samples_per_class,
                                    config.stream.noise_scale, rng);
        data.insert(data.end(), samples.begin(), samples.end());
    }

    auto head_rng = make_rng(seed, "pretrain/head");
    std::normal_distribution<double> gauss(0.0, 0.01);
    ClassifierHead head;
    head.w = Matrix(model.dim(), config.pretrain_classes);
    for (Eigen::Index i = 0; i < head.w.size(); ++i)
        head.w.data()[i] = gauss(head_rng);
    head.b = Vector::Zero(config.pretrain_classes);
    model.task_heads.push_back(std::move(head));

    const int num_patches = model.num_patches();
    std::vector<int> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < config.pretrain_epochs; ++epoch) {
        auto shuffle_rng =
            make_rng(seed, "pretrain/shuffle/" + std::to_string(epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        for (std::size_t start = 0; start < order.size(); start += 16) {
            const auto stop = std::min(order.size(), start + 16);
            std::vector<std::pair<Matrix, int>> batch;
            std::vector<const Vector*> images;
            for (std::size_t i = start; i < stop; ++i) {
                const Sample& s = data[order[i]];
                batch.emplace_back(model.tokenize(s.image), s.label);
                images.push_back(&s.image);
            }
            std::vector<Matrix> d_tokens;
            PromptGradients grads =
                classification_gradients(model, batch, 10.0,
                                         /*local_softmax=*/true, &d_tokens);
            ClassifierHead& cur = model.task_heads.back();
            cur.w -= config.pretrain_lr * grads.head_w;
            cur.b -= config.pretrain_lr * grads.head_b;
            for (std::size_t i = 0; i < d_tokens.size(); ++i) {
                Matrix patches = patchify(*images[i], model.image_size,
                                          model.patch_size);
                model.patch_embedding -=
                    config.pretrain_lr * patches.transpose() *
                    d_tokens[i].bottomRows(num_patches);
                model.class_token -=
                    config.pretrain_lr * d_tokens[i].row(0).transpose();
            }
        }
    }

    // The pretext head is discarded and the prompts re-drawn; only the
    // embedding layer keeps what pretraining learned.
    model.task_heads.clear();
    auto prompt_rng = make_rng(seed, "model/prompts_reset");
    std::normal_distribution<double> pdist(0.0, 0.1);
    for (auto& p : model.prompts)
        for (Eigen::Index i = 0; i < p.size(); ++i)
            p.data()[i] = pdist(prompt_rng);
}

}  // namespace

BackboneModel make_backbone(const ExperimentConfig& config,
                            std::uint64_t seed) {
    auto rng = make_rng(seed, "model/init");
    BackboneModel model = make_model(config.model, rng);
    if (config.pretrain_epochs > 0) {
        pretrain_backbone(model, config, seed);
    }
    return model;
}

RunResult run_single(const ExperimentConfig& config,
                     const MethodConfig& method, std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    SyntheticTaskSpec sspec = config.stream;
    sspec.seed = seed;
    TaskStream stream = generate_task_stream(sspec);
    Trainer trainer(make_backbone(config, seed), method, seed);

    RunResult result;
    result.method = method_name(method.method);
    result.seed = seed;
    const int tracked = std::min(2, sspec.num_tasks);
    result.loss_drift.resize(tracked);
    for (int j = 0; j < sspec.num_tasks; ++j) {
        trainer.train_task(stream, j);
        result.acc.push_back(trainer.evaluate(stream, j));
        for (int i = 0; i < tracked; ++i) {
            if (i <= j)
                result.loss_drift[i].push_back(
                    trainer.task_train_loss(stream.tasks[i], i));
        }
        trainer.end_of_task_update(stream.tasks[j]);
    }
    result.metrics = final_metrics(result.acc);
    result.residuals = trainer.residuals();
    result.spectra = trainer.spectra();
    result.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    return result;
}

ExperimentReport run_experiment(const ExperimentConfig& config) {
    require(!config.methods.empty() && !config.seeds.empty(),
            "run_experiment: need at least one method and one seed");
    ExperimentReport report;
    for (const auto& method : config.methods) {
        std::vector<double> accs, forgets;
        for (auto seed : config.seeds) {
            report.runs.push_back(run_single(config, method, seed));
            accs.push_back(report.runs.back().metrics.accuracy);
            if (report.runs.back().metrics.forgetting_defined)
                forgets.push_back(report.runs.back().metrics.forgetting);
        }
        auto mean_std = [](const std::vector<double>& v) {
            if (v.empty()) return std::pair<double, double>{0.0, 0.0};
            double mean =
                std::accumulate(v.begin(), v.end(), 0.0) / v.size();
            double var = 0.0;
            for (double x : v) var += (x - mean) * (x - mean);
            if (v.size() > 1) var /= (v.size() - 1);
            return std::pair<double, double>{mean, std::sqrt(var)};
        };
        MethodSummary summary;
        summary.method = method_name(method.method);
        std::tie(summary.acc_mean, summary.acc_std) = mean_std(accs);
        std::tie(summary.forget_mean, summary.forget_std) = mean_std(forgets);
        report.summaries.push_back(summary);
    }
    return report;
}

}  // namespace nsp
