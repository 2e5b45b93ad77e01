#include "nsp/check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "nsp/harness.hpp"
#include "nsp/ln_constraint.hpp"
#include "nsp/projector.hpp"
#include "nsp/rng.hpp"
#include "nsp/vit.hpp"

namespace nsp {

namespace {

Matrix random_matrix(int rows, int cols, std::mt19937_64& rng,
                     double stddev = 1.0) {
    std::normal_distribution<double> gauss(0.0, stddev);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = gauss(rng);
    return m;
}

PropertyResult softmax_row_sums() {
    PropertyResult res{"softmax_row_sums", false, 0.0, 1e-12};
    auto rng = make_rng(7, "check/softmax");
    std::uniform_int_distribution<int> dim(1, 8);
    for (int trial = 0; trial < 1000; ++trial) {
        Matrix s = softmax_rows(
            random_matrix(dim(rng), dim(rng), rng, 10.0));
        double err = (s.rowwise().sum().array() - 1.0).abs().maxCoeff();
        res.measured = std::max(res.measured, err);
        if (s.minCoeff() < 0.0) res.measured = 1.0;
    }
    res.pass = res.measured <= res.threshold;
    return res;
}

PropertyResult eig_reconstruction() {
    PropertyResult res{"eig_reconstruction", false, 0.0, 1e-8};
    auto rng = make_rng(7, "check/eig");
    for (int trial = 0; trial < 100; ++trial) {
        Matrix j = random_matrix(6, 5, rng);
        Matrix c = j.transpose() * j;
        Spectrum s = eig_sym_psd(c);
        Matrix recon = s.right_vectors *
                       s.singular_values.asDiagonal() *
                       s.right_vectors.transpose();
        double err = (c - recon).norm() / std::max(1.0, c.norm());
        double ortho = (s.right_vectors.transpose() * s.right_vectors -
                        Matrix::Identity(5, 5))
                           .cwiseAbs()
                           .maxCoeff();
        // Orthonormality is held to 1e-10, reconstruction to 1e-8.
        res.measured = std::max({res.measured, err, ortho * 1e2});
    }
    res.pass = res.measured <= res.threshold;
    return res;
}

PropertyResult layer_norm_standardization() {
    PropertyResult res{"layer_norm_standardization", false, 0.0, 1e-10};
    auto rng = make_rng(7, "check/ln");
    for (int trial = 0; trial < 200; ++trial) {
        Matrix x = random_matrix(4, 16, rng);
        Vector alpha = Vector::Ones(16), beta = Vector::Zero(16);
        auto [out, stats] = layer_norm(x, alpha, beta, 0.0);
        double mean_err = out.rowwise().mean().cwiseAbs().maxCoeff();
        Vector var = out.array().square().rowwise().mean();
        double std_err = (var.array().sqrt() - 1.0).abs().maxCoeff();
        res.measured = std::max({res.measured, mean_err, std_err});
    }
    res.pass = res.measured <= res.threshold;
    return res;
}

PropertyResult projector_null_residual(bool inject_fault) {
    PropertyResult res{"projector_null_residual", false, 0.0, 1e-8};
    auto rng = make_rng(7, "check/projector");
    for (int trial = 0; trial < 50; ++trial) {
        // Rank-deficient covariance with a genuine null space.
        Matrix j = random_matrix(5, 12, rng);
        Matrix c = j.transpose() * j;
        ProjectorBuild built =
            build_projector(c, NullityMode::ExactZero, 10.0, 1.0);
        Matrix b = built.b;
        if (inject_fault) {
            // Push the projector off the null space.
            b += 0.05 * Matrix::Identity(12, 12);
        }
        Matrix g = random_matrix(4, 12, rng);
        Matrix dp = g * b;  // B1-style right application
        double r = (j * dp.transpose()).norm() /
                   ((1.0 + j.norm()) * (1.0 + dp.norm()));
        res.measured = std::max(res.measured, r);
    }
    res.pass = res.measured <= res.threshold;
    return res;
}

PropertyResult eta_monotone_residual() {
    PropertyResult res{"eta_monotone_residual", false, 0.0, 1e-12};
    auto rng = make_rng(7, "check/eta");
    for (int trial = 0; trial < 20; ++trial) {
        Matrix j = random_matrix(5, 10, rng);
        Matrix c = j.transpose() * j;
        Matrix g = random_matrix(4, 10, rng);
        double previous = std::numeric_limits<double>::infinity();
        for (double eta : {0.0, 0.25, 0.5, 0.75, 1.0}) {
            ProjectorBuild built =
                build_projector(c, NullityMode::ExactZero, 10.0, eta);
            double r = (j * (g * built.b).transpose()).norm();
            res.measured = std::max(res.measured, r - previous);
            previous = r;
        }
    }
    res.pass = res.measured <= res.threshold;
    return res;
}

PropertyResult ln_shift_identity() {
    PropertyResult res{"ln_shift_identity", false, 0.0, 1e-10};
    auto rng = make_rng(7, "check/ln_shift");
    for (int trial = 0; trial < 100; ++trial) {
        Matrix p = random_matrix(4, 16, rng);
        Vector alpha = random_matrix(16, 1, rng, 0.5).col(0).array() + 1.0;
        // Permuting entries within a row preserves its stats exactly.
        Matrix permuted = p;
        for (Eigen::Index r = 0; r < p.rows(); ++r) {
            std::vector<int> idx(p.cols());
            std::iota(idx.begin(), idx.end(), 0);
            std::shuffle(idx.begin(), idx.end(), rng);
            for (Eigen::Index c = 0; c < p.cols(); ++c)
                permuted(r, c) = p(r, idx[c]);
        }
        double residual = ln_shift_check(p, permuted - p, alpha, 1e-6);
        res.measured = std::max(res.measured, residual);
    }
    res.pass = res.measured <= res.threshold;
    return res;
}

PropertyResult ln_bypass_consistency() {
    PropertyResult res{"ln_bypass_consistency", false, 0.0, 1e-8};
    auto rng = make_rng(7, "check/bypass");
    ModelSpec spec;
    spec.image_size = 8;
    spec.patch_size = 4;
    spec.dim = 16;
    spec.heads = 2;
    spec.layers = 1;
    spec.prompts = 8;
    BackboneModel model = make_model(spec, rng);
    const LayerParams& lp = model.layers[0];
    const int n = 3, m = 8, dim = 16, d = lp.head_dim();

    for (int trial = 0; trial < 100; ++trial) {
        Matrix x = random_matrix(n, dim, rng);
        Matrix p = random_matrix(m, dim, rng);
        AttentionTrace trace;
        layer_forward(x, p, lp, 1e-6, /*ln_bypass_prompts=*/true, nullptr,
                      &trace);

        Matrix omega1(lp.heads * n, dim), omega2(lp.heads * n, m);
        for (int h = 0; h < lp.heads; ++h) {
            omega1.middleRows(h * n, n) =
                trace.heads[h].q_x * lp.w_k.middleCols(h * d, d).transpose();
            omega2.middleRows(h * n, n) = trace.heads[h].s_p;
        }
        Matrix b1 = build_projector(omega1.transpose() * omega1,
                                    NullityMode::ExactZero, 10.0, 1.0)
                        .b;
        Matrix b2 = build_projector(omega2.transpose() * omega2,
                                    NullityMode::ExactZero, 10.0, 1.0)
                        .b;
        Matrix dp = project_update(random_matrix(m, dim, rng), b1, b2);
        if (dp.norm() > 0) dp *= 0.5 / dp.norm();

        AttentionTrace after;
        layer_forward(x, p + dp, lp, 1e-6, true, nullptr, &after);
        double rel = (after.f_z - trace.f_z).norm() / trace.f_z.norm();
        res.measured = std::max(res.measured, rel);
    }
    res.pass = res.measured <= res.threshold;
    return res;
}

PropertyResult gradient_finite_difference() {
    PropertyResult res{"gradient_finite_difference", false, 0.0, 1e-4};
    auto rng = make_rng(7, "check/grad");
    ModelSpec spec;
    spec.image_size = 8;
    spec.patch_size = 4;
    spec.dim = 8;
    spec.heads = 2;
    spec.layers = 2;
    spec.prompts = 2;
    BackboneModel model = make_model(spec, rng);
    for (int t = 0; t < 2; ++t) {
        ClassifierHead head;
        head.w = random_matrix(spec.dim, 2, rng, 0.2);
        head.b = random_matrix(2, 1, rng, 0.1).col(0);
        model.task_heads.push_back(head);
    }
    std::vector<std::pair<Matrix, int>> batch;
    std::uniform_int_distribution<int> label(0, 3);
    for (int i = 0; i < 3; ++i) {
        Matrix tokens = model.tokenize(random_matrix(64, 1, rng).col(0));
        batch.emplace_back(tokens, label(rng));
    }
    const double tau = 5.0;
    const double step = 1e-5;
    PromptGradients grads = classification_gradients(model, batch, tau);
    auto loss_at = [&]() {
        return classification_gradients(model, batch, tau).loss;
    };

    auto check_coord = [&](double* slot, double analytic) {
        const double saved = *slot;
        *slot = saved + step;
        double up = loss_at();
        *slot = saved - step;
        double down = loss_at();
        *slot = saved;
        double fd = (up - down) / (2 * step);
        double rel = std::abs(analytic - fd) / std::max(std::abs(fd), 1e-6);
        res.measured = std::max(res.measured, rel);
    };

    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        std::uniform_int_distribution<int> pick(
            0, static_cast<int>(model.prompts[l].size()) - 1);
        for (int k = 0; k < 20; ++k) {
            int idx = pick(rng);
            check_coord(model.prompts[l].data() + idx,
                        grads.prompts[l].data()[idx]);
        }
    }
    ClassifierHead& cur = model.task_heads.back();
    std::uniform_int_distribution<int> pick_w(
        0, static_cast<int>(cur.w.size()) - 1);
    for (int k = 0; k < 10; ++k) {
        int idx = pick_w(rng);
        check_coord(cur.w.data() + idx, grads.head_w.data()[idx]);
    }
    for (int k = 0; k < static_cast<int>(cur.b.size()); ++k) {
        check_coord(cur.b.data() + k, grads.head_b[k]);
    }
    res.pass = res.measured <= res.threshold;
    return res;
}

PropertyResult metric_formulas() {
    PropertyResult res{"metric_formulas", false, 0.0, 1e-12};
    // Hand-checkable two-task case.
    Metrics m = final_metrics({{0.9}, {0.8, 0.7}});
    res.measured =
        std::max(std::abs(m.accuracy - 0.75), std::abs(m.forgetting - 0.1));

    // Brute-force recomputation on random 5x5 matrices.
    auto rng = make_rng(7, "check/metrics");
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<std::vector<double>> acc(5);
        for (int j = 0; j < 5; ++j)
            for (int i = 0; i <= j; ++i) acc[j].push_back(unif(rng));
        Metrics got = final_metrics(acc);
        double exp_acc = 0.0;
        for (int i = 0; i < 5; ++i) exp_acc += acc[4][i];
        exp_acc /= 5.0;
        double exp_forget = 0.0;
        for (int i = 0; i < 4; ++i) {
            double best = acc[i][i];
            for (int j = i; j < 4; ++j) best = std::max(best, acc[j][i]);
            exp_forget += best - acc[4][i];
        }
        exp_forget /= 4.0;
        res.measured = std::max({res.measured,
                                 std::abs(got.accuracy - exp_acc),
                                 std::abs(got.forgetting - exp_forget)});
    }
    res.pass = res.measured <= res.threshold;
    return res;
}

}  // namespace

std::vector<PropertyResult> run_property_suite(bool inject_fault) {
    return {
        softmax_row_sums(),
        eig_reconstruction(),
        layer_norm_standardization(),
        projector_null_residual(inject_fault),
        eta_monotone_residual(),
        ln_shift_identity(),
        ln_bypass_consistency(),
        gradient_finite_difference(),
        metric_formulas(),
    };
}

}  // namespace nsp
