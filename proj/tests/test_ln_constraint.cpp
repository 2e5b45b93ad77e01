#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "nsp/ln_constraint.hpp"
#include "nsp/rng.hpp"

using namespace nsp;

namespace {

Matrix random_matrix(int rows, int cols, std::mt19937_64& rng, double s = 1.0) {
    std::normal_distribution<double> gauss(0.0, s);
    Matrix m(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) m(i, j) = gauss(rng);
    return m;
}

Matrix permute_within_rows(const Matrix& p, std::mt19937_64& rng) {
    Matrix out = p;
    std::vector<int> idx(p.cols());
    for (int i = 0; i < p.rows(); ++i) {
        std::iota(idx.begin(), idx.end(), 0);
        std::shuffle(idx.begin(), idx.end(), rng);
        for (int j = 0; j < p.cols(); ++j) out(i, j) = p(i, idx[j]);
    }
    return out;
}

}  // namespace

TEST_CASE("prompt_row_stats hand cases") {
    Matrix p(1, 2);
    p << 1, 3;
    RowStats st = prompt_row_stats(p, 0.0);
    CHECK(st.mean[0] == doctest::Approx(2.0));
    CHECK(st.std[0] == doctest::Approx(1.0));

    Matrix flat = Matrix::Constant(1, 4, 7.0);
    RowStats fst = prompt_row_stats(flat, 1e-4);
    CHECK(fst.mean[0] == doctest::Approx(7.0));
    CHECK(fst.std[0] == doctest::Approx(1e-2));

    Matrix spike(1, 4);
    spike << 0, 0, 0, 4;
    RowStats sst = prompt_row_stats(spike, 0.0);
    CHECK(sst.mean[0] == doctest::Approx(1.0));
    CHECK(sst.std[0] == doctest::Approx(std::sqrt(3.0)));
}

TEST_CASE("ln_drift_loss zero at the target") {
    auto rng = make_rng(51, "test/drift_zero");
    Matrix p = random_matrix(4, 8, rng);
    RowStats target = prompt_row_stats(p, 1e-6);
    DriftLoss dl = ln_drift_loss(p, 1e-6, target);
    CHECK(dl.value == 0.0);
    CHECK(dl.grad.norm() == 0.0);
}

TEST_CASE("ln_drift_loss hand value") {
    // One prompt row [0, 2]: mu = 1, sigma = 1 (eps = 0). Target offset by
    // 0.5 in mean and 0.25 in std gives L1 loss 0.75.
    Matrix p(1, 2);
    p << 0, 2;
    RowStats target;
    target.mean = Vector::Constant(1, 1.5);
    target.std = Vector::Constant(1, 0.75);
    DriftLoss dl = ln_drift_loss(p, 0.0, target);
    CHECK(dl.value == doctest::Approx(0.75).epsilon(1e-14));
}

TEST_CASE("ln_drift_loss is symmetric in the deviation sign") {
    Matrix p(1, 3);
    p << 1, 2, 3;
    RowStats st = prompt_row_stats(p, 0.0);
    for (double d : {0.125, 0.5}) {
        RowStats up{st.mean.array() + d, st.std.array() + d};
        RowStats down{st.mean.array() - d, st.std.array() - d};
        CHECK(ln_drift_loss(p, 0.0, up).value ==
              doctest::Approx(ln_drift_loss(p, 0.0, down).value)
                  .epsilon(1e-14));
    }
}

TEST_CASE("ln_drift_loss gradient matches finite differences off the kinks") {
    auto rng = make_rng(52, "test/drift_fd");
    const double eps = 1e-6, step = 1e-6;
    for (int trial = 0; trial < 5; ++trial) {
        Matrix p = random_matrix(3, 6, rng);
        RowStats target = prompt_row_stats(p, eps);
        // Push the stats well away from the L1 kinks.
        target.mean.array() += 0.3;
        target.std.array() -= 0.2;
        DriftLoss dl = ln_drift_loss(p, eps, target);
        for (int i = 0; i < p.rows(); ++i) {
            for (int j = 0; j < p.cols(); ++j) {
                const double saved = p(i, j);
                p(i, j) = saved + step;
                const double hi = ln_drift_loss(p, eps, target).value;
                p(i, j) = saved - step;
                const double lo = ln_drift_loss(p, eps, target).value;
                p(i, j) = saved;
                const double fd = (hi - lo) / (2 * step);
                CHECK(std::abs(dl.grad(i, j) - fd) <=
                      1e-4 * std::max(std::abs(fd), 1e-6));
            }
        }
    }
}

TEST_CASE("ln_shift_check") {
    auto rng = make_rng(53, "test/shift");
    Matrix p = random_matrix(4, 8, rng);
    Vector alpha = Vector::Ones(8) + 0.1 * random_matrix(8, 1, rng).col(0);

    CHECK(ln_shift_check(p, Matrix::Zero(4, 8), alpha, 1e-6) == 0.0);

    for (int trial = 0; trial < 20; ++trial) {
        Matrix q = permute_within_rows(p, rng);
        CHECK(ln_shift_check(p, q - p, alpha, 1e-6) <= 1e-10);
    }

    Matrix drifty = 1e-3 * random_matrix(4, 8, rng);
    CHECK_THROWS_AS(ln_shift_check(p, drifty, alpha, 1e-6),
                    ContractViolation);
}

TEST_CASE("end-of-task stat capture is bit-exact") {
    auto rng = make_rng(54, "test/capture");
    Matrix p = random_matrix(4, 8, rng);
    RowStats a = prompt_row_stats(p, 1e-6);
    RowStats b = prompt_row_stats(p, 1e-6);
    CHECK((a.mean.array() == b.mean.array()).all());
    CHECK((a.std.array() == b.std.array()).all());
}
