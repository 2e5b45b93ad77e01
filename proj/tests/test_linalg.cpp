#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "nsp/linalg.hpp"
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

}  // namespace

TEST_CASE("layer_norm hand cases") {
    Vector ones2 = Vector::Ones(2), zeros2 = Vector::Zero(2);

    Matrix row(1, 2);
    row << 1, 3;
    auto [out, stats] = layer_norm(row, ones2, zeros2, 0.0);
    CHECK(out(0, 0) == doctest::Approx(-1.0).epsilon(1e-14));
    CHECK(out(0, 1) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(stats.mean[0] == doctest::Approx(2.0));
    CHECK(stats.std[0] == doctest::Approx(1.0));

    Matrix flat(1, 2);
    flat << 2, 2;
    auto [out2, stats2] = layer_norm(flat, ones2, zeros2, 1e-5);
    CHECK(std::abs(out2(0, 0)) <= 1e-12);
    CHECK(std::abs(out2(0, 1)) <= 1e-12);

    Matrix spike(1, 4);
    spike << 0, 0, 0, 4;
    auto [out3, stats3] =
        layer_norm(spike, Vector::Ones(4), Vector::Zero(4), 0.0);
    const double lo = -1.0 / std::sqrt(3.0), hi = 3.0 / std::sqrt(3.0);
    CHECK(out3(0, 0) == doctest::Approx(lo).epsilon(1e-14));
    CHECK(out3(0, 1) == doctest::Approx(lo).epsilon(1e-14));
    CHECK(out3(0, 2) == doctest::Approx(lo).epsilon(1e-14));
    CHECK(out3(0, 3) == doctest::Approx(hi).epsilon(1e-14));
    CHECK(stats3.mean[0] == doctest::Approx(1.0));
    CHECK(stats3.std[0] == doctest::Approx(std::sqrt(3.0)));
}

TEST_CASE("layer_norm affine and shape contract") {
    Matrix row(1, 2);
    row << 1, 3;
    Vector alpha(2), beta(2);
    alpha << 2, 3;
    beta << 10, 20;
    auto [out, stats] = layer_norm(row, alpha, beta, 0.0);
    CHECK(out(0, 0) == doctest::Approx(-2.0 + 10.0));
    CHECK(out(0, 1) == doctest::Approx(3.0 + 20.0));

    CHECK_THROWS_AS(layer_norm(row, Vector::Ones(3), Vector::Zero(3), 0.0),
                    ContractViolation);
}

TEST_CASE("layer_norm standardizes rows") {
    auto rng = make_rng(7, "test/layer_norm");
    for (int trial = 0; trial < 50; ++trial) {
        Matrix rows = random_matrix(4, 16, rng);
        auto [out, stats] =
            layer_norm(rows, Vector::Ones(16), Vector::Zero(16), 0.0);
        for (int i = 0; i < 4; ++i) {
            CHECK(std::abs(out.row(i).mean()) <= 1e-12);
            double var = out.row(i).array().square().mean() -
                         out.row(i).mean() * out.row(i).mean();
            CHECK(std::abs(std::sqrt(var) - 1.0) <= 1e-10);
        }
    }
}

TEST_CASE("softmax_rows hand cases") {
    Matrix uniform(1, 2);
    uniform << 0, 0;
    Matrix u = softmax_rows(uniform);
    CHECK(u(0, 0) == doctest::Approx(0.5).epsilon(1e-14));

    Matrix two(1, 2);
    two << std::log(2.0), 0.0;
    Matrix s = softmax_rows(two);
    CHECK(s(0, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
    CHECK(s(0, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-14));

    Matrix sat(1, 2);
    sat << 1000, 0;
    Matrix t = softmax_rows(sat);
    CHECK(std::abs(t(0, 0) - 1.0) <= 1e-12);
    CHECK(std::abs(t(0, 1)) <= 1e-12);
}

TEST_CASE("softmax_rows rows sum to one over random inputs") {
    auto rng = make_rng(11, "test/softmax");
    std::uniform_real_distribution<double> scale(0.1, 50.0);
    for (int trial = 0; trial < 1000; ++trial) {
        Matrix logits = random_matrix(3, 7, rng, scale(rng));
        Matrix s = softmax_rows(logits);
        for (int i = 0; i < s.rows(); ++i) {
            CHECK(std::abs(s.row(i).sum() - 1.0) <= 1e-12);
            CHECK(s.row(i).minCoeff() >= 0.0);
        }
    }
}

TEST_CASE("eig_sym_psd hand cases") {
    Matrix d = Matrix::Zero(2, 2);
    d(0, 0) = 4.0;
    Spectrum sd = eig_sym_psd(d);
    CHECK(sd.singular_values[0] == doctest::Approx(4.0).epsilon(1e-14));
    CHECK(sd.singular_values[1] == doctest::Approx(0.0));
    CHECK(std::abs(std::abs(sd.right_vectors(0, 0)) - 1.0) <= 1e-12);
    CHECK(std::abs(std::abs(sd.right_vectors(1, 1)) - 1.0) <= 1e-12);

    Matrix c(2, 2);
    c << 2, 1, 1, 2;
    Spectrum s = eig_sym_psd(c);
    CHECK(s.singular_values[0] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(s.singular_values[1] == doctest::Approx(1.0).epsilon(1e-12));
    const double r = 1.0 / std::sqrt(2.0);
    CHECK(std::abs(std::abs(s.right_vectors(0, 0)) - r) <= 1e-12);
    CHECK(std::abs(std::abs(s.right_vectors(1, 0)) - r) <= 1e-12);
    CHECK(std::abs(s.right_vectors.col(0).dot(s.right_vectors.col(1))) <=
          1e-12);

    Spectrum z = eig_sym_psd(Matrix::Zero(3, 3));
    CHECK(z.singular_values.maxCoeff() == 0.0);
    Matrix recon = z.right_vectors *
                   z.singular_values.asDiagonal() *
                   z.right_vectors.transpose();
    CHECK(frobenius_norm(recon) <= 1e-12);
}

TEST_CASE("eig_sym_psd reconstruction and orthonormality") {
    auto rng = make_rng(3, "test/eig");
    for (int trial = 0; trial < 50; ++trial) {
        Matrix j = random_matrix(6, 9, rng);
        Matrix c = j.transpose() * j;
        Spectrum s = eig_sym_psd(c);
        for (int i = 0; i + 1 < s.singular_values.size(); ++i)
            CHECK(s.singular_values[i] >= s.singular_values[i + 1]);
        CHECK(s.singular_values.minCoeff() >= 0.0);
        Matrix recon = s.right_vectors *
                       s.singular_values.asDiagonal() *
                       s.right_vectors.transpose();
        CHECK(frobenius_norm(recon - c) <=
              1e-8 * std::max(1.0, frobenius_norm(c)));
        Matrix gram =
            s.right_vectors.transpose() * s.right_vectors -
            Matrix::Identity(c.rows(), c.cols());
        CHECK(frobenius_norm(gram) <= 1e-10);
    }
}

TEST_CASE("eig_sym_psd rejects bad input") {
    Matrix asym(2, 2);
    asym << 1, 2, 0, 1;
    CHECK_THROWS_AS(eig_sym_psd(asym), ContractViolation);
    CHECK_THROWS_AS(eig_sym_psd(Matrix::Ones(2, 3)), ContractViolation);
}

TEST_CASE("frobenius_norm") {
    Matrix m(1, 2);
    m << 3, 4;
    CHECK(frobenius_norm(m) == doctest::Approx(5.0).epsilon(1e-15));
    CHECK(frobenius_norm(Matrix::Identity(4, 4)) ==
          doctest::Approx(2.0).epsilon(1e-15));
    CHECK(frobenius_norm(Matrix::Zero(3, 5)) == 0.0);
}

TEST_CASE("matrix algebra sanity") {
    auto rng = make_rng(5, "test/matmul");
    Matrix a = random_matrix(3, 4, rng), b = random_matrix(4, 2, rng);
    Matrix m = random_matrix(4, 4, rng);
    CHECK(frobenius_norm(Matrix::Identity(4, 4) * m - m) == 0.0);
    CHECK(frobenius_norm((a * b).transpose() -
                         b.transpose() * a.transpose()) <= 1e-14);
    Matrix p(2, 2), v(2, 1);
    p << 1, 2, 3, 4;
    v << 1, 1;
    Matrix r = p * v;
    CHECK(r(0, 0) == 3.0);
    CHECK(r(1, 0) == 7.0);
}

TEST_CASE("operations are pure") {
    auto rng = make_rng(9, "test/purity");
    Matrix rows = random_matrix(5, 8, rng);
    Vector alpha = Vector::Ones(8), beta = Vector::Zero(8);
    auto a = layer_norm(rows, alpha, beta, 1e-6);
    auto b = layer_norm(rows, alpha, beta, 1e-6);
    CHECK((a.first.array() == b.first.array()).all());
    Matrix s1 = softmax_rows(rows), s2 = softmax_rows(rows);
    CHECK((s1.array() == s2.array()).all());
}

TEST_CASE("rng streams are tag-independent and reproducible") {
    auto a1 = make_rng(42, "alpha");
    auto a2 = make_rng(42, "alpha");
    auto b = make_rng(42, "beta");
    CHECK(a1() == a2());
    CHECK(make_rng(42, "alpha")() != b());
    CHECK(make_rng(1, "alpha")() != make_rng(2, "alpha")());
}
