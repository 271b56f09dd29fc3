#include <catch2/catch_amalgamated.hpp>

#include "impflow/linalg.hpp"
#include "impflow/mlp.hpp"

using namespace impflow;

TEST_CASE("lu_logdet identity", "[linalg]") {
  const LogDet ld = lu_logdet(Mat::Identity(3, 3));
  CHECK(ld.sign == 1);
  CHECK(ld.logabsdet == 0.0);
}

TEST_CASE("lu_logdet diagonal", "[linalg]") {
  Mat m = Mat::Zero(2, 2);
  m(0, 0) = m(1, 1) = 1.5;
  const LogDet ld = lu_logdet(m);
  CHECK(ld.sign == 1);
  CHECK_THAT(ld.logabsdet, Catch::Matchers::WithinAbs(2.0 * std::log(1.5), 1e-12));
}

TEST_CASE("lu_logdet negative determinant sign", "[linalg]") {
  Mat m = Mat::Identity(2, 2);
  m(0, 0) = -2.0;
  const LogDet ld = lu_logdet(m);
  CHECK(ld.sign == -1);
  CHECK_THAT(ld.logabsdet, Catch::Matchers::WithinAbs(std::log(2.0), 1e-12));
}

TEST_CASE("lu_logdet singular matrix", "[linalg]") {
  CHECK_THROWS_AS(lu_logdet(Mat::Zero(2, 2)), SingularMatrixError);
  CHECK_THROWS_AS(lu_logdet(Mat::Zero(2, 3)), std::invalid_argument);
}

TEST_CASE("lu_logdet positivity for I + J of normalized nets", "[linalg]") {
  RandomState rng(42);
  for (int i = 0; i < 1000; ++i) {
    const int d = 1 + static_cast<int>(rng.next_u64() % 4);
    LipschitzMlp net = make_mlp(d, 6, 2, ActivationKind::LipSwish, 0.9, rng, 50);
    const Vec x = rng.normal_vec(d);
    const LogDet ld = lu_logdet(Mat::Identity(d, d) + net.jacobian(x));
    REQUIRE(ld.sign == 1);
  }
}

TEST_CASE("lu_logdet multiplicativity", "[linalg]") {
  RandomState rng(7);
  for (int i = 0; i < 50; ++i) {
    // Well-conditioned factors: diagonally dominant random 6x6.
    Mat a = rng.normal_mat(6, 6) + 8.0 * Mat::Identity(6, 6);
    Mat b = rng.normal_mat(6, 6) + 8.0 * Mat::Identity(6, 6);
    const double lhs = lu_logdet(a * b).logabsdet;
    const double rhs = lu_logdet(a).logabsdet + lu_logdet(b).logabsdet;
    CHECK_THAT(lhs, Catch::Matchers::WithinAbs(rhs, 1e-10));
  }
}

TEST_CASE("eig_2x2 identity", "[linalg]") {
  const Eig2 e = eig_2x2(Mat::Identity(2, 2));
  CHECK(e.real());
  CHECK_THAT(e.l1.real(), Catch::Matchers::WithinAbs(1.0, 1e-14));
  CHECK_THAT(e.l2.real(), Catch::Matchers::WithinAbs(1.0, 1e-14));
}

TEST_CASE("eig_2x2 rotation", "[linalg]") {
  Mat m(2, 2);
  m << 0, 1, -1, 0;
  const Eig2 e = eig_2x2(m);
  CHECK_FALSE(e.real());
  CHECK_THAT(e.l1.imag(), Catch::Matchers::WithinAbs(1.0, 1e-14));
  CHECK_THAT(e.l2.imag(), Catch::Matchers::WithinAbs(-1.0, 1e-14));
  CHECK_THAT(e.l1.real(), Catch::Matchers::WithinAbs(0.0, 1e-14));
}

TEST_CASE("eig_2x2 composed-Jacobian matrix", "[linalg]") {
  // The eigenvalues sit near a double root, so the matrix must carry its
  // full entry (1,1) = -0.67575; rounding it to 4 decimals shifts them by
  // more than the tolerance.
  Mat m(2, 2);
  m << 0.2776, -0.4293, 0.5290, -0.67575;
  const Eig2 e = eig_2x2(m);
  REQUIRE(e.real());
  const double lo = std::min(e.l1.real(), e.l2.real());
  const double hi = std::max(e.l1.real(), e.l2.real());
  CHECK_THAT(hi, Catch::Matchers::WithinAbs(-0.1881, 1e-3));
  CHECK_THAT(lo, Catch::Matchers::WithinAbs(-0.2100, 1e-3));
}

TEST_CASE("power_iteration_norm diagonal and zero", "[linalg]") {
  RandomState rng(1);
  Mat m = Mat::Zero(2, 2);
  m(0, 0) = 3.0;
  m(1, 1) = 1.0;
  const auto est = power_iteration_norm(m, 1000, 1e-10, rng);
  CHECK_THAT(est.sigma, Catch::Matchers::WithinAbs(3.0, 1e-6));
  CHECK(power_iteration_norm(Mat::Zero(3, 3), 10, 1e-6, rng).sigma == 0.0);
}

namespace {
double brute_force_norm(const Mat& m) {
  // sigma = sqrt of the largest eigenvalue of M^T M via plain power steps.
  Mat mtm = m.transpose() * m;
  Vec v = Vec::Ones(m.cols()).normalized();
  for (int i = 0; i < 10000; ++i) v = (mtm * v).normalized();
  return std::sqrt(v.dot(mtm * v));
}
}  // namespace

TEST_CASE("power_iteration_norm random 8x8 vs brute force", "[linalg]") {
  RandomState rng(3);
  for (int i = 0; i < 20; ++i) {
    const Mat m = rng.normal_mat(8, 8);
    const double oracle = brute_force_norm(m);
    const auto est = power_iteration_norm(m, 5000, 1e-12, rng);
    CHECK_THAT(est.sigma, Catch::Matchers::WithinAbs(oracle, 1e-4));
    CHECK(est.sigma <= oracle + 1e-8);
  }
}
