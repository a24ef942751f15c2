#include "doctest.h"
#include "helpers.hpp"

#include "srlab/spectral.hpp"

#include <cmath>

using namespace srlab;
using testing::lazy_swap;
using testing::swap_chain;

namespace {

Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = rng.normal();
  return m;
}

// Matrix with prescribed singular values via random orthogonal factors.
Matrix with_spectrum(Rng& rng, const std::vector<double>& sigma) {
  const auto n = static_cast<Eigen::Index>(sigma.size());
  const Matrix q1 = Eigen::HouseholderQR<Matrix>(random_matrix(rng, n, n)).householderQ();
  const Matrix q2 = Eigen::HouseholderQR<Matrix>(random_matrix(rng, n, n)).householderQ();
  const Vector s = Eigen::Map<const Vector>(sigma.data(), n);
  return q1 * s.asDiagonal() * q2.transpose();
}

SuccessorMatrix uniform_sr(const TabularMdp& mdp, double gamma, std::size_t k = 1) {
  return sr_closed_form(repeat_operator(mdp, Policy::uniform(mdp.n_states(), mdp.n_actions()), k), gamma);
}

}  // namespace

TEST_CASE("singular values of reference matrices") {
  const SpectrumReport id = singular_values(Matrix::Identity(5, 5));
  CHECK(id.beta == 5);
  for (double s : id.singular_values) CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
  const SpectrumReport zero = singular_values(Matrix::Zero(3, 3));
  for (double s : zero.singular_values) CHECK(s == 0.0);
  const SpectrumReport sw = singular_values(uniform_sr(swap_chain(1, 0.5), 0.5).m);
  CHECK(sw.singular_values[0] == doctest::Approx(2.0).epsilon(1e-13));
  CHECK(sw.singular_values[1] == doctest::Approx(2.0 / 3).epsilon(1e-13));
  Matrix bad = Matrix::Identity(2, 2);
  bad(0, 1) = std::nan("");
  CHECK_THROWS_AS(singular_values(bad), NumericError);
}

TEST_CASE("stable rank and spectral entropy") {
  const SpectrumReport id = analyze_spectrum(Matrix::Identity(6, 6));
  CHECK(id.stable_rank == doctest::Approx(6.0).epsilon(1e-12));
  CHECK(id.nse == doctest::Approx(1.0).epsilon(1e-12));
  const SpectrumReport r1 = analyze_spectrum(Vector::Ones(4) * Vector::LinSpaced(4, 1, 4).transpose());
  CHECK(r1.stable_rank == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r1.nse == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(stable_rank(spectrum_from_values({1, 2, 1})) == doctest::Approx(1.5));
  const EntropyValue e = spectral_entropy(spectrum_from_values({2, 2.0 / 3}));
  const double expected = -(0.9 * std::log(0.9) + 0.1 * std::log(0.1)) / std::log(2.0);
  CHECK(e.value == doctest::Approx(expected).epsilon(1e-12));
  CHECK(e.value == doctest::Approx(0.4690).epsilon(1e-4));
  const EntropyValue single = spectral_entropy(spectrum_from_values({3.0}));
  CHECK(single.degenerate);
  CHECK(single.value == 0.0);
  CHECK_THROWS_AS(stable_rank(spectrum_from_values({0, 0})), std::domain_error);
}

TEST_CASE("metric ranges, equality cases and scale invariance") {
  Rng rng(7);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 2 + rng.index(30);
    const Matrix m = random_matrix(rng, n, n);
    const SpectrumReport r = analyze_spectrum(m);
    double total = 0.0;
    for (double p : r.energy_weights) total += p;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(r.stable_rank >= 1.0 - 1e-12);
    CHECK(r.stable_rank <= static_cast<double>(r.beta) + 1e-12);
    CHECK(r.nse >= 0.0);
    CHECK(r.nse <= 1.0);
    CHECK(std::is_sorted(r.singular_values.rbegin(), r.singular_values.rend()));
    for (double c : {-3.0, 0.01, 250.0}) {
      const SpectrumReport s = analyze_spectrum(c * m);
      CHECK(s.stable_rank == doctest::Approx(r.stable_rank).epsilon(1e-10));
      CHECK(s.nse == doctest::Approx(r.nse).epsilon(1e-10));
    }
  }
  // SRank = beta iff all sigma equal iff NSE = 1.
  for (const std::vector<double>& sigma :
       {std::vector<double>{2, 2, 2, 2}, std::vector<double>{2, 2, 2, 1.9}, std::vector<double>{5, 1, 1, 1}}) {
    SpectrumReport r = spectrum_from_values(sigma);
    fill_metrics(r);
    const bool flat = sigma.front() == sigma.back();
    CHECK((std::abs(r.stable_rank - 4.0) <= 1e-9) == flat);
    CHECK((std::abs(r.nse - 1.0) <= 1e-9) == flat);
  }
}

TEST_CASE("Eckart-Young truncation") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t rows = 1 + rng.index(40), cols = 1 + rng.index(40);
    const Matrix m = random_matrix(rng, rows, cols);
    const SpectrumReport r = singular_values(m);
    for (std::size_t d = 1; d <= r.beta; ++d) {
      const Truncation t = truncated_svd(m, d);
      const double tail = d < r.beta ? r.singular_values[d] : 0.0;
      CHECK(std::abs(t.error - tail) <= 1e-8);
      CHECK((t.f * t.b.transpose() - t.approx).cwiseAbs().maxCoeff() <= 1e-10);
      // Balanced factors: both carry sqrt(sigma) per column.
      CHECK((t.f.colwise().norm() - t.b.colwise().norm()).cwiseAbs().maxCoeff() <= 1e-9);
    }
    CHECK_THROWS_AS(truncated_svd(m, 0), std::invalid_argument);
    CHECK_THROWS_AS(truncated_svd(m, r.beta + 1), std::invalid_argument);
  }
  SUBCASE("rank-deficient input is reproduced exactly") {
    const Matrix low = random_matrix(rng, 12, 3) * random_matrix(rng, 3, 9);
    const Truncation t = truncated_svd(low, 4);
    CHECK(t.error <= 1e-8);
    CHECK((t.approx - low).cwiseAbs().maxCoeff() <= 1e-8);
  }
  SUBCASE("swap-chain SR at gamma 0.5") {
    const Truncation t = truncated_svd(uniform_sr(swap_chain(1, 0.5), 0.5).m, 1);
    CHECK(t.error == doctest::Approx(2.0 / 3).epsilon(1e-12));
  }
}

TEST_CASE("singular-value bound evaluator") {
  const std::vector<double> spec{1.0, 0.8, 0.0};
  CHECK(sv_upper_bound(spec, 0.95, 10, 3).value == 1.0);
  CHECK(sv_upper_bound(spec, 0.95, 10, 7).value == 1.0);
  for (std::size_t k : {1, 3, 10}) CHECK(sv_upper_bound(spec, 0.95, k, 1).value == doctest::Approx(20.0));
  CHECK(sv_upper_bound(spec, 0.95, 10, 2).value == doctest::Approx(1.0 / (1.0 - 0.95 * std::pow(0.8, 10))));
  CHECK(sv_upper_bound(spec, 0.95, 10, 2).value == doctest::Approx(1.1136).epsilon(1e-4));
  const std::vector<double> big{1.2};
  const BoundValue vac = sv_upper_bound(big, 0.95, 1, 1);
  CHECK(vac.vacuous);
  CHECK(std::isinf(vac.value));
  CHECK_THROWS_AS(sv_upper_bound(spec, 0.9, 1, 0), std::invalid_argument);
}

TEST_CASE("stable-rank and dominant-weight bounds") {
  CHECK(srank_upper_bound(1.0, 0.0, 0.95, 3, 104) == doctest::Approx(1.0 + 103 * 0.05 * 0.05));
  CHECK(srank_upper_bound(0.9, 1e-9, 0.5, 200, 10) == doctest::Approx(1.0 + 9 * 0.55 * 0.55));
  const double k1 = srank_upper_bound(1.0, 0.5, 0.95, 1, 104);
  const double k10 = srank_upper_bound(1.0, 0.5, 0.95, 10, 104);
  CHECK(k10 < k1);
  CHECK(nse_dominant_weight_bound(1.0, 0.5, 0.95, 10, 104) > nse_dominant_weight_bound(1.0, 0.5, 0.95, 1, 104));
  CHECK(nse_dominant_weight_bound(0.7, 0.3, 0.9, 4, 1) == 1.0);
  CHECK(nse_dominant_weight_bound(1.0, 0.0, 0.9, 4, 5) == doctest::Approx(1.0 / (1.0 + 4 * 0.01)));
  CHECK_THROWS_AS(srank_upper_bound(1.0, 1.0, 0.9, 1, 4), std::domain_error);
  CHECK_THROWS_AS(nse_dominant_weight_bound(1.2, 0.5, 0.9, 1, 4), std::domain_error);
  // Monotone in k over a grid of valid parameters.
  for (double s1 : {0.2, 0.7, 1.0})
    for (double rho : {0.0, 0.3, 0.9, 0.999})
      for (double g : {0.5, 0.9, 0.99}) {
        double prev_s = std::numeric_limits<double>::infinity(), prev_p = 0.0;
        for (std::size_t k = 1; k <= 64; ++k) {
          const double s = srank_upper_bound(s1, rho, g, k, 50);
          const double p = nse_dominant_weight_bound(s1, rho, g, k, 50);
          CHECK(s <= prev_s + 1e-15);
          CHECK(p >= prev_p - 1e-15);
          prev_s = s;
          prev_p = p;
        }
      }
}

TEST_CASE("audit: lazy swap chain is tight") {
  // sigma(P) = {1, 0}; M = (I - 0.9 P)^-1 has eigenvalues 10 and 1, so
  // sigma(M) = {10, 1}. The chain bounds are 1/(1-0.9*1) = 10 and 1/(1-0) = 1.
  // SRank = 1.01 and the stable-rank bound is 1 + ((1-0.9)/(1-0))^2 = 1.01.
  const TabularMdp mdp = lazy_swap(0.9);
  const BoundAudit audit = audit_bounds(mdp, Policy::uniform(2, 1), 0.9, 1, 1);
  CHECK(audit.regime == Regime::proven);
  CHECK(audit.failures() == 0);
  CHECK(audit.rho == doctest::Approx(0.0));
  std::size_t checked = 0;
  for (const AuditRecord& r : audit.records) {
    if (r.bound == "sv_chain" || r.bound == "srank_pairs" || r.bound == "dominant_weight_pairs") {
      CHECK(std::abs(r.slack) <= 1e-9);
      CHECK(r.satisfied);
      ++checked;
    }
  }
  CHECK(checked == 4);
}

TEST_CASE("audit: identity dynamics meet every chain bound with zero slack") {
  const TabularMdp mdp({Matrix::Identity(3, 3), Matrix::Identity(3, 3)}, 0.9);
  for (std::size_t k : {1, 4}) {
    const BoundAudit audit = audit_bounds(mdp, Policy::uniform(3, 2), 0.9, k, 2);
    for (const AuditRecord& r : audit.records) {
      if (r.bound != "sv_chain") continue;
      if (r.i <= 3) {
        CHECK(r.rhs == doctest::Approx(10.0));
      }
      CHECK(r.satisfied);
    }
    CHECK(audit.failures() == 0);
  }
}

TEST_CASE("audit: proven regime on doubly-stochastic and lazy instances") {
  for (MdpClass cls : {MdpClass::doubly_stochastic, MdpClass::lazy})
    for (std::uint64_t seed = 0; seed < 25; ++seed) {
      const TabularMdp mdp = random_mdp(5, 2, seed, cls);
      CHECK(unit_spectral_norm(mdp));
      const BoundAudit audit = audit_bounds(mdp, Policy::uniform(5, 2), 0.9, 1 + seed % 4, 3);
      CHECK(audit.regime == Regime::proven);
      CHECK(audit.failures() == 0);
    }
}

TEST_CASE("audit: general instances are classified and never fail") {
  std::size_t heuristic = 0;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const TabularMdp mdp = random_mdp(5, 2, seed, MdpClass::general);
    const BoundAudit audit = audit_bounds(mdp, Policy::uniform(5, 2), 0.9, 3, 2);
    if (audit.regime == Regime::heuristic) {
      ++heuristic;
      CHECK(audit.failures() == 0);
    }
    for (const AuditRecord& r : audit.records) {
      CHECK(r.satisfied == (r.vacuous || r.lhs <= r.rhs + kAuditTol));
      if (!r.vacuous) CHECK(r.slack == doctest::Approx(r.rhs - r.lhs));
    }
  }
  CHECK(heuristic > 0);
}

TEST_CASE("union spectrum") {
  const TabularMdp mdp = lazy_swap(0.9);
  const std::vector<double> u = union_spectrum(mdp, 3, false);
  REQUIRE(u.size() == 2);
  CHECK(u[0] == doctest::Approx(1.0));
  CHECK(u[1] == doctest::Approx(0.0).epsilon(1e-12));
  const TabularMdp two = swap_chain(3, 0.9);
  CHECK(union_spectrum(two, 1, false).size() == 6);
}
