#pragma once
// Singular-value machinery: full spectra, stable rank, normalised spectral
// entropy, Eckart-Young truncation, the singular-value bounds for the
// action-repeat SR, and per-instance audits of those bounds.

#include "srlab/core.hpp"
#include "srlab/mdp.hpp"

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace srlab {

struct SpectrumReport {
  std::vector<double> singular_values;  // non-increasing
  std::size_t beta = 0;                 // number of singular values
  std::vector<double> energy_weights;   // sigma_i^2 / sum sigma_j^2
  double stable_rank = 0.0;
  double nse = 0.0;
  bool nse_degenerate = false;  // beta == 1, entropy normaliser is log 1
};

// Full spectrum of a dense matrix, verified by reconstruction:
// max|U S V^T - M| <= 1e-7 * sigma_1. Metrics are left at zero.
SpectrumReport singular_values(const Matrix& m);

// Wraps an already known spectrum (sorted on entry).
SpectrumReport spectrum_from_values(std::vector<double> values);

// singular_values followed by stable_rank and spectral_entropy.
SpectrumReport analyze_spectrum(const Matrix& m);
void fill_metrics(SpectrumReport& report);

// sum sigma_i^2 / sigma_1^2. Throws on an all-zero spectrum.
double stable_rank(const SpectrumReport& report);

struct EntropyValue {
  double value = 0.0;
  bool degenerate = false;
};

// -sum p_i log p_i / log beta with 0 log 0 = 0. Singular values below
// 1e-12 * sigma_1 are treated as zero. beta == 1 yields {0, degenerate}.
EntropyValue spectral_entropy(const SpectrumReport& report);

std::vector<double> energy_weights(const SpectrumReport& report);

double spectral_norm(const Matrix& m);

struct Truncation {
  Matrix approx;     // rank-d truncation M_d
  double error = 0;  // ||M - M_d||_2, measured on the residual
  Matrix f;          // U_d sqrt(S_d)
  Matrix b;          // V_d sqrt(S_d), so f * b^T = M_d
  std::vector<double> singular_values;
};

// Best rank-d approximation. Requires 1 <= d <= min(rows, cols).
Truncation truncated_svd(const Matrix& m, std::size_t d);

struct BoundValue {
  double value = 0.0;
  bool vacuous = false;  // denominator <= 0, value is +inf
};

// 1 / (1 - gamma * sigma_i^k) for the i-th (1-based) entry of a
// non-increasing spectrum; entries past the end count as zero.
BoundValue sv_upper_bound(std::span<const double> p_rep_spectrum, double gamma, std::size_t k,
                          std::size_t i);

// 1 + (cardinality - 1) * ((1 - gamma*sigma1) / (1 - gamma*rho^k))^2.
// Throws std::domain_error when rho >= 1 or gamma*sigma1 >= 1.
double srank_upper_bound(double sigma1_p, double rho, double gamma, std::size_t k,
                         std::size_t cardinality);

// Lower bound on the dominant energy weight p_1: the reciprocal of the
// stable-rank bound.
double nse_dominant_weight_bound(double sigma1_p, double rho, double gamma, std::size_t k,
                                 std::size_t cardinality);

// Spectrum of the action-repetition operator as the union of the per-action
// spectra, sorted: sigma(P_rep^k) := U_a sigma(P_a^k) when power_first, or
// U_a sigma(P_a) otherwise.
std::vector<double> union_spectrum(const TabularMdp& mdp, std::size_t power, bool power_first);

enum class Regime { proven, heuristic };
std::string to_string(Regime regime);

// True when every per-action matrix has spectral norm <= 1 + 1e-9.
bool unit_spectral_norm(const TabularMdp& mdp);

struct AuditRecord {
  std::string bound;  // which inequality
  std::size_t i = 0;  // singular-value index (1-based), 0 for scalar bounds
  double lhs = 0.0;
  double rhs = 0.0;
  double slack = 0.0;  // rhs - lhs
  bool satisfied = true;
  bool asserted = false;  // part of the pass/fail verdict in the proven regime
  bool vacuous = false;
};

struct BoundAudit {
  std::vector<AuditRecord> records;
  Regime regime = Regime::heuristic;
  double rho = 0.0;     // max_a sigma_2(P_a), the sub-dominant cap
  double sigma1_p = 0;  // sigma_1 of the policy operator
  std::size_t n_states = 0;
  std::size_t n_actions = 0;

  std::size_t violations() const;
  // Violations of asserted records in the proven regime.
  std::size_t failures() const;
};

// Satisfaction rule shared by all audits: lhs <= rhs + 1e-8.
inline constexpr double kAuditTol = 1e-8;

// Compares the true spectrum of the k-repeat SR (nominal gamma) against every
// bound of the singular-value chain, the stable-rank bound and the dominant
// energy-weight bound. d selects the extra record for the sigma_{d+1} term of
// the k-repeat optimality gap.
BoundAudit audit_bounds(const TabularMdp& mdp, const Policy& policy, double gamma, std::size_t k,
                        std::size_t d);

}  // namespace srlab
