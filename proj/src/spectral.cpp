#include "srlab/spectral.hpp"

#include <algorithm>
#include <functional>
#include <limits>
#include <numeric>

namespace srlab {

namespace {

Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }

std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

double entry_or_zero(std::span<const double> values, std::size_t i) {
  return (i >= 1 && i <= values.size()) ? values[i - 1] : 0.0;
}

}  // namespace

namespace {

struct ThinSvd {
  Matrix u;
  Vector s;
  Matrix v;
};

template <class Svd>
ThinSvd take(const Svd& svd) {
  return {svd.matrixU(), svd.singularValues(), svd.matrixV()};
}

// Entrywise reconstruction within 1e-7 sigma_1.
bool accurate(const ThinSvd& t, const Matrix& m) {
  const double sigma1 = t.s.size() > 0 ? t.s(0) : 0.0;
  const double err = (t.u * t.s.asDiagonal() * t.v.transpose() - m).cwiseAbs().maxCoeff();
  return err <= 1e-7 * std::max(sigma1, std::numeric_limits<double>::min());
}

// Divide-and-conquer first. Eigen 3.4's BDCSVD occasionally returns a wrong
// factorization on structured matrices, so a failed reconstruction falls back
// to the slower one-sided Jacobi SVD.
ThinSvd checked_svd(const Matrix& m, const char* who) {
  Eigen::BDCSVD<Matrix> bdc(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (bdc.info() == Eigen::Success) {
    ThinSvd t = take(bdc);
    if (accurate(t, m)) return t;
  }
  Eigen::JacobiSVD<Matrix> jac(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (jac.info() != Eigen::Success) throw NumericError(std::string(who) + ": SVD did not converge");
  ThinSvd t = take(jac);
  if (!accurate(t, m)) throw NumericError(std::string(who) + ": reconstruction check failed");
  return t;
}

}  // namespace

SpectrumReport singular_values(const Matrix& m) {
  if (!m.allFinite()) throw NumericError("singular_values: matrix has non-finite entries");
  SpectrumReport report;
  if (m.size() == 0) return report;
  report.singular_values = to_std(checked_svd(m, "singular_values").s);
  report.beta = report.singular_values.size();
  return report;
}

SpectrumReport spectrum_from_values(std::vector<double> values) {
  for (double v : values) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("invalid singular value");
  }
  std::sort(values.begin(), values.end(), std::greater<>());
  SpectrumReport report;
  report.beta = values.size();
  report.singular_values = std::move(values);
  return report;
}

std::vector<double> energy_weights(const SpectrumReport& report) {
  double total = 0.0;
  for (double s : report.singular_values) total += s * s;
  if (!(total > 0.0)) throw std::domain_error("energy weights of an all-zero spectrum");
  std::vector<double> p;
  p.reserve(report.singular_values.size());
  for (double s : report.singular_values) p.push_back(s * s / total);
  return p;
}

double stable_rank(const SpectrumReport& report) {
  if (report.singular_values.empty() || !(report.singular_values.front() > 0.0)) {
    throw std::domain_error("stable rank of an all-zero spectrum");
  }
  const double s1 = report.singular_values.front();
  double sum = 0.0;
  for (double s : report.singular_values) sum += (s / s1) * (s / s1);
  return sum;
}

EntropyValue spectral_entropy(const SpectrumReport& report) {
  if (report.singular_values.empty() || !(report.singular_values.front() > 0.0)) {
    throw std::domain_error("spectral entropy of an all-zero spectrum");
  }
  if (report.beta <= 1) return {0.0, true};
  const double floor = 1e-12 * report.singular_values.front();
  double total = 0.0;
  for (double s : report.singular_values) {
    if (s >= floor) total += s * s;
  }
  double h = 0.0;
  for (double s : report.singular_values) {
    if (s < floor) continue;
    const double p = s * s / total;
    if (p > 0.0) h -= p * std::log(p);
  }
  const double nse = h / std::log(static_cast<double>(report.beta));
  return {std::clamp(nse, 0.0, 1.0), false};
}

void fill_metrics(SpectrumReport& report) {
  report.energy_weights = energy_weights(report);
  report.stable_rank = stable_rank(report);
  const EntropyValue e = spectral_entropy(report);
  report.nse = e.value;
  report.nse_degenerate = e.degenerate;
}

SpectrumReport analyze_spectrum(const Matrix& m) {
  SpectrumReport report = singular_values(m);
  fill_metrics(report);
  return report;
}

double spectral_norm(const Matrix& m) {
  if (m.size() == 0) return 0.0;
  if (!m.allFinite()) throw NumericError("spectral_norm: non-finite entries");
  return checked_svd(m, "spectral_norm").s(0);
}

Truncation truncated_svd(const Matrix& m, std::size_t d) {
  const auto beta = static_cast<std::size_t>(std::min(m.rows(), m.cols()));
  if (d < 1 || d > beta) {
    throw std::invalid_argument("truncated_svd: d must lie in [1, " + std::to_string(beta) + "]");
  }
  if (!m.allFinite()) throw NumericError("truncated_svd: non-finite entries");
  const ThinSvd svd = checked_svd(m, "truncated_svd");
  const Vector root = svd.s.head(idx(d)).cwiseSqrt();
  Truncation t;
  t.f = svd.u.leftCols(idx(d)) * root.asDiagonal();
  t.b = svd.v.leftCols(idx(d)) * root.asDiagonal();
  t.approx = t.f * t.b.transpose();
  t.error = spectral_norm(m - t.approx);
  t.singular_values = to_std(svd.s);
  return t;
}

// ── Bounds ──────────────────────────────────────────────────────────────────

BoundValue sv_upper_bound(std::span<const double> p_rep_spectrum, double gamma, std::size_t k,
                          std::size_t i) {
  if (i == 0) throw std::invalid_argument("singular-value index is 1-based");
  const double sigma = entry_or_zero(p_rep_spectrum, i);
  const double denom = 1.0 - gamma * std::pow(sigma, static_cast<double>(k));
  if (!(denom > 0.0)) return {std::numeric_limits<double>::infinity(), true};
  return {1.0 / denom, false};
}

namespace {

double contraction_ratio(double sigma1_p, double rho, double gamma, std::size_t k) {
  if (!(rho < 1.0)) throw std::domain_error("sub-dominant cap rho must be < 1");
  if (!(gamma * sigma1_p < 1.0)) throw std::domain_error("gamma * sigma_1 must be < 1");
  return (1.0 - gamma * sigma1_p) / (1.0 - gamma * std::pow(rho, static_cast<double>(k)));
}

}  // namespace

double srank_upper_bound(double sigma1_p, double rho, double gamma, std::size_t k,
                         std::size_t cardinality) {
  if (cardinality == 0) throw std::invalid_argument("cardinality must be >= 1");
  const double ratio = contraction_ratio(sigma1_p, rho, gamma, k);
  return 1.0 + static_cast<double>(cardinality - 1) * ratio * ratio;
}

double nse_dominant_weight_bound(double sigma1_p, double rho, double gamma, std::size_t k,
                                 std::size_t cardinality) {
  return 1.0 / srank_upper_bound(sigma1_p, rho, gamma, k, cardinality);
}

std::vector<double> union_spectrum(const TabularMdp& mdp, std::size_t power, bool power_first) {
  std::vector<double> out;
  out.reserve(mdp.n_pairs());
  for (const Matrix& p : mdp.transitions()) {
    const Matrix base = power_first ? matrix_power(p, power) : p;
    for (double s : singular_values(base).singular_values) {
      out.push_back(power_first ? s : std::pow(s, static_cast<double>(power)));
    }
  }
  std::sort(out.begin(), out.end(), std::greater<>());
  return out;
}

std::string to_string(Regime regime) {
  return regime == Regime::proven ? "proven_regime" : "heuristic_regime";
}

bool unit_spectral_norm(const TabularMdp& mdp) {
  for (const Matrix& p : mdp.transitions()) {
    if (spectral_norm(p) > 1.0 + 1e-9) return false;
  }
  return true;
}

std::size_t BoundAudit::violations() const {
  return static_cast<std::size_t>(std::count_if(records.begin(), records.end(),
                                                [](const AuditRecord& r) { return !r.satisfied; }));
}

std::size_t BoundAudit::failures() const {
  if (regime != Regime::proven) return 0;
  return static_cast<std::size_t>(std::count_if(records.begin(), records.end(), [](const AuditRecord& r) {
    return r.asserted && !r.satisfied;
  }));
}

namespace {

AuditRecord make_record(std::string bound, std::size_t i, double lhs, double rhs, bool asserted,
                        bool vacuous = false) {
  AuditRecord r;
  r.bound = std::move(bound);
  r.i = i;
  r.lhs = lhs;
  r.rhs = rhs;
  r.slack = rhs - lhs;
  r.vacuous = vacuous;
  r.satisfied = vacuous || lhs <= rhs + kAuditTol;
  r.asserted = asserted;
  return r;
}

}  // namespace

BoundAudit audit_bounds(const TabularMdp& mdp, const Policy& policy, double gamma, std::size_t k,
                        std::size_t d) {
  const PolicyOperator op = repeat_operator(mdp, policy, k);
  const Eigen::Index n = op.p_pi.rows();
  const Matrix sr = Matrix::Identity(n, n) - gamma * op.p_pi;
  const Matrix m = sr.partialPivLu().solve(Matrix::Identity(n, n));

  const std::size_t ns = mdp.n_states();
  const std::size_t na = mdp.n_actions();
  const std::size_t n_pairs = ns * na;

  BoundAudit audit;
  audit.n_states = ns;
  audit.n_actions = na;
  audit.regime = unit_spectral_norm(mdp) ? Regime::proven : Regime::heuristic;

  const SpectrumReport m_spec = analyze_spectrum(m);
  const std::vector<double>& sm = m_spec.singular_values;
  const std::vector<double> p_pi_sv = singular_values(op.p_pi).singular_values;
  const std::vector<double> rep_union = union_spectrum(mdp, 1, false);
  const std::vector<double> rep_union_k = union_spectrum(mdp, k, true);
  const std::vector<double> rep_stacked = singular_values(repeat_operator(mdp, policy, 1).p_rep_k).singular_values;
  const double pi_norm = spectral_norm(op.pi_block);
  const double kd = static_cast<double>(k);

  for (std::size_t i = 1; i <= n_pairs; ++i) {
    const double lhs = sm[i - 1];
    const BoundValue chain = sv_upper_bound(rep_union, gamma, k, i);
    audit.records.push_back(make_record("sv_chain", i, lhs, chain.value, true, chain.vacuous));

    const BoundValue chain_k = sv_upper_bound(rep_union_k, gamma, 1, i);
    audit.records.push_back(make_record("sv_chain_power_first", i, lhs, chain_k.value, false, chain_k.vacuous));

    const BoundValue stacked = sv_upper_bound(rep_stacked, gamma, k, i);
    audit.records.push_back(make_record("sv_chain_stacked", i, lhs, stacked.value, false, stacked.vacuous));

    audit.records.push_back(make_record("power_step", i, entry_or_zero(rep_union_k, i),
                                        std::pow(entry_or_zero(rep_union, i), kd), false));
    audit.records.push_back(make_record("policy_step", i, entry_or_zero(p_pi_sv, i),
                                        entry_or_zero(rep_union_k, i) * pi_norm, false));
    const BoundValue neumann = sv_upper_bound(p_pi_sv, gamma, 1, i);
    audit.records.push_back(make_record("neumann_step", i, lhs, neumann.value, false, neumann.vacuous));
  }

  if (d + 1 <= n_pairs) {
    const BoundValue tail = sv_upper_bound(rep_union, gamma, k, d + 1);
    audit.records.push_back(make_record("lemma_tail", d + 1, sm[d], tail.value, true, tail.vacuous));
  }

  double rho = 0.0;
  for (const Matrix& p : mdp.transitions()) {
    const auto sv = singular_values(p).singular_values;
    if (sv.size() >= 2) rho = std::max(rho, sv[1]);
  }
  audit.rho = rho;
  audit.sigma1_p = p_pi_sv.empty() ? 0.0 : p_pi_sv.front();

  const bool applicable = rho < 1.0 && gamma * audit.sigma1_p < 1.0;
  const double p1 = m_spec.energy_weights.front();
  for (const auto& [suffix, card, asserted] :
       {std::tuple{"pairs", n_pairs, true}, std::tuple{"states", ns, false}}) {
    if (applicable) {
      const double srank_rhs = srank_upper_bound(audit.sigma1_p, rho, gamma, k, card);
      const double p1_rhs = nse_dominant_weight_bound(audit.sigma1_p, rho, gamma, k, card);
      audit.records.push_back(make_record(std::string("srank_") + suffix, 0, m_spec.stable_rank, srank_rhs, asserted));
      // Lower bound: p_1 >= bound, recorded as bound <= p_1.
      audit.records.push_back(make_record(std::string("dominant_weight_") + suffix, 0, p1_rhs, p1, asserted));
    } else {
      const double inf = std::numeric_limits<double>::infinity();
      audit.records.push_back(make_record(std::string("srank_") + suffix, 0, m_spec.stable_rank, inf, asserted, true));
      audit.records.push_back(make_record(std::string("dominant_weight_") + suffix, 0, 0.0, p1, asserted, true));
    }
  }
  return audit;
}

}  // namespace srlab
