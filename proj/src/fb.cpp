#include "srlab/fb.hpp"

#include "srlab/spectral.hpp"

#include "json.hpp"

#include <fstream>
#include <limits>

namespace srlab {

namespace {

Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

const Matrix& table(const FbRepresentation& fb, std::size_t z_index) {
  if (z_index >= fb.f_tables.size()) throw std::out_of_range("z anchor index out of range");
  return fb.f_tables[z_index];
}

Vector sphere_point(Rng& rng, std::size_t d) {
  Vector z(idx(d));
  double norm = 0.0;
  do {
    for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = rng.normal();
    norm = z.norm();
  } while (!(norm > 0.0));
  return z * (std::sqrt(static_cast<double>(d)) / norm);
}

Matrix gaussian(Rng& rng, std::size_t rows, std::size_t cols, double scale) {
  Matrix m(idx(rows), idx(cols));
  // Column-major fill order is part of the reproducibility contract.
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = scale * rng.normal();
  return m;
}

// pi_tilde * F: row s mixes the rows (s, a) of F with weights pi(a|s).
Matrix policy_mix(const Policy& policy, const Matrix& f) {
  const std::size_t ns = policy.n_states();
  const std::size_t na = policy.n_actions();
  Matrix out = Matrix::Zero(idx(ns), f.cols());
  for (std::size_t s = 0; s < ns; ++s)
    for (std::size_t a = 0; a < na; ++a) {
      const double w = policy(s, a);
      if (w != 0.0) out.row(idx(s)) += w * f.row(idx(s * na + a));
    }
  return out;
}

// ||H B^T - I||_F^2 through d x d Gram matrices.
// X^T X through a symmetric rank update, half the flops of a plain product.
Matrix gram(const Matrix& x) {
  Matrix g = Matrix::Zero(x.cols(), x.cols());
  g.selfadjointView<Eigen::Lower>().rankUpdate(x.transpose());
  return g.selfadjointView<Eigen::Lower>();
}

double residual_sq(const Matrix& h, const Matrix& b, const Matrix& btb) {
  const Matrix hth = gram(h);
  return hth.cwiseProduct(btb).sum() - 2.0 * h.cwiseProduct(b).sum() + static_cast<double>(h.rows());
}

struct Adam {
  Matrix m, v;
  std::size_t t = 0;
  explicit Adam(const Matrix& like)
      : m(Matrix::Zero(like.rows(), like.cols())), v(Matrix::Zero(like.rows(), like.cols())) {}
  void step(Matrix& param, const Matrix& grad, double lr) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++t;
    m = b1 * m + (1.0 - b1) * grad;
    v = b2 * v + (1.0 - b2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
};

}  // namespace

std::size_t FbRepresentation::nearest_anchor(const Vector& z) const {
  require(!z_anchors.empty(), "representation has no z anchors");
  std::size_t best = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < z_anchors.size(); ++j) {
    require(z_anchors[j].size() == z.size(), "z has the wrong dimension");
    const double dist = (z_anchors[j] - z).squaredNorm();
    if (dist < best_dist) {
      best_dist = dist;
      best = j;
    }
  }
  return best;
}

Matrix FbRepresentation::approximation(std::size_t z_index) const {
  return table(*this, z_index) * b_table.transpose();
}

void FbRepresentation::validate() const {
  require(d >= 1, "embedding dimension must be >= 1");
  require(static_cast<std::size_t>(b_table.cols()) == d, "B table must have d columns");
  require(!f_tables.empty() && f_tables.size() == z_anchors.size(), "one F table per z anchor");
  require(b_table.allFinite(), "B table has non-finite entries");
  for (std::size_t j = 0; j < f_tables.size(); ++j) {
    require(f_tables[j].rows() == b_table.rows() && static_cast<std::size_t>(f_tables[j].cols()) == d,
            "F table has the wrong shape");
    require(f_tables[j].allFinite(), "F table has non-finite entries");
    require(static_cast<std::size_t>(z_anchors[j].size()) == d, "z anchor has the wrong dimension");
  }
}

FbRepresentation fb_from_svd(const SuccessorMatrix& sr, std::size_t d) {
  const Truncation t = truncated_svd(sr.m, d);
  FbRepresentation fb;
  fb.d = d;
  fb.f_tables.push_back(t.f);
  fb.b_table = t.b;
  fb.z_anchors.push_back(Vector::Zero(idx(d)));
  return fb;
}

double realization_error(const FbRepresentation& fb, std::size_t z_index, const SuccessorMatrix& sr) {
  const Matrix& f = table(fb, z_index);
  require(f.rows() == sr.m.rows() && fb.b_table.rows() == sr.m.cols(), "FB/SR dimension mismatch");
  const std::vector<double> sv = singular_values(sr.m).singular_values;
  const double tail = fb.d < sv.size() ? sv[fb.d] : 0.0;
  return spectral_norm(f * fb.b_table.transpose() - sr.m) - tail;
}

Vector reward_embedding(const FbRepresentation& fb, const RewardTask& task) {
  require(task.r.size() == fb.b_table.rows(), "reward/B dimension mismatch");
  return fb.b_table.transpose() * task.r;
}

Vector fb_q(const FbRepresentation& fb, std::size_t z_index, const Vector& z) {
  const Matrix& f = table(fb, z_index);
  require(z.size() == f.cols(), "z/F dimension mismatch");
  return f * z;
}

Policy greedy_policy_from_f(const FbRepresentation& fb, std::size_t z_index, const Vector& z,
                            std::size_t n_states, std::size_t n_actions) {
  return greedy_policy(fb_q(fb, z_index, z), n_states, n_actions);
}

double fb_bellman_error(const FbRepresentation& fb, std::size_t z_index, const PolicyOperator& op,
                        double gamma) {
  const Matrix& f = table(fb, z_index);
  require(f.rows() == op.p_pi.rows(), "FB/operator dimension mismatch");
  const Matrix h = f - gamma * (op.p_pi * f);
  const Matrix btb = fb.b_table.transpose() * fb.b_table;
  const double sq = std::max(0.0, residual_sq(h, fb.b_table, btb));
  return std::sqrt(sq) / static_cast<double>(f.rows());
}

PolicyFamily parse_policy_family(std::string_view name) {
  if (name == "uniform") return PolicyFamily::uniform;
  if (name == "greedy") return PolicyFamily::greedy;
  throw std::invalid_argument("unknown policy family '" + std::string(name) + "'");
}

std::string to_string(PolicyFamily family) {
  return family == PolicyFamily::uniform ? "uniform" : "greedy";
}

Policy anchor_policy(const FbRepresentation& fb, std::size_t z_index, PolicyFamily family,
                     std::size_t n_states, std::size_t n_actions) {
  if (family == PolicyFamily::uniform) return Policy::uniform(n_states, n_actions);
  return greedy_policy_from_f(fb, z_index, fb.z_anchors.at(z_index), n_states, n_actions);
}

FbTrainResult fb_td_train(const TabularMdp& mdp, const FbTrainConfig& cfg) {
  require(cfg.steps >= 1, "steps must be >= 1");
  require(cfg.lr_f > 0.0 && cfg.lr_b > 0.0, "learning rates must be positive");
  require(cfg.d >= 1, "d must be >= 1");
  require(cfg.k >= 1, "k must be >= 1");
  require(cfg.gamma > 0.0 && cfg.gamma < 1.0, "gamma must lie in (0, 1)");
  require(cfg.n_anchors >= 1 && cfg.target_refresh >= 1 && cfg.z_hold >= 1 && cfg.trace_every >= 1,
          "anchor count and periods must be >= 1");
  require(cfg.ortho_coef >= 0.0, "ortho_coef must be non-negative");

  const std::size_t ns = mdp.n_states();
  const std::size_t na = mdp.n_actions();
  const std::size_t n = ns * na;
  const double nd = static_cast<double>(n);
  const double norm = nd * nd;
  const Matrix p_rep = repeat_operator(mdp, Policy::uniform(ns, na), cfg.k).p_rep_k;
  const Matrix eye_d = Matrix::Identity(idx(cfg.d), idx(cfg.d));

  Rng rng(cfg.seed);
  FbTrainResult result;
  FbRepresentation& fb = result.fb;
  fb.d = cfg.d;
  for (std::size_t j = 0; j < cfg.n_anchors; ++j) fb.z_anchors.push_back(sphere_point(rng, cfg.d));
  fb.b_table = gaussian(rng, n, cfg.d, 1.0);
  for (std::size_t j = 0; j < cfg.n_anchors; ++j) fb.f_tables.push_back(gaussian(rng, n, cfg.d, 0.1));

  std::vector<Adam> adam_f;
  for (const Matrix& f : fb.f_tables) adam_f.emplace_back(f);
  Adam adam_b(fb.b_table);

  auto ortho_term = [&](const Matrix& btb) { return cfg.ortho_coef * (btb / nd - eye_d).squaredNorm(); };

  auto mean_bellman = [&]() {
    const Matrix btb = gram(fb.b_table);
    double total = 0.0;
    for (std::size_t j = 0; j < fb.f_tables.size(); ++j) {
      const Policy pi = anchor_policy(fb, j, cfg.family, ns, na);
      const Matrix h = fb.f_tables[j] - cfg.gamma * (p_rep * policy_mix(pi, fb.f_tables[j]));
      total += std::sqrt(std::max(0.0, residual_sq(h, fb.b_table, btb))) / nd;
    }
    return total / static_cast<double>(fb.f_tables.size());
  };

  std::vector<Matrix> f_bar = fb.f_tables;
  Vector z = fb.z_anchors.front();
  std::size_t j = 0;
  Matrix target_part;  // gamma * P~^{pi_z} * F_bar_j
  double last_loss = std::numeric_limits<double>::quiet_NaN();

  for (std::size_t t = 0; t < cfg.steps; ++t) {
    bool stale = false;
    if (t % cfg.target_refresh == 0) {
      f_bar = fb.f_tables;
      stale = true;
    }
    if (t % cfg.z_hold == 0) {
      if (rng.uniform() < cfg.dictionary_ratio) {
        z = fb.z_anchors[rng.index(fb.z_anchors.size())];
      } else {
        z = sphere_point(rng, cfg.d);
      }
      j = fb.nearest_anchor(z);
      stale = true;
    }
    if (stale) {
      const Policy pi = cfg.family == PolicyFamily::uniform ? Policy::uniform(ns, na)
                                                             : greedy_policy(f_bar[j] * z, ns, na);
      target_part = cfg.gamma * (p_rep * policy_mix(pi, f_bar[j]));
    }

    Matrix& f = fb.f_tables[j];
    Matrix& b = fb.b_table;
    const Matrix btb = gram(b);
    const Matrix h = f - target_part;
    const double loss = residual_sq(h, b, btb) / norm + ortho_term(btb);
    if (t == 0) result.trace.push_back({0, loss, mean_bellman()});
    if (!std::isfinite(loss) || loss > cfg.divergence_limit) {
      result.diverged = true;
      result.steps_run = t;
      result.trace.push_back({t, loss, std::numeric_limits<double>::quiet_NaN()});
      throw DivergenceError("training loss " + std::to_string(loss) + " exceeded the divergence limit at step " +
                                std::to_string(t),
                            std::move(result));
    }
    last_loss = loss;

    const Matrix grad_f = (2.0 / norm) * (h * btb - b);
    // Both B-gradient terms share the left factor B, so they fold into one product.
    Matrix inner = (2.0 / norm) * (h.transpose() * f);
    if (cfg.ortho_coef > 0.0) inner += (4.0 * cfg.ortho_coef / nd) * (btb / nd - eye_d);
    const Matrix grad_b = b * inner - (2.0 / norm) * f;
    adam_f[j].step(f, grad_f, cfg.lr_f);
    adam_b.step(b, grad_b, cfg.lr_b);

    const std::size_t done = t + 1;
    if (done % cfg.trace_every == 0 || done == cfg.steps) {
      result.trace.push_back({done, last_loss, mean_bellman()});
    }
  }
  result.steps_run = cfg.steps;
  fb.validate();
  return result;
}

GapReport optimality_gap_report(const TabularMdp& mdp, const RewardTask& task,
                                const FbRepresentation& fb, std::size_t z_index, std::size_t k,
                                double gamma, std::size_t d, double tol) {
  fb.validate();
  const std::size_t ns = mdp.n_states();
  const std::size_t na = mdp.n_actions();
  require(fb.n_pairs() == ns * na, "FB/MDP dimension mismatch");
  require(static_cast<std::size_t>(task.r.size()) == ns * na, "reward/MDP dimension mismatch");

  const TabularMdp original = mdp.with_gamma(effective_discount(gamma, k));
  const TabularMdp repeated = repeat_mdp(original, k);
  const RewardTask r_rep = repeat_task(original, task, k);

  GapReport g;
  const Vector z_r = reward_embedding(fb, r_rep);
  const Vector q_hat = fb_q(fb, z_index, z_r);
  const Policy pi = greedy_policy(q_hat, ns, na);
  const SuccessorMatrix sr = sr_closed_form(repeat_operator(original, pi, k), gamma);
  const Matrix diff = fb.approximation(z_index) - sr.m;

  const std::vector<double> sv = singular_values(sr.m).singular_values;
  g.sigma_d_plus_1 = d < sv.size() ? sv[d] : 0.0;
  g.approx_norm = spectral_norm(diff);
  g.eps_real = realization_error(fb, z_index, sr);

  const OptimalQ q_star = optimal_q(original, task, tol);
  const OptimalQ q_rep = optimal_q(repeated, r_rep, tol);
  g.eps_repeat = (q_star.q - q_rep.q).cwiseAbs().maxCoeff();
  g.measured_gap = (q_hat - q_star.q).cwiseAbs().maxCoeff();
  g.repeat_gap = (q_hat - q_rep.q).cwiseAbs().maxCoeff();

  const double r_inf = r_rep.r.size() > 0 ? r_rep.r.cwiseAbs().maxCoeff() : 0.0;
  const double scale = 2.0 * r_inf / (1.0 - gamma);
  g.theorem1_rhs = scale * g.approx_norm;

  const std::vector<double> rep = union_spectrum(mdp, 1, false);
  g.sigma_d_plus_1_rep = d < rep.size() ? rep[d] : 0.0;
  const BoundValue tail = sv_upper_bound(rep, gamma, k, d + 1);
  g.lemma_vacuous = tail.vacuous;
  // A zero reward makes the spectral term irrelevant even when its bound is vacuous.
  g.lemma_rhs = scale == 0.0 ? g.eps_repeat : g.eps_repeat + scale * (g.eps_real + tail.value);

  g.theorem1_covered = g.repeat_gap <= g.theorem1_rhs + kAuditTol;
  g.lemma_covered = !g.lemma_vacuous && g.measured_gap <= g.lemma_rhs + kAuditTol;

  g.certificate_lhs = (diff * r_rep.r).cwiseAbs().maxCoeff();
  g.certificate_rhs = g.approx_norm * r_rep.r.norm();
  g.certificate_holds = g.certificate_lhs <= g.certificate_rhs * (1.0 + 1e-12) + 1e-12;
  return g;
}

// ── Persistence ─────────────────────────────────────────────────────────────

namespace {

nlohmann::json matrix_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json(const nlohmann::json& rows, std::size_t cols) {
  Matrix m(idx(rows.size()), idx(cols));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i].size() == cols, "ragged matrix in FB artifact");
    for (std::size_t j = 0; j < cols; ++j) m(idx(i), idx(j)) = rows[i][j].get<double>();
  }
  return m;
}

}  // namespace

void save_fb(const FbRepresentation& fb, const std::filesystem::path& path) {
  fb.validate();
  nlohmann::json doc;
  doc["format"] = "srlab.fb.v1";
  doc["d"] = fb.d;
  doc["n_pairs"] = fb.n_pairs();
  doc["b_table"] = matrix_json(fb.b_table);
  doc["anchors"] = nlohmann::json::array();
  for (std::size_t j = 0; j < fb.f_tables.size(); ++j) {
    nlohmann::json anchor;
    anchor["z"] = std::vector<double>(fb.z_anchors[j].data(), fb.z_anchors[j].data() + fb.z_anchors[j].size());
    anchor["f_table"] = matrix_json(fb.f_tables[j]);
    doc["anchors"].push_back(std::move(anchor));
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << doc.dump() << '\n';
}

FbRepresentation load_fb(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  const nlohmann::json doc = nlohmann::json::parse(in);
  require(doc.value("format", "") == "srlab.fb.v1", "not an srlab FB artifact");
  FbRepresentation fb;
  fb.d = doc.at("d").get<std::size_t>();
  const auto n = doc.at("n_pairs").get<std::size_t>();
  fb.b_table = matrix_from_json(doc.at("b_table"), fb.d);
  require(static_cast<std::size_t>(fb.b_table.rows()) == n, "B table row count mismatch");
  for (const auto& anchor : doc.at("anchors")) {
    const auto z = anchor.at("z").get<std::vector<double>>();
    fb.z_anchors.push_back(Eigen::Map<const Vector>(z.data(), idx(z.size())));
    fb.f_tables.push_back(matrix_from_json(anchor.at("f_table"), fb.d));
  }
  fb.validate();
  return fb;
}

}  // namespace srlab
