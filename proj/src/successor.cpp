#include "srlab/successor.hpp"

#include <bit>
#include <fstream>
#include <sstream>

namespace srlab {

namespace {

Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }

void check_gamma(double gamma) {
  if (!(gamma > 0.0 && gamma < 1.0)) {
    throw std::invalid_argument("gamma must lie strictly inside (0, 1)");
  }
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

RewardTask goal_task(std::size_t n_states, std::size_t n_actions, std::size_t state) {
  if (state >= n_states) throw std::invalid_argument("goal state out of range");
  RewardTask task{Vector::Zero(idx(n_states * n_actions)), "goal(" + std::to_string(state) + ")"};
  task.r.segment(idx(state * n_actions), idx(n_actions)).setOnes();
  return task;
}

RewardTask load_reward_csv(const std::filesystem::path& path, std::size_t n_states,
                           std::size_t n_actions) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read reward file " + path.string());
  RewardTask task{Vector::Zero(idx(n_states * n_actions)), path.stem().string()};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty()) continue;
    std::stringstream row(line);
    std::string f0, f1, f2;
    std::getline(row, f0, ',');
    std::getline(row, f1, ',');
    std::getline(row, f2, ',');
    if (line_no == 1 && trim(f0) == "state_index") continue;
    std::size_t s = 0, a = 0;
    double r = 0.0;
    try {
      s = std::stoul(trim(f0));
      a = std::stoul(trim(f1));
      r = std::stod(trim(f2));
    } catch (const std::exception&) {
      throw std::invalid_argument("malformed reward row " + std::to_string(line_no) + " in " +
                                  path.string());
    }
    if (s >= n_states || a >= n_actions) {
      throw std::invalid_argument("reward row " + std::to_string(line_no) + " is out of range");
    }
    if (!std::isfinite(r)) throw std::invalid_argument("non-finite reward");
    task.r(idx(s * n_actions + a)) = r;
  }
  return task;
}

SuccessorMatrix sr_closed_form(const PolicyOperator& op, double gamma) {
  check_gamma(gamma);
  const Eigen::Index n = op.p_pi.rows();
  const Matrix system = Matrix::Identity(n, n) - gamma * op.p_pi;
  const Eigen::PartialPivLU<Matrix> lu(system);
  Matrix m = lu.solve(Matrix::Identity(n, n));
  Matrix residual = system * m - Matrix::Identity(n, n);
  double worst = residual.cwiseAbs().maxCoeff();
  if (!(worst <= 1e-8)) {
    // One step of iterative refinement before giving up.
    m -= lu.solve(residual);
    residual = system * m - Matrix::Identity(n, n);
    worst = residual.cwiseAbs().maxCoeff();
  }
  if (!(worst <= 1e-8) || !m.allFinite()) {
    throw NumericError("successor solve failed its residual check (" + std::to_string(worst) + ")");
  }
  return {std::move(m), gamma, op.repeat_k, SrSource::exact_closed_form};
}

SuccessorMatrix sr_neumann(const PolicyOperator& op, double gamma, std::size_t horizon) {
  const Eigen::Index n = op.p_pi.rows();
  const Matrix step = gamma * op.p_pi;
  const Matrix eye = Matrix::Identity(n, n);
  // Invariant while scanning the bits of terms = horizon + 1 from the top:
  // sum = sum_{t<m} step^t and power = step^m for the prefix m read so far.
  const std::size_t terms = horizon + 1;
  Matrix sum = Matrix::Zero(n, n);
  Matrix power = eye;
  for (int bit = std::bit_width(terms) - 1; bit >= 0; --bit) {
    sum = sum + power * sum;
    power = power * power;
    if ((terms >> bit) & 1U) {
      sum = eye + step * sum;
      power = step * power;
    }
  }
  return {std::move(sum), gamma, op.repeat_k, SrSource::neumann};
}

double neumann_truncation_bound(double gamma, std::size_t horizon) {
  return std::pow(gamma, static_cast<double>(horizon + 1)) / (1.0 - gamma);
}

double bellman_residual(const SuccessorMatrix& sr, const PolicyOperator& op) {
  const Eigen::Index n = sr.m.rows();
  return (sr.m - Matrix::Identity(n, n) - sr.gamma * op.p_pi * sr.m).cwiseAbs().maxCoeff();
}

Vector q_from_sr(const SuccessorMatrix& sr, const RewardTask& task) {
  if (task.r.size() != sr.m.cols()) throw std::invalid_argument("reward/SR dimension mismatch");
  return sr.m * task.r;
}

Policy greedy_policy(const Vector& q, std::size_t n_states, std::size_t n_actions) {
  if (static_cast<std::size_t>(q.size()) != n_states * n_actions) {
    throw std::invalid_argument("Q vector has the wrong size");
  }
  std::vector<std::size_t> actions(n_states, 0);
  for (std::size_t s = 0; s < n_states; ++s) {
    double best = q(idx(s * n_actions));
    for (std::size_t a = 1; a < n_actions; ++a) {
      const double v = q(idx(s * n_actions + a));
      if (v > best) {
        best = v;
        actions[s] = a;
      }
    }
  }
  return Policy::deterministic(actions, n_actions);
}

OptimalQ optimal_q(const TabularMdp& mdp, const RewardTask& task, double tol,
                   std::size_t max_iters) {
  if (!(tol > 0.0)) throw std::invalid_argument("tol must be positive");
  const std::size_t ns = mdp.n_states();
  const std::size_t na = mdp.n_actions();
  if (static_cast<std::size_t>(task.r.size()) != ns * na) {
    throw std::invalid_argument("reward dimension does not match the MDP");
  }
  const double gamma = mdp.gamma();
  const double threshold = tol * (1.0 - gamma) / gamma;

  Vector q = Vector::Zero(idx(ns * na));
  Vector v = Vector::Zero(idx(ns));
  double update = std::numeric_limits<double>::infinity();
  for (std::size_t it = 1; it <= max_iters; ++it) {
    Vector next(idx(ns * na));
    for (std::size_t a = 0; a < na; ++a) {
      const Vector pv = mdp.transition(a) * v;
      for (std::size_t s = 0; s < ns; ++s) {
        next(idx(s * na + a)) = task.r(idx(s * na + a)) + gamma * pv(idx(s));
      }
    }
    update = (next - q).cwiseAbs().maxCoeff();
    q = std::move(next);
    for (std::size_t s = 0; s < ns; ++s) v(idx(s)) = q.segment(idx(s * na), idx(na)).maxCoeff();
    if (update < threshold) {
      return {q, greedy_policy(q, ns, na), it, update};
    }
  }
  throw ConvergenceError("value iteration did not converge within " + std::to_string(max_iters) +
                             " iterations",
                         update);
}

RewardTask repeat_task(const TabularMdp& mdp, const RewardTask& task, std::size_t k) {
  if (k == 0) throw std::invalid_argument("repeat factor k must be >= 1");
  const std::size_t ns = mdp.n_states();
  const std::size_t na = mdp.n_actions();
  if (static_cast<std::size_t>(task.r.size()) != ns * na) {
    throw std::invalid_argument("reward dimension does not match the MDP");
  }
  RewardTask out{Vector::Zero(task.r.size()), task.name};
  for (std::size_t a = 0; a < na; ++a) {
    Vector ra(idx(ns));
    for (std::size_t s = 0; s < ns; ++s) ra(idx(s)) = task.r(idx(s * na + a));
    Vector acc = Vector::Zero(idx(ns));
    Vector term = ra;
    double discount = 1.0;
    for (std::size_t j = 0; j < k; ++j) {
      acc += discount * term;
      term = mdp.transition(a) * term;
      discount *= mdp.gamma();
    }
    for (std::size_t s = 0; s < ns; ++s) out.r(idx(s * na + a)) = acc(idx(s));
  }
  return out;
}

double repeat_value_error(const TabularMdp& mdp, const RewardTask& task, std::size_t k,
                          double tol) {
  const OptimalQ original = optimal_q(mdp, task, tol);
  const OptimalQ repeated = optimal_q(repeat_mdp(mdp, k), repeat_task(mdp, task, k), tol);
  return (original.q - repeated.q).cwiseAbs().maxCoeff();
}

double effective_discount(double gamma_nominal, std::size_t k) {
  check_gamma(gamma_nominal);
  if (k == 0) throw std::invalid_argument("repeat factor k must be >= 1");
  return std::pow(gamma_nominal, 1.0 / static_cast<double>(k));
}

double nominal_discount(double gamma_effective, std::size_t k) {
  check_gamma(gamma_effective);
  if (k == 0) throw std::invalid_argument("repeat factor k must be >= 1");
  return std::pow(gamma_effective, static_cast<double>(k));
}

}  // namespace srlab
