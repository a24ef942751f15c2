#include "srlab/mdp.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

namespace srlab {

namespace {

Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }

void check_gamma(double gamma) {
  if (!(gamma > 0.0 && gamma < 1.0)) {
    throw std::invalid_argument("gamma must lie strictly inside (0, 1), got " +
                                std::to_string(gamma));
  }
}

}  // namespace

// ── GridLayout ──────────────────────────────────────────────────────────────

bool GridLayout::is_free(std::size_t row, std::size_t col) const {
  return state_of(row, col).has_value();
}

std::optional<std::size_t> GridLayout::state_of(std::size_t row, std::size_t col) const {
  if (row >= height() || col >= width()) return std::nullopt;
  const auto s = state_index_[row * width() + col];
  if (s < 0) return std::nullopt;
  return static_cast<std::size_t>(s);
}

GridLayout parse_layout(std::string_view text) {
  if (text.empty()) throw std::invalid_argument("layout text is empty");

  std::vector<std::string> rows;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string line(text.substr(start, end - start));
    if (!line.empty() && line.back() == '\r') line.pop_back();
    rows.push_back(std::move(line));
    start = end + 1;
  }
  // Only trailing blank lines are tolerated.
  while (!rows.empty() && rows.back().empty()) rows.pop_back();
  if (rows.empty()) throw std::invalid_argument("layout text has no rows");

  const std::size_t width = rows.front().size();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != width) {
      throw std::invalid_argument("layout is not rectangular (row " + std::to_string(r) + ")");
    }
    for (char c : rows[r]) {
      if (c != '#' && c != '.') {
        throw std::invalid_argument(std::string("layout contains unknown character '") + c + "'");
      }
    }
  }

  GridLayout layout;
  layout.rows_ = rows;
  layout.state_index_.assign(rows.size() * width, -1);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      if (rows[r][c] != '.') continue;
      if (r == 0 || c == 0 || r + 1 == rows.size() || c + 1 == width) {
        throw std::invalid_argument("layout border must be walls (free cell at row " +
                                    std::to_string(r) + ", col " + std::to_string(c) + ")");
      }
      layout.state_index_[r * width + c] = static_cast<std::int64_t>(layout.free_cells_.size());
      layout.free_cells_.push_back({r, c});
    }
  }
  if (layout.free_cells_.empty()) throw std::invalid_argument("layout has no free cells");
  return layout;
}

GridLayout load_layout(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read layout file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_layout(buf.str());
}

// ── TabularMdp ──────────────────────────────────────────────────────────────

bool is_row_stochastic(const Matrix& m, double tol) {
  if (!m.allFinite()) return false;
  if ((m.array() < 0.0).any()) return false;
  const Vector sums = m.rowwise().sum();
  return ((sums.array() - 1.0).abs() <= tol).all();
}

TabularMdp::TabularMdp(std::vector<Matrix> per_action, double gamma)
    : per_action_(std::move(per_action)), gamma_(gamma) {
  check_gamma(gamma);
  if (per_action_.empty()) throw std::invalid_argument("MDP needs at least one action");
  n_states_ = static_cast<std::size_t>(per_action_.front().rows());
  if (n_states_ == 0) throw std::invalid_argument("MDP needs at least one state");
  for (std::size_t a = 0; a < per_action_.size(); ++a) {
    const Matrix& p = per_action_[a];
    if (p.rows() != idx(n_states_) || p.cols() != idx(n_states_)) {
      throw std::invalid_argument("transition matrix of action " + std::to_string(a) +
                                  " has the wrong shape");
    }
    if (!is_row_stochastic(p)) {
      throw std::invalid_argument("transition matrix of action " + std::to_string(a) +
                                  " is not row stochastic");
    }
  }
}

TabularMdp build_gridworld(const GridLayout& layout, double gamma, double slip) {
  if (!(slip >= 0.0 && slip < 1.0)) throw std::invalid_argument("slip must lie in [0, 1)");
  const std::size_t n = layout.n_free();
  // up, down, left, right
  constexpr int dr[kGridActions] = {-1, 1, 0, 0};
  constexpr int dc[kGridActions] = {0, 0, -1, 1};

  auto target = [&](std::size_t s, std::size_t move) {
    const Cell c = layout.cell_of(s);
    const auto r = static_cast<std::size_t>(static_cast<long>(c.row) + dr[move]);
    const auto col = static_cast<std::size_t>(static_cast<long>(c.col) + dc[move]);
    return layout.state_of(r, col).value_or(s);
  };

  std::vector<Matrix> per_action(kGridActions, Matrix::Zero(idx(n), idx(n)));
  for (std::size_t a = 0; a < kGridActions; ++a) {
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t move = 0; move < kGridActions; ++move) {
        const double p = (move == a) ? 1.0 - slip : slip / 3.0;
        if (p == 0.0) continue;
        per_action[a](idx(s), idx(target(s, move))) += p;
      }
    }
  }
  return TabularMdp(std::move(per_action), gamma);
}

// ── Policy ──────────────────────────────────────────────────────────────────

Policy::Policy(Matrix probs) : probs_(std::move(probs)) {
  if (probs_.rows() == 0 || probs_.cols() == 0) throw std::invalid_argument("empty policy");
  if (!is_row_stochastic(probs_, 1e-10)) throw std::invalid_argument("policy is not row stochastic");
}

Policy Policy::uniform(std::size_t n_states, std::size_t n_actions) {
  return Policy(Matrix::Constant(idx(n_states), idx(n_actions), 1.0 / static_cast<double>(n_actions)));
}

Policy Policy::deterministic(const std::vector<std::size_t>& actions, std::size_t n_actions) {
  Matrix probs = Matrix::Zero(idx(actions.size()), idx(n_actions));
  for (std::size_t s = 0; s < actions.size(); ++s) {
    if (actions[s] >= n_actions) throw std::invalid_argument("action index out of range");
    probs(idx(s), idx(actions[s])) = 1.0;
  }
  return Policy(std::move(probs));
}

// ── Permutation ─────────────────────────────────────────────────────────────

Permutation::Permutation(std::vector<std::size_t> map) : map_(std::move(map)) {
  std::vector<bool> seen(map_.size(), false);
  for (std::size_t v : map_) {
    if (v >= map_.size() || seen[v]) throw std::invalid_argument("index map is not a permutation");
    seen[v] = true;
  }
}

Permutation Permutation::transpose() const {
  std::vector<std::size_t> inv(map_.size());
  for (std::size_t i = 0; i < map_.size(); ++i) inv[map_[i]] = i;
  return Permutation(std::move(inv));
}

Permutation Permutation::compose(const Permutation& other) const {
  if (other.size() != size()) throw std::invalid_argument("permutation size mismatch");
  // (A B x)[i] = (B x)[A[i]] = x[B[A[i]]]
  std::vector<std::size_t> out(map_.size());
  for (std::size_t i = 0; i < map_.size(); ++i) out[i] = other.map_[map_[i]];
  return Permutation(std::move(out));
}

bool Permutation::is_identity() const {
  for (std::size_t i = 0; i < map_.size(); ++i) {
    if (map_[i] != i) return false;
  }
  return true;
}

Matrix Permutation::apply_rows(const Matrix& m) const {
  if (static_cast<std::size_t>(m.rows()) != map_.size()) {
    throw std::invalid_argument("permutation/matrix size mismatch");
  }
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < map_.size(); ++i) out.row(idx(i)) = m.row(idx(map_[i]));
  return out;
}

Matrix Permutation::to_dense() const {
  Matrix k = Matrix::Zero(idx(map_.size()), idx(map_.size()));
  for (std::size_t i = 0; i < map_.size(); ++i) k(idx(i), idx(map_[i])) = 1.0;
  return k;
}

Permutation commutation_matrix(std::size_t n_states, std::size_t n_actions) {
  std::vector<std::size_t> map(n_states * n_actions);
  for (std::size_t s = 0; s < n_states; ++s) {
    for (std::size_t a = 0; a < n_actions; ++a) map[s * n_actions + a] = a * n_states + s;
  }
  return Permutation(std::move(map));
}

// ── Operators ───────────────────────────────────────────────────────────────

Matrix matrix_power(const Matrix& m, std::size_t k) {
  Matrix result = Matrix::Identity(m.rows(), m.cols());
  Matrix base = m;
  while (k > 0) {
    if (k & 1U) result = result * base;
    k >>= 1U;
    if (k > 0) base = base * base;
  }
  return result;
}

double PolicyOperator::factorization_residual() const {
  return (p_pi - p_rep_k * pi_block).cwiseAbs().maxCoeff();
}

namespace {

void check_policy(const TabularMdp& mdp, const Policy& policy) {
  if (policy.n_states() != mdp.n_states() || policy.n_actions() != mdp.n_actions()) {
    throw std::invalid_argument("policy dimensions do not match the MDP");
  }
}

Matrix make_pi_block(const Policy& policy) {
  const std::size_t ns = policy.n_states();
  const std::size_t na = policy.n_actions();
  Matrix block = Matrix::Zero(idx(ns), idx(ns * na));
  for (std::size_t s = 0; s < ns; ++s) {
    block.block(idx(s), idx(s * na), 1, idx(na)) = policy.probs().row(idx(s));
  }
  return block;
}

Matrix make_p_rep(const TabularMdp& mdp, std::size_t k, const Permutation& commutation) {
  const std::size_t ns = mdp.n_states();
  const std::size_t na = mdp.n_actions();
  Matrix stacked(idx(ns * na), idx(ns));
  for (std::size_t a = 0; a < na; ++a) {
    stacked.middleRows(idx(a * ns), idx(ns)) = matrix_power(mdp.transition(a), k);
  }
  return commutation.apply_rows(stacked);
}

}  // namespace

PolicyOperator policy_operator(const TabularMdp& mdp, const Policy& policy) {
  check_policy(mdp, policy);
  const std::size_t ns = mdp.n_states();
  const std::size_t na = mdp.n_actions();
  PolicyOperator op;
  op.repeat_k = 1;
  op.commutation = commutation_matrix(ns, na);
  op.pi_block = make_pi_block(policy);
  op.p_rep_k = make_p_rep(mdp, 1, op.commutation);
  op.p_pi = Matrix::Zero(idx(ns * na), idx(ns * na));
  for (std::size_t s = 0; s < ns; ++s) {
    for (std::size_t a = 0; a < na; ++a) {
      const Matrix& p = mdp.transition(a);
      for (std::size_t s2 = 0; s2 < ns; ++s2) {
        const double pt = p(idx(s), idx(s2));
        if (pt == 0.0) continue;
        for (std::size_t a2 = 0; a2 < na; ++a2) {
          op.p_pi(idx(s * na + a), idx(s2 * na + a2)) = pt * policy(s2, a2);
        }
      }
    }
  }
  return op;
}

PolicyOperator repeat_operator(const TabularMdp& mdp, const Policy& policy, std::size_t k) {
  if (k == 0) throw std::invalid_argument("repeat factor k must be >= 1");
  check_policy(mdp, policy);
  PolicyOperator op;
  op.repeat_k = k;
  op.commutation = commutation_matrix(mdp.n_states(), mdp.n_actions());
  op.pi_block = make_pi_block(policy);
  op.p_rep_k = make_p_rep(mdp, k, op.commutation);
  op.p_pi = op.p_rep_k * op.pi_block;
  return op;
}

TabularMdp repeat_mdp(const TabularMdp& mdp, std::size_t k) {
  if (k == 0) throw std::invalid_argument("repeat factor k must be >= 1");
  if (k == 1) return mdp;
  std::vector<Matrix> powered;
  powered.reserve(mdp.n_actions());
  for (const Matrix& p : mdp.transitions()) {
    Matrix pk = matrix_power(p, k);
    // Renormalise rows: repeated products drift from 1 by a few ulps.
    pk.array().colwise() /= pk.rowwise().sum().array();
    powered.push_back(std::move(pk));
  }
  return TabularMdp(std::move(powered), std::pow(mdp.gamma(), static_cast<double>(k)));
}

// ── Random instances ────────────────────────────────────────────────────────

MdpClass parse_mdp_class(std::string_view name) {
  if (name == "general") return MdpClass::general;
  if (name == "doubly_stochastic") return MdpClass::doubly_stochastic;
  if (name == "lazy") return MdpClass::lazy;
  throw std::invalid_argument("unknown MDP class '" + std::string(name) + "'");
}

std::string to_string(MdpClass cls) {
  switch (cls) {
    case MdpClass::general: return "general";
    case MdpClass::doubly_stochastic: return "doubly_stochastic";
    case MdpClass::lazy: return "lazy";
  }
  return "unknown";
}

namespace {

std::vector<std::size_t> random_permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.index(i)]);
  return perm;
}

Matrix random_general(std::size_t n, Rng& rng) {
  Matrix p(idx(n), idx(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) p(idx(i), idx(j)) = rng.exponential();
    p.row(idx(i)) /= p.row(idx(i)).sum();
  }
  return p;
}

Matrix random_doubly_stochastic(std::size_t n, Rng& rng) {
  const std::size_t terms = n + 1;
  std::vector<double> w(terms);
  double total = 0.0;
  for (double& x : w) total += (x = rng.exponential());
  Matrix p = Matrix::Zero(idx(n), idx(n));
  for (std::size_t t = 0; t < terms; ++t) {
    const auto perm = random_permutation(n, rng);
    for (std::size_t i = 0; i < n; ++i) p(idx(i), idx(perm[i])) += w[t] / total;
  }
  return p;
}

}  // namespace

TabularMdp random_mdp(std::size_t n_states, std::size_t n_actions, std::uint64_t seed,
                      MdpClass cls, double gamma) {
  if (n_states == 0 || n_actions == 0) throw std::invalid_argument("random_mdp needs sizes >= 1");
  Rng rng(seed);
  std::vector<Matrix> per_action;
  per_action.reserve(n_actions);
  for (std::size_t a = 0; a < n_actions; ++a) {
    switch (cls) {
      case MdpClass::general:
        per_action.push_back(random_general(n_states, rng));
        break;
      case MdpClass::doubly_stochastic:
        per_action.push_back(random_doubly_stochastic(n_states, rng));
        break;
      case MdpClass::lazy: {
        const Matrix ds = random_doubly_stochastic(n_states, rng);
        per_action.push_back(0.5 * Matrix::Identity(idx(n_states), idx(n_states)) + 0.5 * ds);
        break;
      }
    }
  }
  return TabularMdp(std::move(per_action), gamma);
}

}  // namespace srlab
