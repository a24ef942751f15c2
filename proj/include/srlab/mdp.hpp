#pragma once
// Finite reward-free MDPs, policies, and the policy-induced transition
// operators on the state-action product space.
//
// State-action pairs are indexed state-major everywhere: (s, a) -> s*|A| + a.
// The commutation permutation is the only object that speaks action-major
// order (a, s) -> a*|S| + s.

#include "srlab/core.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace srlab {

struct Cell {
  std::size_t row = 0;
  std::size_t col = 0;
  bool operator==(const Cell&) const = default;
};

// Rectangular grid of '#' walls and '.' free cells. Free cells are numbered
// row-major; that number is the MDP state index.
class GridLayout {
 public:
  GridLayout() = default;

  std::size_t height() const { return rows_.size(); }
  std::size_t width() const { return rows_.empty() ? 0 : rows_.front().size(); }
  std::size_t n_free() const { return free_cells_.size(); }
  const std::vector<std::string>& rows() const { return rows_; }

  bool is_free(std::size_t row, std::size_t col) const;
  // State index of a free cell, nullopt for walls and out-of-range cells.
  std::optional<std::size_t> state_of(std::size_t row, std::size_t col) const;
  Cell cell_of(std::size_t state) const { return free_cells_.at(state); }

 private:
  friend GridLayout parse_layout(std::string_view text);

  std::vector<std::string> rows_;
  std::vector<Cell> free_cells_;
  std::vector<std::int64_t> state_index_;  // height*width, -1 on walls
};

// Throws std::invalid_argument on non-rectangular input, unknown characters,
// open borders, or a grid without free cells. A trailing newline is optional.
GridLayout parse_layout(std::string_view text);
GridLayout load_layout(const std::filesystem::path& path);

class TabularMdp {
 public:
  // Validates that every per-action matrix is square, finite and row
  // stochastic and that gamma lies strictly inside (0, 1).
  TabularMdp(std::vector<Matrix> per_action, double gamma);

  std::size_t n_states() const { return n_states_; }
  std::size_t n_actions() const { return per_action_.size(); }
  std::size_t n_pairs() const { return n_states_ * per_action_.size(); }
  double gamma() const { return gamma_; }
  const Matrix& transition(std::size_t action) const { return per_action_.at(action); }
  const std::vector<Matrix>& transitions() const { return per_action_; }

  TabularMdp with_gamma(double gamma) const { return TabularMdp(per_action_, gamma); }

 private:
  std::vector<Matrix> per_action_;
  std::size_t n_states_ = 0;
  double gamma_ = 0.0;
};

// Action order of every gridworld.
enum class Move : std::size_t { up = 0, down = 1, left = 2, right = 3 };
inline constexpr std::size_t kGridActions = 4;

// Four-action gridworld. The intended move succeeds with probability
// 1 - slip, each of the other three moves happens with probability slip/3.
// Moves into walls leave the agent in place.
TabularMdp build_gridworld(const GridLayout& layout, double gamma, double slip = 0.0);

// Row-stochastic n_states x n_actions matrix of action probabilities.
class Policy {
 public:
  explicit Policy(Matrix probs);

  static Policy uniform(std::size_t n_states, std::size_t n_actions);
  static Policy deterministic(const std::vector<std::size_t>& actions, std::size_t n_actions);

  std::size_t n_states() const { return static_cast<std::size_t>(probs_.rows()); }
  std::size_t n_actions() const { return static_cast<std::size_t>(probs_.cols()); }
  const Matrix& probs() const { return probs_; }
  double operator()(std::size_t state, std::size_t action) const {
    return probs_(static_cast<Eigen::Index>(state), static_cast<Eigen::Index>(action));
  }

 private:
  Matrix probs_;
};

// A permutation stored as an index map: (P x)[i] = x[map[i]], i.e. row i of
// the permuted matrix is row map[i] of the input.
class Permutation {
 public:
  explicit Permutation(std::vector<std::size_t> map);

  std::size_t size() const { return map_.size(); }
  std::size_t operator[](std::size_t i) const { return map_[i]; }
  const std::vector<std::size_t>& map() const { return map_; }

  // The transpose, which for a permutation is its inverse.
  Permutation transpose() const;
  // Composition: (*this) * other, as matrices.
  Permutation compose(const Permutation& other) const;
  bool is_identity() const;

  Matrix apply_rows(const Matrix& m) const;
  // Materialised 0/1 matrix; used only by audits.
  Matrix to_dense() const;

 private:
  std::vector<std::size_t> map_;
};

// K such that (K X)[s*|A|+a] = X[a*|S|+s]: reorders an action-major stack of
// per-action blocks into state-major order.
Permutation commutation_matrix(std::size_t n_states, std::size_t n_actions);

struct PolicyOperator {
  Matrix p_pi;      // |SA| x |SA|, row-stochastic
  Matrix p_rep_k;   // |SA| x |S|, K * stack(P_a^k)
  Matrix pi_block;  // |S| x |SA|, block diagonal of policy rows
  Permutation commutation{std::vector<std::size_t>{}};
  std::size_t repeat_k = 1;

  // max |p_pi - p_rep_k * pi_block|
  double factorization_residual() const;
};

// Direct construction: p_pi[(s,a),(s',a')] = P(s'|s,a) * pi(a'|s').
PolicyOperator policy_operator(const TabularMdp& mdp, const Policy& policy);

// Factorised construction p_pi = (K * stack(P_a^k)) * pi_block.
PolicyOperator repeat_operator(const TabularMdp& mdp, const Policy& policy, std::size_t k);

// Replaces every P_a by P_a^k and gamma by gamma^k.
TabularMdp repeat_mdp(const TabularMdp& mdp, std::size_t k);

enum class MdpClass { general, doubly_stochastic, lazy };
MdpClass parse_mdp_class(std::string_view name);
std::string to_string(MdpClass cls);

// Seeded random instances. general: Dirichlet(1) rows; doubly_stochastic:
// Birkhoff mixture of n+1 random permutations; lazy: 0.5 I + 0.5 * (doubly
// stochastic).
TabularMdp random_mdp(std::size_t n_states, std::size_t n_actions, std::uint64_t seed,
                      MdpClass cls, double gamma = 0.9);

bool is_row_stochastic(const Matrix& m, double tol = kStochasticTol);
Matrix matrix_power(const Matrix& m, std::size_t k);

}  // namespace srlab
