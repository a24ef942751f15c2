#pragma once
// Forward-backward factorizations of the SR at tabular scale: the SVD oracle,
// reward embedding and Q read-out, realization error, a bootstrapped
// gradient learner and the optimality-gap report.

#include "srlab/core.hpp"
#include "srlab/mdp.hpp"
#include "srlab/successor.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace srlab {

struct FbRepresentation {
  std::vector<Matrix> f_tables;  // one |SA| x d table per z anchor
  Matrix b_table;                // |SA| x d, shared by all anchors
  std::size_t d = 0;
  std::vector<Vector> z_anchors;  // same length as f_tables

  std::size_t n_pairs() const { return static_cast<std::size_t>(b_table.rows()); }
  // Index of the anchor closest to z in Euclidean distance (lowest index on ties).
  std::size_t nearest_anchor(const Vector& z) const;
  // M_hat = F_z B^T
  Matrix approximation(std::size_t z_index) const;
  void validate() const;
};

// Balanced rank-d truncation of the SR: F = U sqrt(S), B = V sqrt(S), with a
// single zero anchor.
FbRepresentation fb_from_svd(const SuccessorMatrix& sr, std::size_t d);

// ||F_z B^T - M||_2 - sigma_{d+1}(M)
double realization_error(const FbRepresentation& fb, std::size_t z_index, const SuccessorMatrix& sr);

// z_R = B^T r
Vector reward_embedding(const FbRepresentation& fb, const RewardTask& task);

// Q_hat = F_z z
Vector fb_q(const FbRepresentation& fb, std::size_t z_index, const Vector& z);

// pi_z(s) = argmax_a F_z(s,a)^T z, lowest index on ties.
Policy greedy_policy_from_f(const FbRepresentation& fb, std::size_t z_index, const Vector& z,
                            std::size_t n_states, std::size_t n_actions);

// ||F_z B^T - I - gamma P F_z B^T||_F / |SA|
double fb_bellman_error(const FbRepresentation& fb, std::size_t z_index, const PolicyOperator& op,
                        double gamma);

// Which policy each anchor's table models during training.
enum class PolicyFamily { uniform, greedy };
PolicyFamily parse_policy_family(std::string_view name);
std::string to_string(PolicyFamily family);

struct FbTrainConfig {
  std::size_t d = 100;
  double gamma = 0.95;  // nominal discount of the repeat MDP
  std::size_t k = 1;
  std::size_t steps = 10'000;
  double lr_f = 1e-5;
  double lr_b = 1e-6;
  std::uint64_t seed = 0;
  double ortho_coef = 1.0;
  std::size_t n_anchors = 8;        // size of the fixed z dictionary
  std::size_t target_refresh = 100;  // steps between target-copy refreshes
  std::size_t z_hold = 10;           // steps a sampled z is kept
  double dictionary_ratio = 0.5;     // share of z draws taken from the dictionary
  PolicyFamily family = PolicyFamily::greedy;
  std::size_t trace_every = 100;
  double divergence_limit = 1e6;
};

struct TracePoint {
  std::size_t step = 0;
  double loss = 0.0;
  double bellman_error = 0.0;  // averaged over anchors under the family's policies
};

struct FbTrainResult {
  FbRepresentation fb;
  std::vector<TracePoint> trace;
  bool diverged = false;
  std::size_t steps_run = 0;
};

// Raised when the training loss exceeds the divergence limit. Carries the
// trace recorded so far.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, FbTrainResult partial)
      : std::runtime_error(what), partial_(std::move(partial)) {}
  const FbTrainResult& partial() const noexcept { return partial_; }

 private:
  FbTrainResult partial_;
};

// Policy modelled by anchor z_index of a trained representation.
Policy anchor_policy(const FbRepresentation& fb, std::size_t z_index, PolicyFamily family,
                     std::size_t n_states, std::size_t n_actions);

// Minimises ||F_z B^T - (I + gamma P~ F_bar_z B^T)||_F^2 / |SA|^2 plus
// ortho_coef * ||B^T B / |SA| - I||_F^2 with Adam on the k-repeat dynamics.
// The target is gradient-free and F_bar is refreshed every target_refresh steps.
// Deterministic given the config.
FbTrainResult fb_td_train(const TabularMdp& mdp, const FbTrainConfig& config);

struct GapReport {
  double eps_real = 0.0;
  double eps_repeat = 0.0;
  double sigma_d_plus_1 = 0.0;
  double sigma_d_plus_1_rep = 0.0;  // sigma_{d+1} of the per-action union spectrum
  double approx_norm = 0.0;         // ||M_hat - M||_2
  double measured_gap = 0.0;        // ||Q_hat - Q*||_inf, original MDP
  double repeat_gap = 0.0;          // ||Q_hat - Q~*||_inf, repeat MDP
  double theorem1_rhs = 0.0;
  double lemma_rhs = 0.0;
  bool lemma_vacuous = false;
  bool theorem1_covered = false;  // repeat_gap <= theorem1_rhs
  bool lemma_covered = false;     // measured_gap <= lemma_rhs
  double certificate_lhs = 0.0;   // ||(M_hat - M) r||_inf
  double certificate_rhs = 0.0;   // ||M_hat - M||_2 ||r||_2
  bool certificate_holds = true;
};

// Gap ledger for an FB trained on the k-repeat MDP with nominal discount gamma.
// The original MDP runs at gamma^(1/k) so that its k-repeat has discount gamma,
// and the FB sees the accumulated k-step reward. M is the SR of the greedy
// policy pi_{z_R} in the repeat MDP.
GapReport optimality_gap_report(const TabularMdp& mdp, const RewardTask& task,
                                const FbRepresentation& fb, std::size_t z_index, std::size_t k,
                                double gamma, std::size_t d, double tol = 1e-10);

// JSON artifact with every table stored at full precision.
void save_fb(const FbRepresentation& fb, const std::filesystem::path& path);
FbRepresentation load_fb(const std::filesystem::path& path);

}  // namespace srlab
