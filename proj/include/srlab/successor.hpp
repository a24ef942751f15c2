#pragma once
// Successor representations over state-action pairs, Q-functions derived from
// them, optimal Q by value iteration, and the action-repeat value error.

#include "srlab/core.hpp"
#include "srlab/mdp.hpp"

#include <filesystem>
#include <string>

namespace srlab {

enum class SrSource { exact_closed_form, neumann, fb_factorized };

struct SuccessorMatrix {
  Matrix m;  // |SA| x |SA|, rows = start pair, columns = occupied pair
  double gamma = 0.0;
  std::size_t repeat_k = 1;
  SrSource source = SrSource::exact_closed_form;
};

struct RewardTask {
  Vector r;  // one entry per state-action pair, state-major
  std::string name;
};

// Reward 1 on every action at `state`, 0 elsewhere.
RewardTask goal_task(std::size_t n_states, std::size_t n_actions, std::size_t state);

// CSV with columns state_index, action_index, reward (optional header row).
// Pairs that do not appear get reward 0.
RewardTask load_reward_csv(const std::filesystem::path& path, std::size_t n_states,
                           std::size_t n_actions);

// Solves (I - gamma P) M = I by LU and checks the residual
// max|(I - gamma P) M - I| <= 1e-8. Throws NumericError if the check fails.
SuccessorMatrix sr_closed_form(const PolicyOperator& op, double gamma);

// Partial sum sum_{t=0..horizon} gamma^t P^t, evaluated with O(log horizon)
// matrix products. Each row falls short of 1/(1-gamma) by exactly
// gamma^(horizon+1)/(1-gamma).
SuccessorMatrix sr_neumann(const PolicyOperator& op, double gamma, std::size_t horizon);
double neumann_truncation_bound(double gamma, std::size_t horizon);

// max|M - I - gamma P M|
double bellman_residual(const SuccessorMatrix& sr, const PolicyOperator& op);

Vector q_from_sr(const SuccessorMatrix& sr, const RewardTask& task);

struct OptimalQ {
  Vector q;
  Policy greedy;
  std::size_t iterations = 0;
  double last_update = 0.0;
};

// Greedy policy of a Q vector; ties go to the lowest action index.
Policy greedy_policy(const Vector& q, std::size_t n_states, std::size_t n_actions);

// Value iteration on state-action values. Stops once the sup-norm update is
// below tol*(1-gamma)/gamma, so the returned Q is within tol of Q*.
// Throws ConvergenceError after max_iters sweeps.
OptimalQ optimal_q(const TabularMdp& mdp, const RewardTask& task, double tol = 1e-10,
                   std::size_t max_iters = 1'000'000);

// Reward of the k-repeat MDP: discounted reward collected while the same
// action is executed k times, r_k(s,a) = sum_{j<k} gamma^j (P_a^j r_a)(s).
RewardTask repeat_task(const TabularMdp& mdp, const RewardTask& task, std::size_t k);

// || Q* - Q~* ||_inf where Q~* solves repeat_mdp(mdp, k) with repeat_task.
double repeat_value_error(const TabularMdp& mdp, const RewardTask& task, std::size_t k,
                          double tol = 1e-10);

// gamma_eff = gamma^(1/k) and its inverse.
double effective_discount(double gamma_nominal, std::size_t k);
double nominal_discount(double gamma_effective, std::size_t k);

}  // namespace srlab
