#pragma once
// Small fixtures and brute-force oracles shared by the unit tests.

#include "srlab/mdp.hpp"
#include "srlab/successor.hpp"

#include <filesystem>
#include <string>

namespace testing {

using srlab::Matrix;
using srlab::Vector;

inline std::filesystem::path data_path(const std::string& name) {
  return std::filesystem::path(SRLAB_TEST_DATA_DIR) / name;
}

// Two states, every action swaps them.
inline srlab::TabularMdp swap_chain(std::size_t n_actions, double gamma) {
  Matrix swap(2, 2);
  swap << 0, 1, 1, 0;
  return srlab::TabularMdp(std::vector<Matrix>(n_actions, swap), gamma);
}

// 0.5 I + 0.5 swap under a single action.
inline srlab::TabularMdp lazy_swap(double gamma) {
  Matrix p(2, 2);
  p << 0.5, 0.5, 0.5, 0.5;
  return srlab::TabularMdp({p}, gamma);
}

// p_pi by enumerating every entry from its definition.
inline Matrix enumerate_p_pi(const srlab::TabularMdp& mdp, const srlab::Policy& pi) {
  const std::size_t ns = mdp.n_states(), na = mdp.n_actions();
  Matrix out(ns * na, ns * na);
  for (std::size_t s = 0; s < ns; ++s)
    for (std::size_t a = 0; a < na; ++a)
      for (std::size_t t = 0; t < ns; ++t)
        for (std::size_t b = 0; b < na; ++b)
          out(s * na + a, t * na + b) = mdp.transition(a)(s, t) * pi(t, b);
  return out;
}

// Iterative policy evaluation Q <- r + gamma P Q until the update is tiny.
inline Vector policy_evaluation(const Matrix& p_pi, const Vector& r, double gamma) {
  Vector q = Vector::Zero(r.size());
  for (int it = 0; it < 200000; ++it) {
    Vector next = r + gamma * p_pi * q;
    const double delta = (next - q).cwiseAbs().maxCoeff();
    q = next;
    if (delta < 1e-13) break;
  }
  return q;
}

}  // namespace testing
