#pragma once
// Experiment driver behind the srlab command line: JSON configs, sweep cells
// executed on a small work queue, and CSV outputs whose first row names the
// schema.

#include "srlab/fb.hpp"
#include "srlab/mdp.hpp"
#include "srlab/spectral.hpp"
#include "srlab/successor.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

namespace srlab {

// Exit codes of every command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitViolation = 3;
inline constexpr int kExitDivergence = 4;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EnvironmentSpec {
  std::optional<std::filesystem::path> layout;  // gridworld when set
  double slip = 0.0;
  // Random MDP otherwise.
  std::size_t n_states = 0;
  std::size_t n_actions = 0;
  MdpClass cls = MdpClass::general;
  std::uint64_t seed = 0;
};

enum class PolicyKind { uniform, greedy_of_task, file };

struct TrainingSpec {
  std::size_t steps = 10'000;
  double lr_f = 1e-5;
  double lr_b = 1e-6;
  double ortho_coef = 1.0;
  std::size_t anchors = 8;
  PolicyFamily family = PolicyFamily::greedy;
  std::size_t target_refresh = 100;
  std::size_t z_hold = 10;
  std::size_t trace_every = 100;
};

struct AuditSpec {
  std::vector<MdpClass> classes{MdpClass::doubly_stochastic, MdpClass::lazy, MdpClass::general};
  std::size_t n_states = 6;
  std::size_t n_actions = 3;
  bool gap_audit = true;
  std::size_t gap_max_states = 6;
  std::size_t gap_max_actions = 3;
  std::vector<std::uint64_t> gap_seeds;  // defaults to 0..49
  std::vector<std::size_t> gap_ks{1, 2};
  double gap_gamma = 0.9;
};

struct HeatmapSpec {
  std::string source = "sr_row";  // sr_row | q_values
  std::string anchor;             // cell(r,c) or pair(i); defaults to the task goal
  std::optional<std::filesystem::path> fb_artifact;
};

struct ExperimentConfig {
  std::optional<EnvironmentSpec> environment;
  PolicyKind policy = PolicyKind::uniform;
  std::optional<std::filesystem::path> policy_file;
  std::vector<double> gammas;
  std::vector<std::size_t> ks;
  std::vector<std::size_t> ds{100};
  std::string task;  // goal(r,c), goal(state), zero, or a reward CSV path
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path output_dir = "out";
  TrainingSpec training;
  AuditSpec audit;
  HeatmapSpec heatmap;

  void validate() const;
};

// Parses and validates a config. Relative paths resolve against base_dir.
// Unknown keys, wrong types and invalid values raise ConfigError.
ExperimentConfig parse_config(const std::string& json_text, const std::filesystem::path& base_dir);
ExperimentConfig load_config(const std::filesystem::path& path);

struct RunOptions {
  unsigned threads = 1;
  std::ostream* log = nullptr;  // progress messages, optional
};

// Loaded environment: the MDP plus the grid it came from, if any.
struct Environment {
  TabularMdp mdp;
  std::optional<GridLayout> layout;
};
Environment build_environment(const ExperimentConfig& config, double gamma);
RewardTask build_task(const ExperimentConfig& config, const Environment& env);
Policy build_policy(const ExperimentConfig& config, const Environment& env, double gamma, std::size_t k);

// Each command writes into config.output_dir and returns an exit code.
int cmd_spectrum_sweep(const ExperimentConfig& config, const RunOptions& options);
int cmd_ablation(const ExperimentConfig& config, const RunOptions& options);
int cmd_bounds_audit(const ExperimentConfig& config, const RunOptions& options);
int cmd_heatmap(const ExperimentConfig& config, const RunOptions& options);
int cmd_train_fb(const ExperimentConfig& config, const RunOptions& options);

// Maps a heatmap over free cells back onto the grid, NaN on walls.
Matrix grid_values(const GridLayout& layout, const Vector& per_state);

// Runs job(i) for i in [0, n) on up to `threads` workers. Results come back in
// index order; the first failing index rethrows after all workers finish.
template <class T>
std::vector<T> run_jobs(std::size_t n, unsigned threads, const std::function<T(std::size_t)>& job) {
  std::vector<std::optional<T>> slots(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        slots[i].emplace(job(i));
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const unsigned count = std::max(1U, std::min<unsigned>(threads, static_cast<unsigned>(n)));
  if (count == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < count; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  std::vector<T> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (errors[i]) std::rethrow_exception(errors[i]);
    out.push_back(std::move(*slots[i]));
  }
  return out;
}

// Fixed-precision number formatting shared by every CSV writer.
std::string fmt(double value);

}  // namespace srlab
