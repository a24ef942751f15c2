#include "srlab/harness.hpp"

#include "json.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <regex>
#include <set>
#include <sstream>

#ifndef SRLAB_DATA_DIR
#define SRLAB_DATA_DIR ""
#endif

namespace srlab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }

// ── Config parsing ──────────────────────────────────────────────────────────

void check_keys(const json& obj, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& item : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), item.key()) == allowed.end()) {
      throw ConfigError("unknown key '" + item.key() + "' in " + where);
    }
  }
}

template <class T>
T get_as(const json& value, const std::string& where) {
  try {
    return value.get<T>();
  } catch (const json::exception&) {
    throw ConfigError("wrong type for " + where);
  }
}

std::size_t get_count(const json& value, const std::string& where) {
  if (!value.is_number_integer() || value.get<long long>() < 0) {
    throw ConfigError(where + " must be a non-negative integer");
  }
  return value.get<std::size_t>();
}

template <class T>
std::vector<T> get_list(const json& value, const std::string& where) {
  if (!value.is_array()) throw ConfigError(where + " must be a list");
  std::vector<T> out;
  for (const auto& v : value) {
    if constexpr (std::is_integral_v<T>) {
      out.push_back(static_cast<T>(get_count(v, where)));
    } else {
      out.push_back(get_as<T>(v, where));
    }
  }
  return out;
}

fs::path resolve(const fs::path& p, const fs::path& base) {
  if (p.is_absolute()) return p;
  const fs::path local = base / p;
  if (fs::exists(local)) return local;
  const fs::path data = fs::path(SRLAB_DATA_DIR) / p;
  if (!std::string(SRLAB_DATA_DIR).empty() && fs::exists(data)) return data;
  return local;
}

bool looks_like_spec(const std::string& s) {
  return s == "zero" || s.rfind("goal(", 0) == 0;
}

EnvironmentSpec parse_environment(const json& value, const fs::path& base) {
  EnvironmentSpec env;
  if (value.is_string()) {
    env.layout = resolve(value.get<std::string>(), base);
    return env;
  }
  check_keys(value, {"layout", "slip", "random"}, "environment");
  if (value.contains("layout") == value.contains("random")) {
    throw ConfigError("environment needs exactly one of 'layout' or 'random'");
  }
  if (value.contains("layout")) {
    env.layout = resolve(get_as<std::string>(value["layout"], "environment.layout"), base);
    if (value.contains("slip")) env.slip = get_as<double>(value["slip"], "environment.slip");
    return env;
  }
  if (value.contains("slip")) throw ConfigError("'slip' applies to layouts only");
  const json& r = value["random"];
  check_keys(r, {"n_states", "n_actions", "class", "seed"}, "environment.random");
  if (!r.contains("n_states") || !r.contains("n_actions")) {
    throw ConfigError("environment.random needs n_states and n_actions");
  }
  env.n_states = get_count(r["n_states"], "environment.random.n_states");
  env.n_actions = get_count(r["n_actions"], "environment.random.n_actions");
  if (r.contains("class")) {
    try {
      env.cls = parse_mdp_class(get_as<std::string>(r["class"], "environment.random.class"));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  if (r.contains("seed")) env.seed = get_count(r["seed"], "environment.random.seed");
  return env;
}

void parse_training(const json& value, TrainingSpec& t) {
  check_keys(value,
             {"steps", "lr_f", "lr_b", "ortho_coef", "anchors", "family", "target_refresh", "z_hold",
              "trace_every"},
             "training");
  if (value.contains("steps")) t.steps = get_count(value["steps"], "training.steps");
  if (value.contains("lr_f")) t.lr_f = get_as<double>(value["lr_f"], "training.lr_f");
  if (value.contains("lr_b")) t.lr_b = get_as<double>(value["lr_b"], "training.lr_b");
  if (value.contains("ortho_coef")) t.ortho_coef = get_as<double>(value["ortho_coef"], "training.ortho_coef");
  if (value.contains("anchors")) t.anchors = get_count(value["anchors"], "training.anchors");
  if (value.contains("family")) {
    try {
      t.family = parse_policy_family(get_as<std::string>(value["family"], "training.family"));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  if (value.contains("target_refresh")) t.target_refresh = get_count(value["target_refresh"], "training.target_refresh");
  if (value.contains("z_hold")) t.z_hold = get_count(value["z_hold"], "training.z_hold");
  if (value.contains("trace_every")) t.trace_every = get_count(value["trace_every"], "training.trace_every");
}

void parse_audit(const json& value, AuditSpec& a) {
  check_keys(value,
             {"classes", "n_states", "n_actions", "gap_audit", "gap_max_states", "gap_max_actions", "gap_seeds",
              "gap_ks", "gap_gamma"},
             "audit");
  if (value.contains("classes")) {
    a.classes.clear();
    for (const auto& name : get_list<std::string>(value["classes"], "audit.classes")) {
      try {
        a.classes.push_back(parse_mdp_class(name));
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
      }
    }
  }
  if (value.contains("n_states")) a.n_states = get_count(value["n_states"], "audit.n_states");
  if (value.contains("n_actions")) a.n_actions = get_count(value["n_actions"], "audit.n_actions");
  if (value.contains("gap_audit")) a.gap_audit = get_as<bool>(value["gap_audit"], "audit.gap_audit");
  if (value.contains("gap_max_states")) a.gap_max_states = get_count(value["gap_max_states"], "audit.gap_max_states");
  if (value.contains("gap_max_actions")) a.gap_max_actions = get_count(value["gap_max_actions"], "audit.gap_max_actions");
  if (value.contains("gap_seeds")) a.gap_seeds = get_list<std::uint64_t>(value["gap_seeds"], "audit.gap_seeds");
  if (value.contains("gap_ks")) a.gap_ks = get_list<std::size_t>(value["gap_ks"], "audit.gap_ks");
  if (value.contains("gap_gamma")) a.gap_gamma = get_as<double>(value["gap_gamma"], "audit.gap_gamma");
}

void parse_heatmap(const json& value, HeatmapSpec& h, const fs::path& base) {
  check_keys(value, {"source", "anchor", "fb_artifact"}, "heatmap");
  if (value.contains("source")) h.source = get_as<std::string>(value["source"], "heatmap.source");
  if (value.contains("anchor")) h.anchor = get_as<std::string>(value["anchor"], "heatmap.anchor");
  if (value.contains("fb_artifact")) {
    h.fb_artifact = resolve(get_as<std::string>(value["fb_artifact"], "heatmap.fb_artifact"), base);
  }
}

// Parses "name(a)" or "name(a,b)" into its integer arguments.
std::optional<std::vector<std::size_t>> call_args(const std::string& text, const std::string& name) {
  static const std::regex pattern(R"(^\s*([a-z_]+)\(\s*(\d+)\s*(?:,\s*(\d+)\s*)?\)\s*$)");
  std::smatch m;
  if (!std::regex_match(text, m, pattern) || m[1] != name) return std::nullopt;
  std::vector<std::size_t> args{std::stoul(m[2])};
  if (m[3].matched) args.push_back(std::stoul(m[3]));
  return args;
}

// ── CSV output ──────────────────────────────────────────────────────────────

class CsvFile {
 public:
  CsvFile(const fs::path& path, const std::string& schema, const std::vector<std::string>& columns)
      : out_(path) {
    if (!out_) throw std::runtime_error("cannot write " + path.string());
    out_ << "#schema=" << schema << '\n';
    row(columns);
  }
  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
    out_ << '\n';
  }

 private:
  std::ofstream out_;
};

std::string fmt_int(std::size_t v) { return std::to_string(v); }
std::string fmt_bool(bool v) { return v ? "1" : "0"; }

void log_line(const RunOptions& options, const std::string& msg) {
  if (options.log) *options.log << msg << '\n';
}

fs::path prepare_output(const ExperimentConfig& config) {
  fs::create_directories(config.output_dir);
  return config.output_dir;
}

double mean(const std::vector<double>& v) {
  return v.empty() ? std::nan("") : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_sd(const std::vector<double>& v) {
  if (v.size() < 2) return v.empty() ? std::nan("") : 0.0;
  const double m = mean(v);
  double acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

SuccessorMatrix exact_sr(const TabularMdp& mdp, const Policy& policy, std::size_t k, double gamma) {
  return sr_closed_form(repeat_operator(mdp, policy, k), gamma);
}

FbTrainConfig train_config(const ExperimentConfig& config, std::size_t k, double gamma, std::size_t d,
                           std::uint64_t seed) {
  FbTrainConfig c;
  c.d = d;
  c.gamma = gamma;
  c.k = k;
  c.seed = seed;
  c.steps = config.training.steps;
  c.lr_f = config.training.lr_f;
  c.lr_b = config.training.lr_b;
  c.ortho_coef = config.training.ortho_coef;
  c.n_anchors = config.training.anchors;
  c.family = config.training.family;
  c.target_refresh = config.training.target_refresh;
  c.z_hold = config.training.z_hold;
  c.trace_every = config.training.trace_every;
  return c;
}

// Mean realization error over anchors, each against the exact SR of the
// policy that anchor models.
double mean_realization_error(const FbRepresentation& fb, const TabularMdp& mdp, PolicyFamily family,
                              std::size_t k, double gamma) {
  double total = 0.0;
  for (std::size_t j = 0; j < fb.f_tables.size(); ++j) {
    const Policy pi = anchor_policy(fb, j, family, mdp.n_states(), mdp.n_actions());
    total += realization_error(fb, j, exact_sr(mdp, pi, k, gamma));
  }
  return total / static_cast<double>(fb.f_tables.size());
}

std::vector<std::string> sigma_columns(std::size_t count) {
  std::vector<std::string> cols;
  for (std::size_t i = 1; i <= count; ++i) cols.push_back("sigma_" + std::to_string(i));
  return cols;
}

}  // namespace

std::string fmt(double value) {
  if (std::isnan(value)) return "nan";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", value);
  return buf;
}

void ExperimentConfig::validate() const {
  if (gammas.empty() || ks.empty() || ds.empty() || seeds.empty()) {
    throw ConfigError("gammas, ks, ds and seeds must be non-empty");
  }
  for (double g : gammas) {
    if (!(g > 0.0 && g < 1.0)) throw ConfigError("every gamma must lie strictly inside (0, 1)");
  }
  for (std::size_t k : ks) {
    if (k < 1) throw ConfigError("every k must be >= 1");
  }
  for (std::size_t d : ds) {
    if (d < 1) throw ConfigError("every d must be >= 1");
  }
  if (environment) {
    if (environment->layout) {
      if (!(environment->slip >= 0.0 && environment->slip < 1.0)) throw ConfigError("slip must lie in [0, 1)");
    } else if (environment->n_states < 1 || environment->n_actions < 1) {
      throw ConfigError("random environments need n_states, n_actions >= 1");
    }
  }
  if (policy == PolicyKind::file && !policy_file) throw ConfigError("policy file missing");
  if (policy == PolicyKind::greedy_of_task && task.empty()) throw ConfigError("greedy-of-task policy needs a task");
  if (training.steps < 1) throw ConfigError("training.steps must be >= 1");
  if (!(training.lr_f > 0.0) || !(training.lr_b > 0.0)) throw ConfigError("learning rates must be positive");
  if (training.anchors < 1 || training.target_refresh < 1 || training.z_hold < 1 || training.trace_every < 1) {
    throw ConfigError("training anchors and periods must be >= 1");
  }
  if (!(training.ortho_coef >= 0.0)) throw ConfigError("training.ortho_coef must be non-negative");
  if (audit.classes.empty()) throw ConfigError("audit.classes must be non-empty");
  if (audit.n_states < 1 || audit.n_actions < 1 || audit.gap_max_states < 1 || audit.gap_max_actions < 1) {
    throw ConfigError("audit sizes must be >= 1");
  }
  if (audit.gap_ks.empty()) throw ConfigError("audit.gap_ks must be non-empty");
  for (std::size_t k : audit.gap_ks) {
    if (k < 1) throw ConfigError("audit.gap_ks entries must be >= 1");
  }
  if (!(audit.gap_gamma > 0.0 && audit.gap_gamma < 1.0)) throw ConfigError("audit.gap_gamma must lie in (0, 1)");
  if (heatmap.source != "sr_row" && heatmap.source != "q_values") {
    throw ConfigError("heatmap.source must be sr_row or q_values");
  }
}

ExperimentConfig parse_config(const std::string& json_text, const fs::path& base_dir) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(doc,
             {"environment", "policy", "gammas", "ks", "ds", "task", "seeds", "output_dir", "training", "audit",
              "heatmap"},
             "config");
  ExperimentConfig c;
  if (doc.contains("environment")) c.environment = parse_environment(doc["environment"], base_dir);
  if (doc.contains("policy")) {
    const json& p = doc["policy"];
    if (p.is_string()) {
      const auto name = p.get<std::string>();
      if (name == "uniform") {
        c.policy = PolicyKind::uniform;
      } else if (name == "greedy-of-task") {
        c.policy = PolicyKind::greedy_of_task;
      } else {
        throw ConfigError("unknown policy '" + name + "'");
      }
    } else {
      check_keys(p, {"file"}, "policy");
      if (!p.contains("file")) throw ConfigError("policy object needs 'file'");
      c.policy = PolicyKind::file;
      c.policy_file = resolve(get_as<std::string>(p["file"], "policy.file"), base_dir);
    }
  }
  if (doc.contains("gammas")) c.gammas = get_list<double>(doc["gammas"], "gammas");
  if (doc.contains("ks")) c.ks = get_list<std::size_t>(doc["ks"], "ks");
  if (doc.contains("ds")) c.ds = get_list<std::size_t>(doc["ds"], "ds");
  if (doc.contains("seeds")) c.seeds = get_list<std::uint64_t>(doc["seeds"], "seeds");
  if (doc.contains("task")) {
    c.task = get_as<std::string>(doc["task"], "task");
    if (!c.task.empty() && !looks_like_spec(c.task)) c.task = resolve(c.task, base_dir).string();
  }
  if (doc.contains("output_dir")) c.output_dir = resolve(get_as<std::string>(doc["output_dir"], "output_dir"), base_dir);
  if (doc.contains("training")) parse_training(doc["training"], c.training);
  if (doc.contains("audit")) parse_audit(doc["audit"], c.audit);
  if (doc.contains("heatmap")) parse_heatmap(doc["heatmap"], c.heatmap, base_dir);
  if (c.audit.gap_seeds.empty()) {
    for (std::uint64_t s = 0; s < 50; ++s) c.audit.gap_seeds.push_back(s);
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), path.parent_path());
}

Environment build_environment(const ExperimentConfig& config, double gamma) {
  if (!config.environment) throw ConfigError("this command needs an environment");
  const EnvironmentSpec& e = *config.environment;
  if (e.layout) {
    GridLayout layout;
    try {
      layout = load_layout(*e.layout);
    } catch (const std::exception& ex) {
      throw ConfigError(ex.what());
    }
    TabularMdp mdp = build_gridworld(layout, gamma, e.slip);
    return {std::move(mdp), std::move(layout)};
  }
  return {random_mdp(e.n_states, e.n_actions, e.seed, e.cls, gamma), std::nullopt};
}

RewardTask build_task(const ExperimentConfig& config, const Environment& env) {
  const std::size_t ns = env.mdp.n_states();
  const std::size_t na = env.mdp.n_actions();
  const std::string& spec = config.task;
  if (spec.empty()) throw ConfigError("this command needs a task");
  if (spec == "zero") return {Vector::Zero(idx(ns * na)), "zero"};
  if (auto args = call_args(spec, "goal")) {
    std::size_t state = 0;
    if (args->size() == 2) {
      if (!env.layout) throw ConfigError("goal(row,col) needs a gridworld environment");
      const auto s = env.layout->state_of((*args)[0], (*args)[1]);
      if (!s) throw ConfigError("goal cell " + spec + " is not a free cell");
      state = *s;
    } else {
      state = (*args)[0];
      if (state >= ns) throw ConfigError("goal state out of range");
    }
    RewardTask t = goal_task(ns, na, state);
    t.name = spec;
    return t;
  }
  if (spec.rfind("goal", 0) == 0) throw ConfigError("malformed goal spec '" + spec + "'");
  try {
    return load_reward_csv(spec, ns, na);
  } catch (const std::exception& ex) {
    throw ConfigError(ex.what());
  }
}

Policy build_policy(const ExperimentConfig& config, const Environment& env, double gamma, std::size_t k) {
  const std::size_t ns = env.mdp.n_states();
  const std::size_t na = env.mdp.n_actions();
  switch (config.policy) {
    case PolicyKind::uniform:
      return Policy::uniform(ns, na);
    case PolicyKind::greedy_of_task: {
      const TabularMdp original = env.mdp.with_gamma(effective_discount(gamma, k));
      return optimal_q(original, build_task(config, env)).greedy;
    }
    case PolicyKind::file: {
      std::ifstream in(*config.policy_file);
      if (!in) throw ConfigError("cannot read policy file " + config.policy_file->string());
      Matrix probs(idx(ns), idx(na));
      std::string line;
      std::size_t row = 0;
      while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
        if (row >= ns) throw ConfigError("policy file has too many rows");
        std::stringstream cells(line);
        std::string cell;
        std::size_t col = 0;
        while (std::getline(cells, cell, ',')) {
          if (col >= na) throw ConfigError("policy file row has too many columns");
          try {
            probs(idx(row), idx(col)) = std::stod(cell);
          } catch (const std::exception&) {
            throw ConfigError("malformed number in policy file");
          }
          ++col;
        }
        if (col != na) throw ConfigError("policy file row has too few columns");
        ++row;
      }
      if (row != ns) throw ConfigError("policy file needs one row per state");
      try {
        return Policy(probs);
      } catch (const std::invalid_argument& ex) {
        throw ConfigError(ex.what());
      }
    }
  }
  throw ConfigError("unknown policy kind");
}

Matrix grid_values(const GridLayout& layout, const Vector& per_state) {
  if (static_cast<std::size_t>(per_state.size()) != layout.n_free()) {
    throw std::invalid_argument("heatmap values must cover every free cell");
  }
  Matrix grid = Matrix::Constant(idx(layout.height()), idx(layout.width()), std::nan(""));
  for (std::size_t s = 0; s < layout.n_free(); ++s) {
    const Cell c = layout.cell_of(s);
    grid(idx(c.row), idx(c.col)) = per_state(idx(s));
  }
  return grid;
}

// ── spectrum-sweep ──────────────────────────────────────────────────────────

int cmd_spectrum_sweep(const ExperimentConfig& config, const RunOptions& options) {
  const fs::path out = prepare_output(config);
  struct Cell {
    std::size_t k;
    double gamma;
  };
  std::vector<Cell> cells;
  for (std::size_t k : config.ks)
    for (double g : config.gammas) cells.push_back({k, g});

  struct Result {
    std::vector<std::string> row;
    std::vector<std::vector<std::string>> spectrum;
  };
  constexpr std::size_t head = 10;
  const auto results = run_jobs<Result>(cells.size(), options.threads, [&](std::size_t i) {
    const auto [k, gamma] = cells[i];
    const Environment env = build_environment(config, gamma);
    const Policy pi = build_policy(config, env, gamma, k);
    const SuccessorMatrix sr = exact_sr(env.mdp, pi, k, gamma);
    const SpectrumReport rep = analyze_spectrum(sr.m);
    const std::vector<double> u = union_spectrum(env.mdp, 1, false);
    Result r;
    r.row = {fmt_int(k), fmt(gamma), fmt(effective_discount(gamma, k)), fmt_int(env.mdp.n_pairs()),
             fmt(rep.stable_rank), fmt(rep.nse), fmt_bool(rep.nse_degenerate),
             fmt(sv_upper_bound(u, gamma, k, 1).value), fmt(sv_upper_bound(u, gamma, k, 2).value),
             to_string(unit_spectral_norm(env.mdp) ? Regime::proven : Regime::heuristic)};
    for (std::size_t j = 0; j < head; ++j) {
      r.row.push_back(j < rep.beta ? fmt(rep.singular_values[j]) : "");
    }
    for (std::size_t j = 0; j < rep.beta; ++j) {
      r.spectrum.push_back({fmt_int(k), fmt(gamma), fmt_int(j + 1), fmt(rep.singular_values[j]),
                            fmt(rep.energy_weights[j])});
    }
    log_line(options, "spectrum-sweep k=" + fmt_int(k) + " gamma=" + fmt(gamma) + " srank=" + fmt(rep.stable_rank));
    return r;
  });

  std::vector<std::string> columns{"k",          "gamma",         "gamma_eff",     "n_pairs",
                                   "srank",      "nse",           "nse_degenerate", "sv_bound_1",
                                   "sv_bound_2", "regime"};
  for (const auto& c : sigma_columns(head)) columns.push_back(c);
  CsvFile sweep(out / "spectrum_sweep.csv", "srlab.spectrum_sweep.v1", columns);
  CsvFile spectra(out / "spectrum_values.csv", "srlab.spectrum_values.v1",
                  {"k", "gamma", "i", "sigma", "energy_weight"});
  for (const Result& r : results) {
    sweep.row(r.row);
    for (const auto& s : r.spectrum) spectra.row(s);
  }
  return kExitOk;
}

// ── ablation ────────────────────────────────────────────────────────────────

int cmd_ablation(const ExperimentConfig& config, const RunOptions& options) {
  const fs::path out = prepare_output(config);
  struct Cell {
    std::size_t k, d;
    double gamma;
    std::uint64_t seed;
  };
  std::vector<Cell> cells;
  for (std::size_t k : config.ks)
    for (std::size_t d : config.ds)
      for (double g : config.gammas)
        for (std::uint64_t s : config.seeds) cells.push_back({k, d, g, s});

  struct Result {
    bool diverged = false;
    std::size_t steps_run = 0;
    double eps_real = std::nan(""), bellman0 = std::nan(""), bellman = std::nan(""), gap = std::nan("");
    double srank_hat = std::nan(""), nse_hat = std::nan(""), srank_exact = std::nan(""), nse_exact = std::nan("");
  };
  const bool with_task = !config.task.empty();
  const auto results = run_jobs<Result>(cells.size(), options.threads, [&](std::size_t i) {
    const Cell c = cells[i];
    const Environment env = build_environment(config, c.gamma);
    const FbTrainConfig tc = train_config(config, c.k, c.gamma, c.d, c.seed);
    Result r;
    const SpectrumReport exact =
        analyze_spectrum(exact_sr(env.mdp, Policy::uniform(env.mdp.n_states(), env.mdp.n_actions()), c.k, c.gamma).m);
    r.srank_exact = exact.stable_rank;
    r.nse_exact = exact.nse;
    try {
      const FbTrainResult res = fb_td_train(env.mdp, tc);
      r.steps_run = res.steps_run;
      r.bellman0 = res.trace.front().bellman_error;
      r.bellman = res.trace.back().bellman_error;
      r.eps_real = mean_realization_error(res.fb, env.mdp, tc.family, c.k, c.gamma);
      const SpectrumReport hat = analyze_spectrum(res.fb.approximation(0));
      r.srank_hat = hat.stable_rank;
      r.nse_hat = hat.nse;
      if (with_task) {
        const RewardTask task = build_task(config, env);
        const TabularMdp original = env.mdp.with_gamma(effective_discount(c.gamma, c.k));
        const Vector z_r = reward_embedding(res.fb, repeat_task(original, task, c.k));
        const std::size_t z_index = res.fb.nearest_anchor(z_r);
        r.gap = optimality_gap_report(env.mdp, task, res.fb, z_index, c.k, c.gamma, c.d).measured_gap;
      }
    } catch (const DivergenceError& e) {
      r.diverged = true;
      r.steps_run = e.partial().steps_run;
      log_line(options, std::string("ablation cell diverged: ") + e.what());
    }
    log_line(options, "ablation k=" + fmt_int(c.k) + " d=" + fmt_int(c.d) + " gamma=" + fmt(c.gamma) +
                          " seed=" + std::to_string(c.seed) + " eps_real=" + fmt(r.eps_real));
    return r;
  });

  CsvFile runs(out / "ablation_runs.csv", "srlab.ablation_runs.v1",
               {"k", "d", "gamma", "seed", "status", "steps_run", "eps_real", "bellman_error_initial",
                "bellman_error", "measured_gap", "srank_hat", "nse_hat", "srank_exact", "nse_exact"});
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const Cell& c = cells[i];
    const Result& r = results[i];
    runs.row({fmt_int(c.k), fmt_int(c.d), fmt(c.gamma), std::to_string(c.seed), r.diverged ? "diverged" : "ok",
              fmt_int(r.steps_run), fmt(r.eps_real), fmt(r.bellman0), fmt(r.bellman), fmt(r.gap), fmt(r.srank_hat),
              fmt(r.nse_hat), fmt(r.srank_exact), fmt(r.nse_exact)});
  }

  CsvFile agg(out / "ablation.csv", "srlab.ablation.v1",
              {"k", "d", "gamma", "n_seeds", "n_diverged", "eps_real_mean", "eps_real_sd", "bellman_error_mean",
               "bellman_error_sd", "measured_gap_mean", "measured_gap_sd", "srank_hat_mean", "nse_hat_mean",
               "srank_exact", "nse_exact"});
  const std::size_t per_cell = config.seeds.size();
  for (std::size_t start = 0; start < cells.size(); start += per_cell) {
    std::vector<double> eps, bell, gap, sr, ns;
    std::size_t diverged = 0;
    for (std::size_t i = start; i < start + per_cell; ++i) {
      const Result& r = results[i];
      if (r.diverged) {
        ++diverged;
        continue;
      }
      eps.push_back(r.eps_real);
      bell.push_back(r.bellman);
      if (with_task) gap.push_back(r.gap);
      sr.push_back(r.srank_hat);
      ns.push_back(r.nse_hat);
    }
    const Cell& c = cells[start];
    agg.row({fmt_int(c.k), fmt_int(c.d), fmt(c.gamma), fmt_int(per_cell), fmt_int(diverged), fmt(mean(eps)),
             fmt(sample_sd(eps)), fmt(mean(bell)), fmt(sample_sd(bell)), fmt(mean(gap)), fmt(sample_sd(gap)),
             fmt(mean(sr)), fmt(mean(ns)), fmt(results[start].srank_exact), fmt(results[start].nse_exact)});
  }
  return kExitOk;
}

// ── bounds-audit ────────────────────────────────────────────────────────────

namespace {

struct GapRow {
  std::size_t n_states, n_actions, k, d;
  std::uint64_t seed;
  GapReport report;
};

RewardTask random_reward(std::size_t n_pairs, std::uint64_t seed) {
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  Vector r(idx(n_pairs));
  for (Eigen::Index i = 0; i < r.size(); ++i) r(i) = rng.uniform();
  return {r, "random(" + std::to_string(seed) + ")"};
}

std::vector<GapRow> gap_instance(std::size_t ns, std::size_t na, std::uint64_t seed, std::size_t k, double gamma) {
  const TabularMdp mdp = random_mdp(ns, na, seed, MdpClass::general, gamma);
  const RewardTask task = random_reward(ns * na, seed);
  const SuccessorMatrix sr = exact_sr(mdp, Policy::uniform(ns, na), k, gamma);
  std::vector<GapRow> rows;
  for (std::size_t d = 1; d <= ns * na; ++d) {
    const FbRepresentation fb = fb_from_svd(sr, d);
    rows.push_back({ns, na, k, d, seed, optimality_gap_report(mdp, task, fb, 0, k, gamma, d)});
  }
  return rows;
}

}  // namespace

int cmd_bounds_audit(const ExperimentConfig& config, const RunOptions& options) {
  const fs::path out = prepare_output(config);
  const AuditSpec& a = config.audit;
  struct Cell {
    MdpClass cls;
    std::uint64_t seed;
    std::size_t k;
    double gamma;
  };
  std::vector<Cell> cells;
  for (MdpClass cls : a.classes)
    for (std::uint64_t s : config.seeds)
      for (std::size_t k : config.ks)
        for (double g : config.gammas) cells.push_back({cls, s, k, g});

  const std::size_t n_pairs = a.n_states * a.n_actions;
  const std::size_t d = std::min(config.ds.front(), n_pairs);
  const auto audits = run_jobs<BoundAudit>(cells.size(), options.threads, [&](std::size_t i) {
    const Cell& c = cells[i];
    const TabularMdp mdp = random_mdp(a.n_states, a.n_actions, c.seed, c.cls, c.gamma);
    return audit_bounds(mdp, Policy::uniform(a.n_states, a.n_actions), c.gamma, c.k, d);
  });

  const std::vector<std::string> record_cols{"class", "seed", "k",     "gamma",     "regime",   "bound", "i",
                                             "lhs",   "rhs",  "slack", "satisfied", "asserted", "vacuous"};
  CsvFile records(out / "audit_records.csv", "srlab.audit_records.v1", record_cols);
  CsvFile findings(out / "findings.csv", "srlab.audit_findings.v1", record_cols);
  struct Tally {
    std::size_t records = 0, violations = 0, vacuous = 0, failures = 0;
    double min_slack = std::numeric_limits<double>::infinity();
    bool asserted = false;
  };
  std::map<std::tuple<std::string, std::string, std::string>, Tally> tallies;
  std::size_t failures = 0;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const Cell& c = cells[i];
    const BoundAudit& audit = audits[i];
    failures += audit.failures();
    const std::string regime = to_string(audit.regime);
    for (const AuditRecord& r : audit.records) {
      std::vector<std::string> row{to_string(c.cls), std::to_string(c.seed), fmt_int(c.k),       fmt(c.gamma),
                                   regime,           r.bound,                fmt_int(r.i),       fmt(r.lhs),
                                   fmt(r.rhs),       fmt(r.slack),           fmt_bool(r.satisfied), fmt_bool(r.asserted),
                                   fmt_bool(r.vacuous)};
      if (r.asserted) records.row(row);
      if (!r.satisfied) findings.row(row);
      Tally& t = tallies[{to_string(c.cls), regime, r.bound}];
      ++t.records;
      t.asserted = r.asserted;
      if (!r.satisfied) ++t.violations;
      if (r.vacuous) ++t.vacuous;
      if (!r.satisfied && r.asserted && audit.regime == Regime::proven) ++t.failures;
      if (!r.vacuous) t.min_slack = std::min(t.min_slack, r.slack);
    }
  }
  {
    CsvFile summary(out / "audit_summary.csv", "srlab.audit_summary.v1",
                    {"class", "regime", "bound", "asserted", "records", "violations", "vacuous", "failures", "min_slack"});
    for (const auto& [key, t] : tallies) {
      summary.row({std::get<0>(key), std::get<1>(key), std::get<2>(key), fmt_bool(t.asserted), fmt_int(t.records),
                   fmt_int(t.violations), fmt_int(t.vacuous), fmt_int(t.failures), fmt(t.min_slack)});
    }
  }
  log_line(options, "bounds-audit: " + fmt_int(cells.size()) + " audits, " + fmt_int(failures) +
                        " proven-regime failures");

  std::size_t certificate_failures = 0;
  if (a.gap_audit) {
    struct GapCell {
      std::size_t ns, na, k;
      std::uint64_t seed;
    };
    std::vector<GapCell> gcells;
    for (std::size_t k : a.gap_ks)
      for (std::size_t ns = 1; ns <= a.gap_max_states; ++ns)
        for (std::size_t na = 1; na <= a.gap_max_actions; ++na)
          for (std::uint64_t s : a.gap_seeds) gcells.push_back({ns, na, k, s});
    const auto gap_rows = run_jobs<std::vector<GapRow>>(gcells.size(), options.threads, [&](std::size_t i) {
      const GapCell& g = gcells[i];
      return gap_instance(g.ns, g.na, g.seed, g.k, a.gap_gamma);
    });
    CsvFile gap(out / "gap_audit.csv", "srlab.gap_audit.v1",
                {"n_states", "n_actions", "seed", "k", "d", "eps_real", "eps_repeat", "sigma_d_plus_1",
                 "approx_norm", "measured_gap", "repeat_gap", "theorem1_rhs", "lemma_rhs", "lemma_vacuous",
                 "theorem1_covered", "lemma_covered", "certificate_lhs", "certificate_rhs", "certificate_holds"});
    struct Coverage {
      std::size_t n = 0, cert_fail = 0, t1 = 0, lemma = 0, vacuous = 0;
    };
    std::map<std::size_t, Coverage> coverage;
    for (const auto& rows : gap_rows) {
      for (const GapRow& row : rows) {
        const GapReport& g = row.report;
        gap.row({fmt_int(row.n_states), fmt_int(row.n_actions), std::to_string(row.seed), fmt_int(row.k),
                 fmt_int(row.d), fmt(g.eps_real), fmt(g.eps_repeat), fmt(g.sigma_d_plus_1), fmt(g.approx_norm),
                 fmt(g.measured_gap), fmt(g.repeat_gap), fmt(g.theorem1_rhs), fmt(g.lemma_rhs),
                 fmt_bool(g.lemma_vacuous), fmt_bool(g.theorem1_covered), fmt_bool(g.lemma_covered),
                 fmt(g.certificate_lhs), fmt(g.certificate_rhs), fmt_bool(g.certificate_holds)});
        Coverage& cov = coverage[row.k];
        ++cov.n;
        if (!g.certificate_holds) ++cov.cert_fail;
        if (g.theorem1_covered) ++cov.t1;
        if (g.lemma_covered) ++cov.lemma;
        if (g.lemma_vacuous) ++cov.vacuous;
      }
    }
    CsvFile cov(out / "gap_coverage.csv", "srlab.gap_coverage.v1",
                {"k", "reports", "certificate_violations", "theorem1_coverage", "lemma_coverage", "lemma_vacuous"});
    for (const auto& [k, c] : coverage) {
      certificate_failures += c.cert_fail;
      const double n = static_cast<double>(c.n);
      cov.row({fmt_int(k), fmt_int(c.n), fmt_int(c.cert_fail), fmt(static_cast<double>(c.t1) / n),
               fmt(static_cast<double>(c.lemma) / n), fmt_int(c.vacuous)});
    }
    log_line(options, "gap audit: " + fmt_int(certificate_failures) + " certificate violations");
  }
  return failures + certificate_failures > 0 ? kExitViolation : kExitOk;
}

// ── heatmap ─────────────────────────────────────────────────────────────────

namespace {

// Rows of the SR that the heatmap starts from: every action of a cell, or a
// single state-action pair.
std::vector<std::size_t> anchor_rows(const std::string& anchor, const Environment& env) {
  const std::size_t na = env.mdp.n_actions();
  if (auto args = call_args(anchor, "pair")) {
    if (args->size() != 1 || (*args)[0] >= env.mdp.n_pairs()) throw ConfigError("anchor pair out of range");
    return {(*args)[0]};
  }
  std::optional<std::size_t> state;
  if (auto args = call_args(anchor, "cell"); args && args->size() == 2) {
    state = env.layout->state_of((*args)[0], (*args)[1]);
  } else if (auto g = call_args(anchor, "goal"); g && g->size() == 2) {
    state = env.layout->state_of((*g)[0], (*g)[1]);
  } else {
    throw ConfigError("anchor must be cell(r,c), goal(r,c) or pair(i)");
  }
  if (!state) throw ConfigError("anchor " + anchor + " is not a free cell");
  std::vector<std::size_t> rows;
  for (std::size_t a = 0; a < na; ++a) rows.push_back(*state * na + a);
  return rows;
}

}  // namespace

int cmd_heatmap(const ExperimentConfig& config, const RunOptions& options) {
  const fs::path out = prepare_output(config);
  const HeatmapSpec& h = config.heatmap;
  std::optional<FbRepresentation> fb;
  if (h.fb_artifact) {
    try {
      fb = load_fb(*h.fb_artifact);
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
  }
  struct Cell {
    std::size_t k;
    double gamma;
  };
  std::vector<Cell> cells;
  for (std::size_t k : config.ks)
    for (double g : config.gammas) cells.push_back({k, g});

  const auto grids = run_jobs<Matrix>(cells.size(), options.threads, [&](std::size_t i) {
    const auto [k, gamma] = cells[i];
    const Environment env = build_environment(config, gamma);
    if (!env.layout) throw ConfigError("heatmap needs a gridworld environment");
    const std::size_t ns = env.mdp.n_states();
    const std::size_t na = env.mdp.n_actions();
    if (fb && fb->n_pairs() != ns * na) throw ConfigError("FB artifact does not match the environment");
    Vector per_state = Vector::Zero(idx(ns));
    if (h.source == "sr_row") {
      std::string anchor = h.anchor.empty() ? config.task : h.anchor;
      if (anchor.empty()) anchor = "pair(0)";
      const std::vector<std::size_t> rows = anchor_rows(anchor, env);
      const Matrix m = fb ? fb->approximation(0) : exact_sr(env.mdp, build_policy(config, env, gamma, k), k, gamma).m;
      Vector occupancy = Vector::Zero(idx(ns * na));
      for (std::size_t r : rows) occupancy += m.row(idx(r)).transpose();
      occupancy /= static_cast<double>(rows.size());
      for (std::size_t s = 0; s < ns; ++s) per_state(idx(s)) = occupancy.segment(idx(s * na), idx(na)).sum();
    } else {
      const RewardTask task = build_task(config, env);
      const TabularMdp original = env.mdp.with_gamma(effective_discount(gamma, k));
      const RewardTask r_rep = repeat_task(original, task, k);
      Vector q;
      if (fb) {
        const Vector z_r = reward_embedding(*fb, r_rep);
        q = fb_q(*fb, fb->nearest_anchor(z_r), z_r);
      } else {
        q = q_from_sr(exact_sr(env.mdp, build_policy(config, env, gamma, k), k, gamma), r_rep);
      }
      for (std::size_t s = 0; s < ns; ++s) per_state(idx(s)) = q.segment(idx(s * na), idx(na)).mean();
    }
    log_line(options, "heatmap k=" + fmt_int(k) + " gamma=" + fmt(gamma));
    return grid_values(*env.layout, per_state);
  });

  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto [k, gamma] = cells[i];
    const std::string name = "heatmap_" + config.heatmap.source + "_k" + fmt_int(k) + "_g" + fmt(gamma) + ".csv";
    const Matrix& g = grids[i];
    std::vector<std::string> header;
    for (Eigen::Index c = 0; c < g.cols(); ++c) header.push_back("col_" + std::to_string(c));
    CsvFile file(out / name, "srlab.heatmap.v1", header);
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      std::vector<std::string> row;
      for (Eigen::Index c = 0; c < g.cols(); ++c) row.push_back(fmt(g(r, c)));
      file.row(row);
    }
  }
  return kExitOk;
}

// ── train-fb ────────────────────────────────────────────────────────────────

int cmd_train_fb(const ExperimentConfig& config, const RunOptions& options) {
  if (config.ks.size() != 1 || config.gammas.size() != 1 || config.ds.size() != 1 || config.seeds.size() != 1) {
    throw ConfigError("train-fb runs a single (k, gamma, d, seed) cell");
  }
  const fs::path out = prepare_output(config);
  const std::size_t k = config.ks.front();
  const double gamma = config.gammas.front();
  const std::size_t d = config.ds.front();
  const std::uint64_t seed = config.seeds.front();
  const Environment env = build_environment(config, gamma);
  const FbTrainConfig tc = train_config(config, k, gamma, d, seed);

  auto write_trace = [&](const FbTrainResult& res) {
    CsvFile trace(out / "train_trace.csv", "srlab.train_trace.v1", {"step", "loss", "bellman_error"});
    for (const TracePoint& p : res.trace) trace.row({fmt_int(p.step), fmt(p.loss), fmt(p.bellman_error)});
  };

  FbTrainResult res;
  try {
    res = fb_td_train(env.mdp, tc);
  } catch (const DivergenceError& e) {
    write_trace(e.partial());
    log_line(options, std::string("train-fb diverged: ") + e.what());
    return kExitDivergence;
  }
  write_trace(res);
  save_fb(res.fb, out / "fb_artifact.json");
  const double eps = mean_realization_error(res.fb, env.mdp, tc.family, k, gamma);
  CsvFile summary(out / "train_summary.csv", "srlab.train_summary.v1",
                  {"k", "gamma", "d", "seed", "steps_run", "final_loss", "bellman_error_initial", "bellman_error",
                   "eps_real"});
  summary.row({fmt_int(k), fmt(gamma), fmt_int(d), std::to_string(seed), fmt_int(res.steps_run),
               fmt(res.trace.back().loss), fmt(res.trace.front().bellman_error), fmt(res.trace.back().bellman_error),
               fmt(eps)});
  log_line(options, "train-fb done: final loss " + fmt(res.trace.back().loss) + ", eps_real " + fmt(eps));
  return kExitOk;
}

}  // namespace srlab
