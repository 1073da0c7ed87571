#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dynpen/agent.hpp"
#include "dynpen/config.hpp"
#include "dynpen/envs.hpp"
#include "dynpen/mlp.hpp"
#include "dynpen/penalty.hpp"
#include "dynpen/replay.hpp"
#include "dynpen/rng.hpp"

namespace dynpen {

enum class Study { kRegress1d, kVehicle };

inline std::string to_string(Study s) {
  return s == Study::kRegress1d ? "regress1d" : "vehicle";
}

inline Study study_from_string(const std::string& s) {
  if (s == "regress1d") return Study::kRegress1d;
  if (s == "vehicle") return Study::kVehicle;
  throw std::invalid_argument("unknown study: " + s);
}

inline std::string to_string(PenaltyKind k) {
  switch (k) {
    case PenaltyKind::kUniform: return "uniform";
    case PenaltyKind::kLinear: return "linear";
    case PenaltyKind::kDynamic: return "dynamic";
  }
  return "dynamic";
}

inline PenaltyKind penalty_kind_from_string(const std::string& s) {
  if (s == "uniform") return PenaltyKind::kUniform;
  if (s == "linear") return PenaltyKind::kLinear;
  if (s == "dynamic") return PenaltyKind::kDynamic;
  throw std::invalid_argument("unknown penalty kind: " + s);
}

/// Penalty parameterization of one run; which fields matter depends on kind.
struct PenaltyParams {
  PenaltyKind kind = PenaltyKind::kDynamic;
  double uniform_level = 20.0;
  double linear_factor = 20.0;
  double mu_min = 0.05;
  double mu_max = 20.0;
  double growth = 2.0;
  double alpha = 60.0;
  std::size_t smoothing_window = 1;
  bool relabel = false;
};

inline Penalty make_penalty(const PenaltyParams& p) {
  switch (p.kind) {
    case PenaltyKind::kUniform: return Penalty::uniform(p.uniform_level);
    case PenaltyKind::kLinear: return Penalty::linear(p.linear_factor);
    case PenaltyKind::kDynamic:
      return Penalty::dynamic(
          std::make_shared<PenaltySchedule>(p.mu_min, p.mu_max, p.growth, p.alpha));
  }
  throw std::invalid_argument("make_penalty: bad kind");
}

/// Complete, defaulted description of one seeded run. A config carrying only
/// {study, seed} is runnable.
struct RunConfig {
  Study study = Study::kVehicle;
  std::uint64_t seed = 0;
  std::size_t episodes = 2000;
  PenaltyParams penalty;
  std::size_t replay_capacity = 10000;
  AgentConfig agent;
  VehicleEnvConfig env;
  RegressionTargetConfig regression;
  // vehicle evaluation protocol
  std::size_t eval_period = 100;
  std::vector<double> eval_positions = {-0.6, 0.0, 0.6};
  std::vector<double> eval_velocities = {-0.2, 0.0, 0.2};
  double sufficient_cost_threshold = 4.0;
  // regression curve dumps
  std::vector<std::size_t> curve_episodes = {50, 150, 500};
  std::size_t curve_points = 1001;
  std::filesystem::path out_dir;  // empty: keep results in memory only

  static RunConfig defaults(Study study) {
    RunConfig cfg;
    cfg.study = study;
    if (study == Study::kRegress1d) {
      cfg.episodes = 500;
      cfg.penalty.uniform_level = 50.0;
      cfg.penalty.linear_factor = 50.0;
      cfg.penalty.mu_min = 0.1;
      cfg.penalty.mu_max = 50.0;
    } else {
      cfg.episodes = 2000;
      cfg.penalty.uniform_level = 20.0;
      cfg.penalty.linear_factor = 20.0;
      cfg.penalty.mu_min = 0.05;
      cfg.penalty.mu_max = 20.0;
    }
    cfg.agent.eps_decay_episodes = cfg.episodes / 2;
    return cfg;
  }

  std::vector<VehicleState> evaluation_states() const {
    std::vector<VehicleState> states;
    for (double p : eval_positions)
      for (double v : eval_velocities) states.push_back({p, v});
    return states;
  }

  std::vector<std::size_t> checkpoint_episodes() const {
    return {episodes / 4, episodes / 2, 3 * episodes / 4, episodes};
  }
};

namespace detail {
inline std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  std::istringstream is(text);
  std::string item;
  while (std::getline(is, item, ',')) {
    if (!item.empty()) out.push_back(std::stod(item));
  }
  return out;
}

inline std::vector<std::size_t> parse_size_list(const std::string& text) {
  std::vector<std::size_t> out;
  for (double v : parse_double_list(text)) out.push_back(static_cast<std::size_t>(v));
  return out;
}

inline std::string join(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    s += KeyValueConfig::format_double(v[i]);
  }
  return s;
}

inline std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(v[i]);
  }
  return s;
}
}  // namespace detail

inline RunConfig run_config_from_key_values(const KeyValueConfig& kv) {
  const Study study = study_from_string(kv.get_string("study", "vehicle"));
  RunConfig cfg = RunConfig::defaults(study);
  cfg.seed = static_cast<std::uint64_t>(kv.get_int("seed", 0));
  cfg.episodes = static_cast<std::size_t>(kv.get_int("episodes", static_cast<long>(cfg.episodes)));

  cfg.penalty.kind = penalty_kind_from_string(
      kv.get_string("penalty.kind", to_string(cfg.penalty.kind)));
  cfg.penalty.uniform_level = kv.get_double("penalty.uniform_level", cfg.penalty.uniform_level);
  cfg.penalty.linear_factor = kv.get_double("penalty.linear_factor", cfg.penalty.linear_factor);
  cfg.penalty.mu_min = kv.get_double("penalty.mu_min", cfg.penalty.mu_min);
  cfg.penalty.mu_max = kv.get_double("penalty.mu_max", cfg.penalty.mu_max);
  cfg.penalty.growth = kv.get_double("penalty.growth", cfg.penalty.growth);
  cfg.penalty.alpha = kv.get_double("penalty.alpha", cfg.penalty.alpha);
  cfg.penalty.smoothing_window = static_cast<std::size_t>(
      kv.get_int("penalty.smoothing_window", static_cast<long>(cfg.penalty.smoothing_window)));
  cfg.penalty.relabel = kv.get_bool("penalty.relabel", cfg.penalty.relabel);

  cfg.replay_capacity = static_cast<std::size_t>(
      kv.get_int("replay.capacity", static_cast<long>(cfg.replay_capacity)));

  cfg.agent.gamma = kv.get_double("agent.gamma", cfg.agent.gamma);
  cfg.agent.eps_start = kv.get_double("agent.eps_start", cfg.agent.eps_start);
  cfg.agent.eps_end = kv.get_double("agent.eps_end", cfg.agent.eps_end);
  cfg.agent.eps_decay_episodes = static_cast<std::size_t>(
      kv.get_int("agent.eps_decay_episodes", static_cast<long>(cfg.episodes / 2)));
  cfg.agent.batch_size = static_cast<std::size_t>(
      kv.get_int("agent.batch_size", static_cast<long>(cfg.agent.batch_size)));
  cfg.agent.target_sync_period = static_cast<std::size_t>(
      kv.get_int("agent.target_sync_period", static_cast<long>(cfg.agent.target_sync_period)));
  cfg.agent.learning_rate = kv.get_double("agent.learning_rate", cfg.agent.learning_rate);
  if (kv.has("agent.hidden")) {
    cfg.agent.hidden.clear();
    for (std::size_t h : detail::parse_size_list(kv.get_string("agent.hidden", "")))
      cfg.agent.hidden.push_back(h);
  }
  cfg.agent.updates_per_episode = static_cast<std::size_t>(
      kv.get_int("agent.updates_per_episode", static_cast<long>(cfg.agent.updates_per_episode)));
  cfg.agent.loss_smoothing_window = cfg.penalty.smoothing_window;
  cfg.agent.relabel_rewards = cfg.penalty.relabel;

  cfg.env.dt = kv.get_double("env.dt", cfg.env.dt);
  const std::string integ = kv.get_string(
      "env.integrator", cfg.env.integrator == Integrator::kForwardEuler ? "euler" : "zoh");
  if (integ == "euler") cfg.env.integrator = Integrator::kForwardEuler;
  else if (integ == "zoh") cfg.env.integrator = Integrator::kZeroOrderHold;
  else throw std::invalid_argument("unknown env.integrator: " + integ);
  cfg.env.rho = kv.get_double("env.rho", cfg.env.rho);
  cfg.env.horizon = static_cast<int>(kv.get_int("env.horizon", cfg.env.horizon));
  cfg.env.position_min = kv.get_double("env.position_min", cfg.env.position_min);
  cfg.env.position_max = kv.get_double("env.position_max", cfg.env.position_max);
  cfg.env.velocity_min = kv.get_double("env.velocity_min", cfg.env.velocity_min);
  cfg.env.velocity_max = kv.get_double("env.velocity_max", cfg.env.velocity_max);
  cfg.env.init_position_min = kv.get_double("env.init_position_min", cfg.env.init_position_min);
  cfg.env.init_position_max = kv.get_double("env.init_position_max", cfg.env.init_position_max);
  cfg.env.init_velocity_min = kv.get_double("env.init_velocity_min", cfg.env.init_velocity_min);
  cfg.env.init_velocity_max = kv.get_double("env.init_velocity_max", cfg.env.init_velocity_max);

  cfg.regression.bound_lo = kv.get_double("regression.bound_lo", cfg.regression.bound_lo);
  cfg.regression.bound_hi = kv.get_double("regression.bound_hi", cfg.regression.bound_hi);
  cfg.regression.sample_lo = kv.get_double("regression.sample_lo", cfg.regression.sample_lo);
  cfg.regression.sample_hi = kv.get_double("regression.sample_hi", cfg.regression.sample_hi);
  cfg.regression.samples_per_episode = static_cast<int>(
      kv.get_int("regression.samples_per_episode", cfg.regression.samples_per_episode));

  cfg.eval_period = static_cast<std::size_t>(
      kv.get_int("eval.period", static_cast<long>(cfg.eval_period)));
  if (kv.has("eval.positions"))
    cfg.eval_positions = detail::parse_double_list(kv.get_string("eval.positions", ""));
  if (kv.has("eval.velocities"))
    cfg.eval_velocities = detail::parse_double_list(kv.get_string("eval.velocities", ""));
  cfg.sufficient_cost_threshold =
      kv.get_double("eval.cost_threshold", cfg.sufficient_cost_threshold);

  if (kv.has("curve.episodes"))
    cfg.curve_episodes = detail::parse_size_list(kv.get_string("curve.episodes", ""));
  cfg.curve_points = static_cast<std::size_t>(
      kv.get_int("curve.points", static_cast<long>(cfg.curve_points)));

  if (kv.has("out")) cfg.out_dir = kv.get_string("out", "");
  return cfg;
}

/// Every effective setting, written back out for provenance.
inline KeyValueConfig run_config_to_key_values(const RunConfig& cfg) {
  KeyValueConfig kv;
  kv.set("study", to_string(cfg.study));
  kv.set("seed", static_cast<std::size_t>(cfg.seed));
  kv.set("episodes", cfg.episodes);
  kv.set("penalty.kind", to_string(cfg.penalty.kind));
  kv.set("penalty.uniform_level", cfg.penalty.uniform_level);
  kv.set("penalty.linear_factor", cfg.penalty.linear_factor);
  kv.set("penalty.mu_min", cfg.penalty.mu_min);
  kv.set("penalty.mu_max", cfg.penalty.mu_max);
  kv.set("penalty.growth", cfg.penalty.growth);
  kv.set("penalty.alpha", cfg.penalty.alpha);
  kv.set("penalty.smoothing_window", cfg.penalty.smoothing_window);
  kv.set("penalty.relabel", cfg.penalty.relabel);
  kv.set("replay.capacity", cfg.replay_capacity);
  kv.set("agent.gamma", cfg.agent.gamma);
  kv.set("agent.eps_start", cfg.agent.eps_start);
  kv.set("agent.eps_end", cfg.agent.eps_end);
  kv.set("agent.eps_decay_episodes", cfg.agent.eps_decay_episodes);
  kv.set("agent.batch_size", cfg.agent.batch_size);
  kv.set("agent.target_sync_period", cfg.agent.target_sync_period);
  kv.set("agent.learning_rate", cfg.agent.learning_rate);
  {
    std::vector<std::size_t> hidden(cfg.agent.hidden.begin(), cfg.agent.hidden.end());
    kv.set("agent.hidden", detail::join(hidden));
  }
  kv.set("agent.updates_per_episode", cfg.agent.updates_per_episode);
  kv.set("env.dt", cfg.env.dt);
  kv.set("env.integrator",
         cfg.env.integrator == Integrator::kForwardEuler ? "euler" : "zoh");
  kv.set("env.rho", cfg.env.rho);
  kv.set("env.horizon", cfg.env.horizon);
  kv.set("env.position_min", cfg.env.position_min);
  kv.set("env.position_max", cfg.env.position_max);
  kv.set("env.velocity_min", cfg.env.velocity_min);
  kv.set("env.velocity_max", cfg.env.velocity_max);
  kv.set("env.init_position_min", cfg.env.init_position_min);
  kv.set("env.init_position_max", cfg.env.init_position_max);
  kv.set("env.init_velocity_min", cfg.env.init_velocity_min);
  kv.set("env.init_velocity_max", cfg.env.init_velocity_max);
  kv.set("regression.bound_lo", cfg.regression.bound_lo);
  kv.set("regression.bound_hi", cfg.regression.bound_hi);
  kv.set("regression.sample_lo", cfg.regression.sample_lo);
  kv.set("regression.sample_hi", cfg.regression.sample_hi);
  kv.set("regression.samples_per_episode", cfg.regression.samples_per_episode);
  kv.set("eval.period", cfg.eval_period);
  kv.set("eval.positions", detail::join(cfg.eval_positions));
  kv.set("eval.velocities", detail::join(cfg.eval_velocities));
  kv.set("eval.cost_threshold", cfg.sufficient_cost_threshold);
  kv.set("curve.episodes", detail::join(cfg.curve_episodes));
  kv.set("curve.points", cfg.curve_points);
  if (!cfg.out_dir.empty()) kv.set("out", cfg.out_dir.string());
  return kv;
}

// ---------------------------------------------------------------------------
// Run records
// ---------------------------------------------------------------------------

struct EvalRow {
  std::size_t episode = 0;
  int init_index = 0;
  double cost = 0.0;
  int violations = 0;
  bool pass = false;
};

struct EvalBlock {
  std::size_t episode = 0;
  std::vector<EvalRow> rows;
  bool sufficient = false;
  double mean_cost = 0.0;
};

/// A policy checkpoint qualifies when every evaluated trajectory is
/// violation-free and each stays within the cost budget.
inline bool is_sufficient_feasible(const std::vector<EvalRow>& rows) {
  if (rows.empty()) return false;
  return std::all_of(rows.begin(), rows.end(), [](const EvalRow& r) { return r.pass; });
}

struct RunRecord {
  Study study = Study::kVehicle;
  PenaltyKind kind = PenaltyKind::kDynamic;
  std::uint64_t seed = 0;
  std::size_t episodes = 0;
  std::vector<double> episode_loss;  // mean over that episode's updates
  std::vector<double> episode_mu;    // penalty coefficient after the episode
  std::vector<EvalBlock> evals;
  bool diverged = false;
  std::size_t diverged_episode = 0;
  std::string error;
  std::optional<std::size_t> first_sufficient_episode;
  std::optional<double> best_pass_cost;
  std::optional<double> final_loss_mean100;
  std::optional<double> final_interior_error;

  void finalize_loss_stats() {
    if (episode_loss.empty()) return;
    const std::size_t n = std::min<std::size_t>(100, episode_loss.size());
    double sum = 0.0;
    for (std::size_t i = episode_loss.size() - n; i < episode_loss.size(); ++i)
      sum += episode_loss[i];
    final_loss_mean100 = sum / static_cast<double>(n);
  }
};

// ---------------------------------------------------------------------------
// CSV / JSON output
// ---------------------------------------------------------------------------

namespace detail {

inline std::string csv_num(double v) { return KeyValueConfig::format_double(v); }

inline void write_loss_csv(const std::filesystem::path& path, const RunRecord& rec) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "episode,mean_loss,mu\n";
  for (std::size_t i = 0; i < rec.episode_loss.size(); ++i) {
    os << (i + 1) << ',' << csv_num(rec.episode_loss[i]) << ','
       << csv_num(rec.episode_mu[i]) << '\n';
  }
}

inline void write_eval_csv(const std::filesystem::path& path, const RunRecord& rec) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "episode,init_idx,cost,violations,pass\n";
  for (const auto& block : rec.evals) {
    for (const auto& row : block.rows) {
      os << block.episode << ',' << row.init_index << ',' << csv_num(row.cost) << ','
         << row.violations << ',' << (row.pass ? 1 : 0) << '\n';
    }
  }
}

inline void write_run_json(const std::filesystem::path& path, const RunRecord& rec) {
  nlohmann::json j;
  j["study"] = to_string(rec.study);
  j["penalty_kind"] = to_string(rec.kind);
  j["seed"] = rec.seed;
  j["episodes"] = rec.episodes;
  j["diverged"] = rec.diverged;
  if (rec.diverged) {
    j["diverged_episode"] = rec.diverged_episode;
    j["error"] = rec.error;
  }
  j["first_sufficient_episode"] =
      rec.first_sufficient_episode ? nlohmann::json(*rec.first_sufficient_episode)
                                   : nlohmann::json(nullptr);
  j["best_pass_cost"] = rec.best_pass_cost ? nlohmann::json(*rec.best_pass_cost)
                                           : nlohmann::json(nullptr);
  j["final_loss_mean100"] = rec.final_loss_mean100
                                ? nlohmann::json(*rec.final_loss_mean100)
                                : nlohmann::json(nullptr);
  j["final_interior_error"] = rec.final_interior_error
                                  ? nlohmann::json(*rec.final_interior_error)
                                  : nlohmann::json(nullptr);
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

}  // namespace detail

// ---------------------------------------------------------------------------
// 1-D regression study
// ---------------------------------------------------------------------------

struct RegressionOutputs {
  RunRecord record;
  Network net;
  std::vector<double> grid;
  // (episode, prediction-per-grid-point), recorded at the configured episodes
  std::vector<std::pair<std::size_t, std::vector<double>>> curves;
};

/// Train the regression network for `episodes` episodes: each episode pushes
/// one batch of sampled (x, target) pairs and performs one minibatch update.
inline RegressionOutputs run_regress1d(const RunConfig& cfg) {
  RegressionOutputs out;
  RunRecord& rec = out.record;
  rec.study = Study::kRegress1d;
  rec.kind = cfg.penalty.kind;
  rec.seed = cfg.seed;
  rec.episodes = cfg.episodes;

  Rng rng(cfg.seed);
  Penalty penalty = make_penalty(cfg.penalty);
  MovingAverage smoother(cfg.penalty.smoothing_window);
  Network net = make_mlp(1, cfg.agent.hidden, 1, rng);
  Optimizer opt = make_optimizer(net, OptimizerRule::kAdam, cfg.agent.learning_rate);
  ReplayBuffer buffer(cfg.replay_capacity);

  out.grid.resize(cfg.curve_points);
  for (std::size_t i = 0; i < cfg.curve_points; ++i) {
    out.grid[i] = cfg.regression.sample_lo +
                  (cfg.regression.sample_hi - cfg.regression.sample_lo) *
                      static_cast<double>(i) / static_cast<double>(cfg.curve_points - 1);
  }

  ForwardPass fp;
  Gradients grads;
  std::vector<double> scratch;
  std::vector<const Transition*> batch;
  std::vector<double> inputs, targets;

  auto record_curve = [&](std::size_t episode) {
    ForwardPass grid_fp;
    forward_batch(net, out.grid, out.grid.size(), grid_fp);
    const auto pred = grid_fp.outputs();
    out.curves.emplace_back(episode, std::vector<double>(pred.begin(), pred.end()));
  };

  try {
    for (std::size_t ep = 1; ep <= cfg.episodes; ++ep) {
      for (const auto& [x, y] : sample_episode_1d(rng, penalty, cfg.regression)) {
        Transition t;
        t.state = {x};
        t.reward = y;
        buffer.push(std::move(t));
      }

      buffer.sample(cfg.agent.batch_size, rng, batch);
      inputs.clear();
      targets.clear();
      for (const Transition* t : batch) {
        inputs.push_back(t->state[0]);
        targets.push_back(cfg.penalty.relabel
                              ? target_value_1d(t->state[0], penalty, cfg.regression)
                              : t->reward);
      }
      const double loss = backward(net, inputs, targets, batch.size(), fp, grads, scratch);
      if (!std::isfinite(loss)) throw TrainingDiverged("non-finite regression loss");
      step(net, opt, grads);
      if (penalty.kind() == PenaltyKind::kDynamic)
        penalty.schedule()->observe(smoother.push(loss));

      rec.episode_loss.push_back(loss);
      rec.episode_mu.push_back(penalty.coefficient());
      if (std::find(cfg.curve_episodes.begin(), cfg.curve_episodes.end(), ep) !=
          cfg.curve_episodes.end())
        record_curve(ep);
    }
  } catch (const TrainingDiverged& e) {
    rec.diverged = true;
    rec.diverged_episode = rec.episode_loss.size() + 1;
    rec.error = e.what();
  }

  rec.finalize_loss_stats();

  // Max absolute prediction error against the unpenalized objective, on the
  // part of the grid at least 0.5 inside the feasible interval.
  {
    ForwardPass grid_fp;
    forward_batch(net, out.grid, out.grid.size(), grid_fp);
    const auto pred = grid_fp.outputs();
    const double lo = cfg.regression.bound_lo + 0.5;
    const double hi = cfg.regression.bound_hi - 0.5;
    double max_err = 0.0;
    for (std::size_t i = 0; i < out.grid.size(); ++i) {
      const double x = out.grid[i];
      if (x < lo || x > hi) continue;
      max_err = std::max(max_err, std::abs(pred[i] - objective_1d(x)));
    }
    rec.final_interior_error = max_err;
  }

  out.net = net;

  if (!cfg.out_dir.empty()) {
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);
    run_config_to_key_values(cfg).write_file(cfg.out_dir / "config.txt");
    detail::write_loss_csv(cfg.out_dir / "loss.csv", rec);
    detail::write_run_json(cfg.out_dir / "run.json", rec);
    save_network(net, cfg.out_dir / "net.txt");
    for (const auto& [episode, pred] : out.curves) {
      std::ofstream os(cfg.out_dir / ("curve_ep" + std::to_string(episode) + ".csv"));
      os << "x,prediction,target\n";
      for (std::size_t i = 0; i < out.grid.size(); ++i) {
        os << detail::csv_num(out.grid[i]) << ',' << detail::csv_num(pred[i]) << ','
           << detail::csv_num(target_value_1d(out.grid[i], penalty, cfg.regression)) << '\n';
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vehicle case study
// ---------------------------------------------------------------------------

struct VehicleOutputs {
  RunRecord record;
  Network net;
};

/// Full DQN training run on the vehicle environment with the every-N-episode
/// exploration-free evaluation protocol.
inline VehicleOutputs run_vehicle(const RunConfig& cfg) {
  VehicleOutputs out;
  RunRecord& rec = out.record;
  rec.study = Study::kVehicle;
  rec.kind = cfg.penalty.kind;
  rec.seed = cfg.seed;
  rec.episodes = cfg.episodes;

  Rng rng(cfg.seed);
  Penalty penalty = make_penalty(cfg.penalty);
  VehicleEnv env(cfg.env);
  AgentConfig agent_cfg = cfg.agent;
  agent_cfg.loss_smoothing_window = cfg.penalty.smoothing_window;
  agent_cfg.relabel_rewards = cfg.penalty.relabel;
  DqnAgent agent(2, static_cast<std::size_t>(env.actions().size()), agent_cfg, penalty, rng);
  ReplayBuffer buffer(cfg.replay_capacity);
  const auto eval_states = cfg.evaluation_states();

  try {
    for (std::size_t ep = 0; ep < cfg.episodes; ++ep) {
      const double eps = epsilon_for_episode(agent_cfg, ep);
      VehicleState s = env.sample_initial(rng);
      double loss_sum = 0.0;
      std::size_t loss_count = 0;

      for (int k = 0; k < env.horizon(); ++k) {
        const auto arr = s.as_array();
        const int a = agent.select_action(arr, eps, rng);
        const auto sr = env.step(s, a);
        Transition t;
        t.state = {s.position, s.velocity};
        t.action = a;
        t.stage_cost = sr.stage_cost;
        t.ks = sr.ks;
        t.reward = reward(sr.stage_cost, sr.ks, penalty);
        t.next_state = {sr.next.position, sr.next.velocity};
        t.terminal = (k == env.horizon() - 1);
        buffer.push(std::move(t));
        s = sr.next;

        if (agent_cfg.updates_per_episode == 0) {
          loss_sum += agent.train_step(buffer, rng);
          ++loss_count;
        }
      }
      for (std::size_t u = 0; u < agent_cfg.updates_per_episode; ++u) {
        loss_sum += agent.train_step(buffer, rng);
        ++loss_count;
      }

      rec.episode_loss.push_back(loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0);
      rec.episode_mu.push_back(penalty.coefficient());

      const std::size_t episode_number = ep + 1;
      if (cfg.eval_period > 0 && episode_number % cfg.eval_period == 0) {
        EvalBlock block;
        block.episode = episode_number;
        const auto evals = evaluate_policy(agent, env, eval_states);
        double cost_sum = 0.0;
        for (std::size_t i = 0; i < evals.size(); ++i) {
          EvalRow row;
          row.episode = episode_number;
          row.init_index = static_cast<int>(i);
          row.cost = evals[i].total_stage_cost;
          row.violations = evals[i].violations;
          row.pass = row.violations == 0 && row.cost <= cfg.sufficient_cost_threshold;
          cost_sum += row.cost;
          block.rows.push_back(row);
        }
        block.mean_cost = evals.empty() ? 0.0 : cost_sum / static_cast<double>(evals.size());
        block.sufficient = is_sufficient_feasible(block.rows);
        if (block.sufficient) {
          if (!rec.first_sufficient_episode) rec.first_sufficient_episode = episode_number;
          if (!rec.best_pass_cost || block.mean_cost < *rec.best_pass_cost)
            rec.best_pass_cost = block.mean_cost;
        }
        rec.evals.push_back(std::move(block));
      }
    }
  } catch (const TrainingDiverged& e) {
    rec.diverged = true;
    rec.diverged_episode = rec.episode_loss.size() + 1;
    rec.error = e.what();
  }

  rec.finalize_loss_stats();
  out.net = agent.online();

  if (!cfg.out_dir.empty()) {
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);
    run_config_to_key_values(cfg).write_file(cfg.out_dir / "config.txt");
    detail::write_loss_csv(cfg.out_dir / "loss.csv", rec);
    detail::write_eval_csv(cfg.out_dir / "eval.csv", rec);
    detail::write_run_json(cfg.out_dir / "run.json", rec);
    save_network(out.net, cfg.out_dir / "net.txt");
  }
  return out;
}

inline RunRecord run_one(const RunConfig& cfg) {
  return cfg.study == Study::kRegress1d ? run_regress1d(cfg).record
                                        : run_vehicle(cfg).record;
}

// ---------------------------------------------------------------------------
// Multi-seed studies
// ---------------------------------------------------------------------------

struct StudyConfig {
  RunConfig base;  // study, episodes, penalty parameters etc.; kind/seed/out set per run
  std::vector<PenaltyKind> kinds = {PenaltyKind::kUniform, PenaltyKind::kLinear,
                                    PenaltyKind::kDynamic};
  std::vector<std::uint64_t> seeds = {0};
  std::size_t jobs = 1;
  std::filesystem::path out_dir;
};

struct KindSummary {
  std::size_t seeds_total = 0;
  std::size_t diverged = 0;
  std::size_t sufficient_count = 0;
  std::optional<double> average_cost;  // over sufficient seeds only
  std::map<std::size_t, std::size_t> checkpoint_counts;
  std::optional<double> median_final_loss;
  std::optional<double> median_interior_error;
  std::vector<RunRecord> runs;
};

struct StudySummary {
  Study study = Study::kVehicle;
  std::size_t episodes = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<std::pair<PenaltyKind, KindSummary>> kinds;
  bool any_diverged = false;

  const KindSummary& kind(PenaltyKind k) const {
    for (const auto& [kk, s] : kinds)
      if (kk == k) return s;
    throw std::out_of_range("kind not in summary");
  }
};

namespace detail {
inline std::optional<double> median(std::vector<double> v) {
  if (v.empty()) return std::nullopt;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}
}  // namespace detail

/// Aggregate per-run records into the per-kind study summary.
inline StudySummary summarize_study(const StudyConfig& cfg,
                                    const std::vector<std::vector<RunRecord>>& by_kind) {
  StudySummary summary;
  summary.study = cfg.base.study;
  summary.episodes = cfg.base.episodes;
  summary.seeds = cfg.seeds;
  const auto checkpoints = cfg.base.checkpoint_episodes();

  for (std::size_t ki = 0; ki < cfg.kinds.size(); ++ki) {
    KindSummary ks;
    ks.seeds_total = by_kind[ki].size();
    std::vector<double> pass_costs, final_losses, interior_errors;
    for (std::size_t e : checkpoints) ks.checkpoint_counts[e] = 0;
    for (const RunRecord& rec : by_kind[ki]) {
      if (rec.diverged) {
        ++ks.diverged;
        summary.any_diverged = true;
      }
      if (rec.first_sufficient_episode) {
        ++ks.sufficient_count;
        for (std::size_t e : checkpoints)
          if (*rec.first_sufficient_episode <= e) ++ks.checkpoint_counts[e];
        if (rec.best_pass_cost) pass_costs.push_back(*rec.best_pass_cost);
      }
      if (rec.final_loss_mean100) final_losses.push_back(*rec.final_loss_mean100);
      if (rec.final_interior_error) interior_errors.push_back(*rec.final_interior_error);
      ks.runs.push_back(rec);
    }
    if (!pass_costs.empty()) {
      double sum = 0.0;
      for (double c : pass_costs) sum += c;
      ks.average_cost = sum / static_cast<double>(pass_costs.size());
    }
    ks.median_final_loss = detail::median(final_losses);
    ks.median_interior_error = detail::median(interior_errors);
    summary.kinds.emplace_back(cfg.kinds[ki], std::move(ks));
  }
  return summary;
}

/// Published full-scale (100-seed) reference results for the vehicle study,
/// reported alongside desk-scale reruns for comparison.
inline nlohmann::json vehicle_reference_results() {
  nlohmann::json ref;
  ref["seeds_total"] = 100;
  ref["episodes"] = 2000;
  ref["kinds"]["uniform"] = {
      {"sufficient_count", 8},
      {"average_cost", 3.7627},
      {"checkpoint_counts", {{"500", 0}, {"1000", 0}, {"1500", 4}, {"2000", 8}}}};
  ref["kinds"]["linear"] = {
      {"sufficient_count", 5},
      {"average_cost", 3.2835},
      {"checkpoint_counts", {{"500", 0}, {"1000", 0}, {"1500", 0}, {"2000", 5}}}};
  ref["kinds"]["dynamic"] = {
      {"sufficient_count", 28},
      {"average_cost", 3.1988},
      {"checkpoint_counts", {{"500", 0}, {"1000", 1}, {"1500", 16}, {"2000", 28}}}};
  return ref;
}

inline nlohmann::json study_summary_to_json(const StudySummary& summary) {
  nlohmann::json j;
  j["study"] = to_string(summary.study);
  j["episodes"] = summary.episodes;
  j["seeds"] = summary.seeds;
  j["any_diverged"] = summary.any_diverged;
  for (const auto& [kind, ks] : summary.kinds) {
    nlohmann::json jk;
    jk["seeds_total"] = ks.seeds_total;
    jk["diverged"] = ks.diverged;
    jk["sufficient_count"] = ks.sufficient_count;
    jk["average_cost"] =
        ks.average_cost ? nlohmann::json(*ks.average_cost) : nlohmann::json(nullptr);
    nlohmann::json counts;
    for (const auto& [e, c] : ks.checkpoint_counts) counts[std::to_string(e)] = c;
    jk["checkpoint_counts"] = counts;
    jk["median_final_loss"] = ks.median_final_loss ? nlohmann::json(*ks.median_final_loss)
                                                   : nlohmann::json(nullptr);
    jk["median_interior_error"] = ks.median_interior_error
                                      ? nlohmann::json(*ks.median_interior_error)
                                      : nlohmann::json(nullptr);
    nlohmann::json runs = nlohmann::json::array();
    for (const RunRecord& rec : ks.runs) {
      nlohmann::json jr;
      jr["seed"] = rec.seed;
      jr["diverged"] = rec.diverged;
      jr["first_sufficient_episode"] = rec.first_sufficient_episode
                                           ? nlohmann::json(*rec.first_sufficient_episode)
                                           : nlohmann::json(nullptr);
      jr["best_pass_cost"] = rec.best_pass_cost ? nlohmann::json(*rec.best_pass_cost)
                                                : nlohmann::json(nullptr);
      jr["final_loss_mean100"] = rec.final_loss_mean100
                                     ? nlohmann::json(*rec.final_loss_mean100)
                                     : nlohmann::json(nullptr);
      jr["final_interior_error"] = rec.final_interior_error
                                       ? nlohmann::json(*rec.final_interior_error)
                                       : nlohmann::json(nullptr);
      runs.push_back(jr);
    }
    jk["runs"] = runs;
    j["kinds"][to_string(kind)] = jk;
  }
  if (summary.study == Study::kVehicle)
    j["reference_full_scale"] = vehicle_reference_results();
  return j;
}

/// Execute kinds x seeds independent runs (seed-level parallelism only; each
/// run is sequential, so per-run outputs do not depend on the worker count).
inline StudySummary run_study(const StudyConfig& cfg) {
  struct Job {
    std::size_t kind_index;
    std::size_t seed_index;
    RunConfig run_cfg;
  };
  std::vector<Job> jobs;
  for (std::size_t ki = 0; ki < cfg.kinds.size(); ++ki) {
    for (std::size_t si = 0; si < cfg.seeds.size(); ++si) {
      RunConfig rc = cfg.base;
      rc.penalty.kind = cfg.kinds[ki];
      rc.seed = cfg.seeds[si];
      if (!cfg.out_dir.empty())
        rc.out_dir = cfg.out_dir / to_string(cfg.kinds[ki]) /
                     ("seed_" + std::to_string(cfg.seeds[si]));
      jobs.push_back({ki, si, std::move(rc)});
    }
  }

  std::vector<std::vector<RunRecord>> by_kind(cfg.kinds.size());
  for (auto& v : by_kind) v.resize(cfg.seeds.size());

  std::atomic<std::size_t> next{0};
  const std::size_t n_workers = std::max<std::size_t>(1, cfg.jobs);
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      const Job& job = jobs[i];
      RunRecord rec;
      try {
        rec = run_one(job.run_cfg);
      } catch (const std::exception& e) {
        rec.study = job.run_cfg.study;
        rec.kind = job.run_cfg.penalty.kind;
        rec.seed = job.run_cfg.seed;
        rec.episodes = job.run_cfg.episodes;
        rec.diverged = true;
        rec.error = e.what();
      }
      by_kind[job.kind_index][job.seed_index] = std::move(rec);
    }
  };

  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  StudySummary summary = summarize_study(cfg, by_kind);
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    std::ofstream os(cfg.out_dir / "summary.json");
    os << study_summary_to_json(summary).dump(2) << '\n';
  }
  return summary;
}

// ---------------------------------------------------------------------------
// Re-aggregation of existing run directories
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::istringstream ls(line);
    std::string field;
    while (std::getline(ls, field, ',')) fields.push_back(field);
    rows.push_back(std::move(fields));
  }
  return rows;
}

/// Rebuild a RunRecord from a run directory. Evaluation-derived statistics
/// are recomputed from eval.csv rather than trusted from run.json, so the
/// CSVs stay authoritative.
inline RunRecord load_run_dir(const std::filesystem::path& dir) {
  std::ifstream is(dir / "run.json");
  if (!is) throw std::runtime_error("missing run.json in " + dir.string());
  nlohmann::json j;
  is >> j;

  RunRecord rec;
  rec.study = study_from_string(j.at("study").get<std::string>());
  rec.kind = penalty_kind_from_string(j.at("penalty_kind").get<std::string>());
  rec.seed = j.at("seed").get<std::uint64_t>();
  rec.episodes = j.at("episodes").get<std::size_t>();
  rec.diverged = j.at("diverged").get<bool>();
  if (rec.diverged && j.contains("error")) rec.error = j["error"].get<std::string>();
  if (!j.at("final_interior_error").is_null())
    rec.final_interior_error = j["final_interior_error"].get<double>();

  for (const auto& row : read_csv(dir / "loss.csv")) {
    if (row[0] == "episode") continue;
    rec.episode_loss.push_back(std::stod(row[1]));
    rec.episode_mu.push_back(std::stod(row[2]));
  }
  rec.finalize_loss_stats();

  const auto eval_path = dir / "eval.csv";
  if (std::filesystem::exists(eval_path)) {
    std::map<std::size_t, EvalBlock> blocks;
    for (const auto& row : read_csv(eval_path)) {
      if (row[0] == "episode") continue;
      EvalRow er;
      er.episode = static_cast<std::size_t>(std::stoul(row[0]));
      er.init_index = std::stoi(row[1]);
      er.cost = std::stod(row[2]);
      er.violations = std::stoi(row[3]);
      er.pass = row[4] == "1";
      auto& block = blocks[er.episode];
      block.episode = er.episode;
      block.rows.push_back(er);
    }
    for (auto& [episode, block] : blocks) {
      double sum = 0.0;
      for (const auto& r : block.rows) sum += r.cost;
      block.mean_cost = block.rows.empty() ? 0.0 : sum / static_cast<double>(block.rows.size());
      block.sufficient = is_sufficient_feasible(block.rows);
      if (block.sufficient) {
        if (!rec.first_sufficient_episode) rec.first_sufficient_episode = episode;
        if (!rec.best_pass_cost || block.mean_cost < *rec.best_pass_cost)
          rec.best_pass_cost = block.mean_cost;
      }
      rec.evals.push_back(block);
    }
  }
  return rec;
}

}  // namespace detail

/// Scan `<study_dir>/<kind>/seed_*` directories and rebuild the summary.
inline StudySummary report_study(const std::filesystem::path& study_dir) {
  namespace fs = std::filesystem;
  StudyConfig cfg;
  cfg.kinds.clear();
  cfg.seeds.clear();
  std::vector<std::vector<RunRecord>> by_kind;

  for (PenaltyKind kind :
       {PenaltyKind::kUniform, PenaltyKind::kLinear, PenaltyKind::kDynamic}) {
    const fs::path kind_dir = study_dir / to_string(kind);
    if (!fs::exists(kind_dir)) continue;
    std::vector<fs::path> run_dirs;
    for (const auto& entry : fs::directory_iterator(kind_dir)) {
      if (entry.is_directory() && entry.path().filename().string().rfind("seed_", 0) == 0)
        run_dirs.push_back(entry.path());
    }
    std::sort(run_dirs.begin(), run_dirs.end(), [](const fs::path& a, const fs::path& b) {
      auto num = [](const fs::path& p) {
        return std::stoull(p.filename().string().substr(5));
      };
      return num(a) < num(b);
    });
    if (run_dirs.empty()) continue;
    std::vector<RunRecord> records;
    for (const auto& dir : run_dirs) records.push_back(detail::load_run_dir(dir));
    cfg.kinds.push_back(kind);
    by_kind.push_back(std::move(records));
  }
  if (cfg.kinds.empty())
    throw std::runtime_error("no run directories found under " + study_dir.string());

  // Seeds and study metadata from the first kind's records.
  for (const auto& rec : by_kind.front()) cfg.seeds.push_back(rec.seed);
  cfg.base.study = by_kind.front().front().study;
  cfg.base.episodes = by_kind.front().front().episodes;
  return summarize_study(cfg, by_kind);
}

/// Human-readable per-kind table.
inline std::string study_summary_table(const StudySummary& summary) {
  std::ostringstream os;
  os << "study: " << to_string(summary.study) << ", episodes: " << summary.episodes
     << ", seeds: " << summary.seeds.size() << "\n";
  const auto checkpoints_of = [&](const KindSummary& ks) {
    std::string s;
    for (const auto& [e, c] : ks.checkpoint_counts) {
      if (!s.empty()) s += " ";
      s += std::to_string(e) + ":" + std::to_string(c);
    }
    return s;
  };
  for (const auto& [kind, ks] : summary.kinds) {
    os << "  " << to_string(kind) << ": sufficient " << ks.sufficient_count << "/"
       << ks.seeds_total;
    if (ks.average_cost) os << ", avg cost " << *ks.average_cost;
    if (ks.median_final_loss) os << ", median final loss " << *ks.median_final_loss;
    if (ks.median_interior_error)
      os << ", median interior err " << *ks.median_interior_error;
    if (!ks.checkpoint_counts.empty()) os << ", by episode {" << checkpoints_of(ks) << "}";
    if (ks.diverged) os << ", diverged " << ks.diverged;
    os << "\n";
  }
  return os.str();
}

}  // namespace dynpen
