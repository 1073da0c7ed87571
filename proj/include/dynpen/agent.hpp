#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "dynpen/envs.hpp"
#include "dynpen/mlp.hpp"
#include "dynpen/penalty.hpp"
#include "dynpen/replay.hpp"
#include "dynpen/rng.hpp"

namespace dynpen {

/// Index of the largest element; ties go to the lowest index.
inline int argmax_lowest(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("argmax_lowest: empty input");
  int best = 0;
  for (int i = 1; i < static_cast<int>(values.size()); ++i)
    if (values[static_cast<std::size_t>(i)] > values[static_cast<std::size_t>(best)]) best = i;
  return best;
}

struct AgentConfig {
  double gamma = 0.99;
  double eps_start = 1.0;
  double eps_end = 0.05;
  std::size_t eps_decay_episodes = 1000;
  std::size_t batch_size = 64;
  std::size_t target_sync_period = 200;
  double learning_rate = 1e-3;
  std::vector<std::size_t> hidden = {64, 64, 64};
  std::size_t loss_smoothing_window = 1;
  bool relabel_rewards = false;
  std::size_t updates_per_episode = 0;  // 0 = one update per environment step
};

/// Linear decay from eps_start to eps_end over the first eps_decay_episodes,
/// constant afterwards. `episode` is zero-based.
inline double epsilon_for_episode(const AgentConfig& cfg, std::size_t episode) {
  if (cfg.eps_decay_episodes == 0 || episode >= cfg.eps_decay_episodes) return cfg.eps_end;
  const double t = static_cast<double>(episode) / static_cast<double>(cfg.eps_decay_episodes);
  return cfg.eps_start + (cfg.eps_end - cfg.eps_start) * t;
}

/// DQN learner: an online Q-network, a periodically synced frozen copy for
/// TD targets, and minibatch updates out of a replay buffer.
class DqnAgent {
public:
  DqnAgent(std::size_t state_dim, std::size_t n_actions, AgentConfig config,
           Penalty penalty, Rng& init_rng)
      : config_(std::move(config)), penalty_(std::move(penalty)),
        state_dim_(state_dim), n_actions_(n_actions),
        online_(make_mlp(state_dim, config_.hidden, n_actions, init_rng)),
        target_(online_),
        optimizer_(make_optimizer(online_, OptimizerRule::kAdam, config_.learning_rate)),
        loss_smoother_(config_.loss_smoothing_window) {
    if (config_.gamma < 0.0 || config_.gamma > 1.0)
      throw std::invalid_argument("DqnAgent: gamma must lie in [0, 1]");
  }

  std::size_t state_dim() const { return state_dim_; }
  std::size_t n_actions() const { return n_actions_; }
  const AgentConfig& config() const { return config_; }
  const Network& online() const { return online_; }
  const Network& target() const { return target_; }
  Network& online_mutable() { return online_; }
  std::uint64_t updates() const { return update_count_; }
  const Penalty& penalty() const { return penalty_; }

  /// Epsilon-greedy behavior policy; greedy ties break to the lowest index.
  int select_action(std::span<const double> state, double epsilon, Rng& rng) {
    if (epsilon < 0.0 || epsilon > 1.0)
      throw std::invalid_argument("select_action: epsilon must lie in [0, 1]");
    if (epsilon > 0.0 && rng.uniform() < epsilon)
      return static_cast<int>(rng.uniform_index(n_actions_));
    const auto q = forward(online_, state);
    return argmax_lowest(q);
  }

  /// y = r + gamma * max_a Q_target(s', a), or y = r on terminal transitions.
  /// Rewards are re-priced under the live penalty when relabeling is enabled.
  std::vector<double> td_targets(const std::vector<const Transition*>& batch) const {
    if (batch.empty()) throw std::invalid_argument("td_targets: empty batch");
    std::vector<double> targets(batch.size());
    std::vector<double> next_inputs;
    next_inputs.reserve(batch.size() * state_dim_);
    for (const Transition* t : batch)
      next_inputs.insert(next_inputs.end(), t->next_state.begin(), t->next_state.end());
    ForwardPass fp;
    forward_batch(target_, next_inputs, batch.size(), fp);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const Transition& t = *batch[i];
      const double r = config_.relabel_rewards
                           ? reward(t.stage_cost, t.ks, penalty_)
                           : t.reward;
      if (t.terminal) {
        targets[i] = r;
      } else {
        const auto q_next = fp.output_row(i);
        targets[i] = r + config_.gamma * q_next[static_cast<std::size_t>(argmax_lowest(q_next))];
      }
    }
    return targets;
  }

  /// One minibatch Q-update. Returns the batch loss
  ///   (1/B) * sum_i (Q(s_i, a_i) - y_i)^2.
  double train_step(const ReplayBuffer& buffer, Rng& rng) {
    buffer.sample(config_.batch_size, rng, batch_);
    const std::size_t B = batch_.size();
    const auto targets = td_targets(batch_);

    state_inputs_.clear();
    state_inputs_.reserve(B * state_dim_);
    for (const Transition* t : batch_)
      state_inputs_.insert(state_inputs_.end(), t->state.begin(), t->state.end());
    forward_batch(online_, state_inputs_, B, fp_);

    output_grad_.assign(B * n_actions_, 0.0);
    double loss = 0.0;
    const auto outputs = fp_.outputs();
    for (std::size_t i = 0; i < B; ++i) {
      const std::size_t a = static_cast<std::size_t>(batch_[i]->action);
      if (a >= n_actions_) throw std::out_of_range("train_step: action index out of range");
      const double q = outputs[i * n_actions_ + a];
      const double err = q - targets[i];
      loss += err * err;
      output_grad_[i * n_actions_ + a] = 2.0 * err / static_cast<double>(B);
    }
    loss /= static_cast<double>(B);
    if (!std::isfinite(loss)) throw TrainingDiverged("non-finite training loss");

    backprop(online_, fp_, output_grad_, grads_, delta_scratch_);
    step(online_, optimizer_, grads_);
    ++update_count_;
    if (config_.target_sync_period > 0 && update_count_ % config_.target_sync_period == 0)
      target_ = online_;

    if (penalty_.kind() == PenaltyKind::kDynamic)
      penalty_.schedule()->observe(loss_smoother_.push(loss));
    return loss;
  }

  void sync_target() { target_ = online_; }

private:
  AgentConfig config_;
  Penalty penalty_;
  std::size_t state_dim_;
  std::size_t n_actions_;
  Network online_;
  Network target_;
  Optimizer optimizer_;
  MovingAverage loss_smoother_;
  std::uint64_t update_count_ = 0;

  // reusable training buffers
  std::vector<const Transition*> batch_;
  std::vector<double> state_inputs_;
  std::vector<double> output_grad_;
  std::vector<double> delta_scratch_;
  ForwardPass fp_;
  Gradients grads_;
};

// ---------------------------------------------------------------------------
// Greedy policy evaluation on the vehicle environment
// ---------------------------------------------------------------------------

struct TrajectoryEval {
  VehicleState start;
  double total_stage_cost = 0.0;
  int violations = 0;
  std::vector<VehicleState> states;  // start plus one entry per step
  std::vector<int> actions;
};

/// Exploration-free rollout over the environment horizon. The cost excludes
/// penalties; a violation is a visited state with any positive residual.
inline TrajectoryEval rollout_greedy(const Network& q_net, const VehicleEnv& env,
                                     VehicleState start) {
  TrajectoryEval ev;
  ev.start = start;
  ev.states.push_back(start);
  if (env.violates(start)) ev.violations += 1;
  VehicleState s = start;
  for (int k = 0; k < env.horizon(); ++k) {
    const auto arr = s.as_array();
    const auto q = forward(q_net, arr);
    const int a = argmax_lowest(q);
    const auto r = env.step(s, a);
    ev.total_stage_cost += r.stage_cost;
    s = r.next;
    ev.states.push_back(s);
    ev.actions.push_back(a);
    if (env.violates(s)) ev.violations += 1;
  }
  return ev;
}

inline std::vector<TrajectoryEval> evaluate_policy(const DqnAgent& agent,
                                                   const VehicleEnv& env,
                                                   std::span<const VehicleState> starts) {
  std::vector<TrajectoryEval> out;
  out.reserve(starts.size());
  for (const auto& s : starts) out.push_back(rollout_greedy(agent.online(), env, s));
  return out;
}

}  // namespace dynpen
