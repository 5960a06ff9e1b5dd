#pragma once

#include "dyna/core.hpp"
#include "dyna/q_function.hpp"
#include "dyna/ring_buffer.hpp"
#include "dyna/rng.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>

namespace dyna {

using ReplayBuffer = RingBuffer<Transition>;

/// Linear anneal from `start` to `end` over the first
/// `anneal_fraction * total_frames` combined (real + simulated) frames.
struct EpsilonSchedule {
  double start = 1.0;
  double end = 0.01;
  double anneal_fraction = 0.10;
  std::uint64_t total_frames = 1;
};

double epsilon_at(const EpsilonSchedule& schedule, std::uint64_t frame);

/// Uniform random action with probability `eps`, otherwise the argmax of `q`
/// with ties broken uniformly. Always consumes one uniform draw first.
ActionIndex epsilon_greedy(const Vector& q, double eps, Rng& rng);

struct QLearnerConfig {
  int train_frequency = 4;
  int batch_size = 32;
  double step_size = 0.01;
  double discount = 0.99;
  int target_sync_period = 500;
  int hidden_units = 0;
  std::size_t replay_capacity = 50'000;
  /// Training steps per trigger; values above 1 give the Extra-Updates control.
  int updates_per_train = 1;

  void validate() const;
};

struct SarsaConfig {
  double step_size = 0.01;
  double discount = 0.99;
  double lambda = 0.0;
  /// Updates per real transition; the extra ones replay `history_capacity`
  /// recent real transitions (Sarsa Extra-Updates control).
  int updates_per_real_step = 1;
  std::size_t history_capacity = 1'000;

  void validate() const;
};

/// Value learner pluggable into the Dyna loop.
class Agent {
 public:
  virtual ~Agent() = default;

  virtual std::string kind() const = 0;
  virtual Vector q_values(const Observation& obs) const = 0;
  virtual void observe(const Transition& t, Rng& rng) = 0;
  virtual std::unique_ptr<Agent> clone() const = 0;

  ActionIndex select_action(const Observation& obs, double eps, Rng& rng) const {
    return epsilon_greedy(q_values(obs), eps, rng);
  }

  double epsilon() const { return epsilon_at(schedule_, frames()); }
  const EpsilonSchedule& schedule() const { return schedule_; }
  void set_schedule(const EpsilonSchedule& s) { schedule_ = s; }

  std::uint64_t frames() const { return real_frames_ + simulated_frames_; }
  std::uint64_t real_frames() const { return real_frames_; }
  std::uint64_t simulated_frames() const { return simulated_frames_; }
  std::uint64_t train_steps() const { return train_steps_; }

  /// Flat float64 parameter vector plus JSON metadata for checkpoints.
  virtual Vector parameters() const = 0;
  virtual void set_parameters(const Vector& flat) = 0;
  virtual int feature_dim() const = 0;
  virtual int action_count() const = 0;
  virtual int hidden_units() const { return 0; }

 protected:
  void count_frame(const Transition& t) { ++(t.simulated ? simulated_frames_ : real_frames_); }

  EpsilonSchedule schedule_;
  std::uint64_t real_frames_ = 0;
  std::uint64_t simulated_frames_ = 0;
  std::uint64_t train_steps_ = 0;
};

/// Replay-based Q-learning with a target network (mini-DQN).
class QLearner final : public Agent {
 public:
  QLearner(int feature_dim, int action_count, QLearnerConfig config, Rng& init_rng);

  std::string kind() const override { return "q_learner"; }
  Vector q_values(const Observation& obs) const override { return online_.values(obs.features); }

  /// Appends to replay; every `train_frequency` combined frames runs
  /// `updates_per_train` training steps.
  void observe(const Transition& t, Rng& rng) override;

  /// One minibatch step. Returns the mean squared TD error.
  double train_step(Rng& rng);

  std::unique_ptr<Agent> clone() const override { return std::make_unique<QLearner>(*this); }

  Vector parameters() const override { return online_.flatten(); }
  void set_parameters(const Vector& flat) override;
  int feature_dim() const override { return online_.feature_dim(); }
  int action_count() const override { return online_.action_count(); }
  int hidden_units() const override { return online_.hidden_units(); }

  const QLearnerConfig& config() const { return config_; }
  const ReplayBuffer& replay() const { return replay_; }
  const QFunction<double>& online() const { return online_; }
  const QFunction<double>& target() const { return target_; }

 private:
  QLearnerConfig config_;
  ReplayBuffer replay_;
  QFunction<double> online_;
  QFunction<double> target_;
  std::vector<QSample<double>> batch_;
};

/// Linear Sarsa(0). Each observed transition is updated immediately, with
/// the successor action drawn from the agent's current epsilon-greedy policy.
class SarsaAgent final : public Agent {
 public:
  SarsaAgent(int feature_dim, int action_count, SarsaConfig config);

  std::string kind() const override { return "sarsa"; }
  Vector q_values(const Observation& obs) const override { return q_.values(obs.features); }
  void observe(const Transition& t, Rng& rng) override;

  /// w <- w + step * (r + discount * q(s', a') * (1 - terminal) - q(s, a)) * phi(s, a).
  /// Returns the TD error.
  double sarsa_update(const Observation& s, ActionIndex a, double r, const Observation& next,
                      ActionIndex next_action, bool terminal);

  std::unique_ptr<Agent> clone() const override { return std::make_unique<SarsaAgent>(*this); }

  Vector parameters() const override { return q_.flatten(); }
  void set_parameters(const Vector& flat) override { q_.assign(flat); }
  int feature_dim() const override { return q_.feature_dim(); }
  int action_count() const override { return q_.action_count(); }

  const SarsaConfig& config() const { return config_; }

 private:
  SarsaConfig config_;
  QFunction<double> q_;
  RingBuffer<Transition> history_;
};

/// Writes `path` (little-endian float64 parameters) and `path` + ".json".
void save_agent_checkpoint(const Agent& agent, const std::filesystem::path& path);

/// Restores a greedy-evaluation agent from a checkpoint (replay is not saved).
std::unique_ptr<Agent> load_agent_checkpoint(const std::filesystem::path& path);

}  // namespace dyna
