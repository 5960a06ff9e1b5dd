#pragma once

#include "dyna/agents.hpp"
#include "dyna/core.hpp"
#include "dyna/models.hpp"
#include "dyna/ring_buffer.hpp"

#include <optional>
#include <string>
#include <vector>

namespace dyna {

/// n rollouts of k steps each.
struct PlanningShape {
  int n = 1;
  int k = 1;

  std::string label() const { return std::to_string(n) + "x" + std::to_string(k); }
  friend bool operator==(const PlanningShape&, const PlanningShape&) = default;
};

/// Throws ConfigError unless n * k == budget.
void validate_shape(const PlanningShape& shape, int budget);

/// Ring of recently visited real states, the only source of rollout starts.
class PlanningBuffer {
 public:
  explicit PlanningBuffer(std::size_t capacity) : entries_(capacity) {}

  /// Throws ContractViolation if `simulated` is set.
  void record(const Observation& obs, const std::optional<EnvState>& env_state, bool simulated = false);

  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return entries_.capacity(); }
  bool empty() const { return entries_.empty(); }
  const ModelCursor& operator[](std::size_t i) const { return entries_[i]; }
  const ModelCursor& sample(Rng& rng) const { return entries_.sample(rng); }

 private:
  RingBuffer<ModelCursor> entries_;
};

struct PlanningStats {
  std::uint64_t calls = 0;
  std::uint64_t skipped_calls = 0;
  std::uint64_t predict_calls = 0;
  /// Budgeted model steps lost to rollouts that hit a predicted terminal.
  std::uint64_t truncation_deficit = 0;
};

struct PlannerConfig {
  PlanningShape shape;
  int budget = 10;
  std::size_t buffer_capacity = 1'000;
  /// Rollout policy epsilon; unset means the agent's current annealed value.
  std::optional<double> rollout_epsilon;
};

/// Dyna planning step: after each real step, n start states are drawn with
/// replacement from the planning buffer and each is rolled out k steps with
/// the agent's epsilon-greedy policy.
class Planner {
 public:
  explicit Planner(PlannerConfig config);

  const PlannerConfig& config() const { return config_; }
  const PlanningBuffer& buffer() const { return buffer_; }
  const PlanningStats& stats() const { return stats_; }

  void record_real_state(const Observation& obs, const std::optional<EnvState>& env_state, bool simulated = false) {
    buffer_.record(obs, env_state, simulated);
  }

  /// Returns the simulated transitions in rollout order (rollout index, then
  /// step). The agent is only read; the caller feeds the result to
  /// agent.observe. With an empty buffer nothing happens and the call is
  /// counted as skipped.
  ///
  /// Draw order on `rng`: for each rollout, one start index then one 64-bit
  /// seed for that rollout's own stream.
  std::vector<Transition> plan_after_real_step(const Agent& agent, const Model& model, Rng& rng);

 private:
  PlannerConfig config_;
  PlanningBuffer buffer_;
  PlanningStats stats_;
};

}  // namespace dyna
