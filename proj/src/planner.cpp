#include "dyna/planner.hpp"

namespace dyna {

void validate_shape(const PlanningShape& shape, int budget) {
  if (shape.n < 1 || shape.k < 1 || budget < 1 || static_cast<long long>(shape.n) * shape.k != budget) {
    throw ConfigError("planning shape n=" + std::to_string(shape.n) + ", k=" + std::to_string(shape.k) +
                      " does not match budget " + std::to_string(budget) + " (need n*k == budget)");
  }
}

void PlanningBuffer::record(const Observation& obs, const std::optional<EnvState>& env_state, bool simulated) {
  if (simulated) throw ContractViolation("planning buffer accepts real states only");
  entries_.push({obs, env_state});
}

Planner::Planner(PlannerConfig config) : config_(config), buffer_(config.buffer_capacity) {
  validate_shape(config_.shape, config_.budget);
}

std::vector<Transition> Planner::plan_after_real_step(const Agent& agent, const Model& model, Rng& rng) {
  ++stats_.calls;
  std::vector<Transition> out;
  if (buffer_.empty()) {
    ++stats_.skipped_calls;
    return out;
  }
  const double eps = config_.rollout_epsilon.value_or(agent.epsilon());
  const Policy policy = [&agent, eps](const Observation& obs, Rng& r) { return agent.select_action(obs, eps, r); };
  out.reserve(static_cast<std::size_t>(config_.budget));
  for (int i = 0; i < config_.shape.n; ++i) {
    const ModelCursor& start = buffer_.sample(rng);
    Rng stream(rng.next_u64());
    std::vector<Transition> steps = rollout(model, start, policy, config_.shape.k, stream);
    stats_.predict_calls += steps.size();
    stats_.truncation_deficit += static_cast<std::uint64_t>(config_.shape.k) - steps.size();
    for (auto& t : steps) out.push_back(std::move(t));
  }
  return out;
}

}  // namespace dyna
