#include "dyna/agents.hpp"

#include "dyna/io.hpp"

namespace dyna {

double epsilon_at(const EpsilonSchedule& schedule, std::uint64_t frame) {
  const double window = schedule.anneal_fraction * static_cast<double>(schedule.total_frames);
  if (window <= 0.0 || static_cast<double>(frame) >= window) return schedule.end;
  const double t = static_cast<double>(frame) / window;
  return schedule.start + t * (schedule.end - schedule.start);
}

ActionIndex epsilon_greedy(const Vector& q, double eps, Rng& rng) {
  const auto actions = static_cast<std::size_t>(q.size());
  if (rng.uniform() < eps) return static_cast<ActionIndex>(rng.below(actions));
  const double best = q.maxCoeff();
  std::size_t ties = 0;
  for (Eigen::Index a = 0; a < q.size(); ++a) ties += q(a) == best;
  if (ties == 1) {
    Eigen::Index arg = 0;
    q.maxCoeff(&arg);
    return static_cast<ActionIndex>(arg);
  }
  std::size_t pick = rng.below(ties);
  for (Eigen::Index a = 0; a < q.size(); ++a) {
    if (q(a) == best && pick-- == 0) return static_cast<ActionIndex>(a);
  }
  return 0;
}

void QLearnerConfig::validate() const {
  if (train_frequency < 1) throw ConfigError("agent.train_frequency must be positive");
  if (batch_size < 1) throw ConfigError("agent.batch_size must be positive");
  if (!(step_size > 0.0)) throw ConfigError("agent.step_size must be positive");
  if (discount < 0.0 || discount >= 1.0) throw ConfigError("agent.discount must lie in [0, 1)");
  if (target_sync_period < 1) throw ConfigError("agent.target_sync_period must be positive");
  if (hidden_units < 0) throw ConfigError("agent.hidden_units must be non-negative");
  if (replay_capacity < 1) throw ConfigError("agent.replay_capacity must be positive");
  if (updates_per_train < 1) throw ConfigError("agent.updates_per_train must be positive");
}

void SarsaConfig::validate() const {
  if (!(step_size > 0.0)) throw ConfigError("agent.step_size must be positive");
  if (discount < 0.0 || discount >= 1.0) throw ConfigError("agent.discount must lie in [0, 1)");
  if (lambda != 0.0) throw ConfigError("agent.lambda: only lambda = 0 (no eligibility traces) is supported");
  if (updates_per_real_step < 1) throw ConfigError("agent.updates_per_real_step must be positive");
  if (history_capacity < 1) throw ConfigError("agent.history_capacity must be positive");
}

QLearner::QLearner(int feature_dim, int action_count, QLearnerConfig config, Rng& init_rng)
    : config_(config),
      replay_((config.validate(), config.replay_capacity)),
      online_(feature_dim, action_count, config.hidden_units, init_rng),
      target_(online_) {
  batch_.reserve(static_cast<std::size_t>(config_.batch_size));
}

void QLearner::observe(const Transition& t, Rng& rng) {
  replay_.push(t);
  count_frame(t);
  if (frames() % static_cast<std::uint64_t>(config_.train_frequency) == 0) {
    for (int i = 0; i < config_.updates_per_train; ++i) train_step(rng);
  }
}

double QLearner::train_step(Rng& rng) {
  if (replay_.empty()) throw ContractViolation("train_step on an empty replay buffer");
  batch_.clear();
  for (int i = 0; i < config_.batch_size; ++i) {
    const Transition& t = replay_.sample(rng);
    double y = clip_reward(t.reward);
    if (!t.terminal) y += config_.discount * target_.values(t.next_state.features).maxCoeff();
    batch_.push_back({&t.state.features, t.action, y});
  }
  const double loss = online_.sgd_step(batch_, config_.step_size);
  ++train_steps_;
  if (train_steps_ % static_cast<std::uint64_t>(config_.target_sync_period) == 0) target_ = online_;
  return loss;
}

void QLearner::set_parameters(const Vector& flat) {
  online_.assign(flat);
  target_ = online_;
}

SarsaAgent::SarsaAgent(int feature_dim, int action_count, SarsaConfig config)
    : config_(config), history_((config.validate(), config.history_capacity)) {
  Rng unused(0);
  q_ = QFunction<double>(feature_dim, action_count, 0, unused);
}

double SarsaAgent::sarsa_update(const Observation& s, ActionIndex a, double r, const Observation& next,
                                ActionIndex next_action, bool terminal) {
  const double bootstrap = terminal ? 0.0 : config_.discount * q_.value(next.features, next_action);
  const double delta = clip_reward(r) + bootstrap - q_.value(s.features, a);
  q_.add_to_action(a, s.features, config_.step_size * delta);
  ++train_steps_;
  return delta;
}

void SarsaAgent::observe(const Transition& t, Rng& rng) {
  const ActionIndex next = t.terminal ? 0 : select_action(t.next_state, epsilon(), rng);
  sarsa_update(t.state, t.action, t.reward, t.next_state, next, t.terminal);
  count_frame(t);
  if (t.simulated) return;
  history_.push(t);
  for (int i = 1; i < config_.updates_per_real_step; ++i) {
    const Transition& h = history_.sample(rng);
    const ActionIndex hn = h.terminal ? 0 : select_action(h.next_state, epsilon(), rng);
    sarsa_update(h.state, h.action, h.reward, h.next_state, hn, h.terminal);
  }
}

void save_agent_checkpoint(const Agent& agent, const std::filesystem::path& path) {
  io::write_float64_blob(path, agent.parameters());
  io::Json meta = {
      {"kind", agent.kind()},
      {"feature_dim", agent.feature_dim()},
      {"action_count", agent.action_count()},
      {"hidden_units", agent.hidden_units()},
      {"parameter_count", agent.parameters().size()},
      {"frames_real", agent.real_frames()},
      {"frames_sim", agent.simulated_frames()},
      {"train_steps", agent.train_steps()},
  };
  io::write_json(io::sidecar_path(path), meta);
}

std::unique_ptr<Agent> load_agent_checkpoint(const std::filesystem::path& path) {
  const io::Json meta = io::read_json(io::sidecar_path(path));
  const Vector flat = io::read_float64_blob(path);
  const std::string kind = meta.at("kind").get<std::string>();
  const int dim = meta.at("feature_dim").get<int>();
  const int actions = meta.at("action_count").get<int>();
  std::unique_ptr<Agent> agent;
  if (kind == "q_learner") {
    QLearnerConfig cfg;
    cfg.hidden_units = meta.at("hidden_units").get<int>();
    cfg.replay_capacity = 1;
    Rng init(0);
    agent = std::make_unique<QLearner>(dim, actions, cfg, init);
  } else if (kind == "sarsa") {
    agent = std::make_unique<SarsaAgent>(dim, actions, SarsaConfig{});
  } else {
    throw ConfigError("checkpoint " + path.string() + ": unknown agent kind '" + kind + "'");
  }
  agent->set_parameters(flat);
  return agent;
}

}  // namespace dyna
