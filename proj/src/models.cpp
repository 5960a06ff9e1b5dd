#include "dyna/models.hpp"

#include <algorithm>

namespace dyna {

EnvState PerfectModel::source_state(const ModelCursor& from) const {
  EnvState s = from.env_state ? *from.env_state : world_.state_from_id(from.observation.state_id);
  s.done = false;
  return s;
}

ModelStep PerfectModel::predict(const ModelCursor& from, ActionIndex action, Rng& rng) const {
  EnvState s = source_state(from);
  const StepResult r = world_.advance(s, action, rng);
  ModelStep out;
  out.prediction = {r.observation, clip_reward(r.reward), r.terminal};
  out.next = {r.observation, s};
  return out;
}

CorruptedModel::CorruptedModel(const GridWorld& world, double eta) : base_(world), eta_(eta) {
  if (eta < 0.0 || eta > 1.0) throw ConfigError("corrupted model: eta must lie in [0, 1]");
}

ModelStep CorruptedModel::predict(const ModelCursor& from, ActionIndex action, Rng& rng) const {
  ModelStep step = base_.predict(from, action, rng);
  if (!(eta_ > 0.0) || rng.uniform() >= eta_) return step;

  const GridWorld& world = base_.world();
  const EnvState source = base_.source_state(from);
  const StateId truth = step.prediction.next_observation.state_id;
  std::vector<std::pair<ActionIndex, MoveOutcome>> candidates;
  for (ActionIndex a = 0; a < world.action_count(); ++a) {
    MoveOutcome m = world.move(source, a, true);
    const StateId id = world.state_id(m.state);
    if (id == truth) continue;
    const bool seen = std::any_of(candidates.begin(), candidates.end(),
                                  [&](const auto& c) { return world.state_id(c.second.state) == id; });
    if (!seen) candidates.emplace_back(a, m);
  }
  if (candidates.empty()) return step;

  const auto& [executed, m] = candidates[rng.below(candidates.size())];
  EnvState next = m.state;
  next.last_action = executed;
  next.steps = source.steps + 1;
  next.done = m.terminal;
  const Observation obs = world.observe(next);
  step.prediction = {obs, clip_reward(m.reward), m.terminal};
  step.next = {obs, next};
  corruptions_.fetch_add(1, std::memory_order_relaxed);
  return step;
}

TabularModel::TabularModel(std::shared_ptr<const FeatureTable> features, int action_count)
    : features_(std::move(features)), action_count_(action_count) {}

TabularModel::TabularModel(const TabularModel& other)
    : features_(other.features_),
      action_count_(other.action_count_),
      table_(other.table_),
      unmodeled_(other.unmodeled_queries()) {}

ModelStep TabularModel::predict(const ModelCursor& from, ActionIndex action, Rng& rng) const {
  const auto it = table_.find(key(from.observation.state_id, action));
  ModelStep out;
  if (it == table_.end()) {
    unmodeled_.fetch_add(1, std::memory_order_relaxed);
    out.prediction = {from.observation, 0.0, false};
    out.next = {from.observation, std::nullopt};
    return out;
  }
  const Entry& e = it->second;
  std::uint64_t pick = rng.below(static_cast<std::size_t>(e.total));
  auto chosen = e.successors.begin();
  for (auto s = e.successors.begin(); s != e.successors.end(); ++s) {
    if (pick < s->second.count) {
      chosen = s;
      break;
    }
    pick -= s->second.count;
  }
  const SuccessorStats& stats = chosen->second;
  const Observation next = features_->observation(chosen->first);
  out.prediction = {next, clip_reward(stats.reward_sum / static_cast<double>(stats.count)),
                    2 * stats.terminal_count > stats.count};
  out.next = {next, std::nullopt};
  return out;
}

void TabularModel::update(const Transition& real) {
  if (real.simulated) throw ContractViolation("tabular model: cannot learn from a simulated transition");
  if (real.action < 0 || real.action >= action_count_) throw ContractViolation("tabular model: action out of range");
  Entry& e = table_[key(real.state.state_id, real.action)];
  SuccessorStats& s = e.successors[real.next_state.state_id];
  ++e.total;
  ++s.count;
  s.reward_sum += clip_reward(real.reward);
  s.terminal_count += real.terminal ? 1 : 0;
}

std::uint64_t TabularModel::visits(StateId s, ActionIndex a) const {
  const auto it = table_.find(key(s, a));
  return it == table_.end() ? 0 : it->second.total;
}

double TabularModel::probability(StateId s, ActionIndex a, StateId next) const {
  const auto it = table_.find(key(s, a));
  if (it == table_.end()) return 0.0;
  const auto succ = it->second.successors.find(next);
  if (succ == it->second.successors.end()) return 0.0;
  return static_cast<double>(succ->second.count) / static_cast<double>(it->second.total);
}

double TabularModel::mean_reward(StateId s, ActionIndex a, StateId next) const {
  const auto* succ = successors(s, a);
  if (succ == nullptr) return 0.0;
  const auto it = succ->find(next);
  if (it == succ->end()) return 0.0;
  return it->second.reward_sum / static_cast<double>(it->second.count);
}

const std::map<StateId, SuccessorStats>* TabularModel::successors(StateId s, ActionIndex a) const {
  const auto it = table_.find(key(s, a));
  return it == table_.end() ? nullptr : &it->second.successors;
}

std::vector<std::pair<StateId, ActionIndex>> TabularModel::visited_pairs() const {
  std::vector<std::pair<StateId, ActionIndex>> out;
  out.reserve(table_.size());
  for (const auto& [k, e] : table_) {
    out.emplace_back(static_cast<StateId>(k / static_cast<std::uint64_t>(action_count_)),
                     static_cast<ActionIndex>(k % static_cast<std::uint64_t>(action_count_)));
  }
  std::sort(out.begin(), out.end());
  return out;
}

io::Json TabularModel::to_json() const {
  io::Json entries = io::Json::array();
  for (const auto& [s, a] : visited_pairs()) {
    io::Json succ = io::Json::array();
    for (const auto& [next, st] : *successors(s, a)) {
      succ.push_back({{"next", next}, {"count", st.count}, {"reward_sum", st.reward_sum},
                      {"terminal_count", st.terminal_count}});
    }
    entries.push_back({{"state", s}, {"action", a}, {"successors", succ}});
  }
  return {{"kind", "tabular"},
          {"state_count", features_->size()},
          {"feature_dim", features_->dim()},
          {"action_count", action_count_},
          {"unmodeled_queries", unmodeled_queries()},
          {"entries", entries}};
}

TabularModel TabularModel::from_json(const io::Json& j, std::shared_ptr<const FeatureTable> features) {
  if (j.at("kind").get<std::string>() != "tabular") throw ConfigError("tabular model json: wrong kind");
  if (j.at("state_count").get<std::size_t>() != features->size())
    throw ConfigError("tabular model json: state count does not match environment");
  TabularModel m(std::move(features), j.at("action_count").get<int>());
  for (const auto& e : j.at("entries")) {
    Entry& entry = m.table_[m.key(e.at("state").get<StateId>(), e.at("action").get<ActionIndex>())];
    for (const auto& s : e.at("successors")) {
      SuccessorStats st{s.at("count").get<std::uint64_t>(), s.at("reward_sum").get<double>(),
                        s.at("terminal_count").get<std::uint64_t>()};
      entry.total += st.count;
      entry.successors[s.at("next").get<StateId>()] = st;
    }
  }
  m.unmodeled_.store(j.value("unmodeled_queries", std::uint64_t{0}));
  return m;
}

ParametricModel::ParametricModel(ForwardModelParams<double> params, std::shared_ptr<const FeatureTable> features)
    : params_(std::move(params)), features_(std::move(features)) {
  if (params_.dim() != features_->dim()) throw ConfigError("parametric model: feature dimension mismatch");
}

ParametricModel::Raw ParametricModel::predict_raw(const Vector& x, ActionIndex action) const {
  const auto a = static_cast<std::size_t>(action);
  const auto ai = static_cast<Eigen::Index>(action);
  Raw out;
  out.next_features = params_.transition[a] * x + params_.bias[a];
  out.reward = clip_reward(params_.reward_weights[a].dot(x) + params_.reward_bias(ai));
  out.terminal = logistic(params_.terminal_weights[a].dot(x) + params_.terminal_bias(ai)) > 0.5;
  return out;
}

ModelStep ParametricModel::predict(const ModelCursor& from, ActionIndex action, Rng& /*rng*/) const {
  if (action < 0 || action >= params_.action_count()) throw ContractViolation("parametric model: action out of range");
  const Raw raw = predict_raw(from.observation.features, action);
  const Observation next = features_->observation(features_->nearest(raw.next_features));
  ModelStep out;
  out.prediction = {next, raw.reward, raw.terminal};
  out.next = {next, std::nullopt};
  return out;
}

void save_forward_model(const ForwardModelParams<double>& params, const std::vector<PhaseLog>& log,
                        const std::filesystem::path& path) {
  io::write_float64_blob(path, params.flatten());
  io::Json phases = io::Json::array();
  for (const auto& p : log) {
    phases.push_back({{"horizon", p.phase.horizon},
                      {"updates", p.phase.updates},
                      {"learning_rate", p.phase.learning_rate},
                      {"batch_size", p.phase.batch_size},
                      {"initial_loss", p.initial_loss},
                      {"final_loss", p.final_loss}});
  }
  io::write_json(io::sidecar_path(path), {{"kind", "forward_model"},
                                          {"feature_dim", params.dim()},
                                          {"action_count", params.action_count()},
                                          {"parameter_count", params.parameter_count()},
                                          {"layout", "per action: W column-major (d*d), b (d), v (d), c, u (d), t"},
                                          {"phase_log", phases}});
}

ForwardModelParams<double> load_forward_model(const std::filesystem::path& path) {
  const io::Json meta = io::read_json(io::sidecar_path(path));
  const int dim = meta.at("feature_dim").get<int>();
  const int actions = meta.at("action_count").get<int>();
  const Vector flat = io::read_float64_blob(path);
  if (flat.size() != ForwardModelParams<double>::parameter_count(actions, dim))
    throw ConfigError("forward model " + path.string() + ": blob size does not match sidecar dims");
  return ForwardModelParams<double>::from_flat(actions, dim, flat);
}

std::vector<Transition> rollout(const Model& model, const ModelCursor& start, const Policy& policy, int k,
                                Rng& rng) {
  if (k < 1) throw ContractViolation("rollout: k must be >= 1");
  std::vector<Transition> out;
  out.reserve(static_cast<std::size_t>(k));
  ModelCursor cursor = start;
  for (int i = 0; i < k; ++i) {
    const ActionIndex a = policy(cursor.observation, rng);
    ModelStep step = model.predict(cursor, a, rng);
    out.push_back({cursor.observation, a, step.prediction.reward, step.prediction.next_observation,
                   step.prediction.terminal, true});
    if (step.prediction.terminal) break;
    cursor = std::move(step.next);
  }
  return out;
}

}  // namespace dyna
