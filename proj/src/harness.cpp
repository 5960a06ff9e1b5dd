#include "dyna/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

namespace dyna {

namespace {

using io::Json;

// Stream tags for Rng::derive. Each consumer of randomness owns one stream so
// changing how often one of them draws never shifts the others.
enum StreamTag : std::uint64_t {
  kInitStream = 1,
  kActStream = 2,
  kTrainStream = 3,
  kEnvStream = 4,
  kPlanStream = 5,
  kModelStream = 6,
  kEvalStream = 7,
  kCurveStream = 8,
  kCollectStream = 9,
  kPretrainStream = 10,
};

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string normalise_kind(std::string s) {
  std::replace(s.begin(), s.end(), '-', '_');
  return s;
}

PlanningShape parse_shape(const Json& j, const std::string& where) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    const auto x = s.find('x');
    try {
      if (x == std::string::npos) throw std::invalid_argument(s);
      return {std::stoi(s.substr(0, x)), std::stoi(s.substr(x + 1))};
    } catch (const std::exception&) {
      throw ConfigError(where + ": shape '" + s + "' is not of the form NxK");
    }
  }
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (it.key() != "n" && it.key() != "k") throw ConfigError(where + ": unknown shape key '" + it.key() + "'");
    }
    return {j.at("n").get<int>(), j.at("k").get<int>()};
  }
  if (j.is_array() && j.size() == 2) return {j[0].get<int>(), j[1].get<int>()};
  throw ConfigError(where + ": expected a shape such as \"5x2\" or {\"n\": 5, \"k\": 2}");
}

Json merge_strict(const Json& defaults, const Json& input, const std::string& path) {
  if (!input.is_object()) throw ConfigError("config: '" + (path.empty() ? std::string("<root>") : path) +
                                            "' must be an object");
  Json out = defaults;
  for (auto it = input.begin(); it != input.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!defaults.contains(it.key())) throw ConfigError("config: unknown key '" + key + "'");
    const Json& d = defaults.at(it.key());
    if (d.is_object() && !d.empty()) {
      out[it.key()] = merge_strict(d, it.value(), key);
    } else {
      out[it.key()] = it.value();
    }
  }
  return out;
}

template <typename T>
T get_field(const Json& j, const char* group, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("config: '") + group + (group[0] ? "." : "") + key + "': " + e.what());
  }
}

// Parametric forward model trained online from the agent's own real
// experience on the fixed two-stage schedule.
class OnlineForwardLearner {
 public:
  OnlineForwardLearner(const OnlineModelSchedule& schedule, std::uint64_t real_frames, int action_count, int dim)
      : schedule_(schedule),
        switch_step_(static_cast<std::uint64_t>(schedule.first_phase_fraction * static_cast<double>(real_frames))),
        trainer_(ForwardModelParams<double>::identity(action_count, dim)) {}

  // Returns true when the parameters changed.
  bool observe(const Transition& t, bool episode_over, std::uint64_t real_step, Rng& rng) {
    log_.push_back(t);
    ends_.push_back(episode_over || t.terminal);
    if (real_step % static_cast<std::uint64_t>(schedule_.train_every) != 0) return false;
    const bool first = real_step <= switch_step_;
    const int h = first ? schedule_.first_horizon : schedule_.second_horizon;
    const double lr = first ? schedule_.first_learning_rate : schedule_.second_learning_rate;
    if (log_.size() < static_cast<std::size_t>(h)) return false;
    batch_.clear();
    for (int b = 0; b < schedule_.batch_size; ++b) {
      for (int attempt = 0; attempt < 64; ++attempt) {
        const std::size_t i = rng.below(log_.size() - static_cast<std::size_t>(h) + 1);
        if (valid_window(i, static_cast<std::size_t>(h))) {
          batch_.push_back(std::span<const Transition>(log_).subspan(i, static_cast<std::size_t>(h)));
          break;
        }
      }
    }
    if (batch_.empty()) return false;
    trainer_.update(batch_, lr);
    return true;
  }

  const ForwardModelParams<double>& params() const { return trainer_.params(); }

 private:
  bool valid_window(std::size_t start, std::size_t h) const {
    for (std::size_t j = start; j + 1 < start + h; ++j) {
      if (ends_[j]) return false;
    }
    return true;
  }

  OnlineModelSchedule schedule_;
  std::uint64_t switch_step_;
  ForwardModelTrainer<double> trainer_;
  std::vector<Transition> log_;
  std::vector<bool> ends_;
  std::vector<std::span<const Transition>> batch_;
};

std::unique_ptr<Model> make_model(const ExperimentConfig& cfg, const GridWorld& world) {
  switch (cfg.model) {
    case ModelKind::kNone:
      return nullptr;
    case ModelKind::kPerfect:
      return std::make_unique<PerfectModel>(world);
    case ModelKind::kCorrupted:
      return std::make_unique<CorruptedModel>(world, cfg.eta);
    case ModelKind::kTabularOnline:
      return std::make_unique<TabularModel>(world.feature_table(), world.action_count());
    case ModelKind::kParametricPretrained:
      return std::make_unique<ParametricModel>(load_forward_model(cfg.params_file), world.feature_table());
    case ModelKind::kParametricOnline:
      return std::make_unique<ParametricModel>(
          ForwardModelParams<double>::identity(world.action_count(), world.feature_dim()), world.feature_table());
  }
  return nullptr;
}

std::string baseline_name(const std::string& condition) {
  const auto slash = condition.rfind('/');
  return slash == std::string::npos ? condition : condition.substr(slash + 1);
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

std::string to_string(AgentKind k) { return k == AgentKind::kQLearner ? "q_learner" : "sarsa"; }

std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::kNone: return "none";
    case ModelKind::kPerfect: return "perfect";
    case ModelKind::kTabularOnline: return "tabular_online";
    case ModelKind::kParametricPretrained: return "parametric_pretrained";
    case ModelKind::kParametricOnline: return "parametric_online";
    case ModelKind::kCorrupted: return "corrupted";
  }
  return "none";
}

AgentKind parse_agent_kind(const std::string& s) {
  const std::string n = normalise_kind(s);
  if (n == "q_learner" || n == "dqn") return AgentKind::kQLearner;
  if (n == "sarsa") return AgentKind::kSarsa;
  throw ConfigError("unknown agent kind '" + s + "' (expected q_learner or sarsa)");
}

ModelKind parse_model_kind(const std::string& s) {
  const std::string n = normalise_kind(s);
  for (ModelKind k : {ModelKind::kNone, ModelKind::kPerfect, ModelKind::kTabularOnline,
                      ModelKind::kParametricPretrained, ModelKind::kParametricOnline, ModelKind::kCorrupted}) {
    if (n == to_string(k)) return k;
  }
  throw ConfigError("unknown model kind '" + s +
                    "' (expected none, perfect, tabular_online, parametric_pretrained, parametric_online or corrupted)");
}

ExperimentConfig ExperimentConfig::desk_profile() {
  ExperimentConfig c;
  c.budget = 10;
  c.real_frames = 20'000;
  c.planning_capacity = 1'000;
  c.q_learner.replay_capacity = 50'000;
  c.q_learner.train_frequency = 4;
  c.env.coordinate_features = false;
  c.seeds.resize(30);
  std::iota(c.seeds.begin(), c.seeds.end(), std::uint64_t{0});
  c.sweep.shapes = {{10, 1}, {5, 2}, {2, 5}, {1, 10}};
  return c;
}

ExperimentConfig ExperimentConfig::paper_profile() {
  ExperimentConfig c = desk_profile();
  c.budget = 100;
  c.real_frames = 100'000;
  c.planning_capacity = 10'000;
  c.q_learner.replay_capacity = 500'000;
  c.sweep.shapes = {{100, 1}, {25, 4}, {10, 10}, {2, 50}, {1, 100}};
  return c;
}

void ExperimentConfig::validate() const {
  if (!layout_file.empty()) {
    GridLayout::load(layout_file);
  } else {
    const auto ids = GridWorld::builtin_ids();
    if (std::find(ids.begin(), ids.end(), env_id) == ids.end())
      throw ConfigError("env.id '" + env_id + "' is not a built-in environment and no env.layout_file is given");
  }
  if (env.p_sticky < 0.0 || env.p_sticky > 1.0) throw ConfigError("env.p_sticky must lie in [0, 1]");
  if (env.frame_skip < 1) throw ConfigError("env.frame_skip must be positive");

  if (agent == AgentKind::kQLearner) {
    q_learner.validate();
  } else {
    sarsa.validate();
  }
  if (epsilon.start < 0.0 || epsilon.start > 1.0 || epsilon.end < 0.0 || epsilon.end > 1.0)
    throw ConfigError("epsilon.start and epsilon.end must lie in [0, 1]");
  if (epsilon.anneal_fraction < 0.0) throw ConfigError("epsilon.anneal_fraction must be non-negative");

  if (model == ModelKind::kNone && shape)
    throw ConfigError("planning.shape is set but model.kind is none; a shape needs a model");
  if (model != ModelKind::kNone && !shape)
    throw ConfigError("model.kind is " + to_string(model) + " but planning.shape is missing");
  if (shape) validate_shape(*shape, budget);
  if (eta < 0.0 || eta > 1.0) throw ConfigError("model.eta must lie in [0, 1]");
  if (model == ModelKind::kParametricPretrained && params_file.empty())
    throw ConfigError("model.kind parametric_pretrained needs model.params_file");
  if (model == ModelKind::kParametricOnline) {
    const auto& o = online_model;
    if (o.first_horizon < 1 || o.second_horizon < 1 || o.batch_size < 1 || o.train_every < 1 ||
        !(o.first_learning_rate > 0.0) || !(o.second_learning_rate > 0.0) || o.first_phase_fraction < 0.0 ||
        o.first_phase_fraction > 1.0)
      throw ConfigError("model.online: horizons, batch size, train_every and learning rates must be positive");
  }
  if (planning_capacity < 1) throw ConfigError("planning.buffer_capacity must be positive");
  if (rollout_epsilon && (*rollout_epsilon < 0.0 || *rollout_epsilon > 1.0))
    throw ConfigError("planning.rollout_epsilon must lie in [0, 1]");

  if (real_frames < 1) throw ConfigError("real_frames must be positive");
  if (extra_updates < 1) throw ConfigError("extra_updates must be positive");
  if (eval_episodes < 1) throw ConfigError("eval.episodes must be positive");
  if (eval_epsilon < 0.0 || eval_epsilon > 1.0) throw ConfigError("eval.epsilon must lie in [0, 1]");
  if (curve_episodes < 1) throw ConfigError("eval.curve_episodes must be positive");
  if (seeds.empty()) throw ConfigError("seeds: the seed list is empty");
}

std::uint64_t ExperimentConfig::nominal_total_frames() const {
  const std::uint64_t per_step = 1 + (shape ? static_cast<std::uint64_t>(budget) : 0);
  return real_frames * per_step;
}

std::string ExperimentConfig::model_descriptor() const {
  if (model == ModelKind::kCorrupted) return "corrupted:" + format_double(eta);
  if (model == ModelKind::kNone && is_baseline_condition(label)) return "none:" + baseline_name(label);
  return to_string(model);
}

std::string ExperimentConfig::condition() const {
  if (!label.empty()) return label;
  if (!shape) return extra_updates > 1 ? "model-free x" + std::to_string(extra_updates) : "model-free";
  return model_descriptor() + " " + shape->label();
}

Json ExperimentConfig::to_json() const {
  Json shapes = Json::array();
  for (const auto& s : sweep.shapes) shapes.push_back(s.label());
  Json j;
  j["label"] = label;
  j["env"] = {{"id", env_id},
              {"layout_file", layout_file},
              {"p_sticky", env.p_sticky},
              {"frame_skip", env.frame_skip},
              {"step_cap", env.step_cap},
              {"coordinate_features", env.coordinate_features}};
  j["agent"] = {{"kind", to_string(agent)},
                {"train_frequency", q_learner.train_frequency},
                {"batch_size", q_learner.batch_size},
                {"step_size", agent == AgentKind::kQLearner ? q_learner.step_size : sarsa.step_size},
                {"discount", agent == AgentKind::kQLearner ? q_learner.discount : sarsa.discount},
                {"target_sync_period", q_learner.target_sync_period},
                {"hidden_units", q_learner.hidden_units},
                {"replay_capacity", q_learner.replay_capacity},
                {"lambda", sarsa.lambda},
                {"sarsa_history", sarsa.history_capacity}};
  j["epsilon"] = {{"start", epsilon.start}, {"end", epsilon.end}, {"anneal_fraction", epsilon.anneal_fraction}};
  j["model"] = {{"kind", to_string(model)},
                {"eta", eta},
                {"params_file", params_file},
                {"online",
                 {{"first_phase_fraction", online_model.first_phase_fraction},
                  {"first_horizon", online_model.first_horizon},
                  {"first_learning_rate", online_model.first_learning_rate},
                  {"second_horizon", online_model.second_horizon},
                  {"second_learning_rate", online_model.second_learning_rate},
                  {"batch_size", online_model.batch_size},
                  {"train_every", online_model.train_every}}}};
  j["planning"] = {{"shape", shape ? Json{{"n", shape->n}, {"k", shape->k}} : Json(nullptr)},
                   {"budget", budget},
                   {"buffer_capacity", planning_capacity},
                   {"rollout_epsilon", rollout_epsilon ? Json(*rollout_epsilon) : Json(nullptr)}};
  j["real_frames"] = real_frames;
  j["extra_updates"] = extra_updates;
  j["eval"] = {{"episodes", eval_episodes},
               {"epsilon", eval_epsilon},
               {"curve_every", curve_every},
               {"curve_episodes", curve_episodes}};
  j["seeds"] = seeds;
  j["sweep"] = {{"axis", sweep.axis},
                {"shapes", shapes},
                {"models", sweep.models},
                {"environments", sweep.environments},
                {"baselines", sweep.baselines}};
  j["pretrain"] = {{"schedule", pretrain.schedule},
                   {"expert_dir", pretrain.expert_dir},
                   {"expert_frames", pretrain.expert_frames},
                   {"expert_seed", pretrain.expert_seed},
                   {"transitions", pretrain.transitions},
                   {"updates", pretrain.updates}};
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const Json& input) {
  const Json j = merge_strict(ExperimentConfig::desk_profile().to_json(), input, "");
  ExperimentConfig c;
  c.label = get_field<std::string>(j, "", "label");

  const Json& env = j.at("env");
  c.env_id = get_field<std::string>(env, "env", "id");
  c.layout_file = get_field<std::string>(env, "env", "layout_file");
  c.env.p_sticky = get_field<double>(env, "env", "p_sticky");
  c.env.frame_skip = get_field<int>(env, "env", "frame_skip");
  c.env.step_cap = get_field<int>(env, "env", "step_cap");
  c.env.coordinate_features = get_field<bool>(env, "env", "coordinate_features");

  const Json& agent = j.at("agent");
  c.agent = parse_agent_kind(get_field<std::string>(agent, "agent", "kind"));
  c.q_learner.train_frequency = get_field<int>(agent, "agent", "train_frequency");
  c.q_learner.batch_size = get_field<int>(agent, "agent", "batch_size");
  c.q_learner.step_size = c.sarsa.step_size = get_field<double>(agent, "agent", "step_size");
  c.q_learner.discount = c.sarsa.discount = get_field<double>(agent, "agent", "discount");
  c.q_learner.target_sync_period = get_field<int>(agent, "agent", "target_sync_period");
  c.q_learner.hidden_units = get_field<int>(agent, "agent", "hidden_units");
  c.q_learner.replay_capacity = get_field<std::size_t>(agent, "agent", "replay_capacity");
  c.sarsa.lambda = get_field<double>(agent, "agent", "lambda");
  c.sarsa.history_capacity = get_field<std::size_t>(agent, "agent", "sarsa_history");

  const Json& eps = j.at("epsilon");
  c.epsilon.start = get_field<double>(eps, "epsilon", "start");
  c.epsilon.end = get_field<double>(eps, "epsilon", "end");
  c.epsilon.anneal_fraction = get_field<double>(eps, "epsilon", "anneal_fraction");

  const Json& model = j.at("model");
  const std::string kind = get_field<std::string>(model, "model", "kind");
  c.eta = get_field<double>(model, "model", "eta");
  if (const auto colon = kind.find(':'); colon != std::string::npos) {
    c.model = parse_model_kind(kind.substr(0, colon));
    if (c.model != ModelKind::kCorrupted) throw ConfigError("model.kind: only corrupted takes a ':eta' suffix");
    try {
      c.eta = std::stod(kind.substr(colon + 1));
    } catch (const std::exception&) {
      throw ConfigError("model.kind: cannot parse eta in '" + kind + "'");
    }
  } else {
    c.model = parse_model_kind(kind);
  }
  c.params_file = get_field<std::string>(model, "model", "params_file");
  const Json& online = model.at("online");
  c.online_model.first_phase_fraction = get_field<double>(online, "model.online", "first_phase_fraction");
  c.online_model.first_horizon = get_field<int>(online, "model.online", "first_horizon");
  c.online_model.first_learning_rate = get_field<double>(online, "model.online", "first_learning_rate");
  c.online_model.second_horizon = get_field<int>(online, "model.online", "second_horizon");
  c.online_model.second_learning_rate = get_field<double>(online, "model.online", "second_learning_rate");
  c.online_model.batch_size = get_field<int>(online, "model.online", "batch_size");
  c.online_model.train_every = get_field<int>(online, "model.online", "train_every");

  const Json& planning = j.at("planning");
  if (!planning.at("shape").is_null()) c.shape = parse_shape(planning.at("shape"), "planning.shape");
  c.budget = get_field<int>(planning, "planning", "budget");
  c.planning_capacity = get_field<std::size_t>(planning, "planning", "buffer_capacity");
  if (!planning.at("rollout_epsilon").is_null())
    c.rollout_epsilon = get_field<double>(planning, "planning", "rollout_epsilon");

  c.real_frames = get_field<std::uint64_t>(j, "", "real_frames");
  c.extra_updates = get_field<int>(j, "", "extra_updates");

  const Json& eval = j.at("eval");
  c.eval_episodes = get_field<int>(eval, "eval", "episodes");
  c.eval_epsilon = get_field<double>(eval, "eval", "epsilon");
  c.curve_every = get_field<std::uint64_t>(eval, "eval", "curve_every");
  c.curve_episodes = get_field<int>(eval, "eval", "curve_episodes");

  c.seeds = get_field<std::vector<std::uint64_t>>(j, "", "seeds");

  const Json& sweep = j.at("sweep");
  c.sweep.axis = get_field<std::string>(sweep, "sweep", "axis");
  for (const auto& s : sweep.at("shapes")) c.sweep.shapes.push_back(parse_shape(s, "sweep.shapes"));
  c.sweep.models = get_field<std::vector<std::string>>(sweep, "sweep", "models");
  c.sweep.environments = get_field<std::vector<std::string>>(sweep, "sweep", "environments");
  c.sweep.baselines = get_field<bool>(sweep, "sweep", "baselines");

  const Json& pre = j.at("pretrain");
  c.pretrain.schedule = get_field<std::string>(pre, "pretrain", "schedule");
  c.pretrain.expert_dir = get_field<std::string>(pre, "pretrain", "expert_dir");
  c.pretrain.expert_frames = get_field<std::uint64_t>(pre, "pretrain", "expert_frames");
  c.pretrain.expert_seed = get_field<std::uint64_t>(pre, "pretrain", "expert_seed");
  c.pretrain.transitions = get_field<std::size_t>(pre, "pretrain", "transitions");
  c.pretrain.updates = get_field<int>(pre, "pretrain", "updates");
  return c;
}

Json apply_overrides(const Json& config, const std::vector<std::string>& overrides) {
  Json out = merge_strict(ExperimentConfig::desk_profile().to_json(), config, "");
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' is not of the form key=value");
    const std::string key = o.substr(0, eq);
    const std::string text = o.substr(eq + 1);
    Json value;
    try {
      value = Json::parse(text);
    } catch (const Json::exception&) {
      value = text;
    }
    Json* node = &out;
    std::size_t pos = 0;
    while (true) {
      const auto dot = key.find('.', pos);
      const std::string part = key.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
      if (!node->is_object() || !node->contains(part)) throw ConfigError("override: unknown key '" + key + "'");
      node = &(*node)[part];
      if (dot == std::string::npos) break;
      pos = dot + 1;
    }
    *node = value;
  }
  return out;
}

ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  Json file;
  try {
    file = Json::parse(io::read_text(path));
  } catch (const Json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  } catch (const std::runtime_error& e) {
    throw ConfigError(e.what());
  }
  return ExperimentConfig::from_json(apply_overrides(file, overrides));
}

RunResult aggregate(const std::string& condition, const std::vector<SeedResult>& rows) {
  RunResult r;
  r.condition = condition;
  for (const auto& row : rows) {
    r.seed_scores.push_back(row.eval_mean);
    r.trunc_deficit += row.trunc_deficit;
    r.unmodeled_queries += row.unmodeled_queries;
  }
  r.n_seeds = r.seed_scores.size();
  if (r.n_seeds == 0) return r;
  const double n = static_cast<double>(r.n_seeds);
  r.mean = std::accumulate(r.seed_scores.begin(), r.seed_scores.end(), 0.0) / n;
  if (r.n_seeds > 1) {
    double ss = 0.0;
    for (double s : r.seed_scores) ss += (s - r.mean) * (s - r.mean);
    r.standard_error = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  }
  return r;
}

double EvaluationProtocol::evaluate(const Agent& agent, const GridWorld& world, Rng& rng) const {
  double total = 0.0;
  for (int ep = 0; ep < episodes; ++ep) {
    GridWorld env = world;
    Observation obs = env.reset(rng.next_u64());
    while (!env.done()) {
      const StepResult r = env.step(agent.select_action(obs, epsilon, rng));
      total += r.reward;
      obs = r.observation;
    }
  }
  return total / static_cast<double>(episodes);
}

GridWorld make_environment(const ExperimentConfig& cfg) {
  if (cfg.layout_file.empty()) return GridWorld::builtin(cfg.env_id, cfg.env);
  const int cap = cfg.env.step_cap != 0 ? cfg.env.step_cap : 500;
  return GridWorld(cfg.env_id, GridLayout::load(cfg.layout_file), cfg.env, cap);
}

std::unique_ptr<Agent> make_agent(const ExperimentConfig& cfg, const GridWorld& world, Rng& init_rng) {
  if (cfg.agent == AgentKind::kQLearner) {
    QLearnerConfig q = cfg.q_learner;
    q.updates_per_train = cfg.extra_updates;
    return std::make_unique<QLearner>(world.feature_dim(), world.action_count(), q, init_rng);
  }
  SarsaConfig s = cfg.sarsa;
  s.updates_per_real_step = cfg.extra_updates;
  return std::make_unique<SarsaAgent>(world.feature_dim(), world.action_count(), s);
}

SeedResult run_condition(const ExperimentConfig& cfg, std::uint64_t seed, const RunHooks* hooks) {
  cfg.validate();
  GridWorld env = make_environment(cfg);

  Rng init_rng = Rng::derive(seed, {kInitStream});
  Rng act_rng = Rng::derive(seed, {kActStream});
  Rng train_rng = Rng::derive(seed, {kTrainStream});
  Rng env_rng = Rng::derive(seed, {kEnvStream});
  Rng plan_rng = Rng::derive(seed, {kPlanStream});
  Rng model_rng = Rng::derive(seed, {kModelStream});
  Rng eval_rng = Rng::derive(seed, {kEvalStream});

  std::unique_ptr<Agent> agent = make_agent(cfg, env, init_rng);
  EpsilonSchedule schedule = cfg.epsilon;
  schedule.total_frames = cfg.nominal_total_frames();
  agent->set_schedule(schedule);

  std::unique_ptr<Model> model = make_model(cfg, env);
  std::optional<OnlineForwardLearner> online;
  auto* parametric = dynamic_cast<ParametricModel*>(model.get());
  if (cfg.model == ModelKind::kParametricOnline)
    online.emplace(cfg.online_model, cfg.real_frames, env.action_count(), env.feature_dim());

  std::optional<Planner> planner;
  if (cfg.shape) planner.emplace(PlannerConfig{*cfg.shape, cfg.budget, cfg.planning_capacity, cfg.rollout_epsilon});

  std::vector<std::pair<std::uint64_t, double>> checkpoints;
  if (hooks != nullptr) {
    for (double f : hooks->checkpoint_fractions) {
      const auto step = static_cast<std::uint64_t>(std::llround(f * static_cast<double>(cfg.real_frames)));
      checkpoints.emplace_back(std::clamp<std::uint64_t>(step, 1, cfg.real_frames), f);
    }
    std::sort(checkpoints.begin(), checkpoints.end());
  }
  std::size_t next_checkpoint = 0;

  const EvaluationProtocol protocol{cfg.eval_episodes, cfg.eval_epsilon};
  SeedResult out;
  Observation obs = env.reset(env_rng.next_u64());
  out.episodes = 1;
  for (std::uint64_t step = 1; step <= cfg.real_frames; ++step) {
    if (planner) planner->record_real_state(obs, env.state());
    const ActionIndex a = agent->select_action(obs, agent->epsilon(), act_rng);
    const StepResult r = env.step(a);
    const Transition t{obs, a, r.reward, r.observation, r.terminal && !r.truncated, false};
    agent->observe(t, train_rng);
    if (model) model->update(t);
    if (online && online->observe(t, r.terminal, step, model_rng)) parametric->set_params(online->params());
    if (planner) {
      for (const auto& sim : planner->plan_after_real_step(*agent, *model, plan_rng)) agent->observe(sim, train_rng);
    }
    obs = r.observation;
    if (r.terminal && step < cfg.real_frames) {
      obs = env.reset(env_rng.next_u64());
      ++out.episodes;
    }
    if (cfg.curve_every > 0 && step % cfg.curve_every == 0) {
      Rng curve_rng = Rng::derive(seed, {kCurveStream, step});
      const EvaluationProtocol snap{cfg.curve_episodes, cfg.eval_epsilon};
      out.curve.push_back({step, snap.evaluate(*agent, make_environment(cfg), curve_rng)});
    }
    while (next_checkpoint < checkpoints.size() && checkpoints[next_checkpoint].first == step) {
      if (hooks->on_checkpoint) hooks->on_checkpoint(*agent, checkpoints[next_checkpoint].second);
      ++next_checkpoint;
    }
  }

  const PlanningStats stats = planner ? planner->stats() : PlanningStats{};
  if (agent->real_frames() != cfg.real_frames)
    throw std::logic_error("accounting: agent saw " + std::to_string(agent->real_frames()) + " real frames, expected " +
                           std::to_string(cfg.real_frames));
  if (agent->simulated_frames() != stats.predict_calls)
    throw std::logic_error("accounting: simulated frames != model predict calls");
  if (cfg.agent == AgentKind::kQLearner) {
    const std::uint64_t expected = agent->frames() / static_cast<std::uint64_t>(cfg.q_learner.train_frequency) *
                                   static_cast<std::uint64_t>(cfg.extra_updates);
    if (agent->train_steps() != expected)
      throw std::logic_error("accounting: " + std::to_string(agent->train_steps()) + " training steps, expected " +
                             std::to_string(expected));
  }

  out.condition = cfg.condition();
  out.env = env.name();
  out.agent = to_string(cfg.agent);
  out.model = cfg.model_descriptor();
  out.shape_n = cfg.shape ? cfg.shape->n : 0;
  out.shape_k = cfg.shape ? cfg.shape->k : 0;
  out.seed = seed;
  out.frames_real = agent->real_frames();
  out.frames_sim = agent->simulated_frames();
  out.train_steps = agent->train_steps();
  out.trunc_deficit = stats.truncation_deficit;
  out.unmodeled_queries = model ? model->unmodeled_queries() : 0;
  out.predict_calls = stats.predict_calls;
  out.skipped_planning = stats.skipped_calls;
  out.eval_mean = protocol.evaluate(*agent, make_environment(cfg), eval_rng);
  return out;
}

ExperimentConfig base_100k_condition(const ExperimentConfig& planning_cfg) {
  ExperimentConfig c = planning_cfg;
  c.model = ModelKind::kNone;
  c.shape.reset();
  c.extra_updates = 1;
  c.label = "base-100k";
  return c;
}

ExperimentConfig extra_updates_condition(const ExperimentConfig& planning_cfg) {
  ExperimentConfig c = base_100k_condition(planning_cfg);
  c.extra_updates = planning_cfg.budget + 1;
  c.label = "extra-updates";
  return c;
}

ExperimentConfig base_10m_condition(const ExperimentConfig& planning_cfg) {
  ExperimentConfig c = base_100k_condition(planning_cfg);
  c.real_frames = planning_cfg.real_frames * static_cast<std::uint64_t>(planning_cfg.budget);
  c.label = "base-10m";
  return c;
}

bool is_baseline_condition(const std::string& condition) {
  const std::string b = baseline_name(condition);
  return b == "base-100k" || b == "extra-updates" || b == "base-10m";
}

std::vector<ExperimentConfig> expand_sweep(const ExperimentConfig& base) {
  if (base.sweep.shapes.empty()) throw ConfigError("sweep.shapes is empty");
  for (const auto& s : base.sweep.shapes) validate_shape(s, base.budget);

  auto with_model = [](ExperimentConfig c, const std::string& descriptor) {
    ExperimentConfig parsed = ExperimentConfig::from_json({{"model", {{"kind", descriptor}}}});
    c.model = parsed.model;
    if (c.model == ModelKind::kCorrupted && descriptor.find(':') != std::string::npos) c.eta = parsed.eta;
    return c;
  };
  auto add_shapes = [&](std::vector<ExperimentConfig>& out, ExperimentConfig c, const std::string& prefix) {
    if (c.model == ModelKind::kNone) throw ConfigError("sweep: model.kind is none; planning cells need a model");
    for (const auto& s : base.sweep.shapes) {
      ExperimentConfig cell = c;
      cell.shape = s;
      cell.label.clear();
      cell.label = prefix + cell.condition();
      out.push_back(cell);
    }
  };
  auto add_baselines = [&](std::vector<ExperimentConfig>& out, ExperimentConfig c, const std::string& prefix) {
    if (!base.sweep.baselines) return;
    c.shape = base.sweep.shapes.front();
    for (ExperimentConfig b : {base_100k_condition(c), extra_updates_condition(c), base_10m_condition(c)}) {
      b.label = prefix + b.label;
      out.push_back(b);
    }
  };

  std::vector<ExperimentConfig> out;
  ExperimentConfig root = base;
  root.label.clear();
  if (base.sweep.axis == "shapes") {
    add_shapes(out, root, "");
    add_baselines(out, root, "");
  } else if (base.sweep.axis == "models") {
    if (base.sweep.models.empty()) throw ConfigError("sweep.models is empty");
    for (const auto& m : base.sweep.models) add_shapes(out, with_model(root, m), "");
    add_baselines(out, root, "");
  } else if (base.sweep.axis == "environments") {
    if (base.sweep.environments.empty()) throw ConfigError("sweep.environments is empty");
    for (const auto& e : base.sweep.environments) {
      ExperimentConfig c = root;
      c.env_id = e;
      c.layout_file.clear();
      add_shapes(out, c, e + "/");
      add_baselines(out, c, e + "/");
    }
  } else {
    throw ConfigError("sweep.axis '" + base.sweep.axis + "' (expected shapes, models or environments)");
  }
  for (auto& c : out) {
    c.seeds = base.seeds;
    c.validate();
  }
  return out;
}

SweepResult run_conditions(const std::vector<ExperimentConfig>& conditions, const std::vector<std::uint64_t>& seeds,
                           int jobs) {
  if (seeds.empty()) throw ConfigError("seeds: the seed list is empty");
  for (const auto& c : conditions) {
    ExperimentConfig check = c;
    check.seeds = seeds;
    check.validate();
  }
  const std::size_t cells = conditions.size() * seeds.size();
  std::vector<std::optional<SeedResult>> results(cells);
  std::vector<std::optional<CellFailure>> failures(cells);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cells; i = next++) {
      const ExperimentConfig& c = conditions[i / seeds.size()];
      const std::uint64_t seed = seeds[i % seeds.size()];
      try {
        results[i] = run_condition(c, seed);
      } catch (const std::exception& e) {
        failures[i] = CellFailure{c.condition(), seed, e.what()};
      }
    }
  };
  std::size_t threads = jobs > 0 ? static_cast<std::size_t>(jobs) : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, std::max<std::size_t>(cells, 1));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  SweepResult out;
  out.conditions = conditions;
  for (std::size_t ci = 0; ci < conditions.size(); ++ci) {
    std::vector<SeedResult> rows;
    for (std::size_t si = 0; si < seeds.size(); ++si) {
      const std::size_t i = ci * seeds.size() + si;
      if (results[i]) rows.push_back(*results[i]);
      if (failures[i]) out.failures.push_back(*failures[i]);
    }
    out.aggregates.push_back(aggregate(conditions[ci].condition(), rows));
    out.rows.insert(out.rows.end(), rows.begin(), rows.end());
  }
  return out;
}

SweepResult run_sweep(const ExperimentConfig& base, int jobs) {
  return run_conditions(expand_sweep(base), base.seeds, jobs);
}

std::string results_csv(const std::vector<SeedResult>& rows) {
  std::ostringstream s;
  s << "env,agent,model,shape_n,shape_k,seed,eval_mean,frames_real,frames_sim,train_steps,trunc_deficit,"
       "unmodeled_queries\n";
  for (const auto& r : rows) {
    s << r.env << ',' << r.agent << ',' << r.model << ',' << r.shape_n << ',' << r.shape_k << ',' << r.seed << ','
      << format_double(r.eval_mean) << ',' << r.frames_real << ',' << r.frames_sim << ',' << r.train_steps << ','
      << r.trunc_deficit << ',' << r.unmodeled_queries << '\n';
  }
  return s.str();
}

std::string aggregate_csv(const std::vector<RunResult>& rows) {
  std::ostringstream s;
  s << "condition,mean,stderr,n_seeds\n";
  for (const auto& r : rows) {
    s << r.condition << ',' << format_double(r.mean) << ',' << format_double(r.standard_error) << ',' << r.n_seeds
      << '\n';
  }
  return s.str();
}

std::string curves_csv(const std::vector<SeedResult>& rows) {
  std::ostringstream s;
  s << "condition,seed,frames_real,eval_mean\n";
  for (const auto& r : rows) {
    for (const auto& p : r.curve)
      s << r.condition << ',' << r.seed << ',' << p.real_frames << ',' << format_double(p.eval_mean) << '\n';
  }
  return s.str();
}

std::vector<RunResult> parse_aggregate_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || split_csv_line(line) != std::vector<std::string>{"condition", "mean", "stderr",
                                                                                  "n_seeds"})
    throw ConfigError("aggregate csv: expected header condition,mean,stderr,n_seeds");
  std::vector<RunResult> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv_line(line);
    if (f.size() != 4) throw ConfigError("aggregate csv: line " + std::to_string(lineno) + " needs 4 fields");
    RunResult r;
    try {
      r.condition = f[0];
      r.mean = std::stod(f[1]);
      r.standard_error = std::stod(f[2]);
      r.n_seeds = std::stoul(f[3]);
    } catch (const std::exception&) {
      throw ConfigError("aggregate csv: line " + std::to_string(lineno) + " has a malformed number");
    }
    out.push_back(r);
  }
  return out;
}

std::string render_svg(const std::vector<RunResult>& rows, const std::string& title) {
  std::vector<const RunResult*> bars;
  std::vector<const RunResult*> lines;
  for (const auto& r : rows) (is_baseline_condition(r.condition) ? lines : bars).push_back(&r);

  double lo = 0.0, hi = 0.0;
  for (const auto& r : rows) {
    lo = std::min(lo, r.lower());
    hi = std::max(hi, r.upper());
  }
  if (hi - lo < 1e-9) hi = lo + 1.0;
  const double pad = 0.08 * (hi - lo);
  hi += pad;
  if (lo < 0.0) lo -= pad;

  const double width = 160.0 + 90.0 * static_cast<double>(std::max<std::size_t>(bars.size(), 3));
  const double height = 420.0;
  const double left = 70.0, right = 150.0, top = 50.0, bottom = 90.0;
  const double plot_w = width - left - right;
  const double plot_h = height - top - bottom;
  auto y_of = [&](double v) { return top + plot_h * (hi - v) / (hi - lo); };
  auto fmt = [](double v) {
    std::ostringstream s;
    s.setf(std::ios::fixed);
    s.precision(2);
    s << v;
    return s.str();
  };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(width) << "\" height=\"" << fmt(height)
    << "\" viewBox=\"0 0 " << fmt(width) << ' ' << fmt(height) << "\">\n";
  s << "<rect x=\"0\" y=\"0\" width=\"" << fmt(width) << "\" height=\"" << fmt(height) << "\" fill=\"white\"/>\n";
  s << "<text x=\"" << fmt(width / 2) << "\" y=\"28\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">"
    << xml_escape(title) << "</text>\n";
  s << "<line class=\"axis\" x1=\"" << fmt(left) << "\" y1=\"" << fmt(top) << "\" x2=\"" << fmt(left) << "\" y2=\""
    << fmt(top + plot_h) << "\" stroke=\"black\"/>\n";
  s << "<line class=\"axis\" x1=\"" << fmt(left) << "\" y1=\"" << fmt(y_of(0.0)) << "\" x2=\"" << fmt(left + plot_w)
    << "\" y2=\"" << fmt(y_of(0.0)) << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = lo + (hi - lo) * t / 4.0;
    s << "<text class=\"tick\" x=\"" << fmt(left - 6) << "\" y=\"" << fmt(y_of(v) + 4)
      << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << fmt(v) << "</text>\n";
  }

  const double slot = plot_w / static_cast<double>(std::max<std::size_t>(bars.size(), 1));
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const RunResult& r = *bars[i];
    const double cx = left + slot * (static_cast<double>(i) + 0.5);
    const double bw = slot * 0.6;
    const double y0 = y_of(std::max(0.0, r.mean));
    const double y1 = y_of(std::min(0.0, r.mean));
    const bool single_step = r.condition.size() >= 2 && r.condition.compare(r.condition.size() - 2, 2, "x1") == 0;
    s << "<rect class=\"bar\" data-condition=\"" << xml_escape(r.condition) << "\" x=\"" << fmt(cx - bw / 2)
      << "\" y=\"" << fmt(y0) << "\" width=\"" << fmt(bw) << "\" height=\"" << fmt(y1 - y0) << "\" fill=\""
      << (single_step ? "#4caf50" : "#1b5e20") << "\"/>\n";
    s << "<line class=\"whisker\" x1=\"" << fmt(cx) << "\" y1=\"" << fmt(y_of(r.upper())) << "\" x2=\"" << fmt(cx)
      << "\" y2=\"" << fmt(y_of(r.lower())) << "\" stroke=\"black\"/>\n";
    for (double v : {r.upper(), r.lower()}) {
      s << "<line class=\"whisker-cap\" x1=\"" << fmt(cx - bw / 6) << "\" y1=\"" << fmt(y_of(v)) << "\" x2=\""
        << fmt(cx + bw / 6) << "\" y2=\"" << fmt(y_of(v)) << "\" stroke=\"black\"/>\n";
    }
    s << "<text class=\"label\" x=\"" << fmt(cx) << "\" y=\"" << fmt(top + plot_h + 18)
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << xml_escape(r.condition)
      << "</text>\n";
  }

  const auto colour = [](const std::string& c) {
    const std::string b = baseline_name(c);
    if (b == "base-100k") return "#d4b106";
    if (b == "extra-updates") return "#d62728";
    return "#17becf";
  };
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const RunResult& r = *lines[i];
    const double y = y_of(r.mean);
    s << "<line class=\"baseline\" data-condition=\"" << xml_escape(r.condition) << "\" x1=\"" << fmt(left)
      << "\" y1=\"" << fmt(y) << "\" x2=\"" << fmt(left + plot_w) << "\" y2=\"" << fmt(y) << "\" stroke=\""
      << colour(r.condition) << "\" stroke-width=\"2\" stroke-dasharray=\"6,4\"/>\n";
    s << "<text class=\"legend\" x=\"" << fmt(left + plot_w + 8) << "\" y=\"" << fmt(y + 4)
      << "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"" << colour(r.condition) << "\">"
      << xml_escape(r.condition) << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

Json run_manifest(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds) {
  Json config = cfg.to_json();
  config["seeds"] = seeds;
  const std::string canonical = config.dump();
  return {{"tool", "dyna"}, {"config", config}, {"config_hash", io::git_blob_hash(canonical)}};
}

void write_sweep_outputs(const SweepResult& result, const ExperimentConfig& base, const std::filesystem::path& out_dir,
                         const std::string& title) {
  std::filesystem::create_directories(out_dir);
  io::write_text(out_dir / "results.csv", results_csv(result.rows));
  io::write_text(out_dir / "aggregate.csv", aggregate_csv(result.aggregates));
  io::write_text(out_dir / "chart.svg", render_svg(result.aggregates, title));
  Json manifest = run_manifest(base, base.seeds);
  Json conditions = Json::array();
  for (const auto& c : result.conditions) conditions.push_back(c.condition());
  manifest["conditions"] = conditions;
  io::write_json(out_dir / "manifest.json", manifest);
  const std::string curves = curves_csv(result.rows);
  if (curves.find('\n') + 1 < curves.size()) io::write_text(out_dir / "curves.csv", curves);
  if (!result.failures.empty()) {
    std::ostringstream s;
    s << "condition,seed,message\n";
    for (const auto& f : result.failures) {
      std::string msg = f.message;
      std::replace(msg.begin(), msg.end(), ',', ';');
      std::replace(msg.begin(), msg.end(), '\n', ' ');
      s << f.condition << ',' << f.seed << ',' << msg << '\n';
    }
    io::write_text(out_dir / "failures.csv", s.str());
  }
}

std::filesystem::path expert_checkpoint_path(const std::filesystem::path& dir, int percent) {
  return dir / ("expert_" + std::to_string(percent) + ".bin");
}

void train_expert(const ExperimentConfig& cfg, const std::filesystem::path& dir) {
  ExperimentConfig c = base_100k_condition(cfg);
  c.real_frames = cfg.pretrain.expert_frames;
  c.label = "expert";
  c.curve_every = 0;
  c.seeds = {cfg.pretrain.expert_seed};
  std::filesystem::create_directories(dir);
  RunHooks hooks;
  hooks.checkpoint_fractions = {0.25, 0.5, 0.75, 1.0};
  hooks.on_checkpoint = [&dir](const Agent& agent, double fraction) {
    save_agent_checkpoint(agent, expert_checkpoint_path(dir, static_cast<int>(std::lround(fraction * 100.0))));
  };
  run_condition(c, cfg.pretrain.expert_seed, &hooks);
}

std::vector<std::vector<Transition>> collect_trajectories(const Agent& agent, const GridWorld& world,
                                                          std::size_t transitions, double epsilon, Rng& rng) {
  std::vector<std::vector<Transition>> out;
  std::size_t total = 0;
  GridWorld env = world;
  while (total < transitions) {
    Observation obs = env.reset(rng.next_u64());
    std::vector<Transition> episode;
    while (!env.done() && total < transitions) {
      const ActionIndex a = agent.select_action(obs, epsilon, rng);
      const StepResult r = env.step(a);
      episode.push_back({obs, a, r.reward, r.observation, r.terminal && !r.truncated, false});
      ++total;
      obs = r.observation;
    }
    out.push_back(std::move(episode));
  }
  return out;
}

Curriculum curriculum_for(const std::string& schedule, int updates) {
  if (schedule == "A") return Curriculum::model_a(updates);
  if (schedule == "B") return Curriculum::model_b(updates);
  if (schedule == "C") return Curriculum::model_c(updates);
  throw ConfigError("pretrain.schedule '" + schedule + "' (expected A, B or C)");
}

PretrainResult pretrain_model_for(const ExperimentConfig& cfg, const std::filesystem::path& expert_dir) {
  const Curriculum curriculum = curriculum_for(cfg.pretrain.schedule, cfg.pretrain.updates);
  const bool mixed = cfg.pretrain.schedule == "C";
  const std::vector<int> sources = mixed ? std::vector<int>{25, 50, 75, 100} : std::vector<int>{100};
  for (int pct : sources) {
    if (!std::filesystem::exists(expert_checkpoint_path(expert_dir, pct)))
      throw ConfigError("pretrain: missing expert checkpoint " + expert_checkpoint_path(expert_dir, pct).string());
  }
  const GridWorld world = make_environment(cfg);
  const std::size_t per_source = cfg.pretrain.transitions / sources.size();
  std::vector<std::vector<Transition>> dataset;
  for (int pct : sources) {
    const auto agent = load_agent_checkpoint(expert_checkpoint_path(expert_dir, pct));
    if (agent->feature_dim() != world.feature_dim())
      throw ConfigError("pretrain: expert checkpoint does not match the environment's feature size");
    Rng rng = Rng::derive(cfg.pretrain.expert_seed, {kCollectStream, static_cast<std::uint64_t>(pct)});
    auto part = collect_trajectories(*agent, world, per_source, cfg.eval_epsilon, rng);
    for (auto& t : part) dataset.push_back(std::move(t));
  }
  PretrainResult out;
  for (const auto& t : dataset) out.dataset_transitions += t.size();
  out.source_policies = static_cast<int>(sources.size());
  Rng rng = Rng::derive(cfg.pretrain.expert_seed, {kPretrainStream});
  out.trained = train_forward_model<double>(dataset, curriculum, rng);
  return out;
}

}  // namespace dyna
