#pragma once

#include "dyna/core.hpp"
#include "dyna/envs.hpp"
#include "dyna/forward_model.hpp"
#include "dyna/io.hpp"
#include "dyna/rng.hpp"

#include <atomic>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace dyna {

/// What every model returns. `reward` is always in [-1, 1].
struct ModelPrediction {
  Observation next_observation;
  double reward = 0.0;
  bool terminal = false;
};

/// Where a simulated trajectory currently is. `env_state` carries the hidden
/// environment state (sticky register) when the start came from real
/// experience or from the perfect model; learned models ignore it.
struct ModelCursor {
  Observation observation;
  std::optional<EnvState> env_state;
};

struct ModelStep {
  ModelPrediction prediction;
  ModelCursor next;
};

/// Common prediction interface. Models are read-only during planning; the
/// only mutation is `update` from real experience.
class Model {
 public:
  virtual ~Model() = default;

  virtual std::string kind() const = 0;
  virtual ModelStep predict(const ModelCursor& from, ActionIndex action, Rng& rng) const = 0;

  ModelPrediction predict(const Observation& obs, ActionIndex action, Rng& rng) const {
    return predict(ModelCursor{obs, std::nullopt}, action, rng).prediction;
  }

  /// Online learning hook, called with real transitions only. No-op for
  /// fixed models.
  virtual void update(const Transition& /*real*/) {}

  /// Predictions that fell back to a default because the model had no data.
  virtual std::uint64_t unmodeled_queries() const { return 0; }
};

/// A copy of the environment used as the simulator. Never touches the caller's
/// environment instance.
class PerfectModel final : public Model {
 public:
  explicit PerfectModel(const GridWorld& world) : world_(world.uncapped()) {}

  std::string kind() const override { return "perfect"; }
  ModelStep predict(const ModelCursor& from, ActionIndex action, Rng& rng) const override;
  using Model::predict;

  const GridWorld& world() const { return world_; }
  EnvState source_state(const ModelCursor& from) const;

 private:
  GridWorld world_;
};

/// Perfect model whose successor is, with probability eta, replaced by a
/// uniformly chosen different grid neighbour of the source state. The
/// neighbourhood ignores door locks, so a corrupted step can carry a rollout
/// through a door the agent has no key for.
class CorruptedModel final : public Model {
 public:
  CorruptedModel(const GridWorld& world, double eta);
  CorruptedModel(const CorruptedModel& other) : base_(other.base_), eta_(other.eta_), corruptions_(other.corruptions()) {}

  std::string kind() const override { return "corrupted"; }
  ModelStep predict(const ModelCursor& from, ActionIndex action, Rng& rng) const override;
  using Model::predict;

  double eta() const { return eta_; }
  std::uint64_t corruptions() const { return corruptions_.load(std::memory_order_relaxed); }

 private:
  PerfectModel base_;
  double eta_;
  mutable std::atomic<std::uint64_t> corruptions_{0};
};

struct SuccessorStats {
  std::uint64_t count = 0;
  double reward_sum = 0.0;
  std::uint64_t terminal_count = 0;
};

/// Empirical (count-based) model learned from real transitions.
class TabularModel final : public Model {
 public:
  TabularModel(std::shared_ptr<const FeatureTable> features, int action_count);
  TabularModel(const TabularModel& other);

  std::string kind() const override { return "tabular"; }

  /// Samples a successor by empirical frequency; reward is that successor's
  /// mean clipped reward, terminal by strict majority. Unvisited (s, a)
  /// yields a non-terminal zero-reward self-loop and bumps unmodeled_queries.
  ModelStep predict(const ModelCursor& from, ActionIndex action, Rng& rng) const override;
  using Model::predict;

  void update(const Transition& real) override;

  std::uint64_t unmodeled_queries() const override { return unmodeled_.load(std::memory_order_relaxed); }

  std::uint64_t visits(StateId s, ActionIndex a) const;
  double probability(StateId s, ActionIndex a, StateId next) const;
  double mean_reward(StateId s, ActionIndex a, StateId next) const;
  const std::map<StateId, SuccessorStats>* successors(StateId s, ActionIndex a) const;
  std::vector<std::pair<StateId, ActionIndex>> visited_pairs() const;

  io::Json to_json() const;
  static TabularModel from_json(const io::Json& j, std::shared_ptr<const FeatureTable> features);

 private:
  struct Entry {
    std::uint64_t total = 0;
    std::map<StateId, SuccessorStats> successors;
  };
  std::uint64_t key(StateId s, ActionIndex a) const {
    return static_cast<std::uint64_t>(s) * static_cast<std::uint64_t>(action_count_) + static_cast<std::uint64_t>(a);
  }

  std::shared_ptr<const FeatureTable> features_;
  int action_count_;
  std::unordered_map<std::uint64_t, Entry> table_;
  mutable std::atomic<std::uint64_t> unmodeled_{0};
};

/// Linear forward model. Predicted features are snapped to the nearest valid
/// state so rollouts stay on the environment's observation space.
class ParametricModel final : public Model {
 public:
  ParametricModel(ForwardModelParams<double> params, std::shared_ptr<const FeatureTable> features);

  std::string kind() const override { return "parametric"; }
  ModelStep predict(const ModelCursor& from, ActionIndex action, Rng& rng) const override;
  using Model::predict;

  /// Raw (unsnapped) prediction.
  struct Raw {
    Vector next_features;
    double reward;
    bool terminal;
  };
  Raw predict_raw(const Vector& features, ActionIndex action) const;

  const ForwardModelParams<double>& params() const { return params_; }
  void set_params(ForwardModelParams<double> p) { params_ = std::move(p); }

 private:
  ForwardModelParams<double> params_;
  std::shared_ptr<const FeatureTable> features_;
};

/// Writes `path` (float64 parameters) and `path` + ".json" (dims, action
/// count, layout, phase log).
void save_forward_model(const ForwardModelParams<double>& params, const std::vector<PhaseLog>& log,
                        const std::filesystem::path& path);
ForwardModelParams<double> load_forward_model(const std::filesystem::path& path);

using Policy = std::function<ActionIndex(const Observation&, Rng&)>;

/// Simulates up to k steps from `start` under `policy`, stopping after a
/// predicted terminal. Every returned transition has simulated = true.
std::vector<Transition> rollout(const Model& model, const ModelCursor& start, const Policy& policy, int k,
                                Rng& rng);

}  // namespace dyna
