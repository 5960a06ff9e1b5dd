#pragma once

#include "dyna/agents.hpp"
#include "dyna/envs.hpp"
#include "dyna/forward_model.hpp"
#include "dyna/io.hpp"
#include "dyna/models.hpp"
#include "dyna/planner.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace dyna {

enum class AgentKind { kQLearner, kSarsa };

enum class ModelKind { kNone, kPerfect, kTabularOnline, kParametricPretrained, kParametricOnline, kCorrupted };

std::string to_string(AgentKind k);
std::string to_string(ModelKind k);
AgentKind parse_agent_kind(const std::string& s);
ModelKind parse_model_kind(const std::string& s);

/// Schedule for a forward model trained online from the real-experience log:
/// `first_horizon` steps at `first_learning_rate` for the first
/// `first_phase_fraction` of real steps, then `second_horizon`.
struct OnlineModelSchedule {
  double first_phase_fraction = 0.25;
  int first_horizon = 1;
  double first_learning_rate = 1e-2;
  int second_horizon = 3;
  double second_learning_rate = 1e-3;
  int batch_size = 32;
  int train_every = 4;
};

struct PretrainSettings {
  /// "A", "B" or "C".
  std::string schedule = "C";
  /// Directory holding expert checkpoints; empty means "train one first".
  std::string expert_dir;
  std::uint64_t expert_frames = 200'000;
  std::uint64_t expert_seed = 0;
  std::size_t transitions = 50'000;
  int updates = 20'000;
};

struct SweepSpec {
  /// "shapes", "models" or "environments".
  std::string axis = "shapes";
  std::vector<PlanningShape> shapes;
  std::vector<std::string> models;
  std::vector<std::string> environments;
  bool baselines = true;
};

struct ExperimentConfig {
  std::string label;

  std::string env_id = "key_corridor";
  std::string layout_file;
  EnvConfig env;

  AgentKind agent = AgentKind::kQLearner;
  QLearnerConfig q_learner;
  SarsaConfig sarsa;
  EpsilonSchedule epsilon;

  ModelKind model = ModelKind::kNone;
  double eta = 0.0;
  std::string params_file;
  OnlineModelSchedule online_model;

  std::optional<PlanningShape> shape;
  int budget = 10;
  std::size_t planning_capacity = 1'000;
  std::optional<double> rollout_epsilon;

  std::uint64_t real_frames = 20'000;
  int extra_updates = 1;

  int eval_episodes = 100;
  double eval_epsilon = 0.01;
  /// Learning-curve snapshots every this many real frames (0 = off).
  std::uint64_t curve_every = 1'000;
  int curve_episodes = 10;

  std::vector<std::uint64_t> seeds;

  SweepSpec sweep;
  PretrainSettings pretrain;

  /// Desk-scale protocol: B = 10, 20k real frames, planning buffer 1k,
  /// replay 50k, 30 seeds, shapes 10x1 / 5x2 / 2x5 / 1x10, one-hot features
  /// without coordinates.
  static ExperimentConfig desk_profile();
  /// Full-scale protocol: B = 100, 100k real frames, planning buffer 10k,
  /// replay 500k, 30 seeds, shapes 100x1 / 25x4 / 10x10 / 2x50 / 1x100.
  static ExperimentConfig paper_profile();

  /// Throws ConfigError on any inconsistency.
  void validate() const;

  /// Combined (real + simulated) frames the epsilon schedule anneals over.
  std::uint64_t nominal_total_frames() const;

  /// Condition name used in aggregate tables.
  std::string condition() const;
  /// Model descriptor used in the results CSV `model` column.
  std::string model_descriptor() const;

  io::Json to_json() const;
  /// Strict: unknown keys are errors. Missing keys take defaults.
  static ExperimentConfig from_json(const io::Json& j);
};

/// Applies `a.b.c=value` overrides to a config document. The key path must
/// already exist in the fully-resolved schema. Values are parsed as JSON,
/// falling back to a plain string.
io::Json apply_overrides(const io::Json& config, const std::vector<std::string>& overrides);

/// File -> defaults merge -> overrides -> typed config.
ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides);

struct CurvePoint {
  std::uint64_t real_frames = 0;
  double eval_mean = 0.0;
};

struct SeedResult {
  std::string condition;
  std::string env;
  std::string agent;
  std::string model;
  int shape_n = 0;
  int shape_k = 0;
  std::uint64_t seed = 0;
  double eval_mean = 0.0;
  std::uint64_t frames_real = 0;
  std::uint64_t frames_sim = 0;
  std::uint64_t train_steps = 0;
  std::uint64_t trunc_deficit = 0;
  std::uint64_t unmodeled_queries = 0;
  std::uint64_t predict_calls = 0;
  std::uint64_t skipped_planning = 0;
  std::uint64_t episodes = 0;
  std::vector<CurvePoint> curve;
};

/// Aggregate over seeds: standard error = sample stdev / sqrt(#seeds).
struct RunResult {
  std::string condition;
  std::vector<double> seed_scores;
  std::size_t n_seeds = 0;
  double mean = 0.0;
  double standard_error = 0.0;
  std::uint64_t trunc_deficit = 0;
  std::uint64_t unmodeled_queries = 0;

  double lower() const { return mean - standard_error; }
  double upper() const { return mean + standard_error; }
};

RunResult aggregate(const std::string& condition, const std::vector<SeedResult>& rows);

/// Fixed-parameter evaluation shared by every condition: `episodes` episodes
/// at `epsilon` with sticky actions, scored by raw (unclipped) return.
struct EvaluationProtocol {
  int episodes = 100;
  double epsilon = 0.01;

  double evaluate(const Agent& agent, const GridWorld& world, Rng& rng) const;
};

struct RunHooks {
  /// Fractions of real_frames at which `on_checkpoint` fires (1.0 = end).
  std::vector<double> checkpoint_fractions;
  std::function<void(const Agent&, double fraction)> on_checkpoint;
};

GridWorld make_environment(const ExperimentConfig& cfg);
std::unique_ptr<Agent> make_agent(const ExperimentConfig& cfg, const GridWorld& world, Rng& init_rng);

/// Trains for cfg.real_frames real steps (planning after each one when a
/// model is configured), then evaluates. Deterministic given (cfg, seed).
SeedResult run_condition(const ExperimentConfig& cfg, std::uint64_t seed, const RunHooks* hooks = nullptr);

/// The model-free controls matched to `planning_cfg`.
ExperimentConfig base_100k_condition(const ExperimentConfig& planning_cfg);
ExperimentConfig extra_updates_condition(const ExperimentConfig& planning_cfg);
ExperimentConfig base_10m_condition(const ExperimentConfig& planning_cfg);

bool is_baseline_condition(const std::string& condition);

struct CellFailure {
  std::string condition;
  std::uint64_t seed = 0;
  std::string message;
};

struct SweepResult {
  std::vector<ExperimentConfig> conditions;
  std::vector<SeedResult> rows;
  std::vector<RunResult> aggregates;
  std::vector<CellFailure> failures;
};

/// The condition list a sweep expands to (planning cells then baselines).
std::vector<ExperimentConfig> expand_sweep(const ExperimentConfig& base);

/// Runs the given conditions for every seed on up to `jobs` threads. Output
/// order is (condition, seed) regardless of scheduling. A failing cell is
/// recorded and the rest continue.
SweepResult run_conditions(const std::vector<ExperimentConfig>& conditions, const std::vector<std::uint64_t>& seeds,
                           int jobs);

SweepResult run_sweep(const ExperimentConfig& base, int jobs);

std::string results_csv(const std::vector<SeedResult>& rows);
std::string aggregate_csv(const std::vector<RunResult>& rows);
std::string curves_csv(const std::vector<SeedResult>& rows);
std::vector<RunResult> parse_aggregate_csv(const std::string& text);

/// Bar chart with +-1 stderr whiskers; baseline conditions become dashed
/// horizontal lines.
std::string render_svg(const std::vector<RunResult>& rows, const std::string& title);

io::Json run_manifest(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds);

/// Writes results.csv, aggregate.csv, chart.svg, manifest.json (and
/// curves.csv / failures.csv when non-empty) into `out_dir`.
void write_sweep_outputs(const SweepResult& result, const ExperimentConfig& base, const std::filesystem::path& out_dir,
                         const std::string& title);

/// Long model-free run that saves `expert_<pct>.bin` checkpoints at 25, 50,
/// 75 and 100% of cfg.pretrain.expert_frames into `dir`.
void train_expert(const ExperimentConfig& cfg, const std::filesystem::path& dir);

std::filesystem::path expert_checkpoint_path(const std::filesystem::path& dir, int percent);

/// Dataset of contiguous episodes recorded from a frozen agent.
std::vector<std::vector<Transition>> collect_trajectories(const Agent& agent, const GridWorld& world,
                                                          std::size_t transitions, double epsilon, Rng& rng);

struct PretrainResult {
  ForwardTrainResult<double> trained;
  std::size_t dataset_transitions = 0;
  int source_policies = 0;
};

Curriculum curriculum_for(const std::string& schedule, int updates);

/// Model-A/B: cfg.pretrain.transitions from the final expert checkpoint.
/// Model-C: a quarter of that from each of the four checkpoints. Then runs
/// the matching curriculum. Throws ConfigError if a checkpoint is missing.
PretrainResult pretrain_model_for(const ExperimentConfig& cfg, const std::filesystem::path& expert_dir);

}  // namespace dyna
