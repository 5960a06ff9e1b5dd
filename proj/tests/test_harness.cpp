#include "dyna/harness.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

using namespace dyna;

namespace {

ExperimentConfig tiny(std::optional<PlanningShape> shape = PlanningShape{5, 2}) {
  ExperimentConfig c = ExperimentConfig::desk_profile();
  c.env_id = "four_rooms";
  c.real_frames = 400;
  c.eval_episodes = 3;
  c.q_learner.replay_capacity = 1'000;
  c.seeds = {0, 1};
  if (shape) {
    c.model = ModelKind::kPerfect;
    c.shape = shape;
  }
  return c;
}

std::size_t count(const std::string& text, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = text.find(needle); p != std::string::npos; p = text.find(needle, p + 1)) ++n;
  return n;
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("dyna_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST(Config, JsonRoundTrip) {
  for (const auto& c : {ExperimentConfig::desk_profile(), ExperimentConfig::paper_profile(), tiny()}) {
    EXPECT_EQ(ExperimentConfig::from_json(c.to_json()).to_json(), c.to_json());
  }
}

TEST(Config, MissingKeysTakeDeskDefaults) {
  const auto c = ExperimentConfig::from_json(io::Json::object());
  EXPECT_EQ(c.to_json(), ExperimentConfig::desk_profile().to_json());
  EXPECT_EQ(c.seeds.size(), 30u);
  EXPECT_EQ(c.budget, 10);
}

TEST(Config, UnknownKeysAreRejected) {
  EXPECT_THROW(ExperimentConfig::from_json({{"agnet", {{"kind", "q"}}}}), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_json({{"agent", {{"stepsize", 0.1}}}}), ConfigError);
  try {
    ExperimentConfig::from_json({{"planning", {{"budgett", 3}}}});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("planning.budgett"), std::string::npos);
  }
}

TEST(Config, ShapeAndModelSpellings) {
  const auto a = ExperimentConfig::from_json({{"model", {{"kind", "corrupted:0.1"}}}, {"planning", {{"shape", "2x5"}}}});
  EXPECT_EQ(a.model, ModelKind::kCorrupted);
  EXPECT_DOUBLE_EQ(a.eta, 0.1);
  EXPECT_EQ(a.shape, (PlanningShape{2, 5}));
  const auto b = ExperimentConfig::from_json({{"planning", {{"shape", {{"n", 5}, {"k", 2}}}}}});
  EXPECT_EQ(b.shape, (PlanningShape{5, 2}));
  EXPECT_THROW(ExperimentConfig::from_json({{"planning", {{"shape", "5by2"}}}}), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_json({{"model", {{"kind", "oracle"}}}}), ConfigError);
}

TEST(Config, OverridesReplaceExistingPathsOnly) {
  const io::Json base = ExperimentConfig::desk_profile().to_json();
  const io::Json j = apply_overrides(base, {"agent.step_size=0.25", "env.id=four_rooms", "planning.shape=\"1x10\""});
  const auto c = ExperimentConfig::from_json(j);
  EXPECT_DOUBLE_EQ(c.q_learner.step_size, 0.25);
  EXPECT_EQ(c.env_id, "four_rooms");
  EXPECT_EQ(c.shape, (PlanningShape{1, 10}));
  EXPECT_THROW(apply_overrides(base, {"agent.nope=1"}), ConfigError);
  EXPECT_THROW(apply_overrides(base, {"agent.step_size"}), ConfigError);
}

TEST(Config, LoadConfigMapsErrors) {
  const auto dir = scratch("load");
  std::filesystem::create_directories(dir);
  io::write_text(dir / "bad.json", "{ not json");
  EXPECT_THROW(load_config(dir / "bad.json", {}), ConfigError);
  EXPECT_THROW(load_config(dir / "missing.json", {}), ConfigError);
  io::write_text(dir / "ok.json", R"({"real_frames": 123})");
  EXPECT_EQ(load_config(dir / "ok.json", {"eval.episodes=7"}).eval_episodes, 7);
  EXPECT_EQ(load_config(dir / "ok.json", {}).real_frames, 123u);
  std::filesystem::remove_all(dir);
}

TEST(Config, ValidateCatchesInconsistencies) {
  EXPECT_NO_THROW(tiny().validate());
  EXPECT_NO_THROW(tiny(std::nullopt).validate());
  auto c = tiny();
  c.shape = PlanningShape{3, 3};
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny(std::nullopt);
  c.shape = PlanningShape{10, 1};
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.shape.reset();
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.seeds.clear();
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.env_id = "no_such_world";
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.model = ModelKind::kCorrupted;
  c.eta = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.model = ModelKind::kParametricPretrained;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, ConditionNames) {
  EXPECT_EQ(tiny().condition(), "perfect 5x2");
  auto c = tiny();
  c.model = ModelKind::kCorrupted;
  c.eta = 0.02;
  EXPECT_EQ(c.condition(), "corrupted:0.02 5x2");
  EXPECT_EQ(tiny(std::nullopt).condition(), "model-free");
  EXPECT_EQ(extra_updates_condition(tiny()).model_descriptor(), "none:extra-updates");
  EXPECT_TRUE(is_baseline_condition("four_rooms/base-10m"));
  EXPECT_FALSE(is_baseline_condition("perfect 10x1"));
}

TEST(Baselines, MatchThePlanningCondition) {
  const auto p = tiny();
  const auto b100 = base_100k_condition(p), eu = extra_updates_condition(p), b10m = base_10m_condition(p);
  for (const auto& b : {b100, eu, b10m}) {
    EXPECT_EQ(b.model, ModelKind::kNone);
    EXPECT_FALSE(b.shape.has_value());
    EXPECT_EQ(b.q_learner.train_frequency, p.q_learner.train_frequency);
  }
  EXPECT_EQ(b100.extra_updates, 1);
  EXPECT_EQ(b100.real_frames, p.real_frames);
  EXPECT_EQ(eu.extra_updates, p.budget + 1);
  EXPECT_EQ(eu.real_frames, p.real_frames);
  EXPECT_EQ(b10m.real_frames, p.real_frames * 10);
  EXPECT_EQ(b10m.extra_updates, 1);
}

TEST(ExpandSweep, ShapesThenBaselines) {
  auto base = tiny();
  const auto cells = expand_sweep(base);
  ASSERT_EQ(cells.size(), 7u);
  EXPECT_EQ(cells[0].condition(), "perfect 10x1");
  EXPECT_EQ(cells[3].condition(), "perfect 1x10");
  EXPECT_EQ(cells[4].condition(), "base-100k");
  EXPECT_EQ(cells[6].condition(), "base-10m");

  base.sweep.axis = "models";
  base.sweep.models = {"perfect", "corrupted:0.1"};
  base.sweep.baselines = false;
  const auto models = expand_sweep(base);
  ASSERT_EQ(models.size(), 8u);
  EXPECT_EQ(models[4].condition(), "corrupted:0.1 10x1");

  base.sweep.axis = "environments";
  base.sweep.environments = {"cliff_river", "four_rooms"};
  base.sweep.baselines = true;
  const auto envs = expand_sweep(base);
  ASSERT_EQ(envs.size(), 14u);
  EXPECT_EQ(envs[7].condition(), "four_rooms/perfect 10x1");
  EXPECT_EQ(envs[13].condition(), "four_rooms/base-10m");

  base.sweep.axis = "diagonal";
  EXPECT_THROW(expand_sweep(base), ConfigError);
  auto bad = tiny();
  bad.sweep.shapes = {{3, 3}};
  EXPECT_THROW(expand_sweep(bad), ConfigError);
}

TEST(Aggregate, MeanAndStandardError) {
  std::vector<SeedResult> rows(4);
  const double scores[] = {1.0, 2.0, 4.0, 5.0};
  for (int i = 0; i < 4; ++i) rows[static_cast<std::size_t>(i)].eval_mean = scores[i];
  const auto r = aggregate("c", rows);
  EXPECT_DOUBLE_EQ(r.mean, 3.0);
  // Sample variance 10/3, stderr sqrt(10/3)/2.
  EXPECT_NEAR(r.standard_error, std::sqrt(10.0 / 3.0) / 2.0, 1e-12);
  EXPECT_EQ(r.n_seeds, 4u);
  EXPECT_DOUBLE_EQ(aggregate("c", {rows[0]}).standard_error, 0.0);
}

TEST(RunCondition, AccountingHolds) {
  for (PlanningShape s : {PlanningShape{10, 1}, PlanningShape{1, 10}}) {
    const auto cfg = tiny(s);
    const auto r = run_condition(cfg, 3);
    EXPECT_EQ(r.frames_real, 400u);
    EXPECT_EQ(r.frames_sim, r.predict_calls);
    EXPECT_EQ(r.predict_calls + r.trunc_deficit, 400u * 10u);
    EXPECT_EQ(r.train_steps, (r.frames_real + r.frames_sim) / 4);
  }
  auto eu = extra_updates_condition(tiny());
  const auto r = run_condition(eu, 3);
  EXPECT_EQ(r.frames_sim, 0u);
  EXPECT_EQ(r.train_steps, 400u / 4u * 11u);
}

TEST(RunCondition, DeterministicPerSeed) {
  const auto cfg = tiny();
  const auto a = run_condition(cfg, 5), b = run_condition(cfg, 5), c = run_condition(cfg, 6);
  EXPECT_EQ(results_csv({a}), results_csv({b}));
  EXPECT_NE(results_csv({a}), results_csv({c}));
}

TEST(RunCondition, CheckpointHooksFire) {
  const auto cfg = tiny(std::nullopt);
  std::vector<std::pair<double, std::uint64_t>> seen;
  RunHooks hooks;
  hooks.checkpoint_fractions = {0.25, 1.0};
  hooks.on_checkpoint = [&](const Agent& a, double f) { seen.emplace_back(f, a.real_frames()); };
  run_condition(cfg, 0, &hooks);
  ASSERT_EQ(seen.size(), 2u);
  EXPECT_EQ(seen[0], (std::pair<double, std::uint64_t>{0.25, 100}));
  EXPECT_EQ(seen[1], (std::pair<double, std::uint64_t>{1.0, 400}));
}

TEST(RunCondition, CurvesAreRecorded) {
  auto cfg = tiny(std::nullopt);
  cfg.curve_every = 100;
  cfg.curve_episodes = 2;
  const auto r = run_condition(cfg, 0);
  ASSERT_EQ(r.curve.size(), 4u);
  EXPECT_EQ(r.curve.back().real_frames, 400u);
  EXPECT_EQ(count(curves_csv({r}), "\n"), 5u);
}

TEST(RunConditions, ParallelMatchesSerialAndRecordsFailures) {
  std::vector<ExperimentConfig> conds = {tiny(), tiny(std::nullopt)};
  const auto serial = run_conditions(conds, {0, 1, 2}, 1);
  const auto parallel = run_conditions(conds, {0, 1, 2}, 3);
  EXPECT_EQ(results_csv(serial.rows), results_csv(parallel.rows));
  EXPECT_EQ(aggregate_csv(serial.aggregates), aggregate_csv(parallel.aggregates));
  ASSERT_EQ(serial.aggregates.size(), 2u);
  EXPECT_EQ(serial.aggregates[0].n_seeds, 3u);

  auto broken = tiny();
  broken.model = ModelKind::kParametricPretrained;
  broken.params_file = "/nonexistent/model.bin";
  const auto mixed = run_conditions({broken, tiny(std::nullopt)}, {0, 1}, 2);
  EXPECT_EQ(mixed.failures.size(), 2u);
  EXPECT_EQ(mixed.rows.size(), 2u);
  EXPECT_THROW(run_conditions(conds, {}, 1), ConfigError);
}

TEST(Outputs, CsvHeadersAndRoundTrip) {
  const auto r = run_condition(tiny(), 0);
  const std::string csv = results_csv({r});
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "env,agent,model,shape_n,shape_k,seed,eval_mean,frames_real,frames_sim,train_steps,trunc_deficit,"
            "unmodeled_queries");
  RunResult a;
  a.condition = "perfect 2x5";
  a.mean = 0.125;
  a.standard_error = 0.03125;
  a.n_seeds = 30;
  RunResult b = a;
  b.condition = "base-10m";
  b.mean = 0.9;
  const auto back = parse_aggregate_csv(aggregate_csv({a, b}));
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].condition, a.condition);
  EXPECT_EQ(back[0].mean, a.mean);
  EXPECT_EQ(back[0].standard_error, a.standard_error);
  EXPECT_EQ(back[1].n_seeds, 30u);
  EXPECT_THROW(parse_aggregate_csv("wrong,header\n"), ConfigError);
}

TEST(Outputs, SvgDrawsBarsAndDashedBaselines) {
  std::vector<RunResult> rows(5);
  const char* names[] = {"perfect 10x1", "perfect 1x10", "base-100k", "extra-updates", "base-10m"};
  for (int i = 0; i < 5; ++i) {
    rows[static_cast<std::size_t>(i)].condition = names[i];
    rows[static_cast<std::size_t>(i)].mean = 0.1 * (i + 1);
    rows[static_cast<std::size_t>(i)].standard_error = 0.05;
  }
  const std::string svg = render_svg(rows, "KeyCorridor");
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_EQ(count(svg, "class=\"bar\""), 2u);
  EXPECT_EQ(count(svg, "class=\"baseline\""), 3u);
  EXPECT_EQ(count(svg, "stroke-dasharray"), 3u);
  EXPECT_NE(svg.find("data-condition=\"base-10m\""), std::string::npos);
}

TEST(Outputs, WriteSweepOutputsAndManifest) {
  const auto dir = scratch("outputs");
  auto base = tiny();
  base.shape.reset();
  base.sweep.shapes = {{10, 1}};
  base.seeds = {0};
  const auto result = run_sweep(base, 1);
  write_sweep_outputs(result, base, dir, "t");
  for (const char* f : {"results.csv", "aggregate.csv", "chart.svg", "manifest.json"}) {
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  }
  EXPECT_FALSE(std::filesystem::exists(dir / "failures.csv"));
  const auto manifest = io::read_json(dir / "manifest.json");
  EXPECT_EQ(manifest.at("config_hash"), io::git_blob_hash(manifest.at("config").dump()));
  EXPECT_EQ(run_manifest(base, base.seeds), run_manifest(base, base.seeds));
  std::filesystem::remove_all(dir);
}

TEST(Pretrain, CollectsExactContiguousEpisodes) {
  const auto cfg = tiny(std::nullopt);
  const GridWorld world = make_environment(cfg);
  Rng rng(1);
  const auto agent = make_agent(cfg, world, rng);
  const auto trajs = collect_trajectories(*agent, world, 777, 0.5, rng);
  std::size_t total = 0;
  for (const auto& t : trajs) {
    total += t.size();
    for (std::size_t i = 1; i < t.size(); ++i) EXPECT_EQ(t[i].state, t[i - 1].next_state);
    for (std::size_t i = 0; i + 1 < t.size(); ++i) EXPECT_FALSE(t[i].terminal);
  }
  EXPECT_EQ(total, 777u);
}

TEST(Pretrain, MissingExpertIsAConfigError) {
  auto cfg = tiny(std::nullopt);
  EXPECT_THROW(pretrain_model_for(cfg, scratch("no_expert")), ConfigError);
  EXPECT_THROW(curriculum_for("D", 100), ConfigError);
  EXPECT_EQ(curriculum_for("C", 100).phases.size(), 3u);
}

TEST(Pretrain, ExpertThenModelC) {
  const auto dir = scratch("expert");
  auto cfg = tiny(std::nullopt);
  cfg.pretrain.expert_frames = 800;
  cfg.pretrain.transitions = 400;
  cfg.pretrain.updates = 30;
  train_expert(cfg, dir);
  for (int pct : {25, 50, 75, 100}) EXPECT_TRUE(std::filesystem::exists(expert_checkpoint_path(dir, pct)));
  const auto r = pretrain_model_for(cfg, dir);
  EXPECT_EQ(r.source_policies, 4);
  EXPECT_EQ(r.dataset_transitions, 400u);
  EXPECT_TRUE(r.trained.params.all_finite());
  cfg.pretrain.schedule = "A";
  EXPECT_EQ(pretrain_model_for(cfg, dir).source_policies, 1);
  std::filesystem::remove_all(dir);
}
