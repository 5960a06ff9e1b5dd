#include "dyna/cli.hpp"

#include "dyna/harness.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <cstdlib>
#include <ostream>

namespace dyna {

namespace {

struct Options {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
  std::string input;
  int jobs = 0;
  std::string seed_range;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

std::vector<std::uint64_t> parse_seed_range(const std::string& text) {
  const auto colon = text.find(':');
  try {
    if (colon == std::string::npos) throw std::invalid_argument(text);
    const auto a = std::stoull(text.substr(0, colon));
    const auto b = std::stoull(text.substr(colon + 1));
    if (b <= a) throw std::invalid_argument(text);
    std::vector<std::uint64_t> seeds;
    for (auto s = a; s < b; ++s) seeds.push_back(s);
    return seeds;
  } catch (const std::invalid_argument&) {
    throw ConfigError("--seed-range '" + text + "': expected A:B with A < B (B exclusive)");
  } catch (const std::out_of_range&) {
    throw ConfigError("--seed-range '" + text + "': value out of range");
  }
}

std::filesystem::path output_dir(const Options& o) {
  if (!o.out.empty()) return o.out;
  if (const char* env = std::getenv("DYNA_SHAPE_OUT"); env != nullptr && *env != '\0') return env;
  return "out";
}

ExperimentConfig resolve(const Options& o) {
  if (o.config.empty()) throw ConfigError("--config is required");
  ExperimentConfig cfg = load_config(o.config, o.overrides);
  if (!o.seed_range.empty()) cfg.seeds = parse_seed_range(o.seed_range);
  if (o.seed_given) cfg.seeds = {o.seed};
  return cfg;
}

void report_failures(const SweepResult& r, std::ostream& err) {
  for (const auto& f : r.failures) err << "dyna: cell " << f.condition << " seed " << f.seed << " failed: " << f.message << '\n';
}

int cmd_validate(const Options& o, std::ostream& out) {
  const ExperimentConfig cfg = resolve(o);
  if (cfg.shape || cfg.model == ModelKind::kNone) {
    cfg.validate();
    out << "ok: " << cfg.condition() << '\n';
    return 0;
  }
  const auto cells = expand_sweep(cfg);
  out << "ok: sweep over " << cfg.sweep.axis << ", " << cells.size() << " conditions x " << cfg.seeds.size()
      << " seeds\n";
  return 0;
}

int cmd_run(const Options& o, std::ostream& out, std::ostream& err) {
  const ExperimentConfig cfg = resolve(o);
  cfg.validate();
  const SweepResult r = run_conditions({cfg}, cfg.seeds, o.jobs);
  write_sweep_outputs(r, cfg, output_dir(o), cfg.condition());
  for (const auto& a : r.aggregates)
    out << a.condition << ": mean " << a.mean << " stderr " << a.standard_error << " over " << a.n_seeds << " seeds\n";
  report_failures(r, err);
  return r.failures.empty() ? 0 : 1;
}

int cmd_sweep(const Options& o, std::ostream& out, std::ostream& err) {
  const ExperimentConfig cfg = resolve(o);
  const SweepResult r = run_conditions(expand_sweep(cfg), cfg.seeds, o.jobs);
  const std::string title = cfg.env_id + ": " + cfg.sweep.axis + " sweep, budget " + std::to_string(cfg.budget);
  write_sweep_outputs(r, cfg, output_dir(o), title);
  for (const auto& a : r.aggregates)
    out << a.condition << ": mean " << a.mean << " stderr " << a.standard_error << " over " << a.n_seeds << " seeds\n";
  report_failures(r, err);
  return r.failures.empty() ? 0 : 1;
}

int cmd_pretrain(const Options& o, std::ostream& out) {
  const ExperimentConfig cfg = resolve(o);
  const std::filesystem::path dir = output_dir(o);
  std::filesystem::path expert = cfg.pretrain.expert_dir;
  if (expert.empty()) {
    expert = dir / "expert";
    if (!std::filesystem::exists(expert_checkpoint_path(expert, 100))) {
      out << "training expert for " << cfg.pretrain.expert_frames << " frames into " << expert.string() << '\n';
      train_expert(cfg, expert);
    }
  }
  const PretrainResult r = pretrain_model_for(cfg, expert);
  const auto path = dir / ("model_" + cfg.pretrain.schedule + ".bin");
  save_forward_model(r.trained.params, r.trained.log, path);
  out << "model " << cfg.pretrain.schedule << ": " << r.dataset_transitions << " transitions from "
      << r.source_policies << " policies\n";
  for (const auto& p : r.trained.log)
    out << "  horizon " << p.phase.horizon << ": loss " << p.initial_loss << " -> " << p.final_loss << '\n';
  out << "wrote " << path.string() << '\n';
  return 0;
}

int cmd_plot(const Options& o, std::ostream& out) {
  const std::filesystem::path dir = output_dir(o);
  const std::filesystem::path input = o.input.empty() ? dir / "aggregate.csv" : std::filesystem::path(o.input);
  std::string text;
  try {
    text = io::read_text(input);
  } catch (const std::runtime_error& e) {
    throw ConfigError(e.what());
  }
  const auto rows = parse_aggregate_csv(text);
  const auto path = dir / "chart.svg";
  io::write_text(path, render_svg(rows, input.stem().string()));
  out << "wrote " << path.string() << '\n';
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dyna planning-shape laboratory"};
  app.require_subcommand(1);
  Options o;
  auto add_common = [&o](CLI::App* sub, bool with_config) {
    if (with_config) {
      sub->add_option("--config", o.config, "JSON experiment config")->check(CLI::ExistingFile);
      sub->add_option("--set", o.overrides, "Override a config key: a.b.c=value (repeatable)");
      sub->add_option("--seed-range", o.seed_range, "Seeds A:B (B exclusive), replaces the config's seeds");
    }
    sub->add_option("--out", o.out, "Output directory (default $DYNA_SHAPE_OUT, then ./out)");
  };
  auto* validate = app.add_subcommand("validate", "Check a config without running it");
  add_common(validate, true);
  auto* run = app.add_subcommand("run", "Run one condition for every seed");
  add_common(run, true);
  run->add_option("--jobs", o.jobs, "Concurrent runs (default: hardware threads)");
  auto* seed_opt = run->add_option("--seed", o.seed, "Run a single seed");
  auto* sweep = app.add_subcommand("sweep", "Run a sweep and write CSV, SVG and manifest");
  add_common(sweep, true);
  sweep->add_option("--jobs", o.jobs, "Concurrent runs (default: hardware threads)");
  auto* pretrain = app.add_subcommand("pretrain", "Train an expert and a forward model from its data");
  add_common(pretrain, true);
  auto* plot = app.add_subcommand("plot", "Re-render chart.svg from an aggregate CSV");
  add_common(plot, false);
  plot->add_option("--input", o.input, "Aggregate CSV (default <out>/aggregate.csv)");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "dyna: error: " << e.what() << '\n';
    return 2;
  }
  o.seed_given = seed_opt->count() > 0;

  try {
    if (validate->parsed()) return cmd_validate(o, out);
    if (run->parsed()) return cmd_run(o, out, err);
    if (sweep->parsed()) return cmd_sweep(o, out, err);
    if (pretrain->parsed()) return cmd_pretrain(o, out);
    if (plot->parsed()) return cmd_plot(o, out);
  } catch (const ConfigError& e) {
    err << "dyna: invalid config: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "dyna: error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace dyna
