#pragma once

#include "dyna/core.hpp"
#include "dyna/rng.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace dyna {

enum class Cell : std::uint8_t { kWall, kFloor, kStart, kGoal, kKey, kDoor, kCliff };

/// Character grid: `#` wall, `.` floor, `S` start, `G` goal, `K` key,
/// `D` door, `C` cliff. Exactly one `S`; at most one `K`.
struct GridLayout {
  int width = 0;
  int height = 0;
  std::vector<Cell> cells;

  static GridLayout parse(std::string_view text);
  static GridLayout load(const std::filesystem::path& path);

  Cell at(int x, int y) const { return cells[static_cast<std::size_t>(y * width + x)]; }
  bool has_key() const;
  std::string to_text() const;
};

struct EnvConfig {
  double p_sticky = 0.25;
  int frame_skip = 1;
  /// 0 selects the environment's default cap; negative disables the cap.
  int step_cap = 0;
  /// Append (x, y, has_key) to the one-hot encoding.
  bool coordinate_features = true;
};

/// Full internal state of a grid episode, including the sticky-action
/// register (`last_action`, -1 when cleared).
struct EnvState {
  int x = 0;
  int y = 0;
  bool has_key = false;
  int last_action = -1;
  int steps = 0;
  bool done = false;

  friend bool operator==(const EnvState&, const EnvState&) = default;
};

struct StepResult {
  Observation observation;
  double reward = 0.0;
  /// Episode is over (goal, cliff or step cap).
  bool terminal = false;
  /// Episode ended only because the step cap was hit.
  bool truncated = false;
  ActionIndex executed_action = 0;
};

struct EnvSnapshot {
  std::string environment;
  EnvState state;
  std::string rng_state;

  std::string to_bytes() const;
  static EnvSnapshot from_bytes(const std::string& bytes);
};

/// Row `i` holds the feature vector of state `i`.
class FeatureTable {
 public:
  explicit FeatureTable(Matrix rows) : rows_(std::move(rows)) {}

  std::size_t size() const { return static_cast<std::size_t>(rows_.rows()); }
  int dim() const { return static_cast<int>(rows_.cols()); }
  const Matrix& rows() const { return rows_; }

  Observation observation(StateId id) const { return {id, rows_.row(static_cast<Eigen::Index>(id)).transpose()}; }

  /// Nearest row in squared Euclidean distance, lowest index on ties.
  StateId nearest(const Vector& features) const;

 private:
  Matrix rows_;
};

/// Deterministic single-frame effect of an executed action.
struct MoveOutcome {
  EnvState state;
  double reward = 0.0;
  bool terminal = false;
};

/// Episodic grid environment with sticky actions and clonable state.
///
/// Actions are 0 up, 1 right, 2 down, 3 left. Walls and locked doors block
/// movement; entering `K` picks up the key, entering `D` requires the key,
/// `G` pays +1 and `C` pays -1, both terminal.
class GridWorld {
 public:
  static constexpr int kActionCount = 4;

  GridWorld(std::string name, GridLayout layout, EnvConfig config, int default_step_cap);

  /// `key_corridor`, `four_rooms` or `cliff_river`.
  static GridWorld builtin(std::string_view id, EnvConfig config = {});
  static std::vector<std::string> builtin_ids();
  static std::string builtin_layout_text(std::string_view id);
  static int builtin_step_cap(std::string_view id);

  const std::string& name() const { return name_; }
  const GridLayout& layout() const { return layout_; }
  const EnvConfig& config() const { return config_; }
  std::size_t state_count() const { return features_->size(); }
  int feature_dim() const { return features_->dim(); }
  int action_count() const { return kActionCount; }
  /// 0 when uncapped.
  int step_cap() const { return step_cap_; }
  std::shared_ptr<const FeatureTable> feature_table() const { return features_; }

  Observation reset(std::uint64_t seed);
  StepResult step(ActionIndex action);
  /// Same as step(action) but draws sticky-action noise from `rng`.
  StepResult step(ActionIndex action, Rng& rng);

  EnvSnapshot snapshot() const;
  void restore(const EnvSnapshot& snapshot);

  const EnvState& state() const { return state_; }
  bool done() const { return state_.done; }

  EnvState start_state() const;
  StateId state_id(const EnvState& s) const;
  /// Inverse of state_id with a cleared sticky register and zero step count.
  EnvState state_from_id(StateId id) const;
  Observation observe(const EnvState& s) const { return features_->observation(state_id(s)); }

  /// With `through_doors` set a locked door does not block (used to build
  /// the grid neighbourhood of a state).
  MoveOutcome move(const EnvState& s, ActionIndex executed, bool through_doors = false) const;
  /// One agent step from `s`: sticky-action draw and frame skip, step cap.
  /// Mutates `s` in place. This is the whole transition function; the
  /// environment and the perfect model both go through it.
  StepResult advance(EnvState& s, ActionIndex chosen, Rng& rng) const;

  /// Copy with the step cap disabled (used as a planning simulator).
  GridWorld uncapped() const;

 private:
  std::string name_;
  GridLayout layout_;
  EnvConfig config_;
  int step_cap_ = 0;
  int layers_ = 1;
  int start_x_ = 0;
  int start_y_ = 0;
  std::vector<int> position_index_;
  std::vector<std::pair<int, int>> positions_;
  std::shared_ptr<const FeatureTable> features_;

  EnvState state_;
  Rng rng_;
};

}  // namespace dyna
