#include "dyna/envs.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace dyna {

namespace {

constexpr std::string_view kKeyCorridor =
    "#########################\n"
    "#..........S......D....G#\n"
    "#.#########.#############\n"
    "#.#########.#############\n"
    "#K#########.#############\n"
    "#########################\n";

constexpr std::string_view kFourRooms =
    "#############\n"
    "#.....#....G#\n"
    "#.....#.....#\n"
    "#...........#\n"
    "#.....#.....#\n"
    "#.....#.....#\n"
    "##.####.....#\n"
    "#.....###.###\n"
    "#.....#.....#\n"
    "#.....#.....#\n"
    "#...........#\n"
    "#S....#.....#\n"
    "#############\n";

constexpr std::string_view kCliffRiver =
    "##############\n"
    "#............#\n"
    "#............#\n"
    "#............#\n"
    "#SCCCCCCCCCCG#\n"
    "##############\n";

constexpr std::array<int, 4> kDx = {0, 1, 0, -1};
constexpr std::array<int, 4> kDy = {-1, 0, 1, 0};

Cell cell_from_char(char c) {
  switch (c) {
    case '#': return Cell::kWall;
    case '.': return Cell::kFloor;
    case 'S': return Cell::kStart;
    case 'G': return Cell::kGoal;
    case 'K': return Cell::kKey;
    case 'D': return Cell::kDoor;
    case 'C': return Cell::kCliff;
    default: throw ConfigError(std::string("layout: unknown cell character '") + c + "'");
  }
}

char char_from_cell(Cell c) {
  switch (c) {
    case Cell::kWall: return '#';
    case Cell::kFloor: return '.';
    case Cell::kStart: return 'S';
    case Cell::kGoal: return 'G';
    case Cell::kKey: return 'K';
    case Cell::kDoor: return 'D';
    case Cell::kCliff: return 'C';
  }
  return '?';
}

void put_i32(std::string& out, std::int32_t v) {
  const auto u = static_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xFFu));
}

std::int32_t get_i32(const std::string& in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw ContractViolation("snapshot: truncated bytes");
  std::uint32_t u = 0;
  for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 4;
  return static_cast<std::int32_t>(u);
}

void put_str(std::string& out, const std::string& s) {
  put_i32(out, static_cast<std::int32_t>(s.size()));
  out += s;
}

std::string get_str(const std::string& in, std::size_t& pos) {
  const auto n = static_cast<std::size_t>(get_i32(in, pos));
  if (pos + n > in.size()) throw ContractViolation("snapshot: truncated bytes");
  std::string s = in.substr(pos, n);
  pos += n;
  return s;
}

constexpr std::string_view kSnapshotMagic = "DYNASNP1";

}  // namespace

GridLayout GridLayout::parse(std::string_view text) {
  GridLayout layout;
  std::vector<std::string> rows;
  std::string line;
  for (char c : text) {
    if (c == '\r') continue;
    if (c == '\n') {
      if (!line.empty()) rows.push_back(line);
      line.clear();
    } else {
      line.push_back(c);
    }
  }
  if (!line.empty()) rows.push_back(line);
  if (rows.empty()) throw ConfigError("layout: empty grid");
  layout.height = static_cast<int>(rows.size());
  layout.width = static_cast<int>(rows.front().size());
  int starts = 0;
  int keys = 0;
  for (const auto& row : rows) {
    if (static_cast<int>(row.size()) != layout.width) throw ConfigError("layout: ragged rows");
    for (char c : row) {
      const Cell cell = cell_from_char(c);
      starts += cell == Cell::kStart;
      keys += cell == Cell::kKey;
      layout.cells.push_back(cell);
    }
  }
  if (starts != 1) throw ConfigError("layout: expected exactly one 'S', found " + std::to_string(starts));
  if (keys > 1) throw ConfigError("layout: at most one 'K' is supported");
  for (int x = 0; x < layout.width; ++x) {
    if (layout.at(x, 0) != Cell::kWall || layout.at(x, layout.height - 1) != Cell::kWall)
      throw ConfigError("layout: grid must be enclosed by walls");
  }
  for (int y = 0; y < layout.height; ++y) {
    if (layout.at(0, y) != Cell::kWall || layout.at(layout.width - 1, y) != Cell::kWall)
      throw ConfigError("layout: grid must be enclosed by walls");
  }
  return layout;
}

GridLayout GridLayout::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("layout: cannot open " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse(buffer.str());
}

bool GridLayout::has_key() const {
  return std::find(cells.begin(), cells.end(), Cell::kKey) != cells.end();
}

std::string GridLayout::to_text() const {
  std::string out;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) out.push_back(char_from_cell(at(x, y)));
    out.push_back('\n');
  }
  return out;
}

std::string EnvSnapshot::to_bytes() const {
  std::string out(kSnapshotMagic);
  put_str(out, environment);
  put_i32(out, state.x);
  put_i32(out, state.y);
  put_i32(out, state.has_key ? 1 : 0);
  put_i32(out, state.last_action);
  put_i32(out, state.steps);
  put_i32(out, state.done ? 1 : 0);
  put_str(out, rng_state);
  return out;
}

EnvSnapshot EnvSnapshot::from_bytes(const std::string& bytes) {
  if (bytes.compare(0, kSnapshotMagic.size(), kSnapshotMagic) != 0)
    throw ContractViolation("snapshot: bad magic");
  std::size_t pos = kSnapshotMagic.size();
  EnvSnapshot s;
  s.environment = get_str(bytes, pos);
  s.state.x = get_i32(bytes, pos);
  s.state.y = get_i32(bytes, pos);
  s.state.has_key = get_i32(bytes, pos) != 0;
  s.state.last_action = get_i32(bytes, pos);
  s.state.steps = get_i32(bytes, pos);
  s.state.done = get_i32(bytes, pos) != 0;
  s.rng_state = get_str(bytes, pos);
  if (pos != bytes.size()) throw ContractViolation("snapshot: trailing bytes");
  return s;
}

StateId FeatureTable::nearest(const Vector& features) const {
  Eigen::Index best = 0;
  (rows_.rowwise() - features.transpose()).rowwise().squaredNorm().minCoeff(&best);
  return static_cast<StateId>(best);
}

GridWorld::GridWorld(std::string name, GridLayout layout, EnvConfig config, int default_step_cap)
    : name_(std::move(name)), layout_(std::move(layout)), config_(config) {
  if (config_.p_sticky < 0.0 || config_.p_sticky > 1.0) throw ConfigError("p_sticky must lie in [0, 1]");
  if (config_.frame_skip < 1) throw ConfigError("frame_skip must be >= 1");
  step_cap_ = config_.step_cap == 0 ? default_step_cap : std::max(config_.step_cap, 0);
  layers_ = layout_.has_key() ? 2 : 1;

  position_index_.assign(layout_.cells.size(), -1);
  for (int y = 0; y < layout_.height; ++y) {
    for (int x = 0; x < layout_.width; ++x) {
      const Cell c = layout_.at(x, y);
      if (c == Cell::kWall) continue;
      if (c == Cell::kStart) {
        start_x_ = x;
        start_y_ = y;
      }
      position_index_[static_cast<std::size_t>(y * layout_.width + x)] = static_cast<int>(positions_.size());
      positions_.emplace_back(x, y);
    }
  }

  const auto states = static_cast<Eigen::Index>(positions_.size()) * layers_;
  const Eigen::Index dim = states + (config_.coordinate_features ? 3 : 0);
  Matrix rows = Matrix::Zero(states, dim);
  const double sx = layout_.width > 1 ? 1.0 / (layout_.width - 1) : 0.0;
  const double sy = layout_.height > 1 ? 1.0 / (layout_.height - 1) : 0.0;
  for (Eigen::Index id = 0; id < states; ++id) {
    rows(id, id) = 1.0;
    if (config_.coordinate_features) {
      const auto& [x, y] = positions_[static_cast<std::size_t>(id / layers_)];
      rows(id, states) = x * sx;
      rows(id, states + 1) = y * sy;
      rows(id, states + 2) = static_cast<double>(id % layers_);
    }
  }
  features_ = std::make_shared<const FeatureTable>(std::move(rows));
  state_ = start_state();
}

std::vector<std::string> GridWorld::builtin_ids() { return {"key_corridor", "four_rooms", "cliff_river"}; }

std::string GridWorld::builtin_layout_text(std::string_view id) {
  if (id == "key_corridor") return std::string(kKeyCorridor);
  if (id == "four_rooms") return std::string(kFourRooms);
  if (id == "cliff_river") return std::string(kCliffRiver);
  throw ConfigError("unknown environment '" + std::string(id) + "'");
}

int GridWorld::builtin_step_cap(std::string_view id) {
  if (id == "key_corridor") return 200;
  if (id == "four_rooms") return 500;
  if (id == "cliff_river") return 300;
  throw ConfigError("unknown environment '" + std::string(id) + "'");
}

GridWorld GridWorld::builtin(std::string_view id, EnvConfig config) {
  return GridWorld(std::string(id), GridLayout::parse(builtin_layout_text(id)), config, builtin_step_cap(id));
}

EnvState GridWorld::start_state() const {
  EnvState s;
  s.x = start_x_;
  s.y = start_y_;
  return s;
}

StateId GridWorld::state_id(const EnvState& s) const {
  const int pos = position_index_[static_cast<std::size_t>(s.y * layout_.width + s.x)];
  return static_cast<StateId>(pos * layers_ + (s.has_key && layers_ == 2 ? 1 : 0));
}

EnvState GridWorld::state_from_id(StateId id) const {
  if (id >= state_count()) throw ContractViolation("state id out of range");
  EnvState s;
  const auto& [x, y] = positions_[id / static_cast<std::size_t>(layers_)];
  s.x = x;
  s.y = y;
  s.has_key = layers_ == 2 && id % 2 == 1;
  return s;
}

MoveOutcome GridWorld::move(const EnvState& s, ActionIndex executed, bool through_doors) const {
  MoveOutcome out{s, 0.0, false};
  const int nx = s.x + kDx[static_cast<std::size_t>(executed)];
  const int ny = s.y + kDy[static_cast<std::size_t>(executed)];
  const Cell target = layout_.at(nx, ny);
  if (target == Cell::kWall) return out;
  if (target == Cell::kDoor && !s.has_key && !through_doors) return out;
  out.state.x = nx;
  out.state.y = ny;
  switch (target) {
    case Cell::kKey: out.state.has_key = true; break;
    case Cell::kGoal:
      out.reward = 1.0;
      out.terminal = true;
      break;
    case Cell::kCliff:
      out.reward = -1.0;
      out.terminal = true;
      break;
    default: break;
  }
  return out;
}

StepResult GridWorld::advance(EnvState& s, ActionIndex chosen, Rng& rng) const {
  if (s.done) throw ContractViolation("step called on a finished episode; call reset first");
  if (chosen < 0 || chosen >= kActionCount)
    throw ContractViolation("action " + std::to_string(chosen) + " outside the minimal action set");
  StepResult result;
  bool terminal = false;
  for (int frame = 0; frame < config_.frame_skip && !terminal; ++frame) {
    const bool repeat = config_.p_sticky > 0.0 && rng.uniform() < config_.p_sticky;
    const ActionIndex executed = repeat && s.last_action >= 0 ? s.last_action : chosen;
    const MoveOutcome m = move(s, executed);
    const int steps = s.steps;
    s = m.state;
    s.steps = steps;
    s.last_action = executed;
    result.reward += m.reward;
    result.executed_action = executed;
    terminal = m.terminal;
  }
  s.steps += 1;
  if (!terminal && step_cap_ > 0 && s.steps >= step_cap_) result.truncated = true;
  s.done = terminal || result.truncated;
  result.terminal = s.done;
  result.observation = observe(s);
  return result;
}

Observation GridWorld::reset(std::uint64_t seed) {
  rng_ = Rng(seed);
  state_ = start_state();
  return observe(state_);
}

StepResult GridWorld::step(ActionIndex action) { return advance(state_, action, rng_); }

StepResult GridWorld::step(ActionIndex action, Rng& rng) { return advance(state_, action, rng); }

EnvSnapshot GridWorld::snapshot() const { return {name_, state_, rng_.serialize()}; }

void GridWorld::restore(const EnvSnapshot& snapshot) {
  if (snapshot.environment != name_)
    throw ContractViolation("restore: snapshot from '" + snapshot.environment + "' applied to '" + name_ + "'");
  state_ = snapshot.state;
  rng_ = Rng::deserialize(snapshot.rng_state);
}

GridWorld GridWorld::uncapped() const {
  GridWorld copy = *this;
  copy.step_cap_ = 0;
  copy.config_.step_cap = -1;
  return copy;
}

}  // namespace dyna
