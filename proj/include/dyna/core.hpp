#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace dyna {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

using StateId = std::size_t;
using ActionIndex = int;

/// Raised when a caller breaks an operation's precondition (stepping a
/// finished episode, recording a simulated state, ...).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised for invalid experiment or model configuration. The CLI maps this to
/// exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Observation {
  StateId state_id = 0;
  Vector features;

  friend bool operator==(const Observation& a, const Observation& b) {
    return a.state_id == b.state_id && a.features.size() == b.features.size() &&
           (a.features.array() == b.features.array()).all();
  }
};

/// One step of experience, real or model-generated. `reward` is stored at
/// environment scale; learners and models clip it on their side.
struct Transition {
  Observation state;
  ActionIndex action = 0;
  double reward = 0.0;
  Observation next_state;
  bool terminal = false;
  bool simulated = false;

  friend bool operator==(const Transition& a, const Transition& b) {
    return a.state == b.state && a.action == b.action && a.reward == b.reward &&
           a.next_state == b.next_state && a.terminal == b.terminal &&
           a.simulated == b.simulated;
  }
};

inline double clip_reward(double r) { return std::clamp(r, -1.0, 1.0); }

}  // namespace dyna
