#pragma once

#include "dyna/core.hpp"
#include "dyna/rng.hpp"

#include <cmath>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dyna {

/// Per-action linear forward model on feature vectors:
///   x' = W_a x + b_a,  r = v_a . x + c_a,  P(terminal) = sigmoid(u_a . x + t_a).
template <typename Scalar>
struct ForwardModelParams {
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  std::vector<Mat> transition;
  std::vector<Vec> bias;
  std::vector<Vec> reward_weights;
  Vec reward_bias;
  std::vector<Vec> terminal_weights;
  Vec terminal_bias;

  int action_count() const { return static_cast<int>(transition.size()); }
  int dim() const { return transition.empty() ? 0 : static_cast<int>(transition.front().rows()); }

  static ForwardModelParams zeros(int actions, int dim) {
    ForwardModelParams p;
    p.transition.assign(static_cast<std::size_t>(actions), Mat::Zero(dim, dim));
    p.bias.assign(static_cast<std::size_t>(actions), Vec::Zero(dim));
    p.reward_weights.assign(static_cast<std::size_t>(actions), Vec::Zero(dim));
    p.reward_bias = Vec::Zero(actions);
    p.terminal_weights.assign(static_cast<std::size_t>(actions), Vec::Zero(dim));
    p.terminal_bias = Vec::Zero(actions);
    return p;
  }

  /// W_a = I, everything else zero: "nothing changes, no reward".
  static ForwardModelParams identity(int actions, int dim) {
    ForwardModelParams p = zeros(actions, dim);
    for (auto& w : p.transition) w.setIdentity();
    return p;
  }

  static ForwardModelParams random(int actions, int dim, Rng& rng, Scalar scale) {
    ForwardModelParams p = zeros(actions, dim);
    Vec flat = p.flatten();
    for (Eigen::Index i = 0; i < flat.size(); ++i) flat(i) = scale * Scalar(rng.normal());
    p.assign(flat);
    return p;
  }

  static Eigen::Index parameter_count(int actions, int dim) {
    const Eigen::Index d = dim;
    return Eigen::Index(actions) * (d * d + d + d + 1 + d + 1);
  }
  Eigen::Index parameter_count() const { return parameter_count(action_count(), dim()); }

  /// Per action: W (column-major), b, v, c, u, t.
  Vec flatten() const {
    Vec out(parameter_count());
    Eigen::Index at = 0;
    const Eigen::Index d = dim();
    for (std::size_t a = 0; a < transition.size(); ++a) {
      out.segment(at, d * d) = Eigen::Map<const Vec>(transition[a].data(), d * d);
      at += d * d;
      out.segment(at, d) = bias[a];
      at += d;
      out.segment(at, d) = reward_weights[a];
      at += d;
      out(at++) = reward_bias(static_cast<Eigen::Index>(a));
      out.segment(at, d) = terminal_weights[a];
      at += d;
      out(at++) = terminal_bias(static_cast<Eigen::Index>(a));
    }
    return out;
  }

  void assign(const Vec& flat) {
    if (flat.size() != parameter_count()) throw ConfigError("forward model: parameter count mismatch");
    Eigen::Index at = 0;
    const Eigen::Index d = dim();
    for (std::size_t a = 0; a < transition.size(); ++a) {
      Eigen::Map<Vec>(transition[a].data(), d * d) = flat.segment(at, d * d);
      at += d * d;
      bias[a] = flat.segment(at, d);
      at += d;
      reward_weights[a] = flat.segment(at, d);
      at += d;
      reward_bias(static_cast<Eigen::Index>(a)) = flat(at++);
      terminal_weights[a] = flat.segment(at, d);
      at += d;
      terminal_bias(static_cast<Eigen::Index>(a)) = flat(at++);
    }
  }

  static ForwardModelParams from_flat(int actions, int dim, const Vec& flat) {
    ForwardModelParams p = zeros(actions, dim);
    p.assign(flat);
    return p;
  }

  bool all_finite() const { return flatten().allFinite(); }

  /// this += scale * other
  void axpy(Scalar scale, const ForwardModelParams& other) {
    for (std::size_t a = 0; a < transition.size(); ++a) {
      transition[a] += scale * other.transition[a];
      bias[a] += scale * other.bias[a];
      reward_weights[a] += scale * other.reward_weights[a];
      terminal_weights[a] += scale * other.terminal_weights[a];
    }
    reward_bias += scale * other.reward_bias;
    terminal_bias += scale * other.terminal_bias;
  }

  void set_zero() {
    for (auto& w : transition) w.setZero();
    for (auto& v : bias) v.setZero();
    for (auto& v : reward_weights) v.setZero();
    for (auto& v : terminal_weights) v.setZero();
    reward_bias.setZero();
    terminal_bias.setZero();
  }
};

template <typename Scalar>
Scalar logistic(Scalar z) {
  return Scalar(1) / (Scalar(1) + std::exp(-z));
}

/// Open-loop multi-step prediction of features: element i is the prediction
/// after actions[0..i].
template <typename Scalar>
std::vector<typename ForwardModelParams<Scalar>::Vec> predict_features(const ForwardModelParams<Scalar>& p,
                                                                      const Vector& start,
                                                                      std::span<const ActionIndex> actions) {
  using Vec = typename ForwardModelParams<Scalar>::Vec;
  std::vector<Vec> out;
  out.reserve(actions.size());
  Vec x = start.template cast<Scalar>();
  for (ActionIndex a : actions) {
    const auto ai = static_cast<std::size_t>(a);
    x = p.transition[ai] * x + p.bias[ai];
    out.push_back(x);
  }
  return out;
}

/// k-step joint loss on one window of k consecutive transitions:
///   (1/2k) sum_k ( |x_hat_k - x_k|^2 + (r_hat_k - r_k)^2 + (p_hat_k - term_k)^2 )
/// where x_hat_k is fed back as the next input. Targets use clipped rewards.
/// If `grad` is given, `weight` * dL/dtheta is accumulated into it.
template <typename Scalar>
Scalar k_step_loss(const ForwardModelParams<Scalar>& p, std::span<const Transition> window,
                   ForwardModelParams<Scalar>* grad = nullptr, Scalar weight = Scalar(1)) {
  using Vec = typename ForwardModelParams<Scalar>::Vec;
  const std::size_t k = window.size();
  if (k == 0) throw ContractViolation("k_step_loss: empty window");
  const Scalar inv_k = Scalar(1) / Scalar(k);

  std::vector<Vec> xs(k + 1);
  std::vector<Scalar> reward_pred(k);
  std::vector<Scalar> term_prob(k);
  xs[0] = window[0].state.features.template cast<Scalar>();
  Scalar loss = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const auto a = static_cast<std::size_t>(window[i].action);
    const Vec& prev = xs[i];
    reward_pred[i] = p.reward_weights[a].dot(prev) + p.reward_bias(static_cast<Eigen::Index>(a));
    term_prob[i] = logistic(p.terminal_weights[a].dot(prev) + p.terminal_bias(static_cast<Eigen::Index>(a)));
    xs[i + 1] = p.transition[a] * prev + p.bias[a];
    const Scalar r = Scalar(clip_reward(window[i].reward));
    const Scalar term = window[i].terminal ? Scalar(1) : Scalar(0);
    loss += (xs[i + 1] - window[i].next_state.features.template cast<Scalar>()).squaredNorm() +
            (reward_pred[i] - r) * (reward_pred[i] - r) + (term_prob[i] - term) * (term_prob[i] - term);
  }
  loss *= inv_k / Scalar(2);
  if (grad == nullptr) return loss;

  Vec back = Vec::Zero(xs[0].size());
  for (std::size_t step = k; step-- > 0;) {
    const auto a = static_cast<std::size_t>(window[step].action);
    const auto ai = static_cast<Eigen::Index>(a);
    const Vec& prev = xs[step];
    const Vec gx = inv_k * (xs[step + 1] - window[step].next_state.features.template cast<Scalar>()) + back;
    const Scalar er = inv_k * (reward_pred[step] - Scalar(clip_reward(window[step].reward)));
    const Scalar pt = term_prob[step];
    const Scalar et = inv_k * (pt - (window[step].terminal ? Scalar(1) : Scalar(0))) * pt * (Scalar(1) - pt);
    grad->transition[a].noalias() += (weight * gx) * prev.transpose();
    grad->bias[a] += weight * gx;
    grad->reward_weights[a] += (weight * er) * prev;
    grad->reward_bias(ai) += weight * er;
    grad->terminal_weights[a] += (weight * et) * prev;
    grad->terminal_bias(ai) += weight * et;
    back = p.transition[a].transpose() * gx + er * p.reward_weights[a] + et * p.terminal_weights[a];
  }
  return loss;
}

struct CurriculumPhase {
  int horizon = 1;
  int updates = 1;
  double learning_rate = 1e-2;
  int batch_size = 32;
};

/// Forward-model training schedule: phases run in order at non-decreasing
/// prediction horizons.
struct Curriculum {
  std::vector<CurriculumPhase> phases;

  void validate() const {
    if (phases.empty()) throw ConfigError("curriculum: no phases");
    for (std::size_t i = 0; i < phases.size(); ++i) {
      const auto& ph = phases[i];
      if (ph.horizon < 1 || ph.updates < 1 || !(ph.learning_rate > 0.0) || ph.batch_size < 1)
        throw ConfigError("curriculum: phase " + std::to_string(i) + " has a non-positive field");
      if (i > 0 && ph.horizon < phases[i - 1].horizon)
        throw ConfigError("curriculum: horizons must be non-decreasing");
    }
  }

  /// Scaled schedules: A = 1-step then 3-step; B and C add a 5-step phase.
  static Curriculum model_a(int updates = 20'000) {
    return {{{1, updates, 1e-2, 32}, {3, updates, 1e-3, 8}}};
  }
  static Curriculum model_b(int updates = 20'000) {
    return {{{1, updates, 1e-2, 32}, {3, updates, 1e-3, 8}, {5, updates, 1e-3, 8}}};
  }
  static Curriculum model_c(int updates = 20'000) { return model_b(updates); }
};

enum class ForwardOptimizer { kSgd, kAdam };

struct PhaseLog {
  CurriculumPhase phase;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

/// Index of valid k-step windows over a set of contiguous trajectories.
/// A window never crosses a terminal transition except at its last step.
class WindowIndex {
 public:
  WindowIndex(std::span<const std::vector<Transition>> trajectories, int horizon) : trajectories_(trajectories) {
    const auto k = static_cast<std::size_t>(horizon);
    for (std::size_t t = 0; t < trajectories.size(); ++t) {
      const auto& traj = trajectories[t];
      for (std::size_t i = 0; i + 1 < traj.size(); ++i) {
        if (traj[i].terminal || traj[i].next_state.state_id != traj[i + 1].state.state_id)
          throw ConfigError("forward model dataset: trajectory " + std::to_string(t) +
                            " is not contiguous at step " + std::to_string(i));
      }
      for (std::size_t i = 0; i + k <= traj.size(); ++i) starts_.emplace_back(t, i);
    }
    horizon_ = k;
  }

  std::size_t size() const { return starts_.size(); }
  std::size_t horizon() const { return horizon_; }

  std::span<const Transition> window(std::size_t i) const {
    const auto& [t, start] = starts_[i];
    return std::span<const Transition>(trajectories_[t]).subspan(start, horizon_);
  }

  std::span<const Transition> sample(Rng& rng) const { return window(rng.below(starts_.size())); }

 private:
  std::span<const std::vector<Transition>> trajectories_;
  std::vector<std::pair<std::size_t, std::size_t>> starts_;
  std::size_t horizon_ = 1;
};

/// Incremental minibatch optimizer for the k-step loss (plain SGD or Adam with
/// the usual defaults).
template <typename Scalar>
class ForwardModelTrainer {
 public:
  using Params = ForwardModelParams<Scalar>;
  using Vec = typename Params::Vec;

  ForwardModelTrainer(Params initial, ForwardOptimizer optimizer = ForwardOptimizer::kSgd)
      : params_(std::move(initial)), grad_(Params::zeros(params_.action_count(), params_.dim())),
        optimizer_(optimizer) {}

  const Params& params() const { return params_; }
  Params& params() { return params_; }

  /// One step on the mean loss over `batch`. Returns that mean loss
  /// (before the step). Throws on a non-finite loss.
  Scalar update(std::span<const std::span<const Transition>> batch, Scalar learning_rate) {
    grad_.set_zero();
    const Scalar w = Scalar(1) / Scalar(batch.size());
    Scalar loss = 0;
    for (const auto& window : batch) loss += w * k_step_loss(params_, window, &grad_, w);
    ++steps_;
    if (!std::isfinite(static_cast<double>(loss))) {
      std::ostringstream msg;
      msg << "forward model: non-finite loss " << loss << " at optimizer step " << steps_ << " (horizon "
          << (batch.empty() ? 0 : batch.front().size()) << ", learning rate " << learning_rate << ")";
      throw std::runtime_error(msg.str());
    }
    if (optimizer_ == ForwardOptimizer::kSgd) {
      params_.axpy(-learning_rate, grad_);
      return loss;
    }
    const Vec g = grad_.flatten();
    if (m_.size() == 0) {
      m_ = Vec::Zero(g.size());
      v_ = Vec::Zero(g.size());
    }
    constexpr Scalar b1 = Scalar(0.9), b2 = Scalar(0.999), eps = Scalar(1e-8);
    m_ = b1 * m_ + (Scalar(1) - b1) * g;
    v_ = b2 * v_ + (Scalar(1) - b2) * g.cwiseAbs2();
    const Scalar c1 = Scalar(1) - std::pow(b1, Scalar(steps_));
    const Scalar c2 = Scalar(1) - std::pow(b2, Scalar(steps_));
    Vec flat = params_.flatten();
    flat.array() -= learning_rate * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps);
    params_.assign(flat);
    return loss;
  }

  std::uint64_t steps() const { return steps_; }

 private:
  Params params_;
  Params grad_;
  ForwardOptimizer optimizer_;
  Vec m_;
  Vec v_;
  std::uint64_t steps_ = 0;
};

template <typename Scalar>
struct ForwardTrainResult {
  ForwardModelParams<Scalar> params;
  std::vector<PhaseLog> log;
};

/// Runs every curriculum phase in order on windows drawn uniformly from the
/// trajectories. The dataset itself is read-only.
template <typename Scalar>
ForwardTrainResult<Scalar> train_forward_model(std::span<const std::vector<Transition>> trajectories,
                                               const Curriculum& curriculum, Rng& rng,
                                               ForwardOptimizer optimizer = ForwardOptimizer::kSgd,
                                               std::optional<ForwardModelParams<Scalar>> initial = std::nullopt) {
  curriculum.validate();
  std::size_t total = 0;
  for (const auto& t : trajectories) total += t.size();
  if (total == 0) throw ConfigError("forward model: empty dataset");
  const Transition* first = nullptr;
  for (const auto& t : trajectories) {
    if (!t.empty()) {
      first = &t.front();
      break;
    }
  }
  const int dim = static_cast<int>(first->state.features.size());
  int actions = 0;
  for (const auto& t : trajectories)
    for (const auto& tr : t) actions = std::max(actions, tr.action + 1);

  ForwardModelTrainer<Scalar> trainer(initial ? *initial : ForwardModelParams<Scalar>::identity(actions, dim), optimizer);
  ForwardTrainResult<Scalar> result;
  std::vector<std::span<const Transition>> batch;
  for (std::size_t phase_i = 0; phase_i < curriculum.phases.size(); ++phase_i) {
    const auto& phase = curriculum.phases[phase_i];
    WindowIndex windows(trajectories, phase.horizon);
    if (windows.size() == 0)
      throw ConfigError("forward model: no trajectory supplies " + std::to_string(phase.horizon) +
                        " consecutive transitions (phase " + std::to_string(phase_i) + ")");
    PhaseLog entry{phase, 0.0, 0.0};
    const int tail = std::max(1, std::min(phase.updates, 100));
    double tail_sum = 0.0;
    for (int u = 0; u < phase.updates; ++u) {
      batch.clear();
      for (int b = 0; b < phase.batch_size; ++b) batch.push_back(windows.sample(rng));
      Scalar loss;
      try {
        loss = trainer.update(batch, Scalar(phase.learning_rate));
      } catch (const std::runtime_error& e) {
        throw std::runtime_error(std::string(e.what()) + " in curriculum phase " + std::to_string(phase_i) +
                                 ", update " + std::to_string(u));
      }
      if (u == 0) entry.initial_loss = static_cast<double>(loss);
      if (u >= phase.updates - tail) tail_sum += static_cast<double>(loss);
    }
    entry.final_loss = tail_sum / tail;
    result.log.push_back(entry);
  }
  result.params = trainer.params();
  return result;
}

}  // namespace dyna
