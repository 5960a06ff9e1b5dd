#pragma once

#include "dyna/core.hpp"
#include "dyna/rng.hpp"

#include <cmath>
#include <span>

namespace dyna {

template <typename Scalar>
struct QSample {
  const Vector* features;
  ActionIndex action;
  Scalar target;
};

/// Action-value function over feature vectors: linear (`hidden_units == 0`,
/// Q = W^T x, no bias so one-hot features make it exactly tabular) or one
/// tanh hidden layer.
template <typename Scalar>
class QFunction {
 public:
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  QFunction() = default;

  QFunction(int feature_dim, int action_count, int hidden_units, Rng& rng)
      : feature_dim_(feature_dim), action_count_(action_count), hidden_units_(hidden_units) {
    if (hidden_units_ == 0) {
      out_weights_ = Mat::Zero(feature_dim_, action_count_);
      out_bias_ = Vec::Zero(0);
      return;
    }
    const Scalar in_scale = std::sqrt(Scalar(6) / Scalar(feature_dim_ + hidden_units_));
    const Scalar out_scale = std::sqrt(Scalar(6) / Scalar(hidden_units_ + action_count_));
    hidden_weights_ = Mat(feature_dim_, hidden_units_);
    for (Eigen::Index i = 0; i < hidden_weights_.size(); ++i)
      hidden_weights_.data()[i] = in_scale * Scalar(2.0 * rng.uniform() - 1.0);
    hidden_bias_ = Vec::Zero(hidden_units_);
    out_weights_ = Mat(hidden_units_, action_count_);
    for (Eigen::Index i = 0; i < out_weights_.size(); ++i)
      out_weights_.data()[i] = out_scale * Scalar(2.0 * rng.uniform() - 1.0);
    out_bias_ = Vec::Zero(action_count_);
  }

  int feature_dim() const { return feature_dim_; }
  int action_count() const { return action_count_; }
  int hidden_units() const { return hidden_units_; }

  Vec values(const Vector& x) const {
    if (hidden_units_ == 0) return out_weights_.transpose() * x.template cast<Scalar>();
    const Vec h = hidden(x);
    return out_weights_.transpose() * h + out_bias_;
  }

  Scalar value(const Vector& x, ActionIndex a) const {
    if (hidden_units_ == 0) return out_weights_.col(a).dot(x.template cast<Scalar>());
    return values(x)(a);
  }

  /// Semi-gradient descent on 0.5 * mean_i (target_i - Q(x_i, a_i))^2.
  /// Returns the mean squared TD error before the step.
  Scalar sgd_step(std::span<const QSample<Scalar>> batch, Scalar step_size) {
    const Scalar scale = step_size / Scalar(batch.size());
    Scalar sq = 0;
    if (hidden_units_ == 0) {
      // Errors are computed against the pre-step weights for the whole batch.
      Vec deltas(static_cast<Eigen::Index>(batch.size()));
      for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& s = batch[i];
        deltas(static_cast<Eigen::Index>(i)) = s.target - value(*s.features, s.action);
      }
      for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& s = batch[i];
        const Scalar d = deltas(static_cast<Eigen::Index>(i));
        sq += d * d;
        out_weights_.col(s.action).noalias() += (scale * d) * s.features->template cast<Scalar>();
      }
      return sq / Scalar(batch.size());
    }
    Mat g_hidden_w = Mat::Zero(hidden_weights_.rows(), hidden_weights_.cols());
    Vec g_hidden_b = Vec::Zero(hidden_units_);
    Mat g_out_w = Mat::Zero(out_weights_.rows(), out_weights_.cols());
    Vec g_out_b = Vec::Zero(action_count_);
    for (const auto& s : batch) {
      const Vec h = hidden(*s.features);
      const Scalar q = out_weights_.col(s.action).dot(h) + out_bias_(s.action);
      const Scalar d = s.target - q;
      sq += d * d;
      g_out_w.col(s.action) += d * h;
      g_out_b(s.action) += d;
      const Vec dz = (d * out_weights_.col(s.action)).cwiseProduct((Vec::Ones(hidden_units_) - h.cwiseAbs2()));
      g_hidden_w.noalias() += s.features->template cast<Scalar>() * dz.transpose();
      g_hidden_b += dz;
    }
    hidden_weights_ += scale * g_hidden_w;
    hidden_bias_ += scale * g_hidden_b;
    out_weights_ += scale * g_out_w;
    out_bias_ += scale * g_out_b;
    return sq / Scalar(batch.size());
  }

  /// Linear case only: w_a += step * x.
  void add_to_action(ActionIndex a, const Vector& x, Scalar step) {
    out_weights_.col(a).noalias() += step * x.template cast<Scalar>();
  }

  Eigen::Index parameter_count() const {
    return hidden_weights_.size() + hidden_bias_.size() + out_weights_.size() + out_bias_.size();
  }

  Vec flatten() const {
    Vec out(parameter_count());
    Eigen::Index at = 0;
    auto put = [&](const auto& m) {
      out.segment(at, m.size()) = Eigen::Map<const Vec>(m.data(), m.size());
      at += m.size();
    };
    put(hidden_weights_);
    put(hidden_bias_);
    put(out_weights_);
    put(out_bias_);
    return out;
  }

  void assign(const Vec& flat) {
    if (flat.size() != parameter_count()) throw ConfigError("q-function: parameter count mismatch");
    Eigen::Index at = 0;
    auto get = [&](auto& m) {
      Eigen::Map<Vec>(m.data(), m.size()) = flat.segment(at, m.size());
      at += m.size();
    };
    get(hidden_weights_);
    get(hidden_bias_);
    get(out_weights_);
    get(out_bias_);
  }

 private:
  Vec hidden(const Vector& x) const {
    return (hidden_weights_.transpose() * x.template cast<Scalar>() + hidden_bias_).array().tanh().matrix();
  }

  int feature_dim_ = 0;
  int action_count_ = 0;
  int hidden_units_ = 0;
  Mat hidden_weights_;
  Vec hidden_bias_;
  Mat out_weights_;
  Vec out_bias_;
};

}  // namespace dyna
