#include "dyna/envs.hpp"
#include "dyna/forward_model.hpp"

#include <gtest/gtest.h>

using namespace dyna;

namespace {

std::vector<Transition> random_window(int k, int dim, int actions, Rng& rng) {
  std::vector<Transition> w;
  Observation x{0, Vector(dim)};
  for (int i = 0; i < dim; ++i) x.features(i) = rng.normal();
  for (int i = 0; i < k; ++i) {
    Observation next{static_cast<StateId>(i + 1), Vector(dim)};
    for (int j = 0; j < dim; ++j) next.features(j) = rng.normal();
    const bool last = i + 1 == k;
    w.push_back({x, static_cast<ActionIndex>(rng.below(static_cast<std::size_t>(actions))), 2.0 * rng.normal(), next,
                 last && rng.bernoulli(0.5), false});
    x = next;
  }
  return w;
}

// Linear world x' = A_a x with reward = x(0); used to check the trainer fits.
std::vector<std::vector<Transition>> linear_trajectories(int count, int len, Rng& rng) {
  const int dim = 3;
  std::vector<Eigen::Matrix3d> A(2);
  A[0] << 0.9, 0.1, 0, 0, 0.8, 0.1, 0, 0, 0.7;
  A[1] << 0.7, 0, 0.2, 0.1, 0.9, 0, 0, 0.1, 0.8;
  std::vector<std::vector<Transition>> out;
  StateId id = 0;
  for (int t = 0; t < count; ++t) {
    std::vector<Transition> traj;
    Observation x{id++, Vector(dim)};
    for (int j = 0; j < dim; ++j) x.features(j) = rng.normal();
    for (int i = 0; i < len; ++i) {
      const auto a = static_cast<ActionIndex>(rng.below(2));
      Observation next{id++, A[static_cast<std::size_t>(a)] * x.features};
      traj.push_back({x, a, 0.5 * x.features(0), next, false, false});
      x = next;
    }
    out.push_back(std::move(traj));
  }
  return out;
}

}  // namespace

TEST(ForwardModelParams, FlattenAssignRoundTrip) {
  Rng rng(1);
  const auto p = ForwardModelParams<double>::random(3, 4, rng, 0.5);
  EXPECT_EQ(p.parameter_count(), 3 * (16 + 3 * 4 + 2));
  const auto q = ForwardModelParams<double>::from_flat(3, 4, p.flatten());
  EXPECT_EQ(q.flatten(), p.flatten());
  auto bad = p;
  EXPECT_THROW(bad.assign(Vector::Zero(5)), ConfigError);
}

TEST(ForwardModelParams, IdentityPredictsNoChange) {
  const auto p = ForwardModelParams<double>::identity(2, 3);
  const Vector x = Vector::LinSpaced(3, 1.0, 3.0);
  const std::vector<ActionIndex> actions{0, 1, 1, 0};
  for (const auto& y : predict_features(p, x, actions)) EXPECT_EQ(y, x);
}

TEST(KStepLoss, MatchesHandComputation) {
  // d = 1, one action: x' = w x + b, r = v x + c, p = sigmoid(u x + t).
  auto p = ForwardModelParams<double>::zeros(1, 1);
  p.transition[0](0, 0) = 2.0;
  p.bias[0](0) = 0.5;
  p.reward_weights[0](0) = 1.0;
  p.reward_bias(0) = 0.0;
  Observation x0{0, Vector::Constant(1, 1.0)}, x1{1, Vector::Constant(1, 2.0)}, x2{2, Vector::Constant(1, 5.0)};
  const std::vector<Transition> w{{x0, 0, 0.5, x1, false, false}, {x1, 0, 3.0, x2, true, false}};
  // Step 1: x_hat = 2.5, r_hat = 1, p = 0.5 -> (0.5^2) + (0.5^2) + 0.25.
  // Step 2 (open loop): x_hat = 5.5, r_hat = 2.5 vs clipped 1, p = 0.5 vs 1.
  const double expected = (0.25 + 0.25 + 0.25 + 0.25 + 2.25 + 0.25) / 4.0;
  EXPECT_NEAR(k_step_loss(p, std::span<const Transition>(w)), expected, 1e-12);
}

TEST(KStepLoss, GradientMatchesFiniteDifferences) {
  Rng rng(42);
  for (int k : {1, 3, 5}) {
    for (int point = 0; point < 3; ++point) {
      const int dim = 4, actions = 3;
      const auto p = ForwardModelParams<double>::random(actions, dim, rng, 0.4);
      const auto window = random_window(k, dim, actions, rng);
      auto grad = ForwardModelParams<double>::zeros(actions, dim);
      k_step_loss(p, std::span<const Transition>(window), &grad);
      const Vector analytic = grad.flatten();

      using Wide = long double;
      const auto flat = p.flatten().cast<Wide>().eval();
      const Wide h = 1e-6L;
      for (Eigen::Index i = 0; i < flat.size(); ++i) {
        auto plus = flat, minus = flat;
        plus(i) += h;
        minus(i) -= h;
        const Wide lp = k_step_loss(ForwardModelParams<Wide>::from_flat(actions, dim, plus),
                                    std::span<const Transition>(window));
        const Wide lm = k_step_loss(ForwardModelParams<Wide>::from_flat(actions, dim, minus),
                                    std::span<const Transition>(window));
        const double numeric = static_cast<double>((lp - lm) / (2 * h));
        const double denom = std::max(std::abs(numeric) + std::abs(analytic(i)), 1e-12);
        EXPECT_LT(std::abs(numeric - analytic(i)) / denom, 1e-4) << "k=" << k << " i=" << i;
      }
    }
  }
}

TEST(KStepLoss, WeightScalesAccumulatedGradient) {
  Rng rng(3);
  const auto p = ForwardModelParams<double>::random(2, 3, rng, 0.3);
  const auto w = random_window(3, 3, 2, rng);
  auto g1 = ForwardModelParams<double>::zeros(2, 3), g2 = g1;
  k_step_loss(p, std::span<const Transition>(w), &g1, 1.0);
  k_step_loss(p, std::span<const Transition>(w), &g2, 0.25);
  EXPECT_TRUE(g2.flatten().isApprox(0.25 * g1.flatten()));
  EXPECT_THROW(k_step_loss(p, std::span<const Transition>()), ContractViolation);
}

TEST(WindowIndex, StopsAtTerminalsAndEpisodeEnds) {
  Rng rng(0);
  auto trajs = linear_trajectories(2, 6, rng);
  trajs[1].resize(2);
  const WindowIndex w1(trajs, 1), w3(trajs, 3);
  EXPECT_EQ(w1.size(), 8u);
  EXPECT_EQ(w3.size(), 4u);
  for (std::size_t i = 0; i < w3.size(); ++i) EXPECT_EQ(w3.window(i).size(), 3u);
  EXPECT_EQ(WindowIndex(trajs, 7).size(), 0u);

  auto broken = trajs;
  broken[0][2].next_state.state_id = 9999;
  EXPECT_THROW(WindowIndex(broken, 2), ConfigError);
  auto early_end = trajs;
  early_end[0][1].terminal = true;
  EXPECT_THROW(WindowIndex(early_end, 2), ConfigError);
}

TEST(Curriculum, SchedulesAndValidation) {
  const auto a = Curriculum::model_a(100), b = Curriculum::model_b(100);
  ASSERT_EQ(a.phases.size(), 2u);
  ASSERT_EQ(b.phases.size(), 3u);
  EXPECT_EQ(a.phases[0].horizon, 1);
  EXPECT_EQ(a.phases[1].horizon, 3);
  EXPECT_EQ(b.phases[2].horizon, 5);
  for (std::size_t i = 0; i < a.phases.size(); ++i) {
    EXPECT_EQ(a.phases[i].horizon, b.phases[i].horizon);
    EXPECT_EQ(a.phases[i].learning_rate, b.phases[i].learning_rate);
  }
  EXPECT_THROW(Curriculum{}.validate(), ConfigError);
  EXPECT_THROW((Curriculum{{{3, 10, 1e-3, 8}, {1, 10, 1e-3, 8}}}).validate(), ConfigError);
  EXPECT_THROW((Curriculum{{{1, 0, 1e-3, 8}}}).validate(), ConfigError);
}

TEST(TrainForwardModel, ReducesLossOnLinearWorld) {
  for (auto opt : {ForwardOptimizer::kSgd, ForwardOptimizer::kAdam}) {
    Rng rng(5);
    const auto trajs = linear_trajectories(50, 12, rng);
    const Curriculum c{{{1, 2000, 5e-2, 16}, {3, 1000, 1e-2, 8}}};
    const auto result = train_forward_model<double>(trajs, c, rng, opt);
    ASSERT_EQ(result.log.size(), 2u);
    EXPECT_LT(result.log[0].final_loss, 0.1 * result.log[0].initial_loss);
    EXPECT_TRUE(result.params.all_finite());
  }
}

TEST(TrainForwardModel, LeavesDatasetUntouchedAndIsDeterministic) {
  Rng data_rng(6);
  const auto trajs = linear_trajectories(10, 8, data_rng);
  const auto copy = trajs;
  Rng r1(1), r2(1);
  const Curriculum c = Curriculum::model_a(50);
  const auto a = train_forward_model<double>(trajs, c, r1);
  const auto b = train_forward_model<double>(trajs, c, r2);
  EXPECT_EQ(a.params.flatten(), b.params.flatten());
  for (std::size_t t = 0; t < trajs.size(); ++t) EXPECT_EQ(trajs[t], copy[t]);
}

TEST(TrainForwardModel, ErrorsOnBadDatasets) {
  Rng rng(0);
  std::vector<std::vector<Transition>> empty;
  EXPECT_THROW(train_forward_model<double>(empty, Curriculum::model_a(10), rng), ConfigError);
  auto short_trajs = linear_trajectories(4, 2, rng);
  EXPECT_THROW(train_forward_model<double>(short_trajs, Curriculum::model_a(10), rng), ConfigError);
}

TEST(TrainForwardModel, DivergenceIsReported) {
  Rng rng(0);
  const auto trajs = linear_trajectories(5, 6, rng);
  const Curriculum c{{{3, 200, 1e6, 4}}};
  try {
    train_forward_model<double>(trajs, c, rng);
    FAIL() << "expected divergence";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos);
  }
}

TEST(ForwardModelTrainer, DoubleAndFloatAgreeApproximately) {
  Rng rng(8);
  const auto trajs = linear_trajectories(5, 6, rng);
  WindowIndex idx(trajs, 3);
  std::vector<std::span<const Transition>> batch{idx.window(0), idx.window(3), idx.window(7)};
  ForwardModelTrainer<double> d(ForwardModelParams<double>::identity(2, 3));
  ForwardModelTrainer<float> f(ForwardModelParams<float>::identity(2, 3));
  for (int i = 0; i < 20; ++i) {
    d.update(batch, 0.05);
    f.update(batch, 0.05f);
  }
  EXPECT_TRUE(d.params().flatten().cast<float>().isApprox(f.params().flatten(), 1e-4f));
}
