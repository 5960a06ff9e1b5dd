#include "dyna/planner.hpp"

#include <gtest/gtest.h>

#include <map>

using namespace dyna;

namespace {

struct Fixture {
  GridWorld env = GridWorld::builtin("four_rooms", EnvConfig{0.25, 1, -1, false});
  Rng rng{11};
  QLearner agent{env.feature_dim(), env.action_count(), QLearnerConfig{}, rng};
  PerfectModel model{env};

  void fill(Planner& planner, int steps) {
    Observation obs = env.reset(1);
    for (int i = 0; i < steps; ++i) {
      planner.record_real_state(obs, env.state());
      const StepResult r = env.step(static_cast<ActionIndex>(rng.below(4)), rng);
      obs = r.terminal ? env.reset(rng.next_u64()) : r.observation;
    }
  }
};

PlannerConfig shape_config(int n, int k) {
  PlannerConfig c;
  c.shape = {n, k};
  c.budget = n * k;
  c.rollout_epsilon = 1.0;
  return c;
}

}  // namespace

TEST(PlanningShape, BudgetMustFactor) {
  for (PlanningShape s : {PlanningShape{10, 1}, PlanningShape{5, 2}, PlanningShape{2, 5}, PlanningShape{1, 10}}) {
    EXPECT_NO_THROW(validate_shape(s, 10));
  }
  EXPECT_THROW(validate_shape({3, 3}, 10), ConfigError);
  EXPECT_THROW(validate_shape({0, 10}, 0), ConfigError);
  EXPECT_THROW(validate_shape({-2, -5}, 10), ConfigError);
  EXPECT_EQ((PlanningShape{2, 5}).label(), "2x5");
}

TEST(PlanningBuffer, RealStatesOnlyAndOldestEvicted) {
  PlanningBuffer buf(3);
  EXPECT_THROW(buf.record({0, Vector::Zero(1)}, std::nullopt, true), ContractViolation);
  for (StateId s = 0; s < 5; ++s) buf.record({s, Vector::Zero(1)}, std::nullopt);
  ASSERT_EQ(buf.size(), 3u);
  EXPECT_EQ(buf[0].observation.state_id, 2u);
  EXPECT_EQ(buf[2].observation.state_id, 4u);
}

TEST(Planner, EmptyBufferSkips) {
  Fixture f;
  Planner planner(shape_config(5, 2));
  EXPECT_TRUE(planner.plan_after_real_step(f.agent, f.model, f.rng).empty());
  EXPECT_EQ(planner.stats().calls, 1u);
  EXPECT_EQ(planner.stats().skipped_calls, 1u);
  EXPECT_EQ(planner.stats().predict_calls, 0u);
}

TEST(Planner, BudgetIsSpentOrAccountedAsDeficit) {
  for (PlanningShape s : {PlanningShape{10, 1}, PlanningShape{5, 2}, PlanningShape{2, 5}, PlanningShape{1, 10}}) {
    Fixture f;
    Planner planner(shape_config(s.n, s.k));
    f.fill(planner, 200);
    std::uint64_t produced = 0;
    for (int call = 0; call < 300; ++call) {
      const auto sims = planner.plan_after_real_step(f.agent, f.model, f.rng);
      EXPECT_LE(sims.size(), 10u);
      produced += sims.size();
      for (const auto& t : sims) EXPECT_TRUE(t.simulated);
    }
    EXPECT_EQ(planner.stats().predict_calls, produced);
    EXPECT_EQ(planner.stats().predict_calls + planner.stats().truncation_deficit, 300u * 10u);
  }
}

TEST(Planner, RolloutsStartInBufferAndAreContiguous) {
  Fixture f;
  Planner planner(shape_config(2, 5));
  f.fill(planner, 50);
  std::map<StateId, int> in_buffer;
  for (std::size_t i = 0; i < planner.buffer().size(); ++i) in_buffer[planner.buffer()[i].observation.state_id] += 1;
  for (int call = 0; call < 200; ++call) {
    const auto sims = planner.plan_after_real_step(f.agent, f.model, f.rng);
    bool new_rollout = true;
    int step_in_rollout = 0;
    for (std::size_t i = 0; i < sims.size(); ++i) {
      if (new_rollout) {
        EXPECT_TRUE(in_buffer.count(sims[i].state.state_id));
        step_in_rollout = 0;
      } else {
        EXPECT_EQ(sims[i].state, sims[i - 1].next_state);
      }
      ++step_in_rollout;
      new_rollout = sims[i].terminal || step_in_rollout == 5;
    }
  }
}

TEST(Planner, StartsAreDrawnUniformlyWithReplacement) {
  Fixture f;
  Planner planner(shape_config(10, 1));
  for (StateId s = 0; s < 4; ++s) planner.record_real_state(f.env.observe(f.env.state_from_id(s * 3)), std::nullopt);
  std::map<StateId, double> counts;
  const int calls = 4000;
  for (int call = 0; call < calls; ++call) {
    for (const auto& t : planner.plan_after_real_step(f.agent, f.model, f.rng)) counts[t.state.state_id] += 1;
  }
  ASSERT_EQ(counts.size(), 4u);
  const double expected = calls * 10 / 4.0;
  double chi2 = 0.0;
  for (const auto& [id, c] : counts) chi2 += (c - expected) * (c - expected) / expected;
  EXPECT_LT(chi2, 11.345);
}

TEST(Planner, RolloutPolicyFollowsAgent) {
  Fixture f;
  PlannerConfig cfg = shape_config(1, 10);
  cfg.rollout_epsilon = 0.0;
  Planner planner(cfg);
  f.fill(planner, 30);
  Vector w = Vector::Zero(f.agent.parameters().size());
  // Linear head: bias-free weights per action; make action 2 dominate on every one-hot state.
  const auto dim = static_cast<Eigen::Index>(f.env.feature_dim());
  w.segment(2 * dim, dim).setOnes();
  f.agent.set_parameters(w);
  for (int call = 0; call < 50; ++call) {
    for (const auto& t : planner.plan_after_real_step(f.agent, f.model, f.rng)) EXPECT_EQ(t.action, 2);
  }
}

TEST(Planner, SameSeedSameRollouts) {
  Fixture a, b;
  Planner pa(shape_config(5, 2)), pb(shape_config(5, 2));
  a.fill(pa, 40);
  b.fill(pb, 40);
  for (int call = 0; call < 20; ++call) {
    EXPECT_EQ(pa.plan_after_real_step(a.agent, a.model, a.rng), pb.plan_after_real_step(b.agent, b.model, b.rng));
  }
}
