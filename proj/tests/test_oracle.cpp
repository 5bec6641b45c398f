#include <catch_amalgamated.hpp>

#include <array>
#include <cmath>

#include "prl/oracle.hpp"

using namespace prl;
using Catch::Approx;

namespace {

// |Sigma| = 2, L = 2, uniform pi_0, r* = 1 iff a = [1, 1], eta = 1.
struct SmallInstance
{
  Task task;
  TabularPolicy pi0;
  OracleSolution sol;

  SmallInstance()
  {
    TaskSpec s;
    s.alphabet_size = 2;
    s.response_len = 2;
    s.fixed_target = TokenSeq{1, 1};
    task = Task(s);
    pi0 = TabularPolicy(task.alphabet(), 2, 2);
    sol = solve(TokenSeq{0}, pi0, task, 1.0, 2);
  }
};

// Values below were computed once by direct enumeration and closed forms
// (Z = (3+e)/4, C = ln Z, pi*(1|[1]) = e/(1+e)) and are frozen here.
constexpr double kZ = 1.4295704571147612;
constexpr double kC = 0.35737401950878844;
constexpr double kOptTarget = 0.4753668864186717;
constexpr double kOptOther = 0.17487770452710946;
constexpr double kOptCond = 0.7310585786300049;
constexpr double kPrefixReward = 0.6201145069582775;

}  // namespace

TEST_CASE("small instance partition function and optimal policy", "[oracle]")
{
  const SmallInstance in;
  CHECK(in.sol.Z() == Approx(kZ).epsilon(1e-14));
  CHECK(in.sol.C == Approx(kC).epsilon(1e-14));
  CHECK(in.sol.C == in.sol.log_Z / in.sol.eta);
  CHECK(in.sol.opt_prob(TokenSeq{1, 1}) == Approx(kOptTarget).epsilon(1e-14));
  for (const TokenSeq& a :{TokenSeq{0, 0}, TokenSeq{0, 1}, TokenSeq{1, 0}}) {
    CHECK(in.sol.opt_prob(a) == Approx(kOptOther).epsilon(1e-14));
  }
  const auto cond = in.sol.opt_conditionals(TokenSeq{1});
  CHECK(cond[1] == Approx(kOptCond).epsilon(1e-14));
  CHECK(cond[0] + cond[1] == Approx(1.0).epsilon(1e-15));
}

TEST_CASE("small instance process rewards", "[oracle]")
{
  const SmallInstance in;
  CHECK(process_reward_exact(in.sol, TokenSeq{1}) == Approx(kPrefixReward).epsilon(1e-13));
  CHECK(process_reward_along(in.sol, TokenSeq{1, 1}, 1) == Approx(kPrefixReward).epsilon(1e-13));
  CHECK(process_reward_along(in.sol, TokenSeq{1, 0}, 1) == Approx(kPrefixReward).epsilon(1e-13));
  CHECK(process_reward_from_prefix(in.sol, TokenSeq{1}) == Approx(kPrefixReward).epsilon(1e-13));
  CHECK(process_reward_exact(in.sol, TokenSeq{}) == Approx(kC).epsilon(1e-13));
  CHECK(process_reward_exact(in.sol, TokenSeq{1, 1}) == 1.0);
  CHECK(process_reward_exact(in.sol, TokenSeq{0, 1}) == 0.0);
  CHECK_THROWS_AS(process_reward_exact(in.sol, TokenSeq{1, 1, 1}), ConfigError);
}

TEST_CASE("small instance objective values", "[oracle]")
{
  const SmallInstance in;
  CHECK(objective_exact(in.pi0, TokenSeq{0}, in.pi0, in.task, 1.0, 2) == Approx(0.25).epsilon(1e-15));
  const auto star = to_policy(in.sol, in.pi0);
  CHECK(objective_exact(star, TokenSeq{0}, in.pi0, in.task, 1.0, 2) == Approx(kC).epsilon(1e-13));
  CHECK(kl_to_optimal(star, in.sol) <= 1e-14);
}

TEST_CASE("optimal policy dominates perturbations", "[oracle][property]")
{
  const SmallInstance in;
  const auto star = to_policy(in.sol, in.pi0);
  const double q_star = objective_exact(star, TokenSeq{0}, in.pi0, in.task, 1.0, 2);
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    auto pi = star;
    for (double& x : pi.logits()) {
      x += 2.0 * (2.0 * uniform01(rng) - 1.0);
    }
    REQUIRE(q_star - objective_exact(pi, TokenSeq{0}, in.pi0, in.task, 1.0, 2) >= -1e-9);
  }
}

TEST_CASE("vanishing eta recovers the reference policy", "[oracle]")
{
  TaskSpec s;
  s.alphabet_size = 3;
  s.response_len = 3;
  s.seed = 4;
  const Task task(s);
  const auto pi0 = TabularPolicy::random(task.alphabet(), 3, 3, 1.0, 9);
  const auto sol = solve(TokenSeq{2}, pi0, task, 1e-8, 3);
  const auto lp = detail::prefix_log_probs(pi0, TokenSeq{2}, 3);
  double tv = 0.0;
  for (std::size_t i = 0; i < sol.num_sequences(); ++i) {
    tv += std::abs(std::exp(sol.log_opt_prefix[3][i]) - std::exp(lp[3][i]));
  }
  CHECK(0.5 * tv <= 1e-6);
}

TEST_CASE("constant reward leaves the reference policy unchanged", "[oracle]")
{
  const auto pi0 = TabularPolicy::random(Alphabet(3), 2, 3, 2.0, 5);
  const RewardFn constant = [](std::span<const Token>, std::span<const Token>) { return 0.7; };
  const auto sol = solve(TokenSeq{1}, pi0, constant, 10.0, 3);
  const auto lp = detail::prefix_log_probs(pi0, TokenSeq{1}, 3);
  for (std::size_t i = 0; i < sol.num_sequences(); ++i) {
    REQUIRE(std::abs(sol.log_opt_prefix[3][i] - lp[3][i]) <= 1e-12);
  }
  CHECK(sol.C == Approx(0.7).epsilon(1e-12));
}

TEST_CASE("theorem residuals on randomized instances", "[oracle][property]")
{
  Rng rng(2024);
  for (int inst = 0; inst < 12; ++inst) {
    TaskSpec s;
    s.kind = inst % 2 == 0 ? TaskKind::TargetMatch : TaskKind::ParityGoal;
    s.alphabet_size = 2 + static_cast<int>(uniform_index(rng, 3));
    s.response_len = 1 + static_cast<int>(uniform_index(rng, 4));
    s.seed = inst;
    const Task task(s);
    const double eta = std::array{1.0, 10.0, 100.0}[uniform_index(rng, 3)];
    const auto pi0 = TabularPolicy::random(task.alphabet(), s.response_len, s.response_len, 1.5, inst);
    const auto prompt = task.sample_prompts(1, inst).front();
    const auto sol = solve(prompt, pi0, task, eta, static_cast<std::size_t>(s.response_len));

    double total = 0.0;
    for (std::size_t i = 0; i < sol.num_sequences(); ++i) {
      total += std::exp(sol.log_opt_prefix.back()[i]);
    }
    REQUIRE(std::abs(total - 1.0) <= 1e-12);

    const auto r = check_theorems(sol, pi0);
    INFO("instance " << inst << " eta " << eta);
    REQUIRE(r.optimal_policy_rel_error <= 1e-9);
    REQUIRE(r.constant_sum_spread <= 1e-9);
    REQUIRE(r.constant_sum_vs_C <= 1e-9);
    REQUIRE(r.path_independence_spread <= 1e-9);
    REQUIRE(r.closed_form_vs_expectation <= 1e-9);
    REQUIRE(r.generalized_relation <= 1e-9);
    REQUIRE(r.prefix_identity <= 1e-9);
    REQUIRE(r.reachable_prefixes > 0);
  }
}

TEST_CASE("large eta stays finite in log space", "[oracle]")
{
  TaskSpec s;
  s.alphabet_size = 4;
  s.response_len = 3;
  const Task task(s);
  const TabularPolicy pi0(task.alphabet(), 3, 3);
  const auto sol = solve(TokenSeq{1}, pi0, task, 300.0, 3);
  CHECK(std::isfinite(sol.log_Z));
  CHECK(std::isfinite(sol.C));
  const auto r = check_theorems(sol, pi0);
  CHECK(r.constant_sum_spread <= 1e-9);
  CHECK(r.path_independence_spread <= 1e-9);
}

TEST_CASE("exact objective gradient matches finite differences", "[oracle][gradient]")
{
  TaskSpec s;
  s.alphabet_size = 3;
  s.response_len = 2;
  s.seed = 1;
  const Task task(s);
  const auto pi0 = TabularPolicy::random(task.alphabet(), 2, 2, 1.0, 1);
  auto pi = TabularPolicy::random(task.alphabet(), 2, 2, 1.0, 2);
  const TokenSeq prompt{1};
  const double eta = 2.0;
  const auto g = objective_gradient_exact(pi, prompt, pi0, task, eta, 2);
  const double h = 1e-6;
  auto th = pi.logits();
  for (std::size_t i = 0; i < th.size(); ++i) {
    const double keep = th[i];
    th[i] = keep + h;
    const double up = objective_exact(pi, prompt, pi0, task, eta, 2);
    th[i] = keep - h;
    const double down = objective_exact(pi, prompt, pi0, task, eta, 2);
    th[i] = keep;
    REQUIRE(std::abs((up - down) / (2 * h) - g.values[i]) <= 1e-7 * std::max(1.0, std::abs(g.values[i])));
  }
}

TEST_CASE("oracle errors", "[oracle]")
{
  const SmallInstance in;
  CHECK_THROWS_AS(solve(TokenSeq{0}, in.pi0, in.task, 0.0, 2), ConfigError);
  CHECK_THROWS_WITH(solve(TokenSeq{0}, in.pi0, in.task, 1.0, 2, 3), Catch::Matchers::ContainsSubstring("4"));
  const TabularPolicy with_eos(Alphabet(3, 2), 2, 3);
  TaskSpec s;
  s.alphabet_size = 3;
  s.eos_id = 2;
  s.response_len = 2;
  CHECK_THROWS_AS(solve(TokenSeq{0}, with_eos, Task(s), 1.0, 2), ConfigError);

  // unreachable prefix: reference puts ~0 mass on token 0 at the first step
  auto peaked = in.pi0;
  peaked.row(peaked.context_index(TokenSeq{0}))[1] = 800.0;
  const auto sol = solve(TokenSeq{0}, peaked, in.task, 1.0, 2);
  CHECK_FALSE(sol.reachable(TokenSeq{0}));
  CHECK_THROWS_AS(process_reward_exact(sol, TokenSeq{0}), ConfigError);
  CHECK(std::isfinite(process_reward_exact(sol, TokenSeq{1})));
}

TEST_CASE("sequence KL", "[oracle]")
{
  const SmallInstance in;
  CHECK(sequence_kl_exact(in.pi0, in.pi0, TokenSeq{0}, 2) == 0.0);
  const auto star = to_policy(in.sol, in.pi0);
  // KL(pi* || pi_0) = E*[eta r* - ln Z] with eta = 1
  const double expected = kOptTarget * 1.0 - std::log(kZ);
  CHECK(sequence_kl_exact(star, in.pi0, TokenSeq{0}, 2) == Approx(expected).epsilon(1e-12));
}
