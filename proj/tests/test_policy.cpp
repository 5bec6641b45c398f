#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "prl/policy.hpp"
#include "prl/rng.hpp"

using namespace prl;
using Catch::Approx;

namespace {

Trajectory make_traj(const TabularPolicy& p, const TokenSeq& prompt, std::uint64_t seed)
{
  auto t = sample(p, prompt, seed);
  t.logp_old = t.logp_cur;
  t.logp_ref = t.logp_cur;
  return t;
}

double loss_at(const TabularPolicy& p, const std::vector<Trajectory>& batch, const std::vector<std::vector<double>>& rho,
               const std::vector<std::vector<double>>& old, ClipRange clip, const SurrogateOptions& opt)
{
  return surrogate_grad(p, batch, rho, old, clip, opt).loss;
}

/// max_i |fd_i - g_i| / max(1, |g_i|) over all coordinates.
double fd_error(TabularPolicy p, const std::vector<Trajectory>& batch, const std::vector<std::vector<double>>& rho,
                const std::vector<std::vector<double>>& old, ClipRange clip, const SurrogateOptions& opt)
{
  const auto g = surrogate_grad(p, batch, rho, old, clip, opt).grad.values;
  const double h = 1e-6;
  double worst = 0.0;
  auto th = p.logits();
  for (std::size_t i = 0; i < th.size(); ++i) {
    const double keep = th[i];
    th[i] = keep + h;
    const double up = loss_at(p, batch, rho, old, clip, opt);
    th[i] = keep - h;
    const double down = loss_at(p, batch, rho, old, clip, opt);
    th[i] = keep;
    worst = std::max(worst, std::abs((up - down) / (2 * h) - g[i]) / std::max(1.0, std::abs(g[i])));
  }
  return worst;
}

}  // namespace

TEST_CASE("uniform policy log-probabilities", "[policy]")
{
  const TabularPolicy p(Alphabet(2), 1, 2);
  const auto lp = logprob(p, TokenSeq{0}, TokenSeq{1, 0});
  REQUIRE(lp.size() == 2);
  CHECK(lp[0] == Approx(-0.693147).margin(1e-6));
  CHECK(lp[0] + lp[1] == Approx(-1.386294).margin(1e-6));
  CHECK(logprob(p, TokenSeq{0}, TokenSeq{}).empty());
}

TEST_CASE("softmax row by hand", "[policy]")
{
  TabularPolicy p(Alphabet(2), 1, 3);
  const auto ctx = p.context_index(TokenSeq{1});
  p.row(ctx)[0] = std::log(3.0);
  const auto lp = p.log_probs(ctx);
  CHECK(std::exp(lp[0]) == Approx(0.75).epsilon(1e-14));
  CHECK(std::exp(lp[1]) == Approx(0.25).epsilon(1e-14));
}

TEST_CASE("rows normalize and context layout", "[policy][property]")
{
  const auto p = TabularPolicy::random(Alphabet(3), 2, 4, 3.0, 7);
  CHECK(p.num_contexts() == 16);
  for (std::size_t c = 0; c < p.num_contexts(); ++c) {
    const auto lp = p.log_probs(c);
    double s = 0.0;
    for (double x : lp) {
      REQUIRE(std::isfinite(x));
      s += std::exp(x);
    }
    REQUIRE(std::abs(s - 1.0) <= 1e-12);
  }
  // BOS padding: empty history is all-BOS
  CHECK(p.context_index(TokenSeq{}) == 3 * 4 + 3);
  CHECK(p.context_index(TokenSeq{2}) == 3 * 4 + 2);
  CHECK(p.context_index(TokenSeq{0, 1, 2}) == 1 * 4 + 2);
  CHECK_THROWS_AS(p.context_index(TokenSeq{3}), ConfigError);
}

TEST_CASE("logprob chain rule and vocabulary errors", "[policy]")
{
  const auto p = TabularPolicy::random(Alphabet(3), 2, 4, 2.0, 1);
  const TokenSeq prompt{2, 0};
  const TokenSeq resp{1, 1, 0, 2};
  const auto lp = logprob(p, prompt, resp);
  double direct = 0.0;
  TokenSeq hist = prompt;
  for (Token a : resp) {
    direct += p.log_probs(p.context_index(hist))[static_cast<std::size_t>(a)];
    hist.push_back(a);
  }
  CHECK(std::accumulate(lp.begin(), lp.end(), 0.0) == Approx(direct).epsilon(1e-15));
  CHECK_THROWS_AS(logprob(p, prompt, TokenSeq{0, 3}), ConfigError);
  CHECK_THROWS_AS(logprob(p, prompt, TokenSeq{-1}), ConfigError);
}

TEST_CASE("sample is deterministic and consistent with logprob", "[policy]")
{
  const auto p = TabularPolicy::random(Alphabet(4, 3), 2, 6, 1.5, 2);
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto a = sample(p, TokenSeq{1}, s);
    const auto b = sample(p, TokenSeq{1}, s);
    REQUIRE(a == b);
    REQUIRE(a.response.size() <= 6);
    REQUIRE(a.logp_cur == logprob(p, TokenSeq{1}, a.response));
    REQUIRE(a.logp_old == a.logp_cur);
    auto full = a;
    full.logp_ref = logprob(p, TokenSeq{1}, a.response);
    REQUIRE_NOTHROW(full.validate(Token{3}));
  }
}

TEST_CASE("sample follows a concentrated policy greedily", "[policy]")
{
  TabularPolicy p(Alphabet(3), 1, 4);
  for (std::size_t c = 0; c < p.num_contexts(); ++c) {
    p.row(c)[(c + 1) % 3] = 1e6;
  }
  const auto t = sample(p, TokenSeq{0}, 99);
  // context index of token k is k, so the greedy chain is 0 -> 1 -> 2 -> 0 -> 1
  CHECK(t.response == TokenSeq{1, 2, 0, 1});
  CHECK(std::exp(std::accumulate(t.logp_cur.begin(), t.logp_cur.end(), 0.0)) == Approx(1.0));
}

TEST_CASE("sample frequencies match softmax", "[policy][statistical]")
{
  TabularPolicy p(Alphabet(3), 1, 1);
  const auto ctx = p.context_index(TokenSeq{0});
  p.row(ctx)[0] = 0.5;
  p.row(ctx)[1] = -0.3;
  p.row(ctx)[2] = 1.1;
  const auto lp = p.log_probs(ctx);
  const int n = 100000;
  std::vector<int> counts(3, 0);
  for (int i = 0; i < n; ++i) {
    ++counts[static_cast<std::size_t>(sample(p, TokenSeq{0}, derive_seed({17, static_cast<std::uint64_t>(i)})).response[0])];
  }
  for (std::size_t k = 0; k < 3; ++k) {
    const double q = std::exp(lp[k]);
    const double se = std::sqrt(q * (1 - q) / n);
    CHECK(std::abs(counts[k] / static_cast<double>(n) - q) <= 3 * se);
  }
}

TEST_CASE("exact next-token KL", "[policy]")
{
  TabularPolicy a(Alphabet(2), 1, 1);
  const TabularPolicy b(Alphabet(2), 1, 1);
  a.row(a.context_index(TokenSeq{0}))[0] = std::log(3.0);
  CHECK(exact_next_token_kl(a, a, TokenSeq{0}) == 0.0);
  // frozen: 0.75 ln 1.5 + 0.25 ln 0.5
  CHECK(exact_next_token_kl(a, b, TokenSeq{0}) == Approx(0.13081203594113697).epsilon(1e-13));

  Rng rng(4);
  for (int i = 0; i < 500; ++i) {
    const auto p = TabularPolicy::random(Alphabet(4), 1, 1, 4.0, i);
    const auto q = TabularPolicy::random(Alphabet(4), 1, 1, 4.0, i + 1000);
    REQUIRE(exact_next_token_kl(p, q, TokenSeq{static_cast<Token>(uniform_index(rng, 4))}) >= 0.0);
  }
}

TEST_CASE("surrogate clip arithmetic", "[policy]")
{
  TabularPolicy p(Alphabet(2), 1, 1);
  Trajectory t;
  t.prompt = {0};
  t.response = {0};
  t.logp_cur = logprob(p, t.prompt, t.response);
  t.logp_ref = t.logp_cur;
  t.logp_old = {t.logp_cur[0] - std::log(1.5)};  // ratio 1.5
  const std::vector<Trajectory> batch{t};
  const std::vector<std::vector<double>> rho{{2.0}};
  const std::vector<std::vector<double>> old{t.logp_old};
  const auto res = surrogate_grad(p, batch, rho, old, ClipRange{0.2, 0.2});
  CHECK(res.loss == Approx(-2.4).epsilon(1e-14));
  CHECK(res.clip_fraction == 1.0);
  for (double g : res.grad.values) {
    CHECK(g == 0.0);
  }
  // unclipped: min(3.0, 3.0)
  CHECK(surrogate_grad(p, batch, rho, old, ClipRange::none()).loss == Approx(-3.0).epsilon(1e-14));
  // asymmetric: clip_high 0.6 admits ratio 1.5
  CHECK(surrogate_grad(p, batch, rho, old, ClipRange{0.2, 0.6}).loss == Approx(-3.0).epsilon(1e-14));
}

TEST_CASE("surrogate at identity ratio", "[policy]")
{
  const auto p = TabularPolicy::random(Alphabet(3), 2, 4, 1.0, 8);
  std::vector<Trajectory> batch;
  std::vector<std::vector<double>> rho;
  std::vector<std::vector<double>> old;
  double expected = 0.0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    batch.push_back(make_traj(p, TokenSeq{1}, s));
    std::vector<double> r;
    for (std::size_t i = 0; i < batch.back().length(); ++i) {
      r.push_back(0.3 * static_cast<double>(i) - 0.5 + 0.1 * static_cast<double>(s));
    }
    expected -= std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(r.size());
    rho.push_back(r);
    old.push_back(batch.back().logp_old);
  }
  const auto res = surrogate_grad(p, batch, rho, old, ClipRange{});
  CHECK(res.loss == Approx(expected / 5.0).epsilon(1e-13));
  CHECK(res.clip_fraction == 0.0);
}

TEST_CASE("single log-prob gradient rows sum to zero", "[policy][property]")
{
  const auto p = TabularPolicy::random(Alphabet(4), 2, 5, 2.0, 3);
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto t = make_traj(p, TokenSeq{2}, s);
    t.response.resize(1);
    t.logp_cur.resize(1);
    t.logp_old.resize(1);
    t.logp_ref.resize(1);
    const std::vector<Trajectory> batch{t};
    const std::vector<std::vector<double>> rho{{1.0}};
    const std::vector<std::vector<double>> old{t.logp_old};
    const auto g = surrogate_grad(p, batch, rho, old, ClipRange::none()).grad;
    for (std::size_t c = 0; c < p.num_contexts(); ++c) {
      const auto row = g.row(c);
      REQUIRE(std::abs(std::accumulate(row.begin(), row.end(), 0.0)) <= 1e-15);
    }
  }
}

TEST_CASE("surrogate gradient matches finite differences", "[policy][gradient]")
{
  Rng rng(21);
  for (int b = 0; b < 10; ++b) {
    auto p = TabularPolicy::random(Alphabet(3), 2, 3, 1.0, 100 + b);
    const auto ref = TabularPolicy::random(Alphabet(3), 2, 3, 1.0, 200 + b);
    const auto old_policy = TabularPolicy::random(Alphabet(3), 2, 3, 0.2, 300 + b);
    std::vector<Trajectory> batch;
    std::vector<std::vector<double>> rho;
    std::vector<std::vector<double>> old;
    for (std::uint64_t k = 0; k < 4; ++k) {
      auto t = make_traj(p, TokenSeq{static_cast<Token>(k % 3)}, derive_seed({static_cast<std::uint64_t>(b), k}));
      t.logp_old = logprob(old_policy, t.prompt, t.response);
      t.logp_ref = logprob(ref, t.prompt, t.response);
      std::vector<double> r;
      for (std::size_t i = 0; i < t.length(); ++i) {
        r.push_back(2.0 * uniform01(rng) - 1.0);
      }
      old.push_back(t.logp_old);
      rho.push_back(r);
      batch.push_back(t);
    }
    SurrogateOptions plain;
    CHECK(fd_error(p, batch, rho, old, ClipRange::none(), plain) <= 1e-5);

    SurrogateOptions full;
    full.beta = 0.3;
    full.reference = &ref;
    full.entropy_coef = 0.05;
    const std::vector<double> w{0.1, 0.2, 0.3, 0.4};
    full.weights = w;
    // wide clip keeps FD away from the kink while exercising both branches elsewhere
    CHECK(fd_error(p, batch, rho, old, ClipRange::none(), full) <= 1e-5);
  }
}

TEST_CASE("surrogate input validation", "[policy]")
{
  const auto p = TabularPolicy::random(Alphabet(3), 1, 3, 1.0, 1);
  const auto t = make_traj(p, TokenSeq{0}, 1);
  const std::vector<Trajectory> batch{t};
  const std::vector<std::vector<double>> bad_rho{std::vector<double>(t.length() + 1, 1.0)};
  const std::vector<std::vector<double>> old{t.logp_old};
  CHECK_THROWS_AS(surrogate_grad(p, batch, bad_rho, old, ClipRange{}), Error);
  SurrogateOptions needs_ref;
  needs_ref.beta = 0.1;
  const std::vector<std::vector<double>> rho{std::vector<double>(t.length(), 1.0)};
  CHECK_THROWS_AS(surrogate_grad(p, batch, rho, old, ClipRange{}, needs_ref), Error);
}

TEST_CASE("checkpoint round trip is bit exact", "[policy][io]")
{
  const auto p = TabularPolicy::random(Alphabet(4, 3, 2), 2, 5, 3.0, 77);
  const auto path = (std::filesystem::temp_directory_path() / "prl_policy_roundtrip.json").string();
  save_checkpoint(p, path);
  const auto q = load_checkpoint(path);
  CHECK(q == p);
  std::filesystem::remove(path);

  auto j = to_json(p);
  j["version"] = 99;
  CHECK_THROWS_AS(policy_from_json(j), ConfigError);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/dir/x.json"), ConfigError);
}
