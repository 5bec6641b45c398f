#ifndef PRL_ORACLE_HPP_
#define PRL_ORACLE_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "prl/core.hpp"
#include "prl/env.hpp"
#include "prl/policy.hpp"

namespace prl {

inline constexpr std::size_t kDefaultEnumerationCap = 1'000'000;

/// Prefixes whose reference probability falls below this are unreachable.
inline constexpr double kReachableFloor = 1e-300;

namespace detail {

inline std::string format_count(double n)
{
  char buf[32];
  std::snprintf(buf, sizeof(buf), n < 1e15 ? "%.0f" : "%.3g", n);
  return buf;
}

inline std::size_t checked_power(std::size_t base, std::size_t exp, std::size_t cap)
{
  std::size_t n = 1;
  for (std::size_t i = 0; i < exp; ++i) {
    if (n > cap / base) {
      throw ConfigError("enumeration of " + std::to_string(base) + "^" + std::to_string(exp) + " = "
                        + detail::format_count(std::pow(static_cast<double>(base), static_cast<double>(exp)))
                        + " sequences exceeds the cap of " + std::to_string(cap));
    }
    n *= base;
  }
  return n;
}

/// Decodes a level-`len` prefix index (most significant token first).
inline TokenSeq decode_index(std::size_t index, std::size_t vocab, std::size_t len)
{
  TokenSeq seq(len);
  for (std::size_t i = len; i > 0; --i) {
    seq[i - 1] = static_cast<Token>(index % vocab);
    index /= vocab;
  }
  return seq;
}

inline std::size_t encode_index(std::span<const Token> seq, std::size_t vocab)
{
  std::size_t index = 0;
  for (Token t : seq) {
    index = index * vocab + static_cast<std::size_t>(t);
  }
  return index;
}

inline void require_fixed_length(const TabularPolicy& p)
{
  if (p.alphabet().eos_id()) {
    throw ConfigError("exact enumeration needs a fixed-length policy (no eos)");
  }
}

/*!
 * @brief Log-probability of every prefix of every length up to `len`.
 *
 * levels[l][i] = ln pi(prefix_i | x) for the level-l prefix with index i;
 * level 0 holds the empty prefix with value 0.
 */
inline std::vector<std::vector<double>> prefix_log_probs(const TabularPolicy& policy, std::span<const Token> prompt,
                                                         std::size_t len)
{
  const auto vocab = policy.vocab();
  std::vector<std::vector<double>> levels(len + 1);
  levels[0] = {0.0};
  TokenSeq history(prompt.begin(), prompt.end());
  std::vector<double> row(vocab);
  for (std::size_t l = 0; l < len; ++l) {
    const auto& cur = levels[l];
    auto& next = levels[l + 1];
    next.resize(cur.size() * vocab);
    for (std::size_t i = 0; i < cur.size(); ++i) {
      const auto prefix = decode_index(i, vocab, l);
      history.resize(prompt.size());
      history.insert(history.end(), prefix.begin(), prefix.end());
      log_softmax(policy.row(policy.context_index(history)), row);
      for (std::size_t k = 0; k < vocab; ++k) {
        next[i * vocab + k] = cur[i] + row[k];
      }
    }
  }
  return levels;
}

}  // namespace detail

/*!
 * @brief Exact solution of the entropy-regularized objective for one prompt.
 *
 * pi*(a|x) = pi_0(a|x) exp(eta r*(x,a)) / Z over all fixed-length responses,
 * C = (1/eta) ln Z, and the process reward of every prefix computed as the
 * pi*-expectation of r* minus the future log-ratio penalties (backward
 * recursion over the prefix tree).
 */
class OracleSolution
{
public:
  TokenSeq prompt;
  double eta{1.0};
  std::size_t length{0};
  std::size_t vocab{0};
  double log_Z{0.0};
  double C{0.0};

  /// r*(x, a) per full-sequence index.
  std::vector<double> reward;
  /// ln pi*(prefix), per level.
  std::vector<std::vector<double>> log_opt_prefix;
  /// ln pi_0(prefix), per level.
  std::vector<std::vector<double>> log_ref_prefix;
  /// r*_l(x, prefix) from the expectation definition; NaN where unreachable.
  std::vector<std::vector<double>> process_reward;

  [[nodiscard]] double Z() const { return std::exp(log_Z); }
  [[nodiscard]] std::size_t num_sequences() const { return reward.size(); }

  [[nodiscard]] std::size_t index_of(std::span<const Token> seq) const
  {
    for (Token t : seq) {
      if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
        throw ConfigError("token " + std::to_string(t) + " is not in the vocabulary");
      }
    }
    return detail::encode_index(seq, vocab);
  }

  [[nodiscard]] TokenSeq sequence(std::size_t level, std::size_t index) const
  {
    return detail::decode_index(index, vocab, level);
  }

  [[nodiscard]] bool reachable(std::span<const Token> prefix) const
  {
    if (prefix.size() > length) {
      return false;
    }
    return log_ref_prefix[prefix.size()][index_of(prefix)] >= std::log(kReachableFloor);
  }

  [[nodiscard]] double opt_prob(std::span<const Token> full) const
  {
    require_full(full);
    return std::exp(log_opt_prefix[length][index_of(full)]);
  }

  /// ln pi*(token | prompt, prefix).
  [[nodiscard]] double log_opt_conditional(std::span<const Token> prefix, Token token) const
  {
    const auto l = prefix.size();
    const auto i = index_of(prefix);
    return log_opt_prefix[l + 1][i * vocab + static_cast<std::size_t>(token)] - log_opt_prefix[l][i];
  }

  [[nodiscard]] double log_ref_conditional(std::span<const Token> prefix, Token token) const
  {
    const auto l = prefix.size();
    const auto i = index_of(prefix);
    return log_ref_prefix[l + 1][i * vocab + static_cast<std::size_t>(token)] - log_ref_prefix[l][i];
  }

  /// Next-token distribution of pi* after `prefix`.
  [[nodiscard]] std::vector<double> opt_conditionals(std::span<const Token> prefix) const
  {
    if (prefix.size() >= length) {
      throw ConfigError("opt_conditionals: prefix must be shorter than the response length");
    }
    std::vector<double> probs(vocab);
    for (std::size_t k = 0; k < vocab; ++k) {
      probs[k] = std::exp(log_opt_conditional(prefix, static_cast<Token>(k)));
    }
    return probs;
  }

private:
  void require_full(std::span<const Token> full) const
  {
    if (full.size() != length) {
      throw ConfigError("expected a full response of length " + std::to_string(length));
    }
  }
};

/// Enumerates Sigma^L and builds the exact optimal policy for `prompt`.
/// Reward r*(x, a) as a plain function; any Task converts to one.
using RewardFn = std::function<double(std::span<const Token>, std::span<const Token>)>;

inline RewardFn reward_fn(const Task& task)
{
  return [&task](std::span<const Token> x, std::span<const Token> a) { return task.reward(x, a); };
}

inline OracleSolution solve(std::span<const Token> prompt, const TabularPolicy& pi0, const RewardFn& reward, double eta,
                            std::size_t length, std::size_t cap = kDefaultEnumerationCap)
{
  if (!(eta > 0.0) || !std::isfinite(eta)) {
    throw ConfigError("oracle: eta must be a finite positive number");
  }
  if (length < 1) {
    throw ConfigError("oracle: response length must be >= 1");
  }
  detail::require_fixed_length(pi0);
  const auto vocab = pi0.vocab();
  const auto count = detail::checked_power(vocab, length, cap);

  OracleSolution sol;
  sol.prompt.assign(prompt.begin(), prompt.end());
  sol.eta = eta;
  sol.length = length;
  sol.vocab = vocab;
  sol.log_ref_prefix = detail::prefix_log_probs(pi0, prompt, length);

  sol.reward.resize(count);
  std::vector<double> log_weight(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto a = detail::decode_index(i, vocab, length);
    sol.reward[i] = reward(prompt, a);
    log_weight[i] = sol.log_ref_prefix[length][i] + eta * sol.reward[i];
  }
  sol.log_Z = log_sum_exp(log_weight);
  sol.C = sol.log_Z / eta;

  // pi* prefix masses by marginalizing suffixes, deepest level first.
  sol.log_opt_prefix.resize(length + 1);
  auto& full = sol.log_opt_prefix[length];
  full.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    full[i] = log_weight[i] - sol.log_Z;
  }
  for (std::size_t l = length; l > 0; --l) {
    const auto& child = sol.log_opt_prefix[l];
    auto& parent = sol.log_opt_prefix[l - 1];
    parent.resize(child.size() / vocab);
    for (std::size_t i = 0; i < parent.size(); ++i) {
      parent[i] = log_sum_exp(std::span<const double>(child).subspan(i * vocab, vocab));
    }
  }

  // Process rewards: V_L = r*, V_l(p) = sum_k pi*(k|p) [V_{l+1}(pk) - (1/eta) ln(pi*(k|p)/pi_0(k|p))].
  const double floor = std::log(kReachableFloor);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  sol.process_reward.resize(length + 1);
  sol.process_reward[length].resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    sol.process_reward[length][i] = sol.log_ref_prefix[length][i] >= floor ? sol.reward[i] : nan;
  }
  for (std::size_t l = length; l > 0; --l) {
    const auto& child = sol.process_reward[l];
    auto& parent = sol.process_reward[l - 1];
    parent.assign(child.size() / vocab, nan);
    for (std::size_t i = 0; i < parent.size(); ++i) {
      if (sol.log_ref_prefix[l - 1][i] < floor) {
        continue;
      }
      double value = 0.0;
      for (std::size_t k = 0; k < vocab; ++k) {
        const auto c = i * vocab + k;
        const double log_opt_cond = sol.log_opt_prefix[l][c] - sol.log_opt_prefix[l - 1][i];
        const double p = std::exp(log_opt_cond);
        if (p == 0.0 || sol.log_ref_prefix[l][c] < floor) {
          continue;
        }
        const double log_ref_cond = sol.log_ref_prefix[l][c] - sol.log_ref_prefix[l - 1][i];
        value += p * (child[c] - (log_opt_cond - log_ref_cond) / eta);
      }
      parent[i] = value;
    }
  }
  return sol;
}

inline OracleSolution solve(std::span<const Token> prompt, const TabularPolicy& pi0, const Task& task, double eta,
                            std::size_t length, std::size_t cap = kDefaultEnumerationCap)
{
  if (pi0.alphabet() != task.alphabet()) {
    throw ConfigError("oracle: reference policy and task alphabets differ");
  }
  return solve(prompt, pi0, reward_fn(task), eta, length, cap);
}

/// r*_l(x, prefix) for a reachable prefix (l = prefix length).
inline double process_reward_exact(const OracleSolution& sol, std::span<const Token> prefix)
{
  if (prefix.size() > sol.length) {
    throw ConfigError("prefix longer than the response length");
  }
  if (!sol.reachable(prefix)) {
    throw ConfigError("unreachable prefix: reference probability below 1e-300");
  }
  return sol.process_reward[prefix.size()][sol.index_of(prefix)];
}

/// Closed form along one continuation: r*(x,a) - (1/eta) sum_{j>l} ln(pi*/pi_0).
inline double process_reward_along(const OracleSolution& sol, std::span<const Token> full, std::size_t l)
{
  if (full.size() != sol.length || l > sol.length) {
    throw ConfigError("process_reward_along: bad sequence or prefix length");
  }
  double future = 0.0;
  for (std::size_t j = l; j < sol.length; ++j) {
    const auto prefix = full.first(j);
    future += sol.log_opt_conditional(prefix, full[j]) - sol.log_ref_conditional(prefix, full[j]);
  }
  return sol.reward[sol.index_of(full)] - future / sol.eta;
}

/// C + (1/eta) sum_{j<=l} ln(pi*/pi_0) along the prefix itself.
inline double process_reward_from_prefix(const OracleSolution& sol, std::span<const Token> prefix)
{
  double past = 0.0;
  for (std::size_t j = 0; j < prefix.size(); ++j) {
    const auto head = prefix.first(j);
    past += sol.log_opt_conditional(head, prefix[j]) - sol.log_ref_conditional(head, prefix[j]);
  }
  return sol.C + past / sol.eta;
}

/*
 * Exact objective, gradient and divergences
 */

/// Q(pi) = E_{a~pi}[r*] - (1/eta) KL(pi || pi_0) for one prompt, by enumeration.
inline double objective_exact(const TabularPolicy& pi, std::span<const Token> prompt, const TabularPolicy& pi0,
                              const RewardFn& reward, double eta, std::size_t length,
                              std::size_t cap = kDefaultEnumerationCap)
{
  detail::require_fixed_length(pi);
  detail::require_fixed_length(pi0);
  const auto count = detail::checked_power(pi.vocab(), length, cap);
  const auto lp = detail::prefix_log_probs(pi, prompt, length);
  const auto lq = detail::prefix_log_probs(pi0, prompt, length);
  double q = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const double p = std::exp(lp[length][i]);
    if (p == 0.0) {
      continue;
    }
    const auto a = detail::decode_index(i, pi.vocab(), length);
    q += p * (reward(prompt, a) - (lp[length][i] - lq[length][i]) / eta);
  }
  return q;
}

inline double objective_exact(const TabularPolicy& pi, std::span<const Token> prompt, const TabularPolicy& pi0,
                              const Task& task, double eta, std::size_t length,
                              std::size_t cap = kDefaultEnumerationCap)
{
  return objective_exact(pi, prompt, pi0, reward_fn(task), eta, length, cap);
}

/*!
 * @brief Exact gradient of Q w.r.t. the logits of `pi`:
 * sum_a pi(a) sum_t grad ln pi(a_t|.) * (r*(a) - (1/eta) sum_k ln(pi/pi_0)(a_k|.)).
 */
inline PolicyGradient objective_gradient_exact(const TabularPolicy& pi, std::span<const Token> prompt,
                                               const TabularPolicy& pi0, const Task& task, double eta,
                                               std::size_t length, std::size_t cap = kDefaultEnumerationCap)
{
  detail::require_fixed_length(pi);
  const auto vocab = pi.vocab();
  const auto count = detail::checked_power(vocab, length, cap);
  const auto lp = detail::prefix_log_probs(pi, prompt, length);
  const auto lq = detail::prefix_log_probs(pi0, prompt, length);
  auto grad = zero_gradient(pi);
  std::vector<double> row(vocab);
  for (std::size_t i = 0; i < count; ++i) {
    const double p = std::exp(lp[length][i]);
    if (p == 0.0) {
      continue;
    }
    const auto a = detail::decode_index(i, vocab, length);
    const double weight = p * (task.reward(prompt, a) - (lp[length][i] - lq[length][i]) / eta);
    const auto ctx = response_contexts(pi, prompt, a);
    for (std::size_t t = 0; t < length; ++t) {
      log_softmax(pi.row(ctx[t]), row);
      auto g = grad.row(ctx[t]);
      for (std::size_t k = 0; k < vocab; ++k) {
        g[k] -= weight * std::exp(row[k]);
      }
      g[static_cast<std::size_t>(a[t])] += weight;
    }
  }
  return grad;
}

/// Sequence-level KL(pi || pi_ref) for one prompt, by enumeration.
inline double sequence_kl_exact(const TabularPolicy& pi, const TabularPolicy& pi_ref, std::span<const Token> prompt,
                                std::size_t length, std::size_t cap = kDefaultEnumerationCap)
{
  detail::require_fixed_length(pi);
  const auto count = detail::checked_power(pi.vocab(), length, cap);
  const auto lp = detail::prefix_log_probs(pi, prompt, length);
  const auto lq = detail::prefix_log_probs(pi_ref, prompt, length);
  double kl = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const double p = std::exp(lp[length][i]);
    if (p > 0.0) {
      kl += p * (lp[length][i] - lq[length][i]);
    }
  }
  return std::max(kl, 0.0);
}

/// Sequence-level KL(pi || pi*) for the solution's prompt.
inline double kl_to_optimal(const TabularPolicy& pi, const OracleSolution& sol)
{
  detail::require_fixed_length(pi);
  const auto lp = detail::prefix_log_probs(pi, sol.prompt, sol.length);
  double kl = 0.0;
  for (std::size_t i = 0; i < sol.num_sequences(); ++i) {
    const double p = std::exp(lp[sol.length][i]);
    if (p > 0.0) {
      kl += p * (lp[sol.length][i] - sol.log_opt_prefix[sol.length][i]);
    }
  }
  return std::max(kl, 0.0);
}

/*!
 * @brief Writes pi*'s conditionals into a copy of `base` for the solution's prompt.
 *
 * Every prefix must map to its own context, which requires
 * order >= |prompt| + L - 1. Rows of other contexts are left untouched.
 */
inline TabularPolicy to_policy(const OracleSolution& sol, const TabularPolicy& base)
{
  if (static_cast<std::size_t>(base.order()) + 1 < sol.prompt.size() + sol.length) {
    throw ConfigError("to_policy: order must be >= |prompt| + L - 1 to represent pi* exactly");
  }
  TabularPolicy out = base;
  TokenSeq history;
  for (std::size_t l = 0; l < sol.length; ++l) {
    for (std::size_t i = 0; i < sol.log_opt_prefix[l].size(); ++i) {
      const auto prefix = sol.sequence(l, i);
      history = sol.prompt;
      history.insert(history.end(), prefix.begin(), prefix.end());
      auto row = out.row(out.context_index(history));
      if (!std::isfinite(sol.log_opt_prefix[l][i])) {
        continue;
      }
      for (std::size_t k = 0; k < sol.vocab; ++k) {
        row[k] = sol.log_opt_prefix[l + 1][i * sol.vocab + k] - sol.log_opt_prefix[l][i];
      }
    }
  }
  return out;
}

/*
 * Residual report
 */

struct TheoremResiduals
{
  /// max_a |pi*(a) Z / (pi_0(a) e^{eta r*}) - 1|, with pi*(a) as a product of conditionals.
  double optimal_policy_rel_error{0.0};
  /// max - min over a of r* - (1/eta) ln(pi*/pi_0).
  double constant_sum_spread{0.0};
  /// max_a |r* - (1/eta) ln(pi*/pi_0) - C|.
  double constant_sum_vs_C{0.0};
  /// max over reachable prefixes of (max - min) of the closed form over all continuations.
  double path_independence_spread{0.0};
  /// max |closed form - expectation-defined process reward|.
  double closed_form_vs_expectation{0.0};
  /// max over sequences and l < p <= L of |r_l - r_p + (1/eta) sum_{l<j<=p} ln ratio|.
  double generalized_relation{0.0};
  /// max |r_l - (C + (1/eta) sum_{j<=l} ln ratio)|.
  double prefix_identity{0.0};
  std::size_t reachable_prefixes{0};
};

inline nlohmann::json to_json(const TheoremResiduals& r)
{
  return {{"optimal_policy_rel_error", r.optimal_policy_rel_error},
          {"constant_sum_spread", r.constant_sum_spread},
          {"constant_sum_vs_C", r.constant_sum_vs_C},
          {"path_independence_spread", r.path_independence_spread},
          {"closed_form_vs_expectation", r.closed_form_vs_expectation},
          {"generalized_relation", r.generalized_relation},
          {"prefix_identity", r.prefix_identity},
          {"reachable_prefixes", r.reachable_prefixes}};
}

/// Checks every structural identity of the solution against `pi0` by enumeration.
inline TheoremResiduals check_theorems(const OracleSolution& sol, const TabularPolicy& pi0)
{
  TheoremResiduals res;
  const auto L = sol.length;
  const auto V = sol.vocab;
  const double floor = std::log(kReachableFloor);
  const double inf = std::numeric_limits<double>::infinity();

  std::vector<std::vector<double>> lo(L + 1), hi(L + 1);
  for (std::size_t l = 0; l <= L; ++l) {
    lo[l].assign(sol.log_opt_prefix[l].size(), inf);
    hi[l].assign(sol.log_opt_prefix[l].size(), -inf);
  }
  double cs_min = inf;
  double cs_max = -inf;
  std::vector<double> cum(L + 1);

  for (std::size_t i = 0; i < sol.num_sequences(); ++i) {
    if (sol.log_ref_prefix[L][i] < floor) {
      continue;
    }
    const auto a = sol.sequence(L, i);
    const double r = sol.reward[i];

    // Route 1: pi*(a) from the chain of conditionals; pi_0(a) from the policy itself.
    cum[0] = 0.0;
    double log_opt_chain = 0.0;
    for (std::size_t j = 0; j < L; ++j) {
      const auto prefix = std::span<const Token>(a).first(j);
      const double lo_c = sol.log_opt_conditional(prefix, a[j]);
      log_opt_chain += lo_c;
      cum[j + 1] = cum[j] + lo_c - sol.log_ref_conditional(prefix, a[j]);
    }
    double log_ref_seq = 0.0;
    for (double x : logprob(pi0, sol.prompt, a)) {
      log_ref_seq += x;
    }
    const double log_ratio = log_opt_chain + sol.log_Z - log_ref_seq - sol.eta * r;
    res.optimal_policy_rel_error = std::max(res.optimal_policy_rel_error, std::abs(std::expm1(log_ratio)));

    const double cs = r - cum[L] / sol.eta;
    cs_min = std::min(cs_min, cs);
    cs_max = std::max(cs_max, cs);
    res.constant_sum_vs_C = std::max(res.constant_sum_vs_C, std::abs(cs - sol.C));

    std::size_t div = sol.num_sequences();
    for (std::size_t l = 0; l <= L; ++l) {
      const std::size_t pidx = i / div;
      div = l < L ? div / V : div;
      const double closed = r - (cum[L] - cum[l]) / sol.eta;
      lo[l][pidx] = std::min(lo[l][pidx], closed);
      hi[l][pidx] = std::max(hi[l][pidx], closed);
      const double stored = sol.process_reward[l][pidx];
      res.closed_form_vs_expectation = std::max(res.closed_form_vs_expectation, std::abs(closed - stored));
      res.prefix_identity = std::max(res.prefix_identity, std::abs(stored - (sol.C + cum[l] / sol.eta)));
    }
    std::size_t div_l = sol.num_sequences();
    for (std::size_t l = 0; l < L; ++l) {
      const double rl = sol.process_reward[l][i / div_l];
      div_l /= V;
      std::size_t div_p = div_l;
      for (std::size_t p = l + 1; p <= L; ++p) {
        const double rp = sol.process_reward[p][i / div_p];
        res.generalized_relation =
            std::max(res.generalized_relation, std::abs(rl - (rp - (cum[p] - cum[l]) / sol.eta)));
        if (p < L) {
          div_p /= V;
        }
      }
    }
  }
  res.constant_sum_spread = cs_max - cs_min;
  for (std::size_t l = 0; l <= L; ++l) {
    for (std::size_t k = 0; k < lo[l].size(); ++k) {
      if (sol.log_ref_prefix[l][k] >= floor && lo[l][k] <= hi[l][k]) {
        ++res.reachable_prefixes;
        res.path_independence_spread = std::max(res.path_independence_spread, hi[l][k] - lo[l][k]);
      }
    }
  }
  return res;
}

}  // namespace prl

#endif  // PRL_ORACLE_HPP_
