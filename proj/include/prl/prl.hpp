#ifndef PRL_PRL_HPP_
#define PRL_PRL_HPP_

#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "prl/core.hpp"

namespace prl {

/*!
 * @brief How the outcome signal and the future log-ratio penalty are combined.
 *
 * RawReward:          rho_t = r - S_t
 * AdvantageFirst:     rho_t = A - S_t,  A = group-normalized r
 * ProcessRewardFirst: rho_t = norm(r - S_first) - (S_t - S_first)
 */
enum class OrderMode
{
  AdvantageFirst,
  ProcessRewardFirst,
  RawReward
};

inline std::string to_string(OrderMode m)
{
  switch (m) {
    case OrderMode::AdvantageFirst: return "advantage_first";
    case OrderMode::ProcessRewardFirst: return "process_reward_first";
    case OrderMode::RawReward: return "raw_reward";
  }
  return "unknown";
}

inline OrderMode parse_order_mode(const std::string& text)
{
  if (text == "advantage_first") return OrderMode::AdvantageFirst;
  if (text == "process_reward_first") return OrderMode::ProcessRewardFirst;
  if (text == "raw_reward") return OrderMode::RawReward;
  throw ConfigError("unknown order_mode '" + text + "'");
}

/*!
 * @brief Where the future penalty sum starts relative to the current position.
 *
 * Inclusive sums from the current token onwards (S_t = (1/eta) sum_{j>=t} k_j),
 * Exclusive starts at the next token (the prefix-reward convention).
 */
enum class IndexConvention
{
  Inclusive,
  Exclusive
};

inline std::string to_string(IndexConvention c)
{
  return c == IndexConvention::Inclusive ? "inclusive" : "exclusive";
}

inline IndexConvention parse_index_convention(const std::string& text)
{
  if (text == "inclusive") return IndexConvention::Inclusive;
  if (text == "exclusive") return IndexConvention::Exclusive;
  throw ConfigError("unknown index_convention '" + text + "'");
}

inline constexpr double kDefaultEpsStd = 1e-6;

struct AdvantageConfig
{
  /// KL regularization strength; +inf removes the penalty term entirely.
  double eta{100.0};
  SegmentationMode segmentation{TokenLevel{}};
  OrderMode order_mode{OrderMode::AdvantageFirst};
  IndexConvention convention{IndexConvention::Inclusive};
  double eps_std{kDefaultEpsStd};
  /// Recorded in the output for provenance; the KL loss term itself lives in the surrogate.
  double beta{0.0};
};

struct AdvantageVector
{
  std::vector<double> rho;
  double eta{0.0};
  Segmentation segmentation;
  OrderMode order_mode{OrderMode::AdvantageFirst};
  double beta{0.0};
};

/*
 * Future penalty sums
 */

/*!
 * @brief All suffix sums in one reverse pass.
 *
 * Returns L+1 values with out[i] = (1/eta) sum_{j>=i} (logp_cur[j] - logp_ref[j])
 * (0-based), so out[L] = 0. out[t-1] is S_t in 1-based notation.
 */
inline std::vector<double> future_kl_sums(const Trajectory& traj, double eta)
{
  const auto len = traj.response.size();
  if (traj.logp_cur.size() != len || traj.logp_ref.size() != len) {
    throw ConfigError("future_kl_sums: logp_cur/logp_ref must be populated");
  }
  if (!(eta > 0.0)) {
    throw ConfigError("future_kl_sums: eta must be > 0");
  }
  std::vector<double> out(len + 1, 0.0);
  if (std::isinf(eta)) {
    return out;
  }
  double acc = 0.0;
  for (std::size_t i = len; i > 0; --i) {
    acc += traj.logp_cur[i - 1] - traj.logp_ref[i - 1];
    out[i - 1] = acc / eta;
  }
  return out;
}

/// S_t for a 1-based position t in [1, L].
inline double future_klsum(const Trajectory& traj, double eta, std::size_t t)
{
  if (t < 1 || t > traj.response.size()) {
    throw ConfigError("future_klsum: t must lie in [1, L]");
  }
  return future_kl_sums(traj, eta)[t - 1];
}

/*
 * Group normalization
 */

/// (x - mean) / (population std + eps_std).
inline std::vector<double> group_normalize(std::span<const double> values, double eps_std = kDefaultEpsStd)
{
  if (values.empty()) {
    throw ConfigError("group_normalize: empty group");
  }
  const auto n = static_cast<double>(values.size());
  double mean = 0.0;
  for (double v : values) {
    mean += v;
  }
  mean /= n;
  double var = 0.0;
  for (double v : values) {
    var += (v - mean) * (v - mean);
  }
  const double denom = std::sqrt(var / n) + eps_std;
  if (denom == 0.0) {
    throw ConfigError("group_normalize: zero standard deviation with eps_std = 0");
  }
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    out[i] = (values[i] - mean) / denom;
  }
  return out;
}

/*
 * Process advantages
 */

namespace detail {

/// Penalty sum that applies to every token of step `s`.
inline double step_penalty(const std::vector<double>& sums, const Segmentation& seg, std::size_t s,
                           IndexConvention convention)
{
  return convention == IndexConvention::Inclusive ? sums[seg.step_begin(s)] : sums[seg.step_end(s)];
}

}  // namespace detail

/*!
 * @brief Per-token weights rho for every trajectory of one prompt group.
 *
 * Tokens inside one step share the penalty evaluated at that step (its first
 * token for the inclusive convention, right after its last token for the
 * exclusive one). The returned weights are plain constants.
 */
inline std::vector<AdvantageVector> process_advantages(std::span<const Trajectory> group, const AdvantageConfig& cfg)
{
  if (group.empty()) {
    throw ConfigError("process_advantages: empty group");
  }
  if (cfg.order_mode != OrderMode::RawReward && group.size() < 2) {
    throw ConfigError("process_advantages: group normalization needs at least 2 trajectories");
  }

  const auto n = group.size();
  std::vector<std::vector<double>> sums(n);
  std::vector<Segmentation> segs(n);
  for (std::size_t i = 0; i < n; ++i) {
    sums[i] = future_kl_sums(group[i], cfg.eta);
    segs[i] = segment(group[i].response.size(), cfg.segmentation, group[i].response);
  }

  // Scalar signal per trajectory, plus the offset subtracted from each step penalty.
  std::vector<double> signal(n);
  std::vector<double> offset(n, 0.0);
  switch (cfg.order_mode) {
    case OrderMode::RawReward:
      for (std::size_t i = 0; i < n; ++i) {
        signal[i] = group[i].reward;
      }
      break;
    case OrderMode::AdvantageFirst: {
      std::vector<double> rewards(n);
      for (std::size_t i = 0; i < n; ++i) {
        rewards[i] = group[i].reward;
      }
      signal = group_normalize(rewards, cfg.eps_std);
      break;
    }
    case OrderMode::ProcessRewardFirst: {
      std::vector<double> shaped(n);
      for (std::size_t i = 0; i < n; ++i) {
        offset[i] = detail::step_penalty(sums[i], segs[i], 0, cfg.convention);
        shaped[i] = group[i].reward - offset[i];
      }
      signal = group_normalize(shaped, cfg.eps_std);
      break;
    }
  }

  std::vector<AdvantageVector> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& adv = out[i];
    adv.eta = cfg.eta;
    adv.order_mode = cfg.order_mode;
    adv.beta = cfg.beta;
    adv.rho.resize(group[i].response.size());
    for (std::size_t s = 0; s < segs[i].num_steps(); ++s) {
      const double value = signal[i] - (detail::step_penalty(sums[i], segs[i], s, cfg.convention) - offset[i]);
      for (std::size_t t = segs[i].step_begin(s); t < segs[i].step_end(s); ++t) {
        adv.rho[t] = value;
      }
    }
    for (double r : adv.rho) {
      if (!std::isfinite(r)) {
        throw NumericError("process_advantages: non-finite rho");
      }
    }
    adv.segmentation = std::move(segs[i]);
  }
  return out;
}

/*
 * Learnable process reward table
 */

/*!
 * @brief Tabular process reward model r_u keyed by (prompt, prefix).
 *
 * Complete responses are pinned to their true reward and never trained.
 */
class RewardModelTable
{
public:
  using Key = std::pair<TokenSeq, TokenSeq>;

  explicit RewardModelTable(double learning_rate, double initial_value = 0.0)
      : learning_rate_(learning_rate), initial_value_(initial_value)
  {
    if (!(learning_rate >= 0.0)) {
      throw ConfigError("reward model learning rate must be >= 0");
    }
  }

  [[nodiscard]] double learning_rate() const noexcept { return learning_rate_; }

  [[nodiscard]] double predict(std::span<const Token> prompt, std::span<const Token> prefix) const
  {
    const Key key{TokenSeq(prompt.begin(), prompt.end()), TokenSeq(prefix.begin(), prefix.end())};
    if (auto it = pinned_.find(key); it != pinned_.end()) {
      return it->second;
    }
    if (auto it = values_.find(key); it != values_.end()) {
      return it->second;
    }
    return initial_value_;
  }

  void pin(std::span<const Token> prompt, std::span<const Token> response, double reward)
  {
    pinned_[Key{TokenSeq(prompt.begin(), prompt.end()), TokenSeq(response.begin(), response.end())}] = reward;
  }

  [[nodiscard]] bool is_pinned(std::span<const Token> prompt, std::span<const Token> prefix) const
  {
    return pinned_.contains(Key{TokenSeq(prompt.begin(), prompt.end()), TokenSeq(prefix.begin(), prefix.end())});
  }

  /// One SGD step on (r_u(prefix) - target)^2. Pinned entries are left alone.
  void sgd_step(std::span<const Token> prompt, std::span<const Token> prefix, double target)
  {
    if (is_pinned(prompt, prefix)) {
      return;
    }
    const double pred = predict(prompt, prefix);
    values_[Key{TokenSeq(prompt.begin(), prompt.end()), TokenSeq(prefix.begin(), prefix.end())}] =
        pred - learning_rate_ * 2.0 * (pred - target);
  }

  [[nodiscard]] std::size_t size() const noexcept { return values_.size(); }
  [[nodiscard]] const std::map<Key, double>& values() const noexcept { return values_; }

private:
  double learning_rate_;
  double initial_value_;
  std::map<Key, double> values_;
  std::map<Key, double> pinned_;
};

struct PairLoss
{
  std::size_t from{0};
  std::size_t to{0};
  double target{0.0};
  double prediction{0.0};
  double loss{0.0};
};

/*!
 * @brief Bootstrapped SGD on (l, p) prefix pairs of one trajectory.
 *
 * For each pair: y_l = r_u(a^(p)) - (1/eta) sum_{j=l+1}^{p} ln(pi_w/pi_0)(a_j|.)
 * taken as a constant, then one step on (r_u(a^(l)) - y_l)^2. The complete
 * response is pinned to the trajectory reward first, so p = L bootstraps from
 * the true outcome. Pairs are processed in order.
 */
inline std::vector<PairLoss> reward_model_update(RewardModelTable& rm, const Trajectory& traj,
                                                 std::span<const std::pair<std::size_t, std::size_t>> pairs,
                                                 double eta)
{
  const auto len = traj.response.size();
  if (traj.logp_cur.size() != len || traj.logp_ref.size() != len) {
    throw ConfigError("reward_model_update: logp_cur/logp_ref must be populated");
  }
  if (!(eta > 0.0)) {
    throw ConfigError("reward_model_update: eta must be > 0");
  }
  rm.pin(traj.prompt, traj.response, traj.reward);
  const std::span<const Token> response(traj.response);

  std::vector<PairLoss> losses;
  losses.reserve(pairs.size());
  for (const auto& [from, to] : pairs) {
    if (from >= to) {
      throw ConfigError("reward_model_update: pair needs l < p");
    }
    if (to > len) {
      throw ConfigError("reward_model_update: p exceeds the response length");
    }
    double penalty = 0.0;
    for (std::size_t j = from; j < to; ++j) {
      penalty += traj.logp_cur[j] - traj.logp_ref[j];
    }
    const double target = rm.predict(traj.prompt, response.first(to)) - penalty / eta;
    const double pred = rm.predict(traj.prompt, response.first(from));
    losses.push_back({from, to, target, pred, (pred - target) * (pred - target)});
    rm.sgd_step(traj.prompt, response.first(from), target);
  }
  return losses;
}

/// Adjacent step pairs (b_{i-1}, b_i) plus (b, L) anchors for every interior boundary.
inline std::vector<std::pair<std::size_t, std::size_t>> default_reward_pairs(const Segmentation& seg)
{
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  const auto len = seg.boundaries.back();
  for (std::size_t s = 0; s < seg.num_steps(); ++s) {
    pairs.emplace_back(seg.step_begin(s), seg.step_end(s));
  }
  for (std::size_t s = 0; s < seg.num_steps(); ++s) {
    const auto b = seg.step_begin(s);
    if (seg.step_end(s) < len) {
      pairs.emplace_back(b, len);
    }
  }
  return pairs;
}

}  // namespace prl

#endif  // PRL_PRL_HPP_
