#ifndef PRL_POLICY_HPP_
#define PRL_POLICY_HPP_

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "prl/core.hpp"
#include "prl/rng.hpp"

namespace prl {

/*
 * Row-level softmax helpers
 */

/// Numerically stable log-softmax of one logits row.
inline void log_softmax(std::span<const double> logits, std::span<double> out)
{
  double max = -std::numeric_limits<double>::infinity();
  for (double x : logits) {
    max = std::max(max, x);
  }
  double sum = 0.0;
  for (double x : logits) {
    sum += std::exp(x - max);
  }
  const double lse = max + std::log(sum);
  for (std::size_t k = 0; k < logits.size(); ++k) {
    out[k] = logits[k] - lse;
  }
}

/// log-sum-exp over a span; -inf for an empty or all -inf input.
inline double log_sum_exp(std::span<const double> values)
{
  double max = -std::numeric_limits<double>::infinity();
  for (double x : values) {
    max = std::max(max, x);
  }
  if (!std::isfinite(max)) {
    return max;
  }
  double sum = 0.0;
  for (double x : values) {
    sum += std::exp(x - max);
  }
  return max + std::log(sum);
}

/// KL(p || q) between two categorical rows given as log-probabilities.
inline double categorical_kl(std::span<const double> logp, std::span<const double> logq)
{
  double kl = 0.0;
  for (std::size_t k = 0; k < logp.size(); ++k) {
    const double p = std::exp(logp[k]);
    if (p > 0.0) {
      kl += p * (logp[k] - logq[k]);
    }
  }
  return std::max(kl, 0.0);
}

inline double categorical_entropy(std::span<const double> logp)
{
  double h = 0.0;
  for (double lp : logp) {
    const double p = std::exp(lp);
    if (p > 0.0) {
      h -= p * lp;
    }
  }
  return std::max(h, 0.0);
}

/*
 * TabularPolicy
 */

/*!
 * @brief Order-m autoregressive softmax policy over a finite alphabet.
 *
 * The next-token distribution depends on the last `order` tokens of
 * prompt ++ response-so-far, left-padded with the begin marker. Each of the
 * (size+1)^order contexts owns one dense row of `size` logits; the begin
 * marker is never part of the output vocabulary.
 */
class TabularPolicy
{
public:
  TabularPolicy() = default;

  TabularPolicy(Alphabet alphabet, int order, int max_len)
      : alphabet_(alphabet), order_(order), max_len_(max_len)
  {
    if (order < 1) {
      throw ConfigError("policy order must be >= 1");
    }
    if (max_len < 1) {
      throw ConfigError("policy max_len must be >= 1");
    }
    std::size_t contexts = 1;
    const auto base = static_cast<std::size_t>(alphabet.size() + 1);
    for (int i = 0; i < order; ++i) {
      if (contexts > (std::size_t{1} << 26) / base) {
        throw ConfigError("policy table too large: (size+1)^order exceeds 2^26 contexts");
      }
      contexts *= base;
    }
    num_contexts_ = contexts;
    logits_.assign(num_contexts_ * vocab(), 0.0);
  }

  /// Logits drawn uniformly from [-scale, scale] with a fixed seed.
  static TabularPolicy random(Alphabet alphabet, int order, int max_len, double scale, std::uint64_t seed)
  {
    TabularPolicy p(alphabet, order, max_len);
    Rng rng(seed);
    for (double& x : p.logits_) {
      x = scale * (2.0 * uniform01(rng) - 1.0);
    }
    return p;
  }

  [[nodiscard]] const Alphabet& alphabet() const noexcept { return alphabet_; }
  [[nodiscard]] int order() const noexcept { return order_; }
  [[nodiscard]] int max_len() const noexcept { return max_len_; }
  [[nodiscard]] std::size_t vocab() const noexcept { return static_cast<std::size_t>(alphabet_.size()); }
  [[nodiscard]] std::size_t num_contexts() const noexcept { return num_contexts_; }

  [[nodiscard]] std::span<const double> logits() const noexcept { return logits_; }
  [[nodiscard]] std::span<double> logits() noexcept { return logits_; }

  [[nodiscard]] std::span<const double> row(std::size_t context) const
  {
    return std::span<const double>(logits_).subspan(context * vocab(), vocab());
  }
  [[nodiscard]] std::span<double> row(std::size_t context)
  {
    return std::span<double>(logits_).subspan(context * vocab(), vocab());
  }

  /// Context index of the next token after `history` (prompt ++ generated tokens).
  [[nodiscard]] std::size_t context_index(std::span<const Token> history) const
  {
    const auto base = static_cast<std::size_t>(alphabet_.size() + 1);
    const auto m = static_cast<std::size_t>(order_);
    std::size_t idx = 0;
    for (std::size_t i = 0; i < m; ++i) {
      // Window position i covers history[h - m + i]; earlier positions are padding.
      Token tok = alphabet_.bos_id();
      if (history.size() + i >= m) {
        tok = history[history.size() + i - m];
        if (!alphabet_.is_ordinary(tok)) {
          throw ConfigError("token " + std::to_string(tok) + " is not in the vocabulary");
        }
      }
      idx = idx * base + static_cast<std::size_t>(tok);
    }
    return idx;
  }

  [[nodiscard]] std::vector<double> log_probs(std::size_t context) const
  {
    std::vector<double> out(vocab());
    log_softmax(row(context), out);
    return out;
  }

  friend bool operator==(const TabularPolicy&, const TabularPolicy&) = default;

private:
  Alphabet alphabet_;
  int order_{1};
  int max_len_{1};
  std::size_t num_contexts_{0};
  std::vector<double> logits_;
};

/// Gradient table with the same layout as TabularPolicy::logits().
struct PolicyGradient
{
  std::size_t vocab{0};
  std::vector<double> values;

  [[nodiscard]] std::span<double> row(std::size_t context)
  {
    return std::span<double>(values).subspan(context * vocab, vocab);
  }
  [[nodiscard]] std::span<const double> row(std::size_t context) const
  {
    return std::span<const double>(values).subspan(context * vocab, vocab);
  }
};

inline PolicyGradient zero_gradient(const TabularPolicy& policy)
{
  return {policy.vocab(), std::vector<double>(policy.logits().size(), 0.0)};
}

/*
 * Sequence-level operations
 */

namespace detail {

inline TokenSeq concat(std::span<const Token> prompt, std::span<const Token> response)
{
  TokenSeq history;
  history.reserve(prompt.size() + response.size());
  history.insert(history.end(), prompt.begin(), prompt.end());
  history.insert(history.end(), response.begin(), response.end());
  return history;
}

}  // namespace detail

/// Context index for each response position t: the context that emits response[t].
inline std::vector<std::size_t> response_contexts(const TabularPolicy& policy, std::span<const Token> prompt,
                                                  std::span<const Token> response)
{
  const auto history = detail::concat(prompt, response);
  std::vector<std::size_t> ctx(response.size());
  for (std::size_t t = 0; t < response.size(); ++t) {
    ctx[t] = policy.context_index(std::span<const Token>(history).first(prompt.size() + t));
  }
  return ctx;
}

/// Per-token log-probabilities ln pi(a_t | x, a_<t); their sum is ln pi(a | x).
inline std::vector<double> logprob(const TabularPolicy& policy, std::span<const Token> prompt,
                                   std::span<const Token> response)
{
  for (Token t : response) {
    if (!policy.alphabet().is_ordinary(t)) {
      throw ConfigError("response token " + std::to_string(t) + " is not in the vocabulary");
    }
  }
  const auto ctx = response_contexts(policy, prompt, response);
  std::vector<double> out(response.size());
  std::vector<double> row(policy.vocab());
  for (std::size_t t = 0; t < response.size(); ++t) {
    log_softmax(policy.row(ctx[t]), row);
    out[t] = row[static_cast<std::size_t>(response[t])];
  }
  return out;
}

/*!
 * @brief Draws one response by inverse-CDF sampling.
 *
 * Stops at max_len or right after emitting eos. Only `response` and
 * `logp_cur` of the returned trajectory are populated.
 */
inline Trajectory sample(const TabularPolicy& policy, std::span<const Token> prompt, std::uint64_t seed)
{
  Rng rng(seed);
  Trajectory traj;
  traj.prompt.assign(prompt.begin(), prompt.end());
  TokenSeq history = traj.prompt;
  std::vector<double> row(policy.vocab());
  const auto eos = policy.alphabet().eos_id();
  for (int t = 0; t < policy.max_len(); ++t) {
    log_softmax(policy.row(policy.context_index(history)), row);
    const double u = uniform01(rng);
    double cdf = 0.0;
    std::size_t pick = row.size() - 1;
    for (std::size_t k = 0; k < row.size(); ++k) {
      cdf += std::exp(row[k]);
      if (u < cdf) {
        pick = k;
        break;
      }
    }
    // Guard against the cdf tail rounding below u onto a zero-probability token.
    while (pick > 0 && std::exp(row[pick]) == 0.0) {
      --pick;
    }
    const auto tok = static_cast<Token>(pick);
    history.push_back(tok);
    traj.response.push_back(tok);
    traj.logp_cur.push_back(row[pick]);
    if (eos && tok == *eos) {
      break;
    }
  }
  traj.logp_old = traj.logp_cur;
  return traj;
}

/// Exact KL(a(.|h) || b(.|h)) of the next-token distributions after history h.
inline double exact_next_token_kl(const TabularPolicy& a, const TabularPolicy& b, std::span<const Token> history)
{
  if (a.alphabet() != b.alphabet() || a.order() != b.order()) {
    throw ConfigError("exact_next_token_kl: policies must share alphabet and order");
  }
  const auto ctx = a.context_index(history);
  return categorical_kl(a.log_probs(ctx), b.log_probs(ctx));
}

/*
 * Clipped surrogate loss
 */

struct ClipRange
{
  double low{0.2};
  double high{0.2};

  /// No clipping at all.
  static ClipRange none()
  {
    return {std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
  }
};

struct SurrogateOptions
{
  /// Per-trajectory weights; empty means uniform 1/N.
  std::span<const double> weights{};
  /// Coefficient of the exact per-context KL(pi || pi_ref) penalty.
  double beta{0.0};
  const TabularPolicy* reference{nullptr};
  /// Coefficient of the mean-entropy bonus.
  double entropy_coef{0.0};
};

struct SurrogateResult
{
  double loss{0.0};
  PolicyGradient grad;
  /// Fraction of tokens where the clipped branch was selected (zero gradient).
  double clip_fraction{0.0};
};

/*!
 * @brief Clipped importance-sampling surrogate and its exact gradient w.r.t. logits.
 *
 * loss = sum_i w_i * ( -(1/L_i) sum_t min(r_t rho_t, clip(r_t, 1-eps_low, 1+eps_high) rho_t)
 *                      + beta (1/L_i) sum_t KL_t - c_ent (1/L_i) sum_t H_t )
 *
 * with r_t = exp(logp_cur - logp_old). `rho` is a constant: no gradient flows
 * through it. Accumulation runs in batch order so results are reproducible.
 */
inline SurrogateResult surrogate_grad(const TabularPolicy& policy, std::span<const Trajectory> batch,
                                      std::span<const std::vector<double>> rho,
                                      std::span<const std::vector<double>> old_logp, ClipRange clip,
                                      const SurrogateOptions& options = {})
{
  if (rho.size() != batch.size() || old_logp.size() != batch.size()) {
    throw ConfigError("surrogate_grad: rho/old_logp batch size mismatch");
  }
  if (!options.weights.empty() && options.weights.size() != batch.size()) {
    throw ConfigError("surrogate_grad: weights size mismatch");
  }
  if (options.beta != 0.0) {
    if (options.reference == nullptr) {
      throw ConfigError("surrogate_grad: beta > 0 needs a reference policy");
    }
    if (options.reference->alphabet() != policy.alphabet() || options.reference->order() != policy.order()) {
      throw ConfigError("surrogate_grad: reference policy shape mismatch");
    }
  }

  SurrogateResult result{0.0, zero_gradient(policy), 0.0};
  const auto vocab = policy.vocab();
  std::vector<double> lp(vocab);
  std::vector<double> lq(vocab);
  std::size_t tokens = 0;
  std::size_t clipped = 0;

  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& traj = batch[i];
    const auto len = traj.response.size();
    if (rho[i].size() != len || old_logp[i].size() != len) {
      throw ConfigError("surrogate_grad: length mismatch in trajectory " + std::to_string(i));
    }
    if (len == 0) {
      continue;
    }
    const double w = options.weights.empty() ? 1.0 / static_cast<double>(batch.size()) : options.weights[i];
    const double scale = w / static_cast<double>(len);
    const auto ctx = response_contexts(policy, traj.prompt, traj.response);

    for (std::size_t t = 0; t < len; ++t) {
      log_softmax(policy.row(ctx[t]), lp);
      const auto a = static_cast<std::size_t>(traj.response[t]);
      const double ratio = std::exp(lp[a] - old_logp[i][t]);
      const double clipped_ratio = std::clamp(ratio, 1.0 - clip.low, 1.0 + clip.high);
      const double unclipped_term = ratio * rho[i][t];
      const double clipped_term = clipped_ratio * rho[i][t];
      ++tokens;

      // d(term)/d(logit_k) = coef * (1[k == a] - p_k); zero when the clip is active.
      double coef = 0.0;
      if (unclipped_term <= clipped_term) {
        result.loss -= scale * unclipped_term;
        coef = -scale * unclipped_term;
      } else {
        // Only reachable with the ratio outside the clip range.
        result.loss -= scale * clipped_term;
        ++clipped;
      }
      auto g = result.grad.row(ctx[t]);
      if (coef != 0.0) {
        for (std::size_t k = 0; k < vocab; ++k) {
          g[k] -= coef * std::exp(lp[k]);
        }
        g[a] += coef;
      }

      if (options.beta != 0.0) {
        log_softmax(options.reference->row(ctx[t]), lq);
        const double kl = categorical_kl(lp, lq);
        result.loss += scale * options.beta * kl;
        for (std::size_t k = 0; k < vocab; ++k) {
          g[k] += scale * options.beta * std::exp(lp[k]) * ((lp[k] - lq[k]) - kl);
        }
      }
      if (options.entropy_coef != 0.0) {
        const double h = categorical_entropy(lp);
        result.loss -= scale * options.entropy_coef * h;
        for (std::size_t k = 0; k < vocab; ++k) {
          // dH/dlogit_k = -p_k (ln p_k + H)
          g[k] += scale * options.entropy_coef * std::exp(lp[k]) * (lp[k] + h);
        }
      }
    }
  }
  result.clip_fraction = tokens == 0 ? 0.0 : static_cast<double>(clipped) / static_cast<double>(tokens);
  return result;
}

/*
 * Checkpoints
 */

inline constexpr const char* kCheckpointFormat = "prl-tabular-policy";
inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json alphabet_to_json(const Alphabet& a)
{
  nlohmann::json j;
  j["size"] = a.size();
  j["bos_id"] = a.bos_id();
  j["eos_id"] = a.eos_id() ? nlohmann::json(*a.eos_id()) : nlohmann::json(nullptr);
  j["delimiter_id"] = a.delimiter_id() ? nlohmann::json(*a.delimiter_id()) : nlohmann::json(nullptr);
  return j;
}

inline Alphabet alphabet_from_json(const nlohmann::json& j)
{
  auto opt = [&](const char* key) -> std::optional<Token> {
    if (!j.contains(key) || j.at(key).is_null()) {
      return std::nullopt;
    }
    return j.at(key).get<Token>();
  };
  Alphabet a(j.at("size").get<int>(), opt("eos_id"), opt("delimiter_id"));
  if (j.contains("bos_id") && j.at("bos_id").get<Token>() != a.bos_id()) {
    throw ConfigError("checkpoint bos_id does not match alphabet size");
  }
  return a;
}

inline nlohmann::json to_json(const TabularPolicy& p)
{
  nlohmann::json j;
  j["format"] = kCheckpointFormat;
  j["version"] = kCheckpointVersion;
  j["alphabet"] = alphabet_to_json(p.alphabet());
  j["order"] = p.order();
  j["max_len"] = p.max_len();
  j["logits"] = std::vector<double>(p.logits().begin(), p.logits().end());
  return j;
}

inline TabularPolicy policy_from_json(const nlohmann::json& j)
{
  if (j.value("format", std::string{}) != kCheckpointFormat) {
    throw ConfigError("not a tabular policy checkpoint");
  }
  if (j.at("version").get<int>() != kCheckpointVersion) {
    throw ConfigError("unsupported checkpoint version " + std::to_string(j.at("version").get<int>()));
  }
  TabularPolicy p(alphabet_from_json(j.at("alphabet")), j.at("order").get<int>(), j.at("max_len").get<int>());
  const auto& logits = j.at("logits");
  if (logits.size() != p.logits().size()) {
    throw ConfigError("checkpoint logits size mismatch");
  }
  auto dst = p.logits();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    dst[i] = logits[i].get<double>();
  }
  return p;
}

inline void save_checkpoint(const TabularPolicy& p, const std::string& path)
{
  std::ofstream out(path);
  if (!out) {
    throw Error("cannot open checkpoint for writing: " + path);
  }
  out << to_json(p).dump() << '\n';
}

inline TabularPolicy load_checkpoint(const std::string& path)
{
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open checkpoint: " + path);
  }
  return policy_from_json(nlohmann::json::parse(in));
}

}  // namespace prl

#endif  // PRL_POLICY_HPP_
