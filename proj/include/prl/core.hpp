#ifndef PRL_CORE_HPP_
#define PRL_CORE_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace prl {

/// Token index. Ordinary tokens are 0..size-1; the begin marker is `size`.
using Token = int;
using TokenSeq = std::vector<Token>;

/// Base error type for all library failures.
class Error : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or malformed input supplied by the caller.
class ConfigError : public Error
{
public:
  using Error::Error;
};

/// Non-finite values or numerical breakdown during training.
class NumericError : public Error
{
public:
  using Error::Error;
};

/*
 * Alphabet
 */

/*!
 * @brief Token alphabet of a synthetic environment.
 *
 * Ordinary tokens occupy indices [0, size). The begin marker is the extra
 * index `size`: it only ever appears as context padding and is never sampled.
 * The optional end marker and step delimiter are ordinary tokens.
 */
class Alphabet
{
public:
  Alphabet() = default;

  explicit Alphabet(int size, std::optional<Token> eos = std::nullopt,
                    std::optional<Token> delimiter = std::nullopt)
      : size_(size), eos_(eos), delimiter_(delimiter)
  {
    if (size < 2) {
      throw ConfigError("alphabet size must be >= 2, got " + std::to_string(size));
    }
    auto check = [&](std::optional<Token> t, const char* name) {
      if (t && (*t < 0 || *t >= size)) {
        throw ConfigError(std::string(name) + " id " + std::to_string(*t) + " outside [0, "
                          + std::to_string(size) + ")");
      }
    };
    check(eos, "eos");
    check(delimiter, "delimiter");
    if (eos && delimiter && *eos == *delimiter) {
      throw ConfigError("eos and delimiter ids must be distinct");
    }
  }

  [[nodiscard]] int size() const noexcept { return size_; }
  [[nodiscard]] Token bos_id() const noexcept { return size_; }
  [[nodiscard]] std::optional<Token> eos_id() const noexcept { return eos_; }
  [[nodiscard]] std::optional<Token> delimiter_id() const noexcept { return delimiter_; }

  [[nodiscard]] bool is_ordinary(Token t) const noexcept { return t >= 0 && t < size_; }

  friend bool operator==(const Alphabet&, const Alphabet&) = default;

private:
  int size_{2};
  std::optional<Token> eos_;
  std::optional<Token> delimiter_;
};

/*
 * Trajectory
 */

/*!
 * @brief One rollout: prompt, response and aligned per-token log-probabilities.
 *
 * Index t of every per-token array refers to response token t (0-based), i.e.
 * the 1-based a_{t+1} of the usual sequence notation.
 */
struct Trajectory
{
  TokenSeq prompt;
  TokenSeq response;
  std::vector<double> logp_cur;
  std::vector<double> logp_old;
  std::vector<double> logp_ref;
  double reward{0.0};
  std::int64_t group_id{0};

  [[nodiscard]] std::size_t length() const noexcept { return response.size(); }

  /// Throws ConfigError when an invariant is violated.
  void validate(const std::optional<Token>& eos = std::nullopt) const
  {
    const auto n = response.size();
    auto check_logp = [&](const std::vector<double>& v, const char* name) {
      if (v.size() != n) {
        throw ConfigError(std::string(name) + " has length " + std::to_string(v.size())
                          + ", response has " + std::to_string(n));
      }
      for (double x : v) {
        if (!(x <= 0.0)) {
          throw ConfigError(std::string(name) + " contains a value that is not <= 0");
        }
      }
    };
    check_logp(logp_cur, "logp_cur");
    check_logp(logp_old, "logp_old");
    check_logp(logp_ref, "logp_ref");
    if (!(reward >= 0.0 && reward <= 1.0)) {
      throw ConfigError("reward must lie in [0, 1]");
    }
    if (eos) {
      for (std::size_t t = 0; t + 1 < n; ++t) {
        if (response[t] == *eos) {
          throw ConfigError("eos may only appear as the final response token");
        }
      }
    }
  }

  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

/*
 * Segmentation
 */

struct TokenLevel
{
  friend bool operator==(const TokenLevel&, const TokenLevel&) = default;
};

struct FixedLength
{
  int k{1};
  friend bool operator==(const FixedLength&, const FixedLength&) = default;
};

struct Delimiter
{
  Token token{0};
  friend bool operator==(const Delimiter&, const Delimiter&) = default;
};

using SegmentationMode = std::variant<TokenLevel, FixedLength, Delimiter>;

inline std::string to_string(const SegmentationMode& mode)
{
  return std::visit(
      [](const auto& m) -> std::string {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, TokenLevel>) {
          return "token";
        } else if constexpr (std::is_same_v<M, FixedLength>) {
          return "fixed:" + std::to_string(m.k);
        } else {
          return "delimiter:" + std::to_string(m.token);
        }
      },
      mode);
}

/// Parses "token", "fixed:<k>" or "delimiter:<id>".
inline SegmentationMode parse_segmentation(const std::string& text)
{
  if (text == "token") {
    return TokenLevel{};
  }
  auto colon = text.find(':');
  if (colon != std::string::npos) {
    const auto head = text.substr(0, colon);
    const auto tail = text.substr(colon + 1);
    try {
      std::size_t used = 0;
      const int value = std::stoi(tail, &used);
      if (used == tail.size()) {
        if (head == "fixed" && value >= 1) {
          return FixedLength{value};
        }
        if (head == "delimiter") {
          return Delimiter{value};
        }
      }
    } catch (const std::exception&) {
    }
  }
  throw ConfigError("unknown segmentation '" + text + "' (expected token | fixed:<k> | delimiter:<id>)");
}

/*!
 * @brief Partition of a response into steps.
 *
 * `boundaries` holds 1-based step-end positions: step i covers response
 * indices [boundaries[i-1], boundaries[i]) in 0-based terms, with an implicit
 * leading 0. The final boundary always equals the response length.
 */
struct Segmentation
{
  SegmentationMode mode{TokenLevel{}};
  std::vector<std::size_t> boundaries;

  [[nodiscard]] std::size_t num_steps() const noexcept { return boundaries.size(); }
  [[nodiscard]] std::size_t step_begin(std::size_t i) const { return i == 0 ? 0 : boundaries.at(i - 1); }
  [[nodiscard]] std::size_t step_end(std::size_t i) const { return boundaries.at(i); }

  friend bool operator==(const Segmentation&, const Segmentation&) = default;
};

inline Segmentation segment(std::size_t length, const SegmentationMode& mode, std::span<const Token> response)
{
  if (length == 0) {
    throw ConfigError("empty response");
  }
  Segmentation seg{mode, {}};
  if (std::holds_alternative<TokenLevel>(mode)) {
    seg.boundaries.reserve(length);
    for (std::size_t t = 1; t <= length; ++t) {
      seg.boundaries.push_back(t);
    }
  } else if (const auto* fixed = std::get_if<FixedLength>(&mode)) {
    if (fixed->k < 1) {
      throw ConfigError("fixed-length step size must be >= 1");
    }
    const auto k = static_cast<std::size_t>(fixed->k);
    for (std::size_t end = k; end < length; end += k) {
      seg.boundaries.push_back(end);
    }
    seg.boundaries.push_back(length);
  } else {
    const auto delim = std::get<Delimiter>(mode).token;
    if (delim < 0) {
      throw ConfigError("delimiter token must be a valid index");
    }
    if (response.size() != length) {
      throw ConfigError("delimiter segmentation needs the response tokens");
    }
    for (std::size_t t = 0; t + 1 < length; ++t) {
      if (response[t] == delim) {
        seg.boundaries.push_back(t + 1);
      }
    }
    seg.boundaries.push_back(length);
  }
  return seg;
}

/*
 * Metrics
 */

struct MetricsRecord
{
  std::int64_t step{0};
  double mean_reward{0.0};
  double avg_at_n{0.0};
  double pass_at_n{0.0};
  double policy_entropy{0.0};
  double kl_to_ref{0.0};
  std::string kl_estimator{"exact"};
  std::optional<double> kl_to_opt;
  std::optional<double> objective;
  double wall_time_s{0.0};

  friend bool operator==(const MetricsRecord&, const MetricsRecord&) = default;
};

struct GroupScore
{
  double avg_at_n{0.0};
  double pass_at_n{0.0};
};

inline constexpr double kDefaultPassThreshold = 0.5;

/// avg@n is the mean reward, pass@n is 1 iff any reward reaches the threshold.
inline GroupScore metrics_from_group(std::span<const double> rewards, double threshold = kDefaultPassThreshold)
{
  if (rewards.empty()) {
    throw ConfigError("metrics_from_group: empty group");
  }
  double sum = 0.0;
  bool any = false;
  for (double r : rewards) {
    sum += r;
    any = any || r >= threshold;
  }
  return {sum / static_cast<double>(rewards.size()), any ? 1.0 : 0.0};
}

}  // namespace prl

#endif  // PRL_CORE_HPP_
