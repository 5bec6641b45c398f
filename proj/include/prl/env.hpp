#ifndef PRL_ENV_HPP_
#define PRL_ENV_HPP_

#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "prl/core.hpp"
#include "prl/rng.hpp"

namespace prl {

enum class TaskKind
{
  TargetMatch,
  ParityGoal,
  ModArith
};

inline std::string to_string(TaskKind kind)
{
  switch (kind) {
    case TaskKind::TargetMatch: return "target_match";
    case TaskKind::ParityGoal: return "parity_goal";
    case TaskKind::ModArith: return "mod_arith";
  }
  return "unknown";
}

inline TaskKind parse_task_kind(const std::string& text)
{
  if (text == "target_match") return TaskKind::TargetMatch;
  if (text == "parity_goal") return TaskKind::ParityGoal;
  if (text == "mod_arith") return TaskKind::ModArith;
  throw ConfigError("unknown task kind '" + text + "' (expected target_match | parity_goal | mod_arith)");
}

/*!
 * @brief Parameters of a synthetic task.
 *
 * TargetMatch: reward 1 iff the response equals the prompt's target. The
 *   target is `fixed_target` when set, otherwise a seeded hash of the prompt.
 * ParityGoal: prompt[0] % 2 selects even (0) or odd (1); reward 1 iff the
 *   response token sum has that parity.
 * ModArith: prompt is digits(u) ++ digits(v) ++ digits(m), each `digits`
 *   long in base `base`, most significant first; reward 1 iff the response
 *   digits encode (u + v) mod m.
 *
 * With an eos token the response is eos-terminated (at most response_len
 * tokens); a trailing eos is stripped before scoring.
 */
struct TaskSpec
{
  TaskKind kind{TaskKind::TargetMatch};
  int alphabet_size{4};
  std::optional<Token> eos_id;
  std::optional<Token> delimiter_id;
  int prompt_len{1};
  int response_len{4};
  int base{2};
  int digits{1};
  std::optional<TokenSeq> fixed_target;
  std::uint64_t seed{0};
};

class Task
{
public:
  Task() = default;

  explicit Task(TaskSpec spec) : spec_(std::move(spec)), alphabet_(spec_.alphabet_size, spec_.eos_id, spec_.delimiter_id)
  {
    if (spec_.response_len < 1) {
      throw ConfigError("response_len must be >= 1");
    }
    switch (spec_.kind) {
      case TaskKind::TargetMatch:
      case TaskKind::ParityGoal:
        if (spec_.prompt_len < 1) {
          throw ConfigError("prompt_len must be >= 1");
        }
        if (spec_.fixed_target) {
          if (spec_.kind != TaskKind::TargetMatch) {
            throw ConfigError("fixed target only applies to target_match");
          }
          if (spec_.fixed_target->empty() || spec_.fixed_target->size() > static_cast<std::size_t>(spec_.response_len)
              || (!variable_length() && spec_.fixed_target->size() != static_cast<std::size_t>(spec_.response_len))) {
            throw ConfigError("fixed target length does not fit response_len");
          }
          for (Token t : *spec_.fixed_target) {
            if (!alphabet_.is_ordinary(t) || (spec_.eos_id && t == *spec_.eos_id)) {
              throw ConfigError("fixed target contains an invalid token");
            }
          }
        }
        if (spec_.kind == TaskKind::ParityGoal) {
          bool has_even = false;
          bool has_odd = false;
          for (Token t : content_tokens()) {
            (t % 2 == 0 ? has_even : has_odd) = true;
          }
          if (!has_even || !has_odd) {
            throw ConfigError("parity_goal needs non-eos tokens of both parities");
          }
        }
        break;
      case TaskKind::ModArith:
        if (spec_.base < 2 || spec_.base > alphabet_.size()) {
          throw ConfigError("mod_arith base must lie in [2, alphabet_size]");
        }
        if (spec_.digits < 1) {
          throw ConfigError("mod_arith digits must be >= 1");
        }
        if (spec_.response_len < spec_.digits) {
          throw ConfigError("mod_arith response_len must be >= digits so every residue is encodable");
        }
        if (spec_.eos_id && *spec_.eos_id < spec_.base) {
          throw ConfigError("mod_arith eos id must not collide with a digit");
        }
        if (spec_.base == 2 && spec_.digits == 1) {
          throw ConfigError("mod_arith needs a modulus >= 2: raise base or digits");
        }
        spec_.prompt_len = 3 * spec_.digits;
        break;
    }
  }

  [[nodiscard]] const TaskSpec& spec() const noexcept { return spec_; }
  [[nodiscard]] const Alphabet& alphabet() const noexcept { return alphabet_; }
  [[nodiscard]] TaskKind kind() const noexcept { return spec_.kind; }
  [[nodiscard]] int prompt_len() const noexcept { return spec_.prompt_len; }
  [[nodiscard]] int response_len() const noexcept { return spec_.response_len; }
  [[nodiscard]] bool variable_length() const noexcept { return spec_.eos_id.has_value(); }

  /// Target response of a TargetMatch prompt (without eos).
  [[nodiscard]] TokenSeq target_for(std::span<const Token> prompt) const
  {
    if (spec_.kind != TaskKind::TargetMatch) {
      throw ConfigError("target_for is only defined for target_match");
    }
    check_prompt(prompt);
    if (spec_.fixed_target) {
      return *spec_.fixed_target;
    }
    std::uint64_t h = derive_seed({spec_.seed, 0x7a72ULL});
    for (Token t : prompt) {
      h = derive_seed({h, static_cast<std::uint64_t>(t)});
    }
    Rng rng(h);
    const auto choices = content_tokens();
    TokenSeq target(static_cast<std::size_t>(spec_.response_len));
    for (auto& t : target) {
      t = choices[uniform_index(rng, choices.size())];
    }
    return target;
  }

  /// Decoded (u, v, m) of a ModArith prompt.
  struct ModArithProblem
  {
    std::int64_t u{0};
    std::int64_t v{0};
    std::int64_t m{1};
  };

  [[nodiscard]] ModArithProblem decode_mod_arith(std::span<const Token> prompt) const
  {
    if (spec_.kind != TaskKind::ModArith) {
      throw ConfigError("decode_mod_arith is only defined for mod_arith");
    }
    check_prompt(prompt);
    const auto d = static_cast<std::size_t>(spec_.digits);
    ModArithProblem p{decode_digits(prompt.subspan(0, d)), decode_digits(prompt.subspan(d, d)),
                      decode_digits(prompt.subspan(2 * d, d))};
    if (p.m < 1) {
      throw ConfigError("malformed mod_arith prompt: modulus is zero");
    }
    return p;
  }

  [[nodiscard]] TokenSeq encode_mod_arith(std::int64_t u, std::int64_t v, std::int64_t m) const
  {
    const auto d = static_cast<std::size_t>(spec_.digits);
    TokenSeq prompt;
    for (auto value : {u, v, m}) {
      auto digits = encode_digits(value, d);
      prompt.insert(prompt.end(), digits.begin(), digits.end());
    }
    return prompt;
  }

  /// Deterministic reward r*(x, a) in [0, 1].
  [[nodiscard]] double reward(std::span<const Token> prompt, std::span<const Token> response) const
  {
    check_prompt(prompt);
    for (Token t : response) {
      if (!alphabet_.is_ordinary(t)) {
        throw ConfigError("response token " + std::to_string(t) + " is not in the vocabulary");
      }
    }
    auto body = response;
    if (spec_.eos_id && !body.empty() && body.back() == *spec_.eos_id) {
      body = body.first(body.size() - 1);
    }
    switch (spec_.kind) {
      case TaskKind::TargetMatch: {
        const auto target = target_for(prompt);
        return std::equal(body.begin(), body.end(), target.begin(), target.end()) ? 1.0 : 0.0;
      }
      case TaskKind::ParityGoal: {
        if (body.empty()) {
          return 0.0;
        }
        std::int64_t sum = 0;
        for (Token t : body) {
          sum += t;
        }
        return (sum % 2) == (prompt[0] % 2) ? 1.0 : 0.0;
      }
      case TaskKind::ModArith: {
        const auto p = decode_mod_arith(prompt);
        if (body.size() != static_cast<std::size_t>(spec_.response_len)) {
          return 0.0;
        }
        for (Token t : body) {
          if (t >= spec_.base) {
            return 0.0;
          }
        }
        return decode_digits(body) == (p.u + p.v) % p.m ? 1.0 : 0.0;
      }
    }
    return 0.0;
  }

  /// A response with reward 1, constructed directly from the task definition.
  [[nodiscard]] TokenSeq reference_solution(std::span<const Token> prompt) const
  {
    switch (spec_.kind) {
      case TaskKind::TargetMatch: return target_for(prompt);
      case TaskKind::ParityGoal: {
        check_prompt(prompt);
        const auto tokens = content_tokens();
        TokenSeq out(static_cast<std::size_t>(spec_.response_len), tokens.front());
        if ((tokens.front() * spec_.response_len) % 2 != prompt[0] % 2) {
          // Swap one token for one of opposite parity.
          for (Token t : tokens) {
            if ((t - tokens.front()) % 2 != 0) {
              out.back() = t;
              break;
            }
          }
        }
        return out;
      }
      case TaskKind::ModArith: {
        const auto p = decode_mod_arith(prompt);
        return encode_digits((p.u + p.v) % p.m, static_cast<std::size_t>(spec_.response_len));
      }
    }
    return {};
  }

  /// True when some fixed-length response earns reward 1, checked by enumerating Sigma^L.
  [[nodiscard]] bool solvable_by_enumeration(std::span<const Token> prompt) const
  {
    const auto vocab = static_cast<std::size_t>(alphabet_.size());
    const auto len = static_cast<std::size_t>(spec_.response_len);
    TokenSeq a(len, 0);
    while (true) {
      if (reward(prompt, a) >= 1.0) {
        return true;
      }
      std::size_t i = len;
      while (i > 0) {
        --i;
        if (static_cast<std::size_t>(++a[i]) < vocab) {
          break;
        }
        a[i] = 0;
        if (i == 0) {
          return false;
        }
      }
    }
  }

  /*!
   * @brief Draws n prompts with a fixed seed.
   *
   * Prompts are distinct while n does not exceed the number of possible
   * prompts. Every prompt is checked to be solvable: by enumeration when
   * |Sigma|^L <= 4096, otherwise through the constructive reference solution.
   */
  [[nodiscard]] std::vector<TokenSeq> sample_prompts(std::size_t n, std::uint64_t seed, bool allow_empty = false) const
  {
    if (n == 0) {
      if (!allow_empty) {
        throw ConfigError("sample_prompts: n must be >= 1");
      }
      return {};
    }
    Rng rng(derive_seed({seed, spec_.seed, 0x9f0ULL}));
    const bool distinct = n <= prompt_space_size();
    std::set<TokenSeq> seen;
    std::vector<TokenSeq> prompts;
    prompts.reserve(n);
    while (prompts.size() < n) {
      TokenSeq p = draw_prompt(rng);
      if (distinct && !seen.insert(p).second) {
        continue;
      }
      prompts.push_back(std::move(p));
    }
    for (const auto& p : prompts) {
      const bool ok = enumerable_for_solvability() ? solvable_by_enumeration(p) : reward(p, reference_solution(p)) >= 1.0;
      if (!ok) {
        throw Error("sampled an unsolvable prompt; task definition is inconsistent");
      }
    }
    return prompts;
  }

  void check_prompt(std::span<const Token> prompt) const
  {
    if (prompt.size() != static_cast<std::size_t>(spec_.prompt_len)) {
      throw ConfigError("malformed prompt: expected " + std::to_string(spec_.prompt_len) + " tokens, got "
                        + std::to_string(prompt.size()));
    }
    for (Token t : prompt) {
      if (!alphabet_.is_ordinary(t) || (spec_.kind == TaskKind::ModArith && t >= spec_.base)) {
        throw ConfigError("malformed prompt: invalid token " + std::to_string(t));
      }
    }
  }

private:
  /// Tokens a response body may use (everything except eos).
  [[nodiscard]] std::vector<Token> content_tokens() const
  {
    std::vector<Token> out;
    for (Token t = 0; t < alphabet_.size(); ++t) {
      if (!spec_.eos_id || t != *spec_.eos_id) {
        out.push_back(t);
      }
    }
    return out;
  }

  [[nodiscard]] std::int64_t decode_digits(std::span<const Token> digits) const
  {
    std::int64_t value = 0;
    for (Token t : digits) {
      value = value * spec_.base + t;
    }
    return value;
  }

  [[nodiscard]] TokenSeq encode_digits(std::int64_t value, std::size_t width) const
  {
    TokenSeq out(width, 0);
    for (std::size_t i = width; i > 0; --i) {
      out[i - 1] = static_cast<Token>(value % spec_.base);
      value /= spec_.base;
    }
    if (value != 0) {
      throw ConfigError("value does not fit in the digit width");
    }
    return out;
  }

  [[nodiscard]] std::int64_t digit_space() const
  {
    std::int64_t space = 1;
    for (int i = 0; i < spec_.digits; ++i) {
      space *= spec_.base;
    }
    return space;
  }

  [[nodiscard]] std::size_t prompt_space_size() const
  {
    if (spec_.kind == TaskKind::ModArith) {
      const auto s = static_cast<std::size_t>(digit_space());
      return s * s * (s - 2);
    }
    std::size_t space = 1;
    for (int i = 0; i < spec_.prompt_len && space < (std::size_t{1} << 40); ++i) {
      space *= static_cast<std::size_t>(alphabet_.size());
    }
    return space;
  }

  [[nodiscard]] bool enumerable_for_solvability() const
  {
    if (variable_length()) {
      return false;
    }
    std::size_t space = 1;
    for (int i = 0; i < spec_.response_len; ++i) {
      space *= static_cast<std::size_t>(alphabet_.size());
      if (space > 4096) {
        return false;
      }
    }
    return true;
  }

  TokenSeq draw_prompt(Rng& rng) const
  {
    if (spec_.kind == TaskKind::ModArith) {
      const auto space = static_cast<std::uint64_t>(digit_space());
      const auto u = static_cast<std::int64_t>(uniform_index(rng, space));
      const auto v = static_cast<std::int64_t>(uniform_index(rng, space));
      const auto m = static_cast<std::int64_t>(2 + uniform_index(rng, space - 2));
      return encode_mod_arith(u, v, m);
    }
    TokenSeq p(static_cast<std::size_t>(spec_.prompt_len));
    for (auto& t : p) {
      t = static_cast<Token>(uniform_index(rng, static_cast<std::uint64_t>(alphabet_.size())));
    }
    return p;
  }

  TaskSpec spec_;
  Alphabet alphabet_{4};
};

}  // namespace prl

#endif  // PRL_ENV_HPP_
