#ifndef PRL_TRAINER_HPP_
#define PRL_TRAINER_HPP_

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "prl/core.hpp"
#include "prl/env.hpp"
#include "prl/oracle.hpp"
#include "prl/policy.hpp"
#include "prl/prl.hpp"
#include "prl/records.hpp"
#include "prl/rng.hpp"

namespace prl {

inline constexpr const char* kVersion = "0.1.0";

enum class Algorithm
{
  PRL,
  GRPO,
  REINFORCE,
  RAFT
};

inline std::string to_string(Algorithm a)
{
  switch (a) {
    case Algorithm::PRL: return "prl";
    case Algorithm::GRPO: return "grpo";
    case Algorithm::REINFORCE: return "reinforce";
    case Algorithm::RAFT: return "raft";
  }
  return "unknown";
}

inline Algorithm parse_algorithm(const std::string& text)
{
  if (text == "prl") return Algorithm::PRL;
  if (text == "grpo") return Algorithm::GRPO;
  if (text == "reinforce") return Algorithm::REINFORCE;
  if (text == "raft") return Algorithm::RAFT;
  throw ConfigError("unknown algorithm '" + text + "' (expected prl | grpo | reinforce | raft)");
}

enum class OptimizerKind
{
  SGD,
  Momentum,
  Adam
};

inline std::string to_string(OptimizerKind k)
{
  switch (k) {
    case OptimizerKind::SGD: return "sgd";
    case OptimizerKind::Momentum: return "momentum";
    case OptimizerKind::Adam: return "adam";
  }
  return "unknown";
}

inline OptimizerKind parse_optimizer(const std::string& text)
{
  if (text == "sgd") return OptimizerKind::SGD;
  if (text == "momentum") return OptimizerKind::Momentum;
  if (text == "adam") return OptimizerKind::Adam;
  throw ConfigError("unknown optimizer '" + text + "' (expected sgd | momentum | adam)");
}

/// Sampled rollouts, or the full response set weighted by pi (one prompt at a time).
enum class RolloutMode
{
  Sampled,
  Exact
};

/*!
 * @brief Every knob of a training run. Field names are the config-file keys.
 */
struct RunConfig
{
  // Task
  std::string task{"target_match"};
  int alphabet_size{4};
  int eos_id{-1};
  int delimiter_id{-1};
  int prompt_len{1};
  int response_len{4};
  int base{2};
  int digits{1};
  std::string target;
  std::uint64_t task_seed{0};
  int num_prompts{16};

  // Policies
  int policy_order{0};  // 0: full history (prompt_len + response_len - 1)
  std::string ref_init{"uniform"};
  double ref_init_scale{1.0};
  std::uint64_t ref_init_seed{0};

  // Algorithm
  Algorithm algorithm{Algorithm::PRL};
  int group_size{5};
  int batch_size{16};
  int mini_batch_size{0};  // trajectories per update; 0: whole batch
  int epochs{1};
  double learning_rate{20.0};
  double eta{100.0};
  double beta{0.0};
  double entropy_coef{0.0};
  double clip_low{0.2};
  double clip_high{0.2};
  SegmentationMode segmentation{TokenLevel{}};
  OrderMode order_mode{OrderMode::AdvantageFirst};
  IndexConvention index_convention{IndexConvention::Inclusive};
  double eps_std{kDefaultEpsStd};
  double pass_threshold{kDefaultPassThreshold};
  RolloutMode rollout_mode{RolloutMode::Sampled};

  // Optimizer
  OptimizerKind optimizer{OptimizerKind::SGD};
  double momentum{0.9};
  double adam_beta1{0.9};
  double adam_beta2{0.999};
  double adam_eps{1e-8};

  // Schedule and evaluation
  int steps{300};
  int eval_every{10};
  int eval_samples_per_prompt{8};
  int checkpoint_every{0};
  int plateau_patience{0};
  double plateau_min_delta{1e-3};
  std::size_t enumeration_cap{100'000};

  std::uint64_t seed{0};
  std::string output_dir;
};

/*
 * Config file: "key = value" lines, '#' comments.
 */

namespace detail {

inline std::string trim(const std::string& s)
{
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) {
    return {};
  }
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::string format_double(double x)
{
  if (std::isinf(x)) {
    return x > 0 ? "inf" : "-inf";
  }
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

inline double parse_double(const std::string& key, const std::string& v)
{
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used == v.size() && !std::isnan(x)) {
      return x;
    }
  } catch (const std::exception&) {
  }
  throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
}

inline long long parse_int(const std::string& key, const std::string& v)
{
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used == v.size()) {
      return x;
    }
  } catch (const std::exception&) {
  }
  throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
}

struct FieldBinding
{
  const char* name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template<typename T>
FieldBinding int_field(const char* name, T RunConfig::*member)
{
  return {name,
          [name, member](RunConfig& c, const std::string& v) { c.*member = static_cast<T>(parse_int(name, v)); },
          [member](const RunConfig& c) { return std::to_string(c.*member); }};
}

inline FieldBinding double_field(const char* name, double RunConfig::*member)
{
  return {name, [name, member](RunConfig& c, const std::string& v) { c.*member = parse_double(name, v); },
          [member](const RunConfig& c) { return format_double(c.*member); }};
}

inline FieldBinding string_field(const char* name, std::string RunConfig::*member)
{
  return {name, [member](RunConfig& c, const std::string& v) { c.*member = v; },
          [member](const RunConfig& c) { return c.*member; }};
}

}  // namespace detail

/// Every config key, in manifest order.
inline const std::vector<detail::FieldBinding>& config_fields()
{
  using namespace detail;
  static const std::vector<FieldBinding> fields = {
      string_field("task", &RunConfig::task),
      int_field("alphabet_size", &RunConfig::alphabet_size),
      int_field("eos_id", &RunConfig::eos_id),
      int_field("delimiter_id", &RunConfig::delimiter_id),
      int_field("prompt_len", &RunConfig::prompt_len),
      int_field("response_len", &RunConfig::response_len),
      int_field("base", &RunConfig::base),
      int_field("digits", &RunConfig::digits),
      string_field("target", &RunConfig::target),
      int_field("task_seed", &RunConfig::task_seed),
      int_field("num_prompts", &RunConfig::num_prompts),
      int_field("policy_order", &RunConfig::policy_order),
      string_field("ref_init", &RunConfig::ref_init),
      double_field("ref_init_scale", &RunConfig::ref_init_scale),
      int_field("ref_init_seed", &RunConfig::ref_init_seed),
      {"algorithm", [](RunConfig& c, const std::string& v) { c.algorithm = parse_algorithm(v); },
       [](const RunConfig& c) { return to_string(c.algorithm); }},
      int_field("group_size", &RunConfig::group_size),
      int_field("batch_size", &RunConfig::batch_size),
      int_field("mini_batch_size", &RunConfig::mini_batch_size),
      int_field("epochs", &RunConfig::epochs),
      double_field("learning_rate", &RunConfig::learning_rate),
      double_field("eta", &RunConfig::eta),
      double_field("beta", &RunConfig::beta),
      double_field("entropy_coef", &RunConfig::entropy_coef),
      double_field("clip_low", &RunConfig::clip_low),
      double_field("clip_high", &RunConfig::clip_high),
      {"segmentation", [](RunConfig& c, const std::string& v) { c.segmentation = parse_segmentation(v); },
       [](const RunConfig& c) { return to_string(c.segmentation); }},
      {"order_mode", [](RunConfig& c, const std::string& v) { c.order_mode = parse_order_mode(v); },
       [](const RunConfig& c) { return to_string(c.order_mode); }},
      {"index_convention", [](RunConfig& c, const std::string& v) { c.index_convention = parse_index_convention(v); },
       [](const RunConfig& c) { return to_string(c.index_convention); }},
      double_field("eps_std", &RunConfig::eps_std),
      double_field("pass_threshold", &RunConfig::pass_threshold),
      {"rollout_mode",
       [](RunConfig& c, const std::string& v) {
         if (v == "sampled") {
           c.rollout_mode = RolloutMode::Sampled;
         } else if (v == "exact") {
           c.rollout_mode = RolloutMode::Exact;
         } else {
           throw ConfigError("unknown rollout_mode '" + v + "' (expected sampled | exact)");
         }
       },
       [](const RunConfig& c) { return std::string(c.rollout_mode == RolloutMode::Sampled ? "sampled" : "exact"); }},
      {"optimizer", [](RunConfig& c, const std::string& v) { c.optimizer = parse_optimizer(v); },
       [](const RunConfig& c) { return to_string(c.optimizer); }},
      double_field("momentum", &RunConfig::momentum),
      double_field("adam_beta1", &RunConfig::adam_beta1),
      double_field("adam_beta2", &RunConfig::adam_beta2),
      double_field("adam_eps", &RunConfig::adam_eps),
      int_field("steps", &RunConfig::steps),
      int_field("eval_every", &RunConfig::eval_every),
      int_field("eval_samples_per_prompt", &RunConfig::eval_samples_per_prompt),
      int_field("checkpoint_every", &RunConfig::checkpoint_every),
      int_field("plateau_patience", &RunConfig::plateau_patience),
      double_field("plateau_min_delta", &RunConfig::plateau_min_delta),
      int_field("enumeration_cap", &RunConfig::enumeration_cap),
      int_field("seed", &RunConfig::seed),
      string_field("output_dir", &RunConfig::output_dir),
  };
  return fields;
}

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value)
{
  for (const auto& f : config_fields()) {
    if (key == f.name) {
      f.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

/// Applies "key = value" lines on top of `cfg`.
inline void apply_config_text(RunConfig& cfg, const std::string& text)
{
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) {
      line.resize(hash);
    }
    line = detail::trim(line);
    if (line.empty()) {
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    set_config_value(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
}

inline RunConfig load_run_config(const std::string& path, RunConfig base = {})
{
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open config file: " + path);
  }
  std::stringstream buf;
  buf << in.rdbuf();
  apply_config_text(base, buf.str());
  return base;
}

inline std::string to_config_text(const RunConfig& cfg)
{
  std::string out;
  for (const auto& f : config_fields()) {
    out += std::string(f.name) + " = " + f.get(cfg) + "\n";
  }
  return out;
}

/*
 * Derived objects
 */

inline TaskSpec task_spec(const RunConfig& cfg)
{
  TaskSpec spec;
  spec.kind = parse_task_kind(cfg.task);
  spec.alphabet_size = cfg.alphabet_size;
  if (cfg.eos_id >= 0) {
    spec.eos_id = cfg.eos_id;
  }
  if (cfg.delimiter_id >= 0) {
    spec.delimiter_id = cfg.delimiter_id;
  }
  spec.prompt_len = cfg.prompt_len;
  spec.response_len = cfg.response_len;
  spec.base = cfg.base;
  spec.digits = cfg.digits;
  spec.seed = cfg.task_seed;
  if (!cfg.target.empty()) {
    TokenSeq target;
    std::stringstream ss(cfg.target);
    std::string item;
    while (std::getline(ss, item, ',')) {
      target.push_back(static_cast<Token>(detail::parse_int("target", detail::trim(item))));
    }
    spec.fixed_target = target;
  }
  return spec;
}

inline void validate(const RunConfig& cfg)
{
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) {
      throw ConfigError(msg);
    }
  };
  const bool grouped = cfg.algorithm == Algorithm::GRPO
                       || (cfg.algorithm == Algorithm::PRL && cfg.order_mode != OrderMode::RawReward);
  require(cfg.group_size >= 1, "group_size must be >= 1");
  require(!grouped || cfg.group_size >= 2, "group_size must be >= 2 for group-normalized advantages");
  require(cfg.learning_rate >= 0.0 && std::isfinite(cfg.learning_rate), "learning_rate must be finite and >= 0");
  require(cfg.eta > 0.0, "eta must be > 0");
  require(cfg.beta >= 0.0, "beta must be >= 0");
  require(cfg.clip_low >= 0.0 && cfg.clip_high >= 0.0, "clip_low/clip_high must be >= 0");
  require(cfg.batch_size >= 1, "batch_size must be >= 1");
  require(cfg.num_prompts >= 1, "num_prompts must be >= 1");
  require(cfg.mini_batch_size >= 0, "mini_batch_size must be >= 0");
  require(cfg.epochs >= 1, "epochs must be >= 1");
  require(cfg.steps >= 0, "steps must be >= 0");
  require(cfg.eval_every >= 1, "eval_every must be >= 1");
  require(cfg.eval_samples_per_prompt >= 1, "eval_samples_per_prompt must be >= 1");
  require(cfg.eps_std >= 0.0, "eps_std must be >= 0");
  require(cfg.ref_init == "uniform" || cfg.ref_init == "random", "ref_init must be uniform | random");
  if (cfg.rollout_mode == RolloutMode::Exact) {
    require(cfg.algorithm == Algorithm::REINFORCE
                || (cfg.algorithm == Algorithm::PRL && cfg.order_mode == OrderMode::RawReward),
            "rollout_mode = exact supports only prl with raw_reward, or reinforce");
    require(cfg.eos_id < 0, "rollout_mode = exact needs a fixed-length task");
  }
  (void)Task(task_spec(cfg));
}

inline int resolved_order(const RunConfig& cfg, const Task& task)
{
  return cfg.policy_order > 0 ? cfg.policy_order : task.prompt_len() + task.response_len() - 1;
}

inline TabularPolicy make_reference_policy(const RunConfig& cfg, const Task& task)
{
  const int order = resolved_order(cfg, task);
  const int max_len = task.response_len() + (task.variable_length() ? 1 : 0);
  if (cfg.ref_init == "random") {
    return TabularPolicy::random(task.alphabet(), order, max_len, cfg.ref_init_scale, cfg.ref_init_seed);
  }
  return TabularPolicy(task.alphabet(), order, max_len);
}

/*
 * Optimizer
 */

class Optimizer
{
public:
  Optimizer(const RunConfig& cfg, std::size_t size)
      : kind_(cfg.optimizer), lr_(cfg.learning_rate), momentum_(cfg.momentum), beta1_(cfg.adam_beta1),
        beta2_(cfg.adam_beta2), eps_(cfg.adam_eps)
  {
    if (kind_ != OptimizerKind::SGD) {
      m_.assign(size, 0.0);
    }
    if (kind_ == OptimizerKind::Adam) {
      v_.assign(size, 0.0);
    }
  }

  /// Descent step: params -= lr * direction(grad).
  void step(std::span<double> params, std::span<const double> grad)
  {
    ++t_;
    switch (kind_) {
      case OptimizerKind::SGD:
        for (std::size_t i = 0; i < params.size(); ++i) {
          params[i] -= lr_ * grad[i];
        }
        break;
      case OptimizerKind::Momentum:
        for (std::size_t i = 0; i < params.size(); ++i) {
          m_[i] = momentum_ * m_[i] + grad[i];
          params[i] -= lr_ * m_[i];
        }
        break;
      case OptimizerKind::Adam: {
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
          m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
          v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
          params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
        }
        break;
      }
    }
  }

private:
  OptimizerKind kind_;
  double lr_;
  double momentum_;
  double beta1_;
  double beta2_;
  double eps_;
  std::int64_t t_{0};
  std::vector<double> m_;
  std::vector<double> v_;
};

/*
 * Evaluation
 */

struct EvalOptions
{
  const TabularPolicy* reference{nullptr};
  /// Oracle solutions aligned with the prompts; enables kl_to_opt.
  const std::vector<OracleSolution>* oracle{nullptr};
  double eta{100.0};
  double pass_threshold{kDefaultPassThreshold};
  std::size_t enumeration_cap{100'000};
};

namespace detail {

inline bool enumerable(const TabularPolicy& p, std::size_t length, std::size_t cap)
{
  if (p.alphabet().eos_id()) {
    return false;
  }
  std::size_t n = 1;
  for (std::size_t i = 0; i < length; ++i) {
    n *= p.vocab();
    if (n > cap) {
      return false;
    }
  }
  return true;
}

}  // namespace detail

/*!
 * @brief avg@n / pass@n and policy statistics over `samples_per_prompt` rollouts per prompt.
 *
 * Scores are computed per prompt, then averaged. KL to the reference is exact
 * when the response space is enumerable, otherwise the sampled estimator
 * mean_a sum_t ln(pi/pi_ref) ("sampled_k1").
 */
inline MetricsRecord evaluate(const TabularPolicy& policy, const Task& task, std::span<const TokenSeq> prompts,
                              int samples_per_prompt, std::uint64_t seed, const EvalOptions& opt = {})
{
  if (prompts.empty() || samples_per_prompt < 1) {
    throw ConfigError("evaluate: need at least one prompt and one sample per prompt");
  }
  MetricsRecord rec;
  const auto n = static_cast<std::size_t>(samples_per_prompt);
  const auto length = static_cast<std::size_t>(task.response_len());
  const bool exact = detail::enumerable(policy, length, opt.enumeration_cap);
  double entropy_sum = 0.0;
  std::size_t entropy_tokens = 0;
  double kl_sampled = 0.0;
  double reward_sum = 0.0;
  std::vector<double> rewards(n);

  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto& prompt = prompts[i];
    for (std::size_t k = 0; k < n; ++k) {
      const auto traj = sample(policy, prompt, derive_seed({seed, i, k, 0xe7a1ULL}));
      rewards[k] = task.reward(prompt, traj.response);
      reward_sum += rewards[k];
      const auto ctx = response_contexts(policy, prompt, traj.response);
      for (std::size_t t = 0; t < ctx.size(); ++t) {
        entropy_sum += categorical_entropy(policy.log_probs(ctx[t]));
        ++entropy_tokens;
      }
      if (opt.reference != nullptr && !exact) {
        const auto ref = logprob(*opt.reference, prompt, traj.response);
        for (std::size_t t = 0; t < ref.size(); ++t) {
          kl_sampled += traj.logp_cur[t] - ref[t];
        }
      }
    }
    const auto score = metrics_from_group(rewards, opt.pass_threshold);
    rec.avg_at_n += score.avg_at_n;
    rec.pass_at_n += score.pass_at_n;
  }
  const auto np = static_cast<double>(prompts.size());
  rec.avg_at_n /= np;
  rec.pass_at_n /= np;
  rec.mean_reward = reward_sum / (np * static_cast<double>(n));
  rec.policy_entropy = entropy_tokens == 0 ? 0.0 : entropy_sum / static_cast<double>(entropy_tokens);

  if (opt.reference != nullptr) {
    if (exact) {
      double kl = 0.0;
      for (const auto& prompt : prompts) {
        kl += sequence_kl_exact(policy, *opt.reference, prompt, length, opt.enumeration_cap);
      }
      rec.kl_to_ref = kl / np;
      rec.kl_estimator = "exact";
      if (std::isfinite(opt.eta)) {
        double q = 0.0;
        for (const auto& prompt : prompts) {
          q += objective_exact(policy, prompt, *opt.reference, task, opt.eta, length, opt.enumeration_cap);
        }
        rec.objective = q / np;
      }
    } else {
      rec.kl_to_ref = kl_sampled / (np * static_cast<double>(n));
      rec.kl_estimator = "sampled_k1";
    }
  }
  if (opt.oracle != nullptr && opt.oracle->size() == prompts.size()) {
    double kl = 0.0;
    for (const auto& sol : *opt.oracle) {
      kl += kl_to_optimal(policy, sol);
    }
    rec.kl_to_opt = kl / np;
  }
  return rec;
}

/*
 * Training
 */

struct RunManifest
{
  RunConfig config;
  std::string version{kVersion};
  std::string start_time;
  nlohmann::json formulas;
};

inline nlohmann::json to_json(const RunManifest& m)
{
  nlohmann::json cfg;
  for (const auto& f : config_fields()) {
    cfg[f.name] = f.get(m.config);
  }
  return {{"version", m.version},
          {"start_time", m.start_time},
          {"config", cfg},
          {"formulas", m.formulas},
          {"seeds",
           {{"seed", m.config.seed}, {"task_seed", m.config.task_seed}, {"ref_init_seed", m.config.ref_init_seed}}}};
}

/// Exact description of the weights and loss a config selects.
inline nlohmann::json describe_formulas(const RunConfig& cfg)
{
  nlohmann::json f;
  const std::string sum_from = cfg.index_convention == IndexConvention::Inclusive ? "j >= t" : "j > t";
  f["log_ratio"] = "k_t = ln pi(a_t|.) - ln pi_ref(a_t|.)";
  f["future_penalty"] = "S_t = (1/eta) * sum_{" + sum_from + "} k_j";
  f["segmentation"] = to_string(cfg.segmentation)
                      + (cfg.index_convention == IndexConvention::Inclusive
                             ? "; tokens of a step use S at the step's first token"
                             : "; tokens of a step use S right after the step's last token");
  switch (cfg.algorithm) {
    case Algorithm::PRL:
      switch (cfg.order_mode) {
        case OrderMode::RawReward: f["rho"] = "rho_t = r - S_t"; break;
        case OrderMode::AdvantageFirst: f["rho"] = "rho_t = (r - mean)/(std + eps_std) - S_t"; break;
        case OrderMode::ProcessRewardFirst:
          f["rho"] = "rho_t = norm(r - S_first) - (S_t - S_first), norm(x) = (x - mean)/(std + eps_std)";
          break;
      }
      break;
    case Algorithm::GRPO: f["rho"] = "rho_t = (r - mean)/(std + eps_std)"; break;
    case Algorithm::REINFORCE: f["rho"] = "rho_t = r"; break;
    case Algorithm::RAFT: f["rho"] = "rho_t = 1 on rollouts with r >= pass_threshold; others dropped"; break;
  }
  f["std"] = "population standard deviation over the prompt group";
  f["loss"] = "mean_i [ -(1/L_i) sum_t min(r_t rho_t, clip(r_t, 1-clip_low, 1+clip_high) rho_t) ]"
              " + beta * mean_i (1/L_i) sum_t KL_t(pi||pi_ref) - entropy_coef * mean_i (1/L_i) sum_t H_t";
  f["update"] = to_string(cfg.optimizer) + " descent on the loss";
  return f;
}

struct TrainResult
{
  TabularPolicy policy;
  std::vector<MetricsRecord> metrics;
  int steps_run{0};
  bool plateaued{false};
};

/*!
 * @brief Rollout / advantage / clipped-update loop over a fixed prompt pool.
 *
 * Each step snapshots pi_old, draws `group_size` rollouts per prompt with
 * seeds derived from (seed, step, prompt, rollout), computes rho for the
 * configured algorithm and applies `epochs` passes of mini-batch updates.
 */
class Trainer
{
public:
  explicit Trainer(RunConfig cfg) : cfg_(std::move(cfg))
  {
    validate(cfg_);
    task_ = Task(task_spec(cfg_));
    reference_ = make_reference_policy(cfg_, task_);
    policy_ = reference_;
    prompts_ = task_.sample_prompts(static_cast<std::size_t>(cfg_.num_prompts), derive_seed({cfg_.seed, 0x5eedULL}));
    optimizer_.emplace(cfg_, policy_.logits().size());

    const auto length = static_cast<std::size_t>(task_.response_len());
    if (std::isfinite(cfg_.eta) && detail::enumerable(reference_, length, cfg_.enumeration_cap)) {
      for (const auto& p : prompts_) {
        oracle_.push_back(solve(p, reference_, task_, cfg_.eta, length, cfg_.enumeration_cap));
      }
    }
  }

  [[nodiscard]] const RunConfig& config() const noexcept { return cfg_; }
  [[nodiscard]] const Task& task() const noexcept { return task_; }
  [[nodiscard]] const TabularPolicy& policy() const noexcept { return policy_; }
  [[nodiscard]] TabularPolicy& policy() noexcept { return policy_; }
  [[nodiscard]] const TabularPolicy& reference() const noexcept { return reference_; }
  [[nodiscard]] const std::vector<TokenSeq>& prompts() const noexcept { return prompts_; }
  [[nodiscard]] const std::vector<OracleSolution>& oracle() const noexcept { return oracle_; }

  struct Batch
  {
    std::vector<Trajectory> trajectories;
    std::vector<std::vector<double>> rho;
    std::vector<double> weights;  // empty: uniform
    double mean_reward{0.0};
  };

  /// Rollouts and weights for one step, under the current policy.
  [[nodiscard]] Batch collect(std::int64_t step) const
  {
    return cfg_.rollout_mode == RolloutMode::Exact ? collect_exact() : collect_sampled(step);
  }

  /// One full iteration; returns the batch mean reward.
  double step(std::int64_t step_index)
  {
    const Batch batch = collect(step_index);
    update(batch, step_index);
    return batch.mean_reward;
  }

  [[nodiscard]] MetricsRecord evaluate_now(std::int64_t step_index, double mean_reward) const
  {
    EvalOptions opt;
    opt.reference = &reference_;
    opt.oracle = oracle_.empty() ? nullptr : &oracle_;
    opt.eta = cfg_.eta;
    opt.pass_threshold = cfg_.pass_threshold;
    opt.enumeration_cap = cfg_.enumeration_cap;
    auto rec = evaluate(policy_, task_, prompts_, cfg_.eval_samples_per_prompt, derive_seed({cfg_.seed, 0xe7a1ULL}),
                        opt);
    rec.step = step_index;
    if (step_index > 0) {
      rec.mean_reward = mean_reward;
    }
    return rec;
  }

  TrainResult run()
  {
    namespace fs = std::filesystem;
    const auto start = std::chrono::steady_clock::now();
    const bool write = !cfg_.output_dir.empty();
    std::ofstream jsonl;
    std::ofstream csv;
    if (write) {
      fs::create_directories(fs::path(cfg_.output_dir) / "checkpoints");
      RunManifest manifest{cfg_, kVersion, now_string(), describe_formulas(cfg_)};
      std::ofstream(fs::path(cfg_.output_dir) / "manifest.json") << to_json(manifest).dump(2) << '\n';
      jsonl.open(fs::path(cfg_.output_dir) / "metrics.jsonl");
      csv.open(fs::path(cfg_.output_dir) / "metrics.csv");
      csv << kMetricsCsvHeader << '\n';
    }

    TrainResult result;
    auto emit = [&](MetricsRecord rec) {
      rec.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      if (write) {
        jsonl << to_json(rec).dump() << '\n' << std::flush;
        csv << to_csv_row(rec) << '\n' << std::flush;
      }
      result.metrics.push_back(std::move(rec));
    };

    emit(evaluate_now(0, 0.0));
    double best = -std::numeric_limits<double>::infinity();
    int since_best = 0;
    double mean_reward = 0.0;
    int s = 1;
    for (; s <= cfg_.steps; ++s) {
      mean_reward = step(s);
      const bool last = s == cfg_.steps;
      bool stop = false;
      if (cfg_.plateau_patience > 0) {
        if (mean_reward > best + cfg_.plateau_min_delta) {
          best = mean_reward;
          since_best = 0;
        } else if (++since_best >= cfg_.plateau_patience) {
          stop = true;
          result.plateaued = true;
        }
      }
      if (s % cfg_.eval_every == 0 || last || stop) {
        emit(evaluate_now(s, mean_reward));
      }
      if (write && cfg_.checkpoint_every > 0 && s % cfg_.checkpoint_every == 0) {
        char name[64];
        std::snprintf(name, sizeof(name), "step_%06d.json", s);
        save_checkpoint(policy_, (fs::path(cfg_.output_dir) / "checkpoints" / name).string());
      }
      if (stop) {
        ++s;
        break;
      }
    }
    result.steps_run = s - 1;
    if (write) {
      save_checkpoint(policy_, (fs::path(cfg_.output_dir) / "checkpoints" / "final.json").string());
      nlohmann::json summary{{"end_time", now_string()},
                             {"steps_run", result.steps_run},
                             {"plateaued", result.plateaued},
                             {"final", to_json(result.metrics.back())}};
      std::ofstream(fs::path(cfg_.output_dir) / "run_summary.json") << summary.dump(2) << '\n';
    }
    result.policy = policy_;
    return result;
  }

private:
  static std::string now_string()
  {
    const auto t = std::time(nullptr);
    char buf[64];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
  }

  [[nodiscard]] std::vector<std::size_t> batch_prompt_indices(std::int64_t step) const
  {
    const auto pool = prompts_.size();
    std::vector<std::size_t> idx(pool);
    for (std::size_t i = 0; i < pool; ++i) {
      idx[i] = i;
    }
    const auto want = static_cast<std::size_t>(cfg_.batch_size);
    if (want >= pool) {
      return idx;
    }
    Rng rng(derive_seed({cfg_.seed, static_cast<std::uint64_t>(step), 0xba7cULL}));
    for (std::size_t i = 0; i < want; ++i) {
      std::swap(idx[i], idx[i + uniform_index(rng, pool - i)]);
    }
    idx.resize(want);
    return idx;
  }

  [[nodiscard]] AdvantageConfig advantage_config() const
  {
    AdvantageConfig a;
    a.eta = cfg_.eta;
    a.segmentation = cfg_.segmentation;
    a.order_mode = cfg_.order_mode;
    a.convention = cfg_.index_convention;
    a.eps_std = cfg_.eps_std;
    a.beta = cfg_.beta;
    return a;
  }

  [[nodiscard]] Trajectory rollout(const TokenSeq& prompt, std::uint64_t seed, std::int64_t group) const
  {
    auto traj = sample(policy_, prompt, seed);
    traj.logp_old = traj.logp_cur;
    traj.logp_ref = logprob(reference_, prompt, traj.response);
    traj.reward = task_.reward(prompt, traj.response);
    traj.group_id = group;
    return traj;
  }

  /// rho for one prompt group under the configured algorithm.
  [[nodiscard]] std::vector<std::vector<double>> group_weights(std::span<const Trajectory> group) const
  {
    std::vector<std::vector<double>> rho(group.size());
    switch (cfg_.algorithm) {
      case Algorithm::PRL: {
        auto adv = process_advantages(group, advantage_config());
        for (std::size_t i = 0; i < group.size(); ++i) {
          rho[i] = std::move(adv[i].rho);
        }
        break;
      }
      case Algorithm::GRPO: {
        std::vector<double> rewards;
        for (const auto& t : group) {
          rewards.push_back(t.reward);
        }
        const auto a = group_normalize(rewards, cfg_.eps_std);
        for (std::size_t i = 0; i < group.size(); ++i) {
          rho[i].assign(group[i].response.size(), a[i]);
        }
        break;
      }
      case Algorithm::REINFORCE:
      case Algorithm::RAFT:
        for (std::size_t i = 0; i < group.size(); ++i) {
          const double w = cfg_.algorithm == Algorithm::REINFORCE ? group[i].reward : 1.0;
          rho[i].assign(group[i].response.size(), w);
        }
        break;
    }
    return rho;
  }

  [[nodiscard]] Batch collect_sampled(std::int64_t step) const
  {
    Batch batch;
    const auto n = static_cast<std::size_t>(cfg_.group_size);
    const auto indices = batch_prompt_indices(step);
    double reward_sum = 0.0;
    std::size_t count = 0;
    for (std::size_t b = 0; b < indices.size(); ++b) {
      const auto pi = indices[b];
      const auto group_id = static_cast<std::int64_t>(static_cast<std::size_t>(step) * prompts_.size() + pi);
      std::vector<Trajectory> group;
      group.reserve(n);
      for (std::size_t k = 0; k < n; ++k) {
        group.push_back(rollout(prompts_[pi], derive_seed({cfg_.seed, static_cast<std::uint64_t>(step), pi, k}),
                                group_id));
        reward_sum += group.back().reward;
        ++count;
      }
      auto rho = group_weights(group);
      for (std::size_t k = 0; k < n; ++k) {
        if (cfg_.algorithm == Algorithm::RAFT && group[k].reward < cfg_.pass_threshold) {
          continue;
        }
        batch.trajectories.push_back(std::move(group[k]));
        batch.rho.push_back(std::move(rho[k]));
      }
    }
    batch.mean_reward = count == 0 ? 0.0 : reward_sum / static_cast<double>(count);
    return batch;
  }

  /// Every response of every prompt, weighted by pi(a|x) / #prompts.
  [[nodiscard]] Batch collect_exact() const
  {
    Batch batch;
    const auto length = static_cast<std::size_t>(task_.response_len());
    const auto vocab = policy_.vocab();
    const auto count = detail::checked_power(vocab, length, cfg_.enumeration_cap);
    double reward_sum = 0.0;
    for (std::size_t pi = 0; pi < prompts_.size(); ++pi) {
      for (std::size_t i = 0; i < count; ++i) {
        auto traj = Trajectory{};
        traj.prompt = prompts_[pi];
        traj.response = detail::decode_index(i, vocab, length);
        traj.logp_cur = logprob(policy_, traj.prompt, traj.response);
        traj.logp_old = traj.logp_cur;
        traj.logp_ref = logprob(reference_, traj.prompt, traj.response);
        traj.reward = task_.reward(traj.prompt, traj.response);
        traj.group_id = static_cast<std::int64_t>(pi);
        double lp = 0.0;
        for (double x : traj.logp_cur) {
          lp += x;
        }
        const double w = std::exp(lp) / static_cast<double>(prompts_.size());
        reward_sum += w * traj.reward;
        batch.weights.push_back(w);
        batch.trajectories.push_back(std::move(traj));
      }
    }
    for (const auto& t : batch.trajectories) {
      batch.rho.push_back(group_weights(std::span<const Trajectory>(&t, 1)).front());
    }
    batch.mean_reward = reward_sum;
    return batch;
  }

  void update(const Batch& batch, std::int64_t step)
  {
    if (batch.trajectories.empty()) {
      return;
    }
    const auto total = batch.trajectories.size();
    const auto chunk = cfg_.mini_batch_size > 0 ? std::min<std::size_t>(cfg_.mini_batch_size, total) : total;
    std::vector<std::vector<double>> old_logp;
    old_logp.reserve(total);
    for (const auto& t : batch.trajectories) {
      old_logp.push_back(t.logp_old);
    }
    const ClipRange clip{cfg_.clip_low, cfg_.clip_high};
    for (const auto& row : batch.rho) {
      for (double x : row) {
        if (!std::isfinite(x)) {
          dump_diagnostic(batch, step);
          throw NumericError("non-finite advantage at step " + std::to_string(step));
        }
      }
    }

    for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
      for (std::size_t begin = 0; begin < total; begin += chunk) {
        const auto len = std::min(chunk, total - begin);
        std::vector<double> weights;
        if (!batch.weights.empty()) {
          // Exact mode: the batch weights already form the expectation.
          weights.assign(batch.weights.begin() + static_cast<std::ptrdiff_t>(begin),
                         batch.weights.begin() + static_cast<std::ptrdiff_t>(begin + len));
        }
        SurrogateOptions opt;
        opt.weights = weights;
        opt.beta = cfg_.beta;
        opt.reference = &reference_;
        opt.entropy_coef = cfg_.entropy_coef;
        const auto res = surrogate_grad(policy_, std::span(batch.trajectories).subspan(begin, len),
                                        std::span(batch.rho).subspan(begin, len),
                                        std::span<const std::vector<double>>(old_logp).subspan(begin, len), clip, opt);
        bool finite = std::isfinite(res.loss);
        for (double g : res.grad.values) {
          finite = finite && std::isfinite(g);
        }
        if (!finite) {
          dump_diagnostic(batch, step);
          throw NumericError("non-finite loss or gradient at step " + std::to_string(step));
        }
        optimizer_->step(policy_.logits(), res.grad.values);
        for (double x : policy_.logits()) {
          if (!std::isfinite(x)) {
            dump_diagnostic(batch, step);
            throw NumericError("non-finite policy parameters after the update at step " + std::to_string(step));
          }
        }
      }
    }
  }

  void dump_diagnostic(const Batch& batch, std::int64_t step) const
  {
    if (cfg_.output_dir.empty()) {
      return;
    }
    std::filesystem::create_directories(cfg_.output_dir);
    std::ofstream out(std::filesystem::path(cfg_.output_dir) / "diagnostic_batch.jsonl");
    for (std::size_t i = 0; i < batch.trajectories.size(); ++i) {
      auto j = to_json(batch.trajectories[i]);
      j["rho"] = batch.rho[i];
      j["step"] = step;
      out << j.dump() << '\n';
    }
  }

  RunConfig cfg_;
  Task task_;
  TabularPolicy reference_;
  TabularPolicy policy_;
  std::vector<TokenSeq> prompts_;
  std::optional<Optimizer> optimizer_;
  std::vector<OracleSolution> oracle_;
};

/// Runs the configured algorithm end to end.
inline TrainResult train(const RunConfig& cfg)
{
  Trainer trainer(cfg);
  return trainer.run();
}

/// Same loop for the comparison algorithms (GRPO, REINFORCE, RAFT).
inline TrainResult run_baseline(const RunConfig& cfg)
{
  if (cfg.algorithm == Algorithm::PRL) {
    throw ConfigError("run_baseline expects algorithm grpo | reinforce | raft");
  }
  return train(cfg);
}

}  // namespace prl

#endif  // PRL_TRAINER_HPP_
