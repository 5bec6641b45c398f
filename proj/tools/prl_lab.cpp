// prl_lab: train, evaluate and inspect tabular process-reward policy learners.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "prl/prl_lab.hpp"

namespace {

struct CommonOptions
{
  std::string config_path;
  std::vector<std::string> overrides;
  std::string output_dir;
  long long seed{-1};
  int steps{-1};
};

void add_common(CLI::App* cmd, CommonOptions& o)
{
  cmd->add_option("-c,--config", o.config_path, "key = value run config file")->check(CLI::ExistingFile);
  cmd->add_option("-s,--set", o.overrides, "override a config key: --set key=value (repeatable)");
  cmd->add_option("--seed", o.seed, "override the run seed");
}

prl::RunConfig resolve_config(const CommonOptions& o)
{
  prl::RunConfig cfg;
  if (!o.config_path.empty()) {
    cfg = prl::load_run_config(o.config_path);
  }
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      throw prl::ConfigError("--set expects key=value, got '" + kv + "'");
    }
    prl::set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed >= 0) {
    cfg.seed = static_cast<std::uint64_t>(o.seed);
  }
  if (o.steps >= 0) {
    cfg.steps = o.steps;
  }
  if (!o.output_dir.empty()) {
    cfg.output_dir = o.output_dir;
  }
  return cfg;
}

prl::TokenSeq parse_tokens(const std::string& text)
{
  prl::TokenSeq out;
  std::string item;
  for (char ch : text + ",") {
    if (ch == ',' || ch == ' ') {
      if (!item.empty()) {
        out.push_back(static_cast<prl::Token>(prl::detail::parse_int("tokens", item)));
        item.clear();
      }
    } else {
      item += ch;
    }
  }
  return out;
}

int cmd_train(const CommonOptions& o)
{
  const auto cfg = resolve_config(o);
  const auto result = prl::train(cfg);
  const auto& last = result.metrics.back();
  std::cout << prl::to_json(last).dump() << '\n';
  return 0;
}

int cmd_eval(const CommonOptions& o, const std::string& checkpoint, int samples)
{
  const auto cfg = resolve_config(o);
  prl::validate(cfg);
  const prl::Task task(prl::task_spec(cfg));
  const auto policy = prl::load_checkpoint(checkpoint);
  const auto reference = prl::make_reference_policy(cfg, task);
  const auto prompts =
      task.sample_prompts(static_cast<std::size_t>(cfg.num_prompts), prl::derive_seed({cfg.seed, 0x5eedULL}));

  std::vector<prl::OracleSolution> oracle;
  const auto length = static_cast<std::size_t>(task.response_len());
  if (!task.variable_length()) {
    try {
      for (const auto& p : prompts) {
        oracle.push_back(prl::solve(p, reference, task, cfg.eta, length, cfg.enumeration_cap));
      }
    } catch (const prl::ConfigError&) {
      oracle.clear();
    }
  }
  prl::EvalOptions opt;
  opt.reference = &reference;
  opt.oracle = oracle.empty() ? nullptr : &oracle;
  opt.eta = cfg.eta;
  opt.pass_threshold = cfg.pass_threshold;
  opt.enumeration_cap = cfg.enumeration_cap;
  const int n = samples > 0 ? samples : cfg.eval_samples_per_prompt;
  const auto rec = prl::evaluate(policy, task, prompts, n, prl::derive_seed({cfg.seed, 0xe7a1ULL}), opt);
  std::cout << prl::to_json(rec).dump() << '\n';
  return 0;
}

int cmd_oracle(const CommonOptions& o, const std::string& prompt_text, int top_k)
{
  const auto cfg = resolve_config(o);
  prl::validate(cfg);
  const prl::Task task(prl::task_spec(cfg));
  const auto reference = prl::make_reference_policy(cfg, task);
  const auto prompt = prompt_text.empty()
                          ? task.sample_prompts(1, prl::derive_seed({cfg.seed, 0x5eedULL})).front()
                          : parse_tokens(prompt_text);
  task.check_prompt(prompt);
  const auto length = static_cast<std::size_t>(task.response_len());
  const auto sol = prl::solve(prompt, reference, task, cfg.eta, length, cfg.enumeration_cap);

  std::vector<std::size_t> order(sol.num_sequences());
  for (std::size_t i = 0; i < order.size(); ++i) {
    order[i] = i;
  }
  const auto& last = sol.log_opt_prefix.back();
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return last[a] > last[b]; });
  nlohmann::json top = nlohmann::json::array();
  for (std::size_t i = 0; i < order.size() && static_cast<int>(i) < top_k; ++i) {
    top.push_back({{"response", sol.sequence(length, order[i])},
                   {"prob", std::exp(last[order[i]])},
                   {"reward", sol.reward[order[i]]}});
  }
  nlohmann::json out{{"prompt", prompt},
                     {"eta", cfg.eta},
                     {"length", length},
                     {"Z", sol.Z()},
                     {"log_Z", sol.log_Z},
                     {"C", sol.C},
                     {"top", top},
                     {"residuals", prl::to_json(prl::check_theorems(sol, reference))}};
  std::cout << out.dump(2) << '\n';
  return 0;
}

/// Central finite differences of the surrogate loss against its analytic gradient.
int cmd_gradcheck(const CommonOptions& o, int batches, double h)
{
  auto cfg = resolve_config(o);
  prl::validate(cfg);
  const prl::Task task(prl::task_spec(cfg));
  const auto reference = prl::make_reference_policy(cfg, task);
  const int order = prl::resolved_order(cfg, task);
  const int max_len = reference.max_len();
  double worst = 0.0;
  for (int b = 0; b < batches; ++b) {
    auto policy = prl::TabularPolicy::random(task.alphabet(), order, max_len, 1.0,
                                             prl::derive_seed({cfg.seed, static_cast<std::uint64_t>(b), 0x9cULL}));
    const auto prompts = task.sample_prompts(2, prl::derive_seed({cfg.seed, static_cast<std::uint64_t>(b), 1}));
    std::vector<prl::Trajectory> batch;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      for (std::uint64_t k = 0; k < 3; ++k) {
        auto t = prl::sample(policy, prompts[i], prl::derive_seed({cfg.seed, static_cast<std::uint64_t>(b), i, k}));
        t.logp_old = t.logp_cur;
        t.logp_ref = prl::logprob(reference, t.prompt, t.response);
        t.reward = task.reward(t.prompt, t.response);
        batch.push_back(t);
      }
    }
    prl::AdvantageConfig acfg;
    acfg.eta = cfg.eta;
    acfg.order_mode = prl::OrderMode::RawReward;
    acfg.segmentation = cfg.segmentation;
    acfg.convention = cfg.index_convention;
    std::vector<std::vector<double>> rho;
    std::vector<std::vector<double>> old;
    for (const auto& adv : prl::process_advantages(batch, acfg)) {
      rho.push_back(adv.rho);
    }
    for (const auto& t : batch) {
      old.push_back(t.logp_old);
    }
    const auto res = prl::surrogate_grad(policy, batch, rho, old, prl::ClipRange::none());
    auto logits = policy.logits();
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const double keep = logits[i];
      logits[i] = keep + h;
      const double up = prl::surrogate_grad(policy, batch, rho, old, prl::ClipRange::none()).loss;
      logits[i] = keep - h;
      const double down = prl::surrogate_grad(policy, batch, rho, old, prl::ClipRange::none()).loss;
      logits[i] = keep;
      const double fd = (up - down) / (2.0 * h);
      const double g = res.grad.values[i];
      worst = std::max(worst, std::abs(fd - g) / std::max(1.0, std::abs(g)));
    }
  }
  nlohmann::json out{{"batches", batches}, {"h", h}, {"max_rel_error", worst}};
  std::cout << out.dump() << '\n';
  return 0;
}

int cmd_gen_dataset(const CommonOptions& o, std::size_t n, const std::string& out_path, bool allow_empty)
{
  const auto cfg = resolve_config(o);
  prl::validate(cfg);
  const prl::Task task(prl::task_spec(cfg));
  const auto prompts = task.sample_prompts(n, prl::derive_seed({cfg.seed, 0x5eedULL}), allow_empty);
  std::vector<prl::Trajectory> records;
  for (const auto& p : prompts) {
    prl::Trajectory t;
    t.prompt = p;
    records.push_back(t);
  }
  if (out_path.empty() || out_path == "-") {
    prl::write_trajectories(std::cout, records);
  } else {
    std::ofstream out(out_path);
    if (!out) {
      throw prl::ConfigError("cannot write " + out_path);
    }
    prl::write_trajectories(out, records);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv)
{
  CLI::App app{"Tabular process-reward policy learning lab"};
  app.set_version_flag("--version", std::string(prl::kVersion));
  app.require_subcommand(1);

  CommonOptions train_opt;
  auto* train = app.add_subcommand("train", "run a training loop from a config");
  add_common(train, train_opt);
  train->add_option("-o,--output-dir", train_opt.output_dir, "directory for manifest, metrics and checkpoints");
  train->add_option("--steps", train_opt.steps, "override the step budget");

  CommonOptions eval_opt;
  std::string checkpoint;
  int eval_samples = 0;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the config's prompt pool");
  add_common(eval, eval_opt);
  eval->add_option("checkpoint", checkpoint, "policy checkpoint (JSON)")->required()->check(CLI::ExistingFile);
  eval->add_option("-n,--samples", eval_samples, "samples per prompt (default: eval_samples_per_prompt)");

  CommonOptions oracle_opt;
  std::string prompt_text;
  int top_k = 5;
  auto* oracle = app.add_subcommand("oracle", "solve for the optimal policy and report identity residuals");
  add_common(oracle, oracle_opt);
  oracle->add_option("-p,--prompt", prompt_text, "comma-separated prompt tokens (default: first sampled prompt)");
  oracle->add_option("-k,--top-k", top_k, "number of most likely sequences to print");

  CommonOptions grad_opt;
  int batches = 10;
  double h = 1e-6;
  auto* grad = app.add_subcommand("gradcheck", "compare the analytic surrogate gradient with finite differences");
  add_common(grad, grad_opt);
  grad->add_option("-b,--batches", batches, "random batches to check");
  grad->add_option("--step", h, "finite-difference step");

  CommonOptions gen_opt;
  std::size_t count = 16;
  std::string out_path;
  bool allow_empty = false;
  auto* gen = app.add_subcommand("gen-dataset", "write sampled prompts as prompt-only trajectory records");
  add_common(gen, gen_opt);
  gen->add_option("-n,--count", count, "number of prompts");
  gen->add_option("-o,--out", out_path, "output JSONL file (default: stdout)");
  gen->add_flag("--allow-empty", allow_empty, "accept --count 0");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train) {
      return cmd_train(train_opt);
    }
    if (*eval) {
      return cmd_eval(eval_opt, checkpoint, eval_samples);
    }
    if (*oracle) {
      return cmd_oracle(oracle_opt, prompt_text, top_k);
    }
    if (*grad) {
      return cmd_gradcheck(grad_opt, batches, h);
    }
    if (*gen) {
      return cmd_gen_dataset(gen_opt, count, out_path, allow_empty);
    }
  } catch (const prl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const prl::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
