#ifndef PRL_RECORDS_HPP_
#define PRL_RECORDS_HPP_

#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "prl/core.hpp"
#include "prl/prl.hpp"

namespace prl {

/*
 * Trajectory records: one JSON object per line with the fields
 *   prompt, response, logp_cur, logp_old, logp_ref, reward, group_id
 * Advantage dumps add rho, segmentation, order_mode and eta.
 */

inline nlohmann::json to_json(const Trajectory& t)
{
  return {{"prompt", t.prompt},     {"response", t.response}, {"logp_cur", t.logp_cur}, {"logp_old", t.logp_old},
          {"logp_ref", t.logp_ref}, {"reward", t.reward},     {"group_id", t.group_id}};
}

inline nlohmann::json to_json(const Trajectory& t, const AdvantageVector& adv)
{
  auto j = to_json(t);
  j["rho"] = adv.rho;
  j["segmentation"] = {{"mode", to_string(adv.segmentation.mode)}, {"boundaries", adv.segmentation.boundaries}};
  j["order_mode"] = to_string(adv.order_mode);
  j["eta"] = std::isinf(adv.eta) ? nlohmann::json("inf") : nlohmann::json(adv.eta);
  j["beta"] = adv.beta;
  return j;
}

inline Trajectory trajectory_from_json(const nlohmann::json& j)
{
  Trajectory t;
  j.at("prompt").get_to(t.prompt);
  j.at("response").get_to(t.response);
  j.at("logp_cur").get_to(t.logp_cur);
  j.at("logp_old").get_to(t.logp_old);
  j.at("logp_ref").get_to(t.logp_ref);
  t.reward = j.at("reward").get<double>();
  t.group_id = j.at("group_id").get<std::int64_t>();
  return t;
}

inline void write_trajectories(std::ostream& out, const std::vector<Trajectory>& batch)
{
  for (const auto& t : batch) {
    out << to_json(t).dump() << '\n';
  }
}

inline std::vector<Trajectory> read_trajectories(std::istream& in)
{
  std::vector<Trajectory> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) {
      continue;
    }
    try {
      out.push_back(trajectory_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("trajectory record " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

/*
 * Metrics records
 */

inline nlohmann::json to_json(const MetricsRecord& m)
{
  nlohmann::json j{{"step", m.step},
                   {"mean_reward", m.mean_reward},
                   {"avg_at_n", m.avg_at_n},
                   {"pass_at_n", m.pass_at_n},
                   {"policy_entropy", m.policy_entropy},
                   {"kl_to_ref", m.kl_to_ref},
                   {"kl_estimator", m.kl_estimator},
                   {"kl_to_opt", m.kl_to_opt ? nlohmann::json(*m.kl_to_opt) : nlohmann::json(nullptr)},
                   {"objective", m.objective ? nlohmann::json(*m.objective) : nlohmann::json(nullptr)},
                   {"wall_time_s", m.wall_time_s}};
  return j;
}

inline MetricsRecord metrics_from_json(const nlohmann::json& j)
{
  MetricsRecord m;
  m.step = j.at("step").get<std::int64_t>();
  m.mean_reward = j.at("mean_reward").get<double>();
  m.avg_at_n = j.at("avg_at_n").get<double>();
  m.pass_at_n = j.at("pass_at_n").get<double>();
  m.policy_entropy = j.at("policy_entropy").get<double>();
  m.kl_to_ref = j.at("kl_to_ref").get<double>();
  m.kl_estimator = j.value("kl_estimator", std::string{"exact"});
  if (j.contains("kl_to_opt") && !j.at("kl_to_opt").is_null()) {
    m.kl_to_opt = j.at("kl_to_opt").get<double>();
  }
  if (j.contains("objective") && !j.at("objective").is_null()) {
    m.objective = j.at("objective").get<double>();
  }
  m.wall_time_s = j.value("wall_time_s", 0.0);
  return m;
}

inline constexpr const char* kMetricsCsvHeader =
    "step,mean_reward,avg_at_n,pass_at_n,entropy,kl_to_ref,kl_to_opt";

inline std::string to_csv_row(const MetricsRecord& m)
{
  char buf[512];
  std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g,%.17g,%.17g,%.17g,", static_cast<long long>(m.step),
                m.mean_reward, m.avg_at_n, m.pass_at_n, m.policy_entropy, m.kl_to_ref);
  std::string row = buf;
  if (m.kl_to_opt) {
    std::snprintf(buf, sizeof(buf), "%.17g", *m.kl_to_opt);
    row += buf;
  }
  return row;
}

}  // namespace prl

#endif  // PRL_RECORDS_HPP_
