#include <catch_amalgamated.hpp>

#include <sstream>

#include "prl/core.hpp"
#include "prl/records.hpp"
#include "prl/rng.hpp"

using namespace prl;
using Catch::Approx;

TEST_CASE("alphabet validates ids", "[core]")
{
  CHECK_NOTHROW(Alphabet(2));
  CHECK_THROWS_AS(Alphabet(1), ConfigError);
  CHECK_THROWS_AS(Alphabet(4, 4), ConfigError);      // eos out of range (would collide with bos)
  CHECK_THROWS_AS(Alphabet(4, 1, 1), ConfigError);   // eos == delimiter
  const Alphabet a(4, 3, 2);
  CHECK(a.bos_id() == 4);
  CHECK_FALSE(a.is_ordinary(a.bos_id()));
  CHECK(a.is_ordinary(3));
}

TEST_CASE("segment partitions", "[core]")
{
  CHECK(segment(5, FixedLength{2}, {}).boundaries == std::vector<std::size_t>{2, 4, 5});
  CHECK(segment(4, TokenLevel{}, {}).boundaries == std::vector<std::size_t>{1, 2, 3, 4});
  const TokenSeq resp{7, 3, 9, 3, 5};
  CHECK(segment(5, Delimiter{3}, resp).boundaries == std::vector<std::size_t>{2, 4, 5});
  // delimiter as the last token closes exactly once
  const TokenSeq tail{1, 3};
  CHECK(segment(2, Delimiter{3}, tail).boundaries == std::vector<std::size_t>{2});
  CHECK(segment(3, FixedLength{7}, {}).boundaries == std::vector<std::size_t>{3});
}

TEST_CASE("segment rejects empty responses", "[core]")
{
  CHECK_THROWS_WITH(segment(0, TokenLevel{}, {}), Catch::Matchers::ContainsSubstring("empty response"));
  CHECK_THROWS_AS(segment(3, FixedLength{0}, {}), ConfigError);
}

TEST_CASE("segment spans cover every index once", "[core][property]")
{
  Rng rng(11);
  for (int trial = 0; trial < 500; ++trial) {
    const auto len = 1 + uniform_index(rng, 12);
    TokenSeq resp(len);
    for (auto& t : resp) {
      t = static_cast<Token>(uniform_index(rng, 4));
    }
    const SegmentationMode modes[] = {TokenLevel{}, FixedLength{1 + static_cast<int>(uniform_index(rng, 5))},
                                      Delimiter{static_cast<Token>(uniform_index(rng, 4))}};
    for (const auto& mode : modes) {
      const auto seg = segment(len, mode, resp);
      REQUIRE(seg.boundaries.back() == len);
      std::vector<int> hits(len, 0);
      for (std::size_t s = 0; s < seg.num_steps(); ++s) {
        REQUIRE(seg.step_begin(s) < seg.step_end(s));
        for (auto i = seg.step_begin(s); i < seg.step_end(s); ++i) {
          ++hits[i];
        }
      }
      for (int h : hits) {
        REQUIRE(h == 1);
      }
    }
  }
}

TEST_CASE("segmentation mode text round trip", "[core]")
{
  for (const std::string text : {"token", "fixed:3", "delimiter:2"}) {
    CHECK(to_string(parse_segmentation(text)) == text);
  }
  CHECK_THROWS_AS(parse_segmentation("fixed:0"), ConfigError);
  CHECK_THROWS_AS(parse_segmentation("words"), ConfigError);
}

TEST_CASE("metrics_from_group", "[core]")
{
  const std::vector<double> a{1, 0, 0, 0, 0, 0, 0, 1};
  auto s = metrics_from_group(a, 0.5);
  CHECK(s.avg_at_n == 0.25);
  CHECK(s.pass_at_n == 1.0);
  s = metrics_from_group(std::vector<double>{0, 0, 0});
  CHECK(s.avg_at_n == 0.0);
  CHECK(s.pass_at_n == 0.0);
  s = metrics_from_group(std::vector<double>{1, 1, 1, 1});
  CHECK(s.avg_at_n == 1.0);
  CHECK(s.pass_at_n == 1.0);
  CHECK_THROWS_AS(metrics_from_group(std::vector<double>{}), Error);
}

TEST_CASE("pass dominates avg for binary groups", "[core][property]")
{
  Rng rng(5);
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<double> r(1 + uniform_index(rng, 10));
    for (auto& x : r) {
      x = static_cast<double>(uniform_index(rng, 2));
    }
    const auto s = metrics_from_group(r);
    REQUIRE(s.pass_at_n >= s.avg_at_n);
  }
}

TEST_CASE("trajectory validation", "[core]")
{
  Trajectory t;
  t.prompt = {0};
  t.response = {1, 2};
  t.logp_cur = t.logp_old = t.logp_ref = {-0.5, -0.1};
  t.reward = 1.0;
  CHECK_NOTHROW(t.validate());
  auto bad = t;
  bad.logp_ref = {-0.5};
  CHECK_THROWS(bad.validate());
  bad = t;
  bad.logp_cur[0] = 0.1;
  CHECK_THROWS(bad.validate());
  bad = t;
  bad.reward = 1.5;
  CHECK_THROWS(bad.validate());
  bad = t;
  bad.response = {2, 1};
  CHECK_THROWS(bad.validate(Token{2}));  // eos before the end
  CHECK_NOTHROW(t.validate(Token{2}));
}

TEST_CASE("trajectory records round trip", "[core][io]")
{
  Trajectory t;
  t.prompt = {3, 1};
  t.response = {0, 2, 1};
  t.logp_cur = {-0.1, -0.2, -0.30000000000000004};
  t.logp_old = {-0.1, -0.25, -0.3};
  t.logp_ref = {-1.0986122886681098, -1.0986122886681098, -1.0986122886681098};
  t.reward = 1.0;
  t.group_id = 42;
  std::stringstream buf;
  write_trajectories(buf, {t, t});
  const auto back = read_trajectories(buf);
  REQUIRE(back.size() == 2);
  CHECK(back[1].prompt == t.prompt);
  CHECK(back[1].response == t.response);
  CHECK(back[1].logp_cur == t.logp_cur);
  CHECK(back[1].logp_old == t.logp_old);
  CHECK(back[1].logp_ref == t.logp_ref);
  CHECK(back[1].reward == t.reward);
  CHECK(back[1].group_id == t.group_id);

  const auto j = to_json(t);
  for (const char* key : {"prompt", "response", "logp_cur", "logp_old", "logp_ref", "reward", "group_id"}) {
    CHECK(j.contains(key));
  }
  std::stringstream broken("{\"prompt\": [1]}\n");
  CHECK_THROWS_AS(read_trajectories(broken), ConfigError);
}

TEST_CASE("metrics record json and csv", "[core][io]")
{
  MetricsRecord m;
  m.step = 7;
  m.mean_reward = 0.5;
  m.avg_at_n = 0.25;
  m.pass_at_n = 0.75;
  m.policy_entropy = 1.0;
  m.kl_to_ref = 0.1;
  m.kl_to_opt = 0.2;
  const auto back = metrics_from_json(to_json(m));
  CHECK(back.step == 7);
  CHECK(back.kl_to_opt.value() == 0.2);
  CHECK_FALSE(back.objective.has_value());
  CHECK(to_csv_row(m) == "7,0.5,0.25,0.75,1,0.10000000000000001,0.20000000000000001");
  m.kl_to_opt.reset();
  CHECK(to_csv_row(m).back() == ',');
}

TEST_CASE("seed derivation", "[core][rng]")
{
  CHECK(derive_seed({1, 2}) == derive_seed({1, 2}));
  CHECK(derive_seed({1, 2}) != derive_seed({2, 1}));
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const double u = uniform01(rng);
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    REQUIRE(uniform_index(rng, 7) < 7);
  }
}
