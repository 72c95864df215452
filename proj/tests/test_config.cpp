#include <doctest.h>

#include "shadowalign/config.hpp"
#include "shadowalign/error.hpp"

using namespace shadowalign;

TEST_CASE("key = value parsing") {
  const KeyValueConfig kv = KeyValueConfig::parse("# comment\n a = 1 \n\nlist = x, y ,z\na = 2\nflag = true\nr = 0.5\n");
  CHECK(kv.size("a", 0) == 2);
  CHECK(kv.list("list", {}) == std::vector<std::string>{"x", "y", "z"});
  CHECK(kv.flag("flag", false));
  CHECK(kv.real("r", 0) == 0.5);
  CHECK(kv.str("missing", "d") == "d");
  CHECK_THROWS_AS(KeyValueConfig::parse("novalue\n"), ConfigError);
  CHECK_THROWS_AS(KeyValueConfig::parse(" = 3\n"), ConfigError);
  const KeyValueConfig bad = KeyValueConfig::parse("n = -1\nx = 1.5q\nb = maybe\n");
  CHECK_THROWS_AS(bad.size("n", 0), ConfigError);
  CHECK_THROWS_AS(bad.real("x", 0), ConfigError);
  CHECK_THROWS_AS(bad.flag("b", false), ConfigError);
}

TEST_CASE("experiment config reads keys and rejects unknown ones") {
  KeyValueConfig kv = KeyValueConfig::parse("scenarios = S1, s6\nfeatures = -1:oa+g,label\nmc.batch_size = 4\nseed = 9\n");
  const ExperimentConfig c = ExperimentConfig::from(kv);
  CHECK(c.scenarios == std::vector<Scenario>{Scenario::S1, Scenario::S6});
  CHECK(c.mc.batch_size == 4);
  CHECK(c.seed == 9);
  kv.set("partition.num_shadow", "3");
  CHECK_THROWS_AS(ExperimentConfig::from(kv), ConfigError);
}

TEST_CASE("validation catches inconsistent settings") {
  const auto fails = [](const std::string& text) {
    CHECK_THROWS_AS(ExperimentConfig::from(KeyValueConfig::parse(text)), ConfigError);
  };
  fails("scenarios = S10\n");
  fails("arch = in=4;fc=3:gelu\n");
  fails("data.classes = 3\n");
  fails("repetitions = 0\n");
  fails("features = 7:oa\n");
  fails("partition.num_shadows = 1\nscenarios = S3\n");
  fails("metrics.probe_records = 101\n");
  fails("data.source = csv\n");
  fails("partition.overlap = partial\n");
  fails("realign.method = magic\n");
}

TEST_CASE("canonical text round trips") {
  const ExperimentConfig c =
      ExperimentConfig::from(KeyValueConfig::parse("scenarios = S1,S9\ntrain.lr = 0.003\nrepetitions = 3\n"));
  const std::string text = c.to_text();
  const ExperimentConfig d = ExperimentConfig::from(KeyValueConfig::parse(text));
  CHECK(d.to_text() == text);
  CHECK(d.repetitions == 3);
  CHECK(d.train.lr == c.train.lr);
}

TEST_CASE("scenario names") {
  for (int i = 0; i < 9; ++i) {
    const auto s = static_cast<Scenario>(i);
    CHECK(parse_scenario(to_string(s)) == s);
    CHECK(!scenario_description(s).empty());
  }
}
