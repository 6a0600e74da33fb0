#include <gtest/gtest.h>

#include <string>

#include "sib/config.hpp"
#include "sib/error.hpp"

using namespace sib;
using nlohmann::json;

TEST(Config, RoundTripsEveryMode) {
  for (TaskMode mode : {TaskMode::Toy, TaskMode::FewShot, TaskMode::ZeroShot}) {
    const RunConfig c = default_config(mode);
    const auto j = to_json(c);
    const RunConfig back = config_from_json(j);
    EXPECT_EQ(to_json(back).dump(), j.dump());
    EXPECT_EQ(config_hash(back), config_hash(c));
  }
}

TEST(Config, PartialFileAppliesOnModeDefaults) {
  const RunConfig c = config_from_json(json::parse(R"({"mode": "fewshot", "inner": {"steps": 0}})"));
  EXPECT_EQ(c.mode, TaskMode::FewShot);
  EXPECT_EQ(c.inference.inner.steps, 0u);
  EXPECT_EQ(c.inference.init, default_config(TaskMode::FewShot).inference.init);
}

TEST(Config, UnknownKeyIsNamed) {
  try {
    config_from_json(json::parse(R"({"inner": {"stepz": 3}})"));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("stepz"), std::string::npos) << e.what();
  }
}

TEST(Config, TypeErrorNamesKeyAndType) {
  try {
    config_from_json(json::parse(R"({"inner": {"steps": "three"}})"));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("inner.steps"), std::string::npos) << msg;
  }
  EXPECT_THROW(config_from_json(json::parse(R"({"mode": "vision"})")), ConfigError);
  EXPECT_THROW(config_from_json(json::parse(R"({"optimizer": {"kind": "rmsprop"}})")), ConfigError);
  EXPECT_THROW(config_from_json(json::parse(R"({"batch_tasks": -1})")), ConfigError);
}

TEST(Config, InvalidCombinationsRejected) {
  EXPECT_THROW(config_from_json(json::parse(R"({"mode": "toy", "init": "prototype"})")), ConfigError);
  EXPECT_THROW(config_from_json(json::parse(R"({"mode": "fewshot-zeroshot", "inner_method": "maml"})")), ConfigError);
  EXPECT_THROW(config_from_json(json::parse(R"({"toy": {"sigma": -1}})")), ConfigError);
}

TEST(Config, OverridesParseValues) {
  json j = to_json(default_config(TaskMode::Toy));
  apply_override(j, "inner.steps", "5");
  apply_override(j, "optimizer.kind", "sgd");
  apply_override(j, "inner.kl_in_inner", "true");
  const RunConfig c = config_from_json(j);
  EXPECT_EQ(c.inference.inner.steps, 5u);
  EXPECT_EQ(c.optimizer.kind, OptimizerKind::Sgd);
  EXPECT_TRUE(c.inference.inner.kl_in_inner);
  EXPECT_THROW(apply_override(j, "inner..steps", "1"), ConfigError);
}

TEST(Config, HashChangesWithContent) {
  RunConfig a = default_config(TaskMode::Toy);
  RunConfig b = a;
  b.seed = 1;
  EXPECT_NE(config_hash(a), config_hash(b));
  EXPECT_EQ(hash_hex(0x1ULL).size(), 16u);
}

TEST(Config, ToyLogVarDefaultsToSigmaW) {
  const RunConfig c = default_config(TaskMode::Toy);
  EXPECT_NEAR(c.effective_inference().posterior.log_var, 2.0 * std::log(c.toy.sigma_w), 1e-15);
}
