#include "sib/config.hpp"

#include <fmt/format.h>

#include <cmath>

#include "sib/error.hpp"

namespace sib {

using nlohmann::json;
using nlohmann::ordered_json;

RunConfig default_config(TaskMode mode) {
  RunConfig c;
  c.mode = mode;
  auto& inf = c.inference;
  inf.inner.steps = 3;
  inf.inner.eta = 1e-3;
  inf.inner.mc_samples = 1;
  inf.inner.normalize_by_n = true;
  inf.inner.detach_features = true;
  if (mode == TaskMode::Toy) {
    inf.inner.kl_in_inner = false;
    inf.posterior.regime = PosteriorRegime::Gaussian;
    inf.data_term = DataTerm::Sum;
    inf.init = InitMethod::Global;
    c.optimizer.kind = OptimizerKind::Adam;
    c.optimizer.lr = 1e-3;
    c.epochs = 150;
    c.eval_every = 1;
    c.feature_dim = 1;
  } else {
    inf.inner.kl_in_inner = true;
    inf.posterior.regime = PosteriorRegime::Deterministic;
    inf.posterior.log_var = 0.0;
    c.posterior_log_var = 0.0;
    inf.data_term = DataTerm::Mean;
    inf.init = mode == TaskMode::FewShot ? InitMethod::Prototype : InitMethod::SelfSupervised;
    c.optimizer.kind = OptimizerKind::Sgd;
    c.optimizer.lr = 1e-3;
    c.steps = 5000;
    c.eval_every = 500;
    c.feature_dim = 16;
  }
  return c;
}

void RunConfig::validate() const {
  inference.validate();
  if (!(optimizer.lr >= 0.0) || !std::isfinite(optimizer.lr)) throw ConfigError("optimizer.lr must be finite and >= 0");
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0) || !(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) {
    throw ConfigError("optimizer.beta1 and optimizer.beta2 must lie in [0, 1)");
  }
  if (!(optimizer.eps > 0.0)) throw ConfigError("optimizer.eps must be > 0");
  if (!(optimizer.clip_norm >= 0.0)) throw ConfigError("optimizer.clip_norm must be >= 0");
  if (batch_tasks < 1) throw ConfigError("batch_tasks must be >= 1");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (posterior_log_var && !std::isfinite(*posterior_log_var)) throw ConfigError("posterior.log_var must be finite");
  if (mode == TaskMode::Toy) {
    toy.validate();
    if (toy.n_train < 1 || toy.n_test < 1) throw ConfigError("toy.n_train and toy.n_test must be >= 1");
    if (inference.init != InitMethod::Global) throw ConfigError("init: toy mode supports only 'global'");
    if (inference.method != InnerMethod::Sib) throw ConfigError("inner_method: toy mode supports only 'sib'");
  } else {
    fewshot.validate();
    if (feature_dim < 1) throw ConfigError("feature_dim must be >= 1");
    if (mode == TaskMode::ZeroShot && inference.init == InitMethod::Prototype) {
      throw ConfigError("init: zero-shot episodes have no support set for 'prototype'");
    }
    if (mode == TaskMode::ZeroShot && inference.method == InnerMethod::Maml) {
      throw ConfigError("inner_method: zero-shot episodes have no support set for 'maml'");
    }
    if (mode == TaskMode::FewShot && inference.init == InitMethod::SelfSupervised) {
      throw ConfigError("init: 'ssl' needs mode fewshot-zeroshot");
    }
    if (mode == TaskMode::FewShot && inference.init == InitMethod::Global) {
      throw ConfigError("init: mode fewshot has no global initialization; use 'prototype'");
    }
  }
  if (analysis.gen_gap_trials < 1 || analysis.fresh_datasets < 1) {
    throw ConfigError("analysis.gen_gap_trials and analysis.fresh_datasets must be >= 1");
  }
  if (analysis.sigma && !(*analysis.sigma > 0.0)) throw ConfigError("analysis.sigma must be > 0");
  if (analysis.sweep_n.empty()) throw ConfigError("analysis.sweep_n must not be empty");
}

ModelSpec RunConfig::model_spec() const {
  switch (mode) {
    case TaskMode::Toy: return ModelSpec::toy();
    case TaskMode::FewShot: return ModelSpec::fewshot(fewshot.ways, fewshot.dim, feature_dim);
    case TaskMode::ZeroShot: return ModelSpec::zeroshot(fewshot.ways, fewshot.dim, feature_dim);
  }
  return ModelSpec::toy();
}

InferenceConfig RunConfig::effective_inference() const {
  InferenceConfig inf = inference;
  if (posterior_log_var) {
    inf.posterior.log_var = *posterior_log_var;
  } else if (mode == TaskMode::Toy) {
    inf.posterior.log_var = std::log(toy.sigma_w * toy.sigma_w);
  }
  return inf;
}

namespace {

std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::Adam ? "adam" : "sgd"; }

OptimizerKind optimizer_from_string(std::string_view s) {
  if (s == "adam") return OptimizerKind::Adam;
  if (s == "sgd") return OptimizerKind::Sgd;
  throw ConfigError(fmt::format("unknown optimizer.kind '{}' (expected sgd or adam)", s));
}

template <class T>
ordered_json optional_json(const std::optional<T>& v) {
  return v ? ordered_json(*v) : ordered_json(nullptr);
}

}  // namespace

ordered_json to_json(const RunConfig& c) {
  const auto& inf = c.inference;
  ordered_json j;
  j["mode"] = std::string(to_string(c.mode));
  j["seed"] = c.seed;
  j["inner"] = {{"steps", inf.inner.steps},
                {"eta", inf.inner.eta},
                {"kl_in_inner", inf.inner.kl_in_inner},
                {"mc_samples", inf.inner.mc_samples},
                {"normalize_by_n", inf.inner.normalize_by_n},
                {"detach_features", inf.inner.detach_features}};
  j["posterior"] = {{"regime", std::string(to_string(inf.posterior.regime))},
                    {"log_var", optional_json(c.posterior_log_var)}};
  j["data_term"] = std::string(to_string(inf.data_term));
  j["init"] = std::string(to_string(inf.init));
  j["inner_method"] = std::string(to_string(inf.method));
  j["ssl_eta"] = inf.ssl_eta;
  j["optimizer"] = {{"kind", std::string(to_string(c.optimizer.kind))},
                    {"lr", c.optimizer.lr},
                    {"beta1", c.optimizer.beta1},
                    {"beta2", c.optimizer.beta2},
                    {"eps", c.optimizer.eps},
                    {"clip_norm", c.optimizer.clip_norm}};
  j["batch_tasks"] = c.batch_tasks;
  j["epochs"] = c.epochs;
  j["steps"] = c.steps;
  j["eval_every"] = c.eval_every;
  j["val_episodes"] = c.val_episodes;
  j["test_episodes"] = c.test_episodes;
  j["sequential_updates"] = c.sequential_updates;
  j["train_f"] = c.train_f;
  j["feature_dim"] = c.feature_dim;
  j["toy"] = {{"n", c.toy.n},           {"mu", c.toy.mu},           {"sigma", c.toy.sigma},
              {"mu_w", c.toy.mu_w},     {"sigma_w", c.toy.sigma_w}, {"n_train", c.toy.n_train},
              {"n_test", c.toy.n_test}};
  const auto& f = c.fewshot;
  j["fewshot"] = {{"ways", f.ways},
                  {"shots", f.shots},
                  {"queries_per_class", f.queries_per_class},
                  {"dim", f.dim},
                  {"pool_train", f.pool_train},
                  {"pool_val", f.pool_val},
                  {"pool_test", f.pool_test},
                  {"cluster_spread", f.cluster_spread},
                  {"pool_seed_train", f.pool_seed_train},
                  {"pool_seed_val", f.pool_seed_val},
                  {"pool_seed_test", f.pool_seed_test},
                  {"domain_shift", f.domain_shift},
                  {"train_pool_csv", c.train_pool_csv},
                  {"val_pool_csv", c.val_pool_csv},
                  {"test_pool_csv", c.test_pool_csv}};
  const auto& a = c.analysis;
  j["analysis"] = {{"gen_gap_trials", a.gen_gap_trials}, {"fresh_datasets", a.fresh_datasets},
                   {"sigma", optional_json(a.sigma)},     {"bound_seeds", a.bound_seeds},
                   {"sweep_n", a.sweep_n},                {"sweep_seeds", a.sweep_seeds}};
  return j;
}

namespace {

std::string type_name(const ordered_json& v) {
  if (v.is_null()) return "number or null";
  if (v.is_boolean()) return "boolean";
  if (v.is_number_unsigned() || v.is_number_integer()) return "non-negative integer";
  if (v.is_number()) return "number";
  if (v.is_string()) return "string";
  if (v.is_array()) return "array of non-negative integers";
  return "object";
}

bool type_ok(const ordered_json& schema, const json& v) {
  if (schema.is_null()) return v.is_null() || v.is_number();
  if (schema.is_boolean()) return v.is_boolean();
  if (schema.is_number_unsigned() || schema.is_number_integer()) return v.is_number_unsigned();
  if (schema.is_number()) return v.is_number();
  if (schema.is_string()) return v.is_string();
  if (schema.is_array()) {
    if (!v.is_array()) return false;
    for (const auto& e : v)
      if (!e.is_number_unsigned()) return false;
    return true;
  }
  return v.is_object();
}

void merge_checked(ordered_json& target, const json& src, const std::string& prefix) {
  if (!src.is_object()) throw ConfigError(fmt::format("config: '{}' must be an object", prefix.empty() ? "<root>" : prefix));
  for (auto it = src.begin(); it != src.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!target.contains(it.key())) throw ConfigError(fmt::format("config: unknown key '{}'", key));
    auto& slot = target[it.key()];
    if (!type_ok(slot, it.value())) {
      throw ConfigError(fmt::format("config: key '{}' expects {}, got {}", key, type_name(slot), it.value().dump()));
    }
    if (slot.is_object()) {
      merge_checked(slot, it.value(), key);
    } else if (slot.is_null() || slot.is_number_float()) {
      slot = it.value().is_null() ? ordered_json(nullptr) : ordered_json(it.value().get<double>());
    } else {
      slot = ordered_json::parse(it.value().dump());
    }
  }
}

template <class T>
T get(const ordered_json& j, const char* key) {
  return j.at(key).get<T>();
}

std::optional<double> get_optional(const ordered_json& j, const char* key) {
  const auto& v = j.at(key);
  if (v.is_null()) return std::nullopt;
  return v.get<double>();
}

}  // namespace

RunConfig config_from_json(const json& j, TaskMode base_mode) {
  TaskMode mode = base_mode;
  if (j.is_object() && j.contains("mode")) {
    if (!j["mode"].is_string()) throw ConfigError("config: key 'mode' expects string");
    mode = task_mode_from_string(j["mode"].get<std::string>());
  }
  ordered_json m = to_json(default_config(mode));
  merge_checked(m, j, "");

  RunConfig c;
  c.mode = task_mode_from_string(get<std::string>(m, "mode"));
  c.seed = get<std::uint64_t>(m, "seed");
  auto& inf = c.inference;
  const auto& in = m["inner"];
  inf.inner.steps = get<std::size_t>(in, "steps");
  inf.inner.eta = get<double>(in, "eta");
  inf.inner.kl_in_inner = get<bool>(in, "kl_in_inner");
  inf.inner.mc_samples = get<std::size_t>(in, "mc_samples");
  inf.inner.normalize_by_n = get<bool>(in, "normalize_by_n");
  inf.inner.detach_features = get<bool>(in, "detach_features");
  inf.posterior.regime = posterior_regime_from_string(get<std::string>(m["posterior"], "regime"));
  c.posterior_log_var = get_optional(m["posterior"], "log_var");
  inf.data_term = data_term_from_string(get<std::string>(m, "data_term"));
  inf.init = init_method_from_string(get<std::string>(m, "init"));
  inf.method = inner_method_from_string(get<std::string>(m, "inner_method"));
  inf.ssl_eta = get<double>(m, "ssl_eta");
  const auto& o = m["optimizer"];
  c.optimizer.kind = optimizer_from_string(get<std::string>(o, "kind"));
  c.optimizer.lr = get<double>(o, "lr");
  c.optimizer.beta1 = get<double>(o, "beta1");
  c.optimizer.beta2 = get<double>(o, "beta2");
  c.optimizer.eps = get<double>(o, "eps");
  c.optimizer.clip_norm = get<double>(o, "clip_norm");
  c.batch_tasks = get<std::size_t>(m, "batch_tasks");
  c.epochs = get<std::size_t>(m, "epochs");
  c.steps = get<std::size_t>(m, "steps");
  c.eval_every = get<std::size_t>(m, "eval_every");
  c.val_episodes = get<std::size_t>(m, "val_episodes");
  c.test_episodes = get<std::size_t>(m, "test_episodes");
  c.sequential_updates = get<bool>(m, "sequential_updates");
  c.train_f = get<bool>(m, "train_f");
  c.feature_dim = get<std::size_t>(m, "feature_dim");
  const auto& t = m["toy"];
  c.toy.n = get<std::size_t>(t, "n");
  c.toy.mu = get<double>(t, "mu");
  c.toy.sigma = get<double>(t, "sigma");
  c.toy.mu_w = get<double>(t, "mu_w");
  c.toy.sigma_w = get<double>(t, "sigma_w");
  c.toy.n_train = get<std::size_t>(t, "n_train");
  c.toy.n_test = get<std::size_t>(t, "n_test");
  const auto& f = m["fewshot"];
  c.fewshot.ways = get<std::size_t>(f, "ways");
  c.fewshot.shots = get<std::size_t>(f, "shots");
  c.fewshot.queries_per_class = get<std::size_t>(f, "queries_per_class");
  c.fewshot.dim = get<std::size_t>(f, "dim");
  c.fewshot.pool_train = get<std::size_t>(f, "pool_train");
  c.fewshot.pool_val = get<std::size_t>(f, "pool_val");
  c.fewshot.pool_test = get<std::size_t>(f, "pool_test");
  c.fewshot.cluster_spread = get<double>(f, "cluster_spread");
  c.fewshot.pool_seed_train = get<std::uint64_t>(f, "pool_seed_train");
  c.fewshot.pool_seed_val = get<std::uint64_t>(f, "pool_seed_val");
  c.fewshot.pool_seed_test = get<std::uint64_t>(f, "pool_seed_test");
  c.fewshot.domain_shift = get<double>(f, "domain_shift");
  c.train_pool_csv = get<std::string>(f, "train_pool_csv");
  c.val_pool_csv = get<std::string>(f, "val_pool_csv");
  c.test_pool_csv = get<std::string>(f, "test_pool_csv");
  const auto& a = m["analysis"];
  c.analysis.gen_gap_trials = get<std::size_t>(a, "gen_gap_trials");
  c.analysis.fresh_datasets = get<std::size_t>(a, "fresh_datasets");
  c.analysis.sigma = get_optional(a, "sigma");
  c.analysis.bound_seeds = get<std::size_t>(a, "bound_seeds");
  c.analysis.sweep_n = a.at("sweep_n").get<std::vector<std::size_t>>();
  c.analysis.sweep_seeds = get<std::size_t>(a, "sweep_seeds");
  c.validate();
  return c;
}

void apply_override(json& j, const std::string& dotted_key, const std::string& value) {
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::parse_error&) {
    parsed = value;
  }
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = dotted_key.find('.', start);
    const std::string part = dotted_key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError(fmt::format("config: malformed key '{}'", dotted_key));
    if (!node->is_object()) *node = json::object();
    if (dot == std::string::npos) {
      (*node)[part] = parsed;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

std::uint64_t config_hash(const RunConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : to_json(cfg).dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hash_hex(std::uint64_t h) { return fmt::format("{:016x}", h); }

}  // namespace sib
