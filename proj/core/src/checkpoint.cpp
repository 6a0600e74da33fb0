#include <fmt/format.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "sib/error.hpp"
#include "sib/trainer.hpp"

namespace sib {

using nlohmann::ordered_json;

namespace {

constexpr const char* kFormat = "sib-checkpoint";
constexpr int kVersion = 1;

ParamGroup group_from_string(std::string_view s) {
  for (auto g : {ParamGroup::Prior, ParamGroup::Init, ParamGroup::SynthGrad, ParamGroup::Head, ParamGroup::Feature}) {
    if (to_string(g) == s) return g;
  }
  throw IoError(fmt::format("checkpoint: unknown parameter group '{}'", s));
}

}  // namespace

std::string checkpoint_to_string(const MetaModel& model, const CheckpointInfo& info) {
  const auto& s = model.spec();
  ordered_json j;
  j["format"] = kFormat;
  j["version"] = kVersion;
  j["config_hash"] = hash_hex(info.config_hash);
  j["step"] = info.step;
  j["spec"] = {{"mode", std::string(to_string(s.mode))},
               {"ways", s.ways},
               {"input_dim", s.input_dim},
               {"feature_dim", s.feature_dim},
               {"xi_hidden", s.xi_hidden},
               {"feature_identity", s.feature_identity},
               {"classifier_scale", s.classifier_scale},
               {"ssl_classes", s.ssl_classes}};
  ordered_json params = ordered_json::object();
  for (const auto& p : model.params()) {
    for (double v : p.values) {
      if (!std::isfinite(v)) throw NumericError(fmt::format("checkpoint: parameter {} holds a non-finite value", p.name));
    }
    params[p.name] = {{"group", std::string(to_string(p.group))}, {"shape", p.shape}, {"values", p.values}};
  }
  j["params"] = std::move(params);
  return j.dump(1) + "\n";
}

void save_checkpoint(const MetaModel& model, const std::filesystem::path& path, const CheckpointInfo& info) {
  const std::string text = checkpoint_to_string(model, info);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out << text;
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

MetaModel checkpoint_from_string(const std::string& text, CheckpointInfo* info) {
  try {
    const ordered_json j = ordered_json::parse(text);
    if (j.at("format").get<std::string>() != kFormat) throw IoError("checkpoint: not a sib checkpoint");
    if (j.at("version").get<int>() != kVersion) {
      throw IoError(fmt::format("checkpoint: unsupported version {}", j.at("version").get<int>()));
    }
    const auto& js = j.at("spec");
    ModelSpec s;
    s.mode = task_mode_from_string(js.at("mode").get<std::string>());
    s.ways = js.at("ways").get<std::size_t>();
    s.input_dim = js.at("input_dim").get<std::size_t>();
    s.feature_dim = js.at("feature_dim").get<std::size_t>();
    s.xi_hidden = js.at("xi_hidden").get<std::size_t>();
    s.feature_identity = js.at("feature_identity").get<bool>();
    s.classifier_scale = js.at("classifier_scale").get<double>();
    s.ssl_classes = js.at("ssl_classes").get<std::size_t>();
    s.validate();
    std::vector<Param> params;
    for (auto it = j.at("params").begin(); it != j.at("params").end(); ++it) {
      Param p;
      p.name = it.key();
      p.group = group_from_string(it.value().at("group").get<std::string>());
      p.shape = it.value().at("shape").get<ad::Shape>();
      p.values = it.value().at("values").get<std::vector<double>>();
      params.push_back(std::move(p));
    }
    MetaModel model(s, std::move(params));
    const MetaModel reference = MetaModel::create(s, 0);
    if (reference.params().size() != model.params().size()) {
      throw IoError("checkpoint: parameter set does not match the model specification");
    }
    for (std::size_t i = 0; i < reference.params().size(); ++i) {
      const auto& a = reference.params()[i];
      const auto& b = model.params()[i];
      if (a.name != b.name || a.shape != b.shape || a.group != b.group) {
        throw IoError(fmt::format("checkpoint: parameter '{}' does not match the model specification", b.name));
      }
    }
    if (info != nullptr) {
      info->config_hash = std::stoull(j.at("config_hash").get<std::string>(), nullptr, 16);
      info->step = j.at("step").get<std::size_t>();
    }
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(fmt::format("checkpoint: malformed document ({})", e.what()));
  } catch (const std::invalid_argument&) {
    throw IoError("checkpoint: malformed config hash");
  } catch (const IoError&) {
    throw;
  } catch (const Error& e) {
    throw IoError(fmt::format("checkpoint: {}", e.what()));
  }
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, std::optional<std::uint64_t> expected_hash,
                                 std::ostream* warn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  CheckpointInfo info;
  MetaModel model = checkpoint_from_string(buf.str(), &info);
  LoadedCheckpoint out{std::move(model), info, true};
  if (expected_hash && *expected_hash != info.config_hash) {
    out.hash_matched = false;
    if (warn != nullptr) {
      *warn << fmt::format("warning: checkpoint {} was written under config hash {}, current config hash is {}\n",
                           path.string(), hash_hex(info.config_hash), hash_hex(*expected_hash));
    }
  }
  return out;
}

}  // namespace sib
