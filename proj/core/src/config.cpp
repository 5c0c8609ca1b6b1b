#include "chmffn/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "chmffn/error.hpp"
#include "json.hpp"

namespace chmffn {

using nlohmann::json;

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (batch == 0) throw ConfigError("batch must be positive");
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("ratio must lie in (0,1)");
  if (patch == 0 || patch % 2 == 0) throw ConfigError("patch must be odd and positive");
  if (eval_threads == 0) throw ConfigError("eval_threads must be positive");
}

namespace {

json model_to_j(const ModelConfig& c) {
  return {{"bands", c.bands},
          {"patch", c.patch},
          {"base_channels", c.base_channels},
          {"heads", c.heads},
          {"enc_layers", c.enc_layers},
          {"dec_layers", c.dec_layers},
          {"ffn_mult", c.ffn_mult},
          {"reduction", c.reduction},
          {"causal_mask", c.causal_mask},
          {"use_msc", c.use_msc},
          {"use_dccsa", c.use_dccsa},
          {"use_stcfl", c.use_stcfl},
          {"use_afaf", c.use_afaf},
          {"diff_mode", to_string(c.diff_mode)},
          {"seed", c.seed}};
}

void reject_unknown(const json& j, std::initializer_list<const char*> known, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be a JSON object");
  const std::set<std::string> ok(known.begin(), known.end());
  for (const auto& [key, _] : j.items()) {
    if (!ok.contains(key)) throw ConfigError(std::string("unknown ") + what + " field '" + key + "'");
  }
}

template <typename T>
void read_opt(const json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

ModelConfig model_from_j(const json& j) {
  reject_unknown(j,
                 {"bands", "patch", "base_channels", "heads", "enc_layers", "dec_layers",
                  "ffn_mult", "reduction", "causal_mask", "use_msc", "use_dccsa", "use_stcfl",
                  "use_afaf", "diff_mode", "seed"},
                 "model config");
  ModelConfig c;
  read_opt(j, "bands", c.bands);
  read_opt(j, "patch", c.patch);
  read_opt(j, "base_channels", c.base_channels);
  read_opt(j, "heads", c.heads);
  read_opt(j, "enc_layers", c.enc_layers);
  read_opt(j, "dec_layers", c.dec_layers);
  read_opt(j, "ffn_mult", c.ffn_mult);
  read_opt(j, "reduction", c.reduction);
  read_opt(j, "causal_mask", c.causal_mask);
  read_opt(j, "use_msc", c.use_msc);
  read_opt(j, "use_dccsa", c.use_dccsa);
  read_opt(j, "use_stcfl", c.use_stcfl);
  read_opt(j, "use_afaf", c.use_afaf);
  if (j.contains("diff_mode")) c.diff_mode = diff_mode_from_string(j.at("diff_mode").get<std::string>());
  read_opt(j, "seed", c.seed);
  return c;
}

json train_to_j(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"epochs", c.epochs},
          {"batch", c.batch},
          {"ratio", c.ratio},
          {"patch", c.patch},
          {"seed", c.seed},
          {"normalize", c.normalize},
          {"checkpoint_every", c.checkpoint_every},
          {"eval_threads", c.eval_threads},
          {"model", model_to_j(c.model)}};
}

TrainConfig train_from_j(const json& j) {
  reject_unknown(j,
                 {"lr", "epochs", "batch", "ratio", "patch", "seed", "normalize",
                  "checkpoint_every", "eval_threads", "model"},
                 "train config");
  TrainConfig c;
  read_opt(j, "lr", c.lr);
  read_opt(j, "epochs", c.epochs);
  read_opt(j, "batch", c.batch);
  read_opt(j, "ratio", c.ratio);
  read_opt(j, "patch", c.patch);
  read_opt(j, "seed", c.seed);
  read_opt(j, "normalize", c.normalize);
  read_opt(j, "checkpoint_every", c.checkpoint_every);
  read_opt(j, "eval_threads", c.eval_threads);
  if (j.contains("model")) c.model = model_from_j(j.at("model"));
  return c;
}

template <typename F>
auto parse_with(const std::string& text, F&& f) {
  try {
    return f(json::parse(text));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config JSON: ") + e.what());
  }
}

}  // namespace

std::string model_config_to_json(const ModelConfig& cfg) { return model_to_j(cfg).dump(2); }

ModelConfig model_config_from_json(const std::string& text) {
  return parse_with(text, [](const json& j) { return model_from_j(j); });
}

std::string train_config_to_json(const TrainConfig& cfg) { return train_to_j(cfg).dump(2); }

TrainConfig train_config_from_json(const std::string& text) {
  return parse_with(text, [](const json& j) { return train_from_j(j); });
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return train_config_from_json(ss.str());
}

}  // namespace chmffn
