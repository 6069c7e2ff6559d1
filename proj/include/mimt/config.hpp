#pragma once

// Plain key = value training configuration files. '#' starts a comment,
// unknown keys are rejected.

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mimt/model.hpp"
#include "mimt/synthetic.hpp"

namespace mimt::config {

struct TrainConfig {
  uint64_t seed = 42;
  model::ModelConfig model;
  std::string stage = "joint";
  model::StageWeights weights = model::StageWeights::joint();
  model::Model::Optimizer optimizer;
  std::string schedule = "cosine";
  double warmup_ratio = 0.01;
  int steps = 2000;
  int batch = 8;
  synthetic::CorpusConfig corpus;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

template <typename T>
T parse_scalar(const std::string& v);

template <>
inline int parse_scalar<int>(const std::string& v) {
  return std::stoi(v);
}
template <>
inline double parse_scalar<double>(const std::string& v) {
  return std::stod(v);
}
template <>
inline uint64_t parse_scalar<uint64_t>(const std::string& v) {
  return std::stoull(v);
}

template <typename T>
std::vector<T> parse_list(const std::string& v) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_scalar<T>(item));
  }
  return out;
}

}  // namespace detail

inline TrainConfig parse(std::istream& in, const std::string& origin = "<config>") {
  TrainConfig cfg;
  std::string line;
  int line_no = 0;
  bool stage_named = false, weights_explicit = false;

  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error(origin + ":" + std::to_string(line_no) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));

    using detail::parse_list;
    using detail::parse_scalar;
    if (key == "seed") cfg.seed = parse_scalar<uint64_t>(value);
    else if (key == "rvq_layers") cfg.model.rvq_layers = parse_scalar<int>(value);
    else if (key == "group_size") cfg.model.group_size = parse_scalar<int>(value);
    else if (key == "audio_vocab") cfg.model.audio_vocab = parse_list<int>(value);
    else if (key == "delays") cfg.model.delays.delays = parse_list<int>(value);
    else if (key == "text_bytes") cfg.model.text_bytes = parse_scalar<int>(value);
    else if (key == "enc_layers") cfg.model.enc_layers = parse_scalar<int>(value);
    else if (key == "enc_dim") cfg.model.enc_dim = parse_scalar<int>(value);
    else if (key == "enc_heads") cfg.model.enc_heads = parse_scalar<int>(value);
    else if (key == "enc_ffn") cfg.model.enc_ffn = parse_scalar<int>(value);
    else if (key == "backbone_layers") cfg.model.backbone_layers = parse_scalar<int>(value);
    else if (key == "backbone_dim") cfg.model.backbone_dim = parse_scalar<int>(value);
    else if (key == "backbone_heads") cfg.model.backbone_heads = parse_scalar<int>(value);
    else if (key == "backbone_ffn") cfg.model.backbone_ffn = parse_scalar<int>(value);
    else if (key == "dec_layers") cfg.model.dec_layers = parse_scalar<int>(value);
    else if (key == "dec_dim") cfg.model.dec_dim = parse_scalar<int>(value);
    else if (key == "dec_heads") cfg.model.dec_heads = parse_scalar<int>(value);
    else if (key == "dec_ffn") cfg.model.dec_ffn = parse_scalar<int>(value);
    else if (key == "context") cfg.model.context = parse_scalar<int>(value);
    else if (key == "stage") {
      cfg.stage = value;
      stage_named = true;
    } else if (key == "text_weight") {
      cfg.weights.text_w = parse_scalar<double>(value);
      weights_explicit = true;
    } else if (key == "rvq_weights") {
      cfg.weights.rvq_w = parse_list<double>(value);
      weights_explicit = true;
    } else if (key == "lr_encoder") cfg.optimizer.lr_encoder = parse_scalar<double>(value);
    else if (key == "lr_backbone") cfg.optimizer.lr_backbone = parse_scalar<double>(value);
    else if (key == "lr_decoder") cfg.optimizer.lr_decoder = parse_scalar<double>(value);
    else if (key == "lr_scale") cfg.optimizer.lr_scale = parse_scalar<double>(value);
    else if (key == "schedule") cfg.schedule = value;
    else if (key == "warmup_ratio") cfg.warmup_ratio = parse_scalar<double>(value);
    else if (key == "steps") cfg.steps = parse_scalar<int>(value);
    else if (key == "batch") cfg.batch = parse_scalar<int>(value);
    else if (key == "corpus_sequences") cfg.corpus.sequences = parse_scalar<int>(value);
    else if (key == "corpus_text") cfg.corpus.text_tokens = parse_scalar<int>(value);
    else if (key == "corpus_patches") cfg.corpus.patches = parse_scalar<int>(value);
    else if (key == "ratio_text") cfg.corpus.ratio_text = parse_scalar<int>(value);
    else if (key == "ratio_audio") cfg.corpus.ratio_audio = parse_scalar<int>(value);
    else
      throw std::runtime_error(origin + ":" + std::to_string(line_no) + ": unknown key '" + key + "'");
  }

  if (stage_named && !weights_explicit) {
    if (cfg.stage == "understanding") {
      cfg.weights = model::StageWeights::understanding(cfg.model.rvq_layers);
    } else if (cfg.stage == "joint") {
      cfg.weights = model::StageWeights::joint();
    } else {
      throw std::runtime_error(origin + ": unknown stage '" + cfg.stage + "'");
    }
  }
  cfg.corpus.seed = cfg.seed;
  return cfg;
}

inline TrainConfig parse_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config: " + path);
  return parse(f, path);
}

// MIMT_SEED in the environment overrides whatever the config says.
inline void apply_env_seed(TrainConfig& cfg) {
  if (const char* s = std::getenv("MIMT_SEED")) {
    cfg.seed = std::strtoull(s, nullptr, 10);
    cfg.corpus.seed = cfg.seed;
  }
}

}  // namespace mimt::config
