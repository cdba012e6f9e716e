#include "stsn/runconfig.hpp"

#include <fstream>
#include <functional>
#include <map>

namespace stsn {

namespace {

std::string trim(const std::string& s) {
  const std::size_t a = s.find_first_not_of(" \t");
  if (a == std::string::npos) return "";
  const std::size_t b = s.find_last_not_of(" \t");
  return s.substr(a, b - a + 1);
}

long to_long(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  long out = 0;
  try {
    out = std::stol(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  require(pos == v.size() && !v.empty(), "config key " + key + ": expected an integer, got '" + v + "'");
  return out;
}

real to_real(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  real out = 0;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  require(pos == v.size() && !v.empty(), "config key " + key + ": expected a number, got '" + v + "'");
  return out;
}

}  // namespace

RunConfig parse_runconfig(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is.good()) throw std::runtime_error("cannot open config file: " + path.string());

  RunConfig rc;
  using Setter = std::function<void(const std::string&, const std::string&)>;
  const std::map<std::string, Setter> setters = {
      {"model.feature_channels", [&](auto& k, auto& v) { rc.model.feature_channels = static_cast<int>(to_long(k, v)); }},
      {"model.backbone_depth", [&](auto& k, auto& v) { rc.model.backbone_depth = static_cast<int>(to_long(k, v)); }},
      {"model.head_stride", [&](auto& k, auto& v) { rc.model.head_stride = static_cast<int>(to_long(k, v)); }},
      {"model.k", [&](auto& k, auto& v) { rc.model.K = static_cast<int>(to_long(k, v)); }},
      {"model.temporal_stride", [&](auto& k, auto& v) { rc.model.temporal_stride = static_cast<int>(to_long(k, v)); }},
      {"model.num_classes", [&](auto& k, auto& v) { rc.model.num_classes = static_cast<int>(to_long(k, v)); }},
      {"model.image_h", [&](auto& k, auto& v) { rc.model.image_h = static_cast<int>(to_long(k, v)); }},
      {"model.image_w", [&](auto& k, auto& v) { rc.model.image_w = static_cast<int>(to_long(k, v)); }},
      {"train.iterations", [&](auto& k, auto& v) { rc.train.iterations = static_cast<int>(to_long(k, v)); }},
      {"train.lr", [&](auto& k, auto& v) { rc.train.lr = to_real(k, v); }},
      {"train.lr_decay_at", [&](auto& k, auto& v) { rc.train.lr_decay_at = static_cast<int>(to_long(k, v)); }},
      {"train.lr_decay_factor", [&](auto& k, auto& v) { rc.train.lr_decay_factor = to_real(k, v); }},
      {"train.k", [&](auto& k, auto& v) { rc.train.k_train = static_cast<int>(to_long(k, v)); }},
      {"train.support_radius", [&](auto& k, auto& v) { rc.train.support_radius = static_cast<int>(to_long(k, v)); }},
      {"train.seed", [&](auto& k, auto& v) { rc.train.seed = static_cast<std::uint64_t>(to_long(k, v)); }},
      {"train.lambda_cls", [&](auto& k, auto& v) { rc.train.lambda_cls = to_real(k, v); }},
      {"train.lambda_box", [&](auto& k, auto& v) { rc.train.lambda_box = to_real(k, v); }},
      {"train.momentum", [&](auto& k, auto& v) { rc.train.momentum = to_real(k, v); }},
      {"train.log_every", [&](auto& k, auto& v) { rc.train.log_every = static_cast<int>(to_long(k, v)); }},
      {"eval.k", [&](auto& k, auto& v) { rc.eval.k_eval = static_cast<int>(to_long(k, v)); }},
      {"eval.stride", [&](auto& k, auto& v) { rc.eval.temporal_stride = static_cast<int>(to_long(k, v)); }},
      {"eval.score_threshold", [&](auto& k, auto& v) { rc.eval.score_threshold = to_real(k, v); }},
      {"eval.nms_threshold", [&](auto& k, auto& v) { rc.eval.nms_threshold = to_real(k, v); }},
      {"eval.iou_threshold", [&](auto& k, auto& v) { rc.eval.iou_threshold = to_real(k, v); }},
      {"data.dir", [&](auto&, auto& v) { rc.data_dir = v; }},
  };

  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    require(eq != std::string::npos,
            "config line " + std::to_string(lineno) + " is not 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    auto it = setters.find(key);
    require(it != setters.end(), "unknown config key '" + key + "'");
    it->second(key, value);
  }

  rc.model.validate();
  rc.train.validate();
  rc.eval.validate();
  return rc;
}

}  // namespace stsn
