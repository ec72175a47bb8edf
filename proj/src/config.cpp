#include "gpc/config.hpp"

#include <cstdlib>
#include <fstream>

#include <fmt/format.h>

#include "gpc/error.hpp"

namespace gpc {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

Lighting lighting_from(const std::string& s) {
  if (s == "day") return Lighting::Day;
  if (s == "night") return Lighting::Night;
  throw Error(ErrorKind::BadConfig, fmt::format("unknown lighting '{}'", s));
}

fs::path resolve(const fs::path& base, const fs::path& p) { return p.is_absolute() || p.empty() ? p : base / p; }

json synthetic_json(const SyntheticSpec& s, const SynthPlan& p) {
  json centres = json::array();
  for (const auto& c : s.pupil_center_by_zone) centres.push_back({c.x, c.y});
  json lightings = json::array();
  for (auto l : p.lightings) lightings.push_back(l == Lighting::Day ? "day" : "night");
  return {{"pupil_center_by_zone", centres},
          {"jitter_px", s.jitter_px},
          {"glasses_frame_thickness_px", {s.glasses_frame_thickness_px.first, s.glasses_frame_thickness_px.second}},
          {"glare_probability", s.glare_probability},
          {"glare_intensity", {s.glare_intensity.first, s.glare_intensity.second}},
          {"rng_seed", s.rng_seed},
          {"images_per_zone", p.images_per_zone},
          {"subjects", p.subjects},
          {"lightings", lightings},
          {"write_with_glasses", p.write_with_glasses},
          {"write_without_glasses", p.write_without_glasses}};
}

void read_synthetic(const json& j, SyntheticSpec& s, SynthPlan& p) {
  if (j.contains("pupil_center_by_zone")) {
    const auto& c = j.at("pupil_center_by_zone");
    if (!c.is_array() || c.size() != static_cast<std::size_t>(kNumZones)) {
      throw Error(ErrorKind::BadConfig, "pupil_center_by_zone needs 7 [x, y] entries");
    }
    for (int z = 0; z < kNumZones; ++z) s.pupil_center_by_zone[z] = {c[z][0].get<double>(), c[z][1].get<double>()};
  }
  if (j.contains("jitter_px")) s.jitter_px = j.at("jitter_px").get<double>();
  if (j.contains("glasses_frame_thickness_px")) {
    const auto& t = j.at("glasses_frame_thickness_px");
    s.glasses_frame_thickness_px = {t[0].get<int>(), t[1].get<int>()};
  }
  if (j.contains("glare_probability")) s.glare_probability = j.at("glare_probability").get<double>();
  if (j.contains("glare_intensity")) {
    const auto& g = j.at("glare_intensity");
    s.glare_intensity = {g[0].get<double>(), g[1].get<double>()};
  }
  if (j.contains("rng_seed")) s.rng_seed = j.at("rng_seed").get<std::uint64_t>();
  if (j.contains("images_per_zone")) p.images_per_zone = j.at("images_per_zone").get<int>();
  if (j.contains("subjects")) p.subjects = j.at("subjects").get<std::vector<int>>();
  if (j.contains("lightings")) {
    p.lightings.clear();
    for (const auto& l : j.at("lightings")) p.lightings.push_back(lighting_from(l.get<std::string>()));
  }
  if (j.contains("write_with_glasses")) p.write_with_glasses = j.at("write_with_glasses").get<bool>();
  if (j.contains("write_without_glasses")) p.write_without_glasses = j.at("write_without_glasses").get<bool>();
  if (p.images_per_zone < 1) throw Error(ErrorKind::BadConfig, "images_per_zone must be >= 1");
  s.validate();
}

}  // namespace

json RunConfig::to_json() const {
  json split_doc = json::object();
  for (const auto& [subject, s] : split) split_doc[split_name(s)].push_back(subject);
  return {{"train", train.to_json()},
          {"synthetic", synthetic_json(synthetic, plan)},
          {"preprocess", {{"equalize", preprocess.equalize}, {"clahe_clip", preprocess.clahe.clip_limit},
                          {"clahe_tiles", preprocess.clahe.tiles}}},
          {"data", {{"dir", data_dir.string()},
                    {"manifest", manifest.string()},
                    {"pupil_truth", pupil_truth.string()},
                    {"split", split_doc}}},
          {"out_dir", out_dir.string()},
          {"device", device}};
}

void apply_override(json& doc, const std::string& key, const std::string& value) {
  if (key.empty()) throw Error(ErrorKind::BadConfig, "empty override key");
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw Error(ErrorKind::BadConfig, fmt::format("malformed override key '{}'", key));
    if (!node->is_object()) *node = json::object();
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  json parsed = json::parse(value, nullptr, /*allow_exceptions=*/false);
  *node = parsed.is_discarded() ? json(value) : parsed;
}

std::pair<std::string, std::string> split_override(const std::string& arg) {
  std::string s = arg.rfind("--", 0) == 0 ? arg.substr(2) : arg;
  const auto eq = s.find('=');
  if (eq == std::string::npos || eq == 0) throw Error(ErrorKind::BadConfig, fmt::format("expected key=value, got '{}'", arg));
  return {s.substr(0, eq), s.substr(eq + 1)};
}

RunConfig run_config_from_json(const json& doc, const fs::path& base_dir) {
  RunConfig c;
  try {
    if (doc.contains("train")) c.train = TrainConfig::from_json(doc.at("train"));
    if (doc.contains("synthetic")) read_synthetic(doc.at("synthetic"), c.synthetic, c.plan);
    if (doc.contains("preprocess")) {
      const auto& p = doc.at("preprocess");
      c.preprocess.equalize = p.value("equalize", c.preprocess.equalize);
      c.preprocess.clahe.clip_limit = p.value("clahe_clip", c.preprocess.clahe.clip_limit);
      c.preprocess.clahe.tiles = p.value("clahe_tiles", c.preprocess.clahe.tiles);
    }
    if (doc.contains("data")) {
      const auto& d = doc.at("data");
      if (d.contains("dir")) c.data_dir = d.at("dir").get<std::string>();
      if (d.contains("manifest")) c.manifest = d.at("manifest").get<std::string>();
      if (d.contains("pupil_truth")) c.pupil_truth = d.at("pupil_truth").get<std::string>();
      if (d.contains("split")) {
        for (const auto& [name, subjects] : d.at("split").items()) {
          Split s;
          if (name == "train") s = Split::Train;
          else if (name == "val") s = Split::Val;
          else if (name == "test") s = Split::Test;
          else throw Error(ErrorKind::BadConfig, fmt::format("unknown split '{}'", name));
          for (const auto& subject : subjects) c.split[subject.get<std::string>()] = s;
        }
      }
    }
    if (doc.contains("out_dir")) c.out_dir = doc.at("out_dir").get<std::string>();
    if (doc.contains("device")) c.device = doc.at("device").get<std::string>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::BadConfig, e.what());
  }
  if (const char* env = std::getenv("GPC_DEVICE"); env && *env) c.device = env;
  if (c.device != "cpu") {
    throw Error(ErrorKind::BadConfig, fmt::format("device '{}' is not available; this build runs on cpu", c.device));
  }

  c.data_dir = resolve(base_dir, c.data_dir);
  c.out_dir = resolve(base_dir, c.out_dir);
  c.manifest = c.manifest.empty() ? c.data_dir / "manifest.tsv" : resolve(base_dir, c.manifest);
  if (c.pupil_truth.empty()) c.pupil_truth = c.data_dir / "pupil_truth.tsv";
  else c.pupil_truth = resolve(base_dir, c.pupil_truth);
  c.preprocess.channels = c.train.net.channels;
  c.preprocess.size = c.train.net.image_size;
  return c;
}

RunConfig load_run_config(const fs::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::MissingFile, path.string());
  json doc = json::parse(in, nullptr, /*allow_exceptions=*/false, /*ignore_comments=*/true);
  if (doc.is_discarded()) throw Error(ErrorKind::BadConfig, fmt::format("{} is not valid JSON", path.string()));
  for (const auto& o : overrides) {
    const auto [k, v] = split_override(o);
    apply_override(doc, k, v);
  }
  return run_config_from_json(doc, path.parent_path().empty() ? fs::path(".") : path.parent_path());
}

}  // namespace gpc
