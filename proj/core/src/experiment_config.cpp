#include "evifuse/experiment_config.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "evifuse/errors.hpp"

namespace evifuse {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream stream(s);
  while (std::getline(stream, item, sep)) out.push_back(trim(item));
  if (!s.empty() && s.back() == sep) out.push_back("");
  return out;
}

[[noreturn]] void fail(const std::string& field, const std::string& what) {
  throw ConfigError(field + " " + what);
}

double parse_real(const std::string& field, const std::string& value) {
  const std::string v = trim(value);
  if (v.empty()) fail(field, "is empty");
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (end != v.c_str() + v.size()) fail(field, "is not a number: '" + v + "'");
  return out;
}

long long parse_int(const std::string& field, const std::string& value) {
  const std::string v = trim(value);
  if (v.empty()) fail(field, "is empty");
  char* end = nullptr;
  const long long out = std::strtoll(v.c_str(), &end, 10);
  if (end != v.c_str() + v.size()) fail(field, "is not an integer: '" + v + "'");
  return out;
}

std::uint64_t parse_u64(const std::string& field, const std::string& value) {
  const std::string v = trim(value);
  if (v.empty() || v[0] == '-') fail(field, "is not a nonnegative integer: '" + v + "'");
  char* end = nullptr;
  const unsigned long long out = std::strtoull(v.c_str(), &end, 10);
  if (end != v.c_str() + v.size()) fail(field, "is not an integer: '" + v + "'");
  return out;
}

bool parse_bool(const std::string& field, const std::string& value) {
  std::string v = trim(value);
  std::transform(v.begin(), v.end(), v.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (v == "on" || v == "true" || v == "yes" || v == "1") return true;
  if (v == "off" || v == "false" || v == "no" || v == "0") return false;
  fail(field, "is not a boolean (use on/off): '" + value + "'");
}

std::vector<int> parse_int_list(const std::string& field, const std::string& value) {
  std::vector<int> out;
  for (const std::string& item : split(value, ',')) {
    out.push_back(static_cast<int>(parse_int(field, item)));
  }
  if (out.empty()) fail(field, "is empty");
  return out;
}

}  // namespace

const std::vector<std::string>& known_variants() {
  static const std::vector<std::string> names = {
      "single_0", "single_1", "simple_mix", "balanced_mix",
      "avg_fusion", "inter_fusion", "eif"};
  return names;
}

std::vector<std::string> ExperimentConfig::effective_variants() const {
  return variants.empty() ? known_variants() : variants;
}

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw ConfigError("benchmark.seeds must list at least one seed");
  network.validate();
  training.validate();
  for (const std::string& v : variants) {
    const auto& known = known_variants();
    if (std::find(known.begin(), known.end(), v) == known.end()) {
      throw ConfigError("run.variants names unknown variant '" + v + "'");
    }
  }
  if (adapt_samples < 1) throw ConfigError("run.adapt_samples must be >= 1");
  if (adapt_batches < 0) throw ConfigError("run.adapt_batches must be >= 0");
  if (stage_split.first < 1 || stage_split.second < 1) {
    throw ConfigError("run.stage_split needs two positive integers");
  }
  if (threads < 0) throw ConfigError("run.threads must be >= 0");
  if (out_dir.empty()) throw ConfigError("run.out_dir must not be empty");
  if (ablation.average_fusion && ablation.disable_inter_fusion) {
    throw ConfigError(
        "ablation.average_fusion and ablation.disable_inter_fusion are exclusive");
  }
  if (ablation.disable_cross_branch && ablation.disable_inter_fusion) {
    throw ConfigError(
        "ablation.disable_inter_fusion needs the cross branch; drop "
        "ablation.disable_cross_branch");
  }
}

ExperimentConfig parse_experiment_config(std::istream& in) {
  ExperimentConfig cfg;
  std::string section;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;

    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ConfigError("line " + std::to_string(line_no) + ": unterminated section header");
      }
      section = trim(line.substr(1, line.size() - 2));
      if (section != "benchmark" && section != "network" && section != "training" &&
          section != "run" && section != "ablation") {
        throw ConfigError("unknown section [" + section + "]");
      }
      continue;
    }

    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (section.empty()) {
      throw ConfigError("key '" + key + "' appears before any section header");
    }
    const std::string field = section + "." + key;

    if (section == "benchmark") {
      if (key == "seeds" || key == "seed") {
        cfg.seeds.clear();
        for (const std::string& item : split(value, ',')) {
          cfg.seeds.push_back(parse_u64(field, item));
        }
      } else {
        fail(field, "is not a known key");
      }
    } else if (section == "network") {
      if (key == "input_dim") {
        cfg.network.input_dim = static_cast<int>(parse_int(field, value));
      } else if (key == "feature_layers") {
        cfg.network.feature_layer_sizes = parse_int_list(field, value);
      } else if (key == "mff_start_layer") {
        cfg.network.mff_start_layer = static_cast<int>(parse_int(field, value));
      } else if (key == "groups") {
        cfg.network.group_count = static_cast<int>(parse_int(field, value));
      } else if (key == "overlap") {
        cfg.network.overlap = parse_real(field, value);
      } else if (key == "components") {
        cfg.network.output_components = static_cast<int>(parse_int(field, value));
      } else {
        fail(field, "is not a known key");
      }
    } else if (section == "training") {
      if (key == "lambda") {
        cfg.training.lambda = parse_real(field, value);
      } else if (key == "learning_rate") {
        cfg.training.learning_rate = parse_real(field, value);
      } else if (key == "batch_size") {
        cfg.training.batch_size = static_cast<int>(parse_int(field, value));
      } else if (key == "stage1_batches") {
        cfg.training.stage1_batches = static_cast<int>(parse_int(field, value));
      } else if (key == "stage2_batches") {
        cfg.training.stage2_batches = static_cast<int>(parse_int(field, value));
      } else if (key == "freeze_backbones_stage2") {
        cfg.training.freeze_backbones_stage2 = parse_bool(field, value);
      } else if (key == "clip_norm") {
        cfg.training.clip_norm = parse_real(field, value);
      } else {
        fail(field, "is not a known key");
      }
    } else if (section == "run") {
      if (key == "variants") {
        cfg.variants = split(value, ',');
        cfg.variants.erase(std::remove(cfg.variants.begin(), cfg.variants.end(), ""),
                           cfg.variants.end());
        if (cfg.variants.empty()) fail(field, "lists no variants");
      } else if (key == "out_dir") {
        cfg.out_dir = value;
      } else if (key == "adapt_samples") {
        cfg.adapt_samples = static_cast<int>(parse_int(field, value));
      } else if (key == "adapt_batches") {
        cfg.adapt_batches = static_cast<int>(parse_int(field, value));
      } else if (key == "stage_split") {
        const std::vector<std::string> parts = split(value, ':');
        if (parts.size() != 2) fail(field, "must look like 4:1");
        cfg.stage_split = {static_cast<int>(parse_int(field, parts[0])),
                           static_cast<int>(parse_int(field, parts[1]))};
      } else if (key == "threads") {
        cfg.threads = static_cast<int>(parse_int(field, value));
      } else if (key == "save_checkpoints") {
        cfg.save_checkpoints = parse_bool(field, value);
      } else {
        fail(field, "is not a known key");
      }
    } else {  // ablation
      if (key == "disable_cross_branch") {
        cfg.ablation.disable_cross_branch = parse_bool(field, value);
      } else if (key == "average_fusion") {
        cfg.ablation.average_fusion = parse_bool(field, value);
      } else if (key == "disable_inter_fusion") {
        cfg.ablation.disable_inter_fusion = parse_bool(field, value);
      } else {
        fail(field, "is not a known key");
      }
    }
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig parse_experiment_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  return parse_experiment_config(in);
}

}  // namespace evifuse
