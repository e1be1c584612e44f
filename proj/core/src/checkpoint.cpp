#include "evifuse/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <limits>
#include <utility>
#include <vector>

#include <json.hpp>

#include "evifuse/errors.hpp"

namespace evifuse {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'E', 'V', 'F', '1'};
constexpr std::uint32_t kMaxNameLength = 4096;
constexpr std::uint32_t kMaxRank = 8;
constexpr std::uint64_t kMaxElements = 1ull << 28;

void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  out.write(b, 4);
}

void put_f64(std::ostream& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xffu);
  out.write(b, 8);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw LoadError("checkpoint truncated");
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

double get_f64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw LoadError("checkpoint truncated");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

json network_json(const NetworkConfig& cfg) {
  return json{{"input_dim", cfg.input_dim},
              {"feature_layer_sizes", cfg.feature_layer_sizes},
              {"mff_start_layer", cfg.mff_start_layer},
              {"group_count", cfg.group_count},
              {"overlap", cfg.overlap},
              {"output_components", cfg.output_components}};
}

NetworkConfig network_from_json(const json& j) {
  NetworkConfig cfg;
  cfg.input_dim = j.at("input_dim").get<int>();
  cfg.feature_layer_sizes = j.at("feature_layer_sizes").get<std::vector<int>>();
  cfg.mff_start_layer = j.at("mff_start_layer").get<int>();
  cfg.group_count = j.at("group_count").get<int>();
  cfg.overlap = j.at("overlap").get<double>();
  cfg.output_components = j.at("output_components").get<int>();
  return cfg;
}

json partition_json(const PartitionSpec& p) {
  json groups = json::array();
  for (const LabelGroup& g : p.groups) {
    groups.push_back(json{{"index", g.index},
                          {"left", g.left},
                          {"center", g.center},
                          {"right", g.right},
                          {"length", g.length}});
  }
  return json{{"group_count", p.group_count},
              {"overlap", p.overlap},
              {"sample_count", p.sample_count},
              {"groups", std::move(groups)}};
}

PartitionSpec partition_from_json(const json& j) {
  PartitionSpec p;
  p.group_count = j.at("group_count").get<int>();
  p.overlap = j.at("overlap").get<double>();
  p.sample_count = j.at("sample_count").get<std::size_t>();
  for (const json& gj : j.at("groups")) {
    LabelGroup g;
    g.index = gj.at("index").get<int>();
    g.left = gj.at("left").get<double>();
    g.center = gj.at("center").get<double>();
    g.right = gj.at("right").get<double>();
    g.length = gj.at("length").get<double>();
    p.groups.push_back(g);
  }
  if (p.group_count < 1 || p.groups.size() != static_cast<std::size_t>(p.group_count)) {
    throw LoadError("checkpoint holds a malformed partition");
  }
  return p;
}

void write_file(const std::string& path, const json& meta, const ParameterStore& store) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  const std::string blob = meta.dump();
  put_u32(out, static_cast<std::uint32_t>(blob.size()));
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  for (std::size_t p = 0; p < store.count(); ++p) {
    const Parameter& param = store.at(static_cast<int>(p));
    put_u32(out, static_cast<std::uint32_t>(param.name.size()));
    out.write(param.name.data(), static_cast<std::streamsize>(param.name.size()));
    put_u32(out, static_cast<std::uint32_t>(param.value.shape.size()));
    for (std::size_t dim : param.value.shape) {
      put_u32(out, static_cast<std::uint32_t>(dim));
    }
    for (double v : param.value.values) put_f64(out, v);
  }
  out.flush();
  if (!out) throw IoError("failed writing '" + path + "'");
}

struct RawParameter {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> values;
};

struct RawCheckpoint {
  json meta;
  std::vector<RawParameter> params;
};

json read_header(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw LoadError("not a checkpoint file (bad magic)");
  }
  const std::uint32_t version = get_u32(in);
  if (version != kCheckpointVersion) {
    throw LoadError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t blob_len = get_u32(in);
  std::string blob(blob_len, '\0');
  in.read(blob.data(), static_cast<std::streamsize>(blob_len));
  if (!in) throw LoadError("checkpoint truncated");
  try {
    return json::parse(blob);
  } catch (const json::exception&) {
    throw LoadError("checkpoint metadata is not valid JSON");
  }
}

RawCheckpoint read_raw(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open '" + path + "'");
  RawCheckpoint raw;
  raw.meta = read_header(in);

  std::size_t count = 0;
  try {
    count = raw.meta.at("parameter_count").get<std::size_t>();
  } catch (const json::exception&) {
    throw LoadError("checkpoint metadata lacks parameter_count");
  }
  raw.params.reserve(count);
  for (std::size_t p = 0; p < count; ++p) {
    RawParameter param;
    const std::uint32_t name_len = get_u32(in);
    if (name_len == 0 || name_len > kMaxNameLength) {
      throw LoadError("checkpoint parameter name length out of range");
    }
    param.name.resize(name_len);
    in.read(param.name.data(), name_len);
    if (!in) throw LoadError("checkpoint truncated");
    const std::uint32_t rank = get_u32(in);
    if (rank > kMaxRank) throw LoadError("checkpoint parameter rank out of range");
    std::uint64_t elements = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const std::uint32_t dim = get_u32(in);
      param.shape.push_back(dim);
      elements *= dim;
      if (elements > kMaxElements) {
        throw LoadError("checkpoint parameter size out of range");
      }
    }
    param.values.resize(elements);
    for (double& v : param.values) v = get_f64(in);
    raw.params.push_back(std::move(param));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw LoadError("trailing bytes after the parameter table");
  }
  return raw;
}

std::string meta_kind(const json& meta) {
  try {
    return meta.at("kind").get<std::string>();
  } catch (const json::exception&) {
    throw LoadError("checkpoint metadata lacks a model kind");
  }
}

void fill_store(ParameterStore& store, const std::vector<RawParameter>& params) {
  if (params.size() != store.count()) {
    throw LoadError("checkpoint parameter count does not match the model");
  }
  std::vector<bool> seen(store.count(), false);
  for (const RawParameter& raw : params) {
    const int idx = store.index_of(raw.name);
    if (idx < 0) throw LoadError("checkpoint names unknown parameter '" + raw.name + "'");
    if (seen[static_cast<std::size_t>(idx)]) {
      throw LoadError("checkpoint repeats parameter '" + raw.name + "'");
    }
    Parameter& param = store.at(idx);
    if (param.value.shape != raw.shape) {
      throw LoadError("checkpoint shape mismatch for parameter '" + raw.name + "'");
    }
    param.value.values = raw.values;
    seen[static_cast<std::size_t>(idx)] = true;
  }
}

NetworkConfig checked_network(const json& meta) {
  NetworkConfig cfg;
  try {
    cfg = network_from_json(meta.at("network"));
  } catch (const json::exception&) {
    throw LoadError("checkpoint network metadata is malformed");
  }
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw LoadError(std::string("checkpoint network config invalid: ") + e.what());
  }
  return cfg;
}

}  // namespace

void save_checkpoint(const EIFModel& model, const std::string& path) {
  json meta;
  meta["kind"] = "eif";
  meta["network"] = network_json(model.config());
  json ids = json::array();
  for (int b = 0; b < model.branch_count(); ++b) ids.push_back(model.branch(b).dataset_id);
  meta["dataset_ids"] = std::move(ids);
  meta["cross_enabled"] = model.cross_enabled();

  json bparts = json::array();
  for (int b = 0; b < model.branch_count(); ++b) {
    const BranchModule& branch = model.branch(b);
    if (branch.partitions.empty()) {
      bparts.push_back(nullptr);
    } else {
      json arr = json::array();
      for (const PartitionSpec& p : branch.partitions) arr.push_back(partition_json(p));
      bparts.push_back(std::move(arr));
    }
  }
  meta["branch_partitions"] = std::move(bparts);
  if (model.cross_partitions_set()) {
    json arr = json::array();
    for (const PartitionSpec& p : model.cross().partitions) arr.push_back(partition_json(p));
    meta["cross_partitions"] = std::move(arr);
  } else {
    meta["cross_partitions"] = nullptr;
  }
  meta["parameter_count"] = model.params().count();
  write_file(path, meta, model.params());
}

void save_checkpoint(const BaselineModel& model, const std::string& path) {
  json meta;
  meta["kind"] = "baseline";
  meta["network"] = network_json(model.config());
  meta["parameter_count"] = model.params().count();
  write_file(path, meta, model.params());
}

CheckpointKind peek_checkpoint_kind(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open '" + path + "'");
  const json meta = read_header(in);
  const std::string kind = meta_kind(meta);
  if (kind == "eif") return CheckpointKind::kEif;
  if (kind == "baseline") return CheckpointKind::kBaseline;
  throw LoadError("checkpoint holds unknown model kind '" + kind + "'");
}

EIFModel load_eif_checkpoint(const std::string& path) {
  RawCheckpoint raw = read_raw(path);
  if (meta_kind(raw.meta) != "eif") {
    throw LoadError("'" + path + "' does not hold a fusion model");
  }
  const NetworkConfig cfg = checked_network(raw.meta);

  std::vector<std::string> ids;
  try {
    ids = raw.meta.at("dataset_ids").get<std::vector<std::string>>();
  } catch (const json::exception&) {
    throw LoadError("checkpoint dataset ids are malformed");
  }
  if (ids.empty()) throw LoadError("checkpoint lists no branches");

  EIFModel model(cfg, ids);
  try {
    const json& bparts = raw.meta.at("branch_partitions");
    if (!bparts.is_array() || bparts.size() != ids.size()) {
      throw LoadError("checkpoint branch partitions are malformed");
    }
    for (std::size_t b = 0; b < bparts.size(); ++b) {
      if (bparts[b].is_null()) continue;
      std::vector<PartitionSpec> parts;
      for (const json& pj : bparts[b]) parts.push_back(partition_from_json(pj));
      model.set_branch_partitions(static_cast<int>(b), std::move(parts));
    }
    const json& cparts = raw.meta.at("cross_partitions");
    if (!cparts.is_null()) {
      std::vector<PartitionSpec> parts;
      for (const json& pj : cparts) parts.push_back(partition_from_json(pj));
      model.set_cross_partitions(std::move(parts));
    }
    model.set_cross_enabled(raw.meta.at("cross_enabled").get<bool>());
  } catch (const json::exception&) {
    throw LoadError("checkpoint partition metadata is malformed");
  }

  fill_store(model.params(), raw.params);
  return model;
}

BaselineModel load_baseline_checkpoint(const std::string& path) {
  RawCheckpoint raw = read_raw(path);
  if (meta_kind(raw.meta) != "baseline") {
    throw LoadError("'" + path + "' does not hold a baseline model");
  }
  BaselineModel model(checked_network(raw.meta));
  fill_store(model.params(), raw.params);
  return model;
}

void copy_branch_backbone(const EIFModel& source, int source_branch, EIFModel& dest,
                          int dest_branch) {
  if (source_branch < 0 || source_branch >= source.branch_count() || dest_branch < 0 ||
      dest_branch >= dest.branch_count()) {
    throw PreconditionError("branch index out of range");
  }
  const BranchModule& from = source.branch(source_branch);
  const BranchModule& to = dest.branch(dest_branch);
  if (from.layers.size() != to.layers.size()) {
    throw PreconditionError("branch depths differ");
  }
  for (std::size_t l = 0; l < from.layers.size(); ++l) {
    const Tensor& w = source.params().at(from.layers[l].w).value;
    const Tensor& b = source.params().at(from.layers[l].b).value;
    Tensor& wd = dest.params().at(to.layers[l].w).value;
    Tensor& bd = dest.params().at(to.layers[l].b).value;
    if (w.shape != wd.shape || b.shape != bd.shape) {
      throw PreconditionError("branch layer widths differ");
    }
    wd.values = w.values;
    bd.values = b.values;
  }
}

}  // namespace evifuse
