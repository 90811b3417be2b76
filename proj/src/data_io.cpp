#include "eamser/data_io.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "eamser/eam.hpp"
#include "eamser/error.hpp"

namespace eamser {

namespace {

using nlohmann::json;

std::string located(const std::filesystem::path& path, std::size_t line, const std::string& msg) {
  return path.string() + ":" + std::to_string(line) + ": " + msg;
}

std::vector<unsigned char> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io_error, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_all(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::io_error, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(Errc::io_error, "write failed: " + path.string());
}

class ByteWriter {
 public:
  void tag(const char* t) { bytes_.insert(bytes_.end(), t, t + 4); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
  }
  void f32(float v) {
    std::uint32_t b;
    std::memcpy(&b, &v, sizeof b);
    u32(b);
  }
  const std::vector<unsigned char>& bytes() const { return bytes_; }

 private:
  std::vector<unsigned char> bytes_;
};

class ByteReader {
 public:
  ByteReader(const std::vector<unsigned char>& bytes, std::string source)
      : bytes_(bytes), source_(std::move(source)) {}

  bool tag(const char* t) {
    need(4);
    bool ok = std::memcmp(bytes_.data() + pos_, t, 4) == 0;
    pos_ += 4;
    return ok;
  }
  std::uint32_t u32() {
    need(4);
    const unsigned char* p = bytes_.data() + pos_;
    pos_ += 4;
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  }
  float f32() {
    std::uint32_t b = u32();
    float v;
    std::memcpy(&v, &b, sizeof v);
    return v;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  void need(std::size_t n) const {
    if (remaining() < n)
      throw Error(Errc::truncated_file, source_ + ": needs " + std::to_string(n) +
                                            " more bytes at offset " + std::to_string(pos_));
  }

 private:
  const std::vector<unsigned char>& bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

std::string required_string(const json& j, const char* key, const std::filesystem::path& path,
                            std::size_t line) {
  auto it = j.find(key);
  if (it == j.end() || !it->is_string())
    throw Error(Errc::parse_error, located(path, line, std::string("missing string field '") + key + "'"));
  return it->get<std::string>();
}

std::optional<std::filesystem::path> optional_path(const json& j, const char* key,
                                                   const std::filesystem::path& base,
                                                   const std::filesystem::path& path,
                                                   std::size_t line) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  if (!it->is_string())
    throw Error(Errc::parse_error, located(path, line, std::string("field '") + key + "' must be a string"));
  std::filesystem::path p = it->get<std::string>();
  return p.is_absolute() ? p : base / p;
}

const std::set<std::string> kManifestKeys = {"id",      "audio_path", "feature_path", "label",
                                             "speaker", "session",    "soft_label",   "mixup"};

}  // namespace

Manifest read_manifest(const std::filesystem::path& path, const std::vector<std::string>& classes) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io_error, "cannot open manifest " + path.string());
  const std::filesystem::path base = path.parent_path();

  Manifest m;
  std::set<std::string> seen_ids;
  std::string text;
  std::size_t line_no = 0;
  while (std::getline(in, text)) {
    ++line_no;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw Error(Errc::parse_error, located(path, line_no, e.what()));
    }
    if (!j.is_object()) throw Error(Errc::parse_error, located(path, line_no, "expected a JSON object"));
    for (const auto& [key, value] : j.items())
      if (!kManifestKeys.count(key))
        throw Error(Errc::parse_error, located(path, line_no, "unknown field '" + key + "'"));

    ManifestEntry e;
    e.line = line_no;
    e.id = required_string(j, "id", path, line_no);
    e.label = required_string(j, "label", path, line_no);
    e.speaker = j.contains("speaker") ? required_string(j, "speaker", path, line_no) : "";
    e.session = j.contains("session") ? required_string(j, "session", path, line_no) : "";
    e.audio_path = optional_path(j, "audio_path", base, path, line_no);
    e.feature_path = optional_path(j, "feature_path", base, path, line_no);
    if (!e.audio_path && !e.feature_path)
      throw Error(Errc::parse_error, located(path, line_no, "entry needs audio_path or feature_path"));
    if (!classes.empty() && std::find(classes.begin(), classes.end(), e.label) == classes.end())
      throw Error(Errc::unknown_label, located(path, line_no, "label '" + e.label + "' not in class list"));
    if (!seen_ids.insert(e.id).second)
      throw Error(Errc::parse_error, located(path, line_no, "duplicate id '" + e.id + "'"));
    if (auto it = j.find("soft_label"); it != j.end()) {
      if (!it->is_array() || it->empty())
        throw Error(Errc::parse_error, located(path, line_no, "soft_label must be a nonempty array"));
      Eigen::VectorXd p(static_cast<Eigen::Index>(it->size()));
      for (std::size_t k = 0; k < it->size(); ++k) {
        if (!(*it)[k].is_number())
          throw Error(Errc::parse_error, located(path, line_no, "soft_label entries must be numbers"));
        p[static_cast<Eigen::Index>(k)] = (*it)[k].get<double>();
      }
      try {
        SoftLabel checked(p);
      } catch (const Error& err) {
        throw Error(Errc::parse_error, located(path, line_no, err.what()));
      }
      e.soft_label = std::move(p);
    }
    if (auto it = j.find("mixup"); it != j.end()) {
      if (!it->is_string())
        throw Error(Errc::parse_error, located(path, line_no, "mixup must be a string"));
      e.mixup = it->get<std::string>();
    }
    m.entries.push_back(std::move(e));
  }

  if (classes.empty()) {
    std::set<std::string> labels;
    for (const auto& e : m.entries) labels.insert(e.label);
    m.classes.assign(labels.begin(), labels.end());
  } else {
    m.classes = classes;
  }

  for (auto& e : m.entries) {
    auto it = std::find(m.classes.begin(), m.classes.end(), e.label);
    if (it == m.classes.end())
      throw Error(Errc::unknown_label, located(path, e.line, "label '" + e.label + "' not in class list"));
    e.label_index = static_cast<int>(it - m.classes.begin());
    if (e.soft_label && e.soft_label->size() != static_cast<Eigen::Index>(m.classes.size()))
      throw Error(Errc::parse_error, located(path, e.line, "soft_label length differs from class count"));
  }
  return m;
}

std::string to_json_line(const ManifestEntry& e) {
  nlohmann::ordered_json j;
  j["id"] = e.id;
  if (e.audio_path) j["audio_path"] = e.audio_path->string();
  if (e.feature_path) j["feature_path"] = e.feature_path->string();
  j["label"] = e.label;
  j["speaker"] = e.speaker;
  j["session"] = e.session;
  if (e.soft_label) j["soft_label"] = std::vector<double>(e.soft_label->begin(), e.soft_label->end());
  if (e.mixup) j["mixup"] = *e.mixup;
  return j.dump();
}

// ---------------------------------------------------------------------------

FeatureMatrix read_features(const std::filesystem::path& path) {
  const auto bytes = read_all(path);
  ByteReader r(bytes, path.string());
  if (!r.tag("EAMF")) throw Error(Errc::bad_magic, path.string() + ": not an EAMF feature file");
  const std::uint32_t version = r.u32();
  if (version != kFeatureVersion)
    throw Error(Errc::version_mismatch, path.string() + ": feature version " + std::to_string(version));
  const std::uint32_t t = r.u32();
  const std::uint32_t d = r.u32();
  if (t == 0 || d == 0) throw Error(Errc::parse_error, path.string() + ": empty feature matrix");
  const std::uint64_t count = static_cast<std::uint64_t>(t) * d;
  if (count * 4 > r.remaining())
    throw Error(Errc::truncated_file, path.string() + ": header declares " + std::to_string(t) +
                                          "x" + std::to_string(d) + " values");
  FeatureMatrix x(t, d);
  float* out = x.data();
  for (std::uint64_t i = 0; i < count; ++i) out[i] = r.f32();
  return x;
}

void write_features(const std::filesystem::path& path, const FeatureMatrix& x) {
  if (x.rows() < 1 || x.cols() < 1) throw Error(Errc::invalid_argument, "feature matrix is empty");
  ByteWriter w;
  w.tag("EAMF");
  w.u32(kFeatureVersion);
  w.u32(static_cast<std::uint32_t>(x.rows()));
  w.u32(static_cast<std::uint32_t>(x.cols()));
  const float* in = x.data();
  for (Eigen::Index i = 0; i < x.size(); ++i) w.f32(in[i]);
  write_all(path, w.bytes());
}

// ---------------------------------------------------------------------------

GroupKey parse_group_key(const std::string& s) {
  if (s == "session") return GroupKey::session;
  if (s == "speaker") return GroupKey::speaker;
  throw Error(Errc::invalid_argument, "unknown group key '" + s + "'");
}

const char* to_string(GroupKey k) noexcept {
  return k == GroupKey::session ? "session" : "speaker";
}

const std::string& group_of(const ManifestEntry& e, GroupKey key) {
  return key == GroupKey::session ? e.session : e.speaker;
}

int FoldPlan::fold_of(const ManifestEntry& e) const {
  if (auto it = assignment.find(e.id); it != assignment.end()) return it->second;
  if (auto it = group_fold.find(group_of(e, group_key)); it != group_fold.end()) return it->second;
  return -1;
}

FoldPlan make_folds(std::span<const ManifestEntry> entries, int n_folds, GroupKey key,
                    unsigned long long seed) {
  if (n_folds < 1) throw Error(Errc::invalid_argument, "n_folds must be positive");

  std::vector<std::string> groups;
  std::map<std::string, std::size_t> sizes;
  for (const auto& e : entries) {
    const std::string& g = group_of(e, key);
    if (sizes[g]++ == 0) groups.push_back(g);
  }
  if (groups.size() < static_cast<std::size_t>(n_folds))
    throw Error(Errc::too_few_groups, std::to_string(groups.size()) + " distinct " + to_string(key) +
                                          " values for " + std::to_string(n_folds) + " folds");

  Rng rng(seed);
  std::shuffle(groups.begin(), groups.end(), rng);
  std::stable_sort(groups.begin(), groups.end(),
                   [&](const std::string& a, const std::string& b) { return sizes[a] > sizes[b]; });

  FoldPlan plan;
  plan.n_folds = n_folds;
  plan.group_key = key;
  std::vector<std::size_t> load(static_cast<std::size_t>(n_folds), 0);
  for (const auto& g : groups) {
    const auto fold = static_cast<std::size_t>(std::min_element(load.begin(), load.end()) - load.begin());
    plan.group_fold[g] = static_cast<int>(fold);
    load[fold] += sizes[g];
  }
  for (const auto& e : entries) plan.assignment[e.id] = plan.group_fold.at(group_of(e, key));
  return plan;
}

// ---------------------------------------------------------------------------

Example load_example(const ManifestEntry& e, int n_classes) {
  if (!e.feature_path)
    throw Error(Errc::parse_error, "entry '" + e.id + "' has no feature_path");
  Example ex = make_example(e.id, read_features(*e.feature_path).cast<double>(), e.label_index,
                            n_classes);
  if (e.soft_label) {
    ex.target = *e.soft_label;
    Eigen::Index idx;
    ex.target.maxCoeff(&idx);
    ex.label = static_cast<int>(idx);
  }
  return ex;
}

void dump_embeddings(const Dataset& data, std::span<const std::string> splits,
                     std::span<const std::string> class_names, const ModelParams<double>& params,
                     const ModelConfig& cfg, const std::filesystem::path& path) {
  if (splits.size() != data.size())
    throw Error(Errc::invalid_argument, "one split name per utterance required");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(Errc::io_error, "cannot open " + path.string() + " for writing");
  out << "id,label,split";
  for (int k = 0; k < cfg.proj_dim; ++k) out << ",e" << k;
  out << '\n';
  char buf[32];
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto s = forward_pass(data[i].features, params, cfg);
    out << data[i].id << ',' << class_names[static_cast<std::size_t>(data[i].label)] << ','
        << splits[i];
    for (Eigen::Index k = 0; k < s.f_low.size(); ++k) {
      std::snprintf(buf, sizeof buf, "%.9g", s.f_low[k]);
      out << ',' << buf;
    }
    out << '\n';
  }
  if (!out) throw Error(Errc::io_error, "write failed: " + path.string());
}

// ---------------------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg,
                     const ModelParams<double>& params) {
  ByteWriter w;
  w.tag("EAMC");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(cfg.feature_dim));
  w.u32(static_cast<std::uint32_t>(cfg.heads));
  w.u32(static_cast<std::uint32_t>(cfg.proj_dim));
  w.u32(static_cast<std::uint32_t>(cfg.n_classes));
  w.u32(static_cast<std::uint32_t>(cfg.aggregation));
  w.u32((cfg.pool_softmax ? 1u : 0u) | (cfg.context_broadcast ? 2u : 0u) |
        (cfg.shared_frame_projection ? 4u : 0u));

  const ModelParams<double> shape = ModelParams<double>::zero(cfg);
  for_each_tensor([&](auto expected, auto tensor) {
    if (expected.size() != tensor.size())
      throw Error(Errc::dimension_mismatch, "parameters do not match checkpoint header");
    for (double v : tensor) w.f32(static_cast<float>(v));
  }, shape, params);
  write_all(path, w.bytes());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_all(path);
  ByteReader r(bytes, path.string());
  if (!r.tag("EAMC")) throw Error(Errc::bad_magic, path.string() + ": not an EAMC checkpoint");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw Error(Errc::version_mismatch, path.string() + ": checkpoint version " + std::to_string(version));

  Checkpoint ck;
  ck.config.feature_dim = static_cast<int>(r.u32());
  ck.config.heads = static_cast<int>(r.u32());
  ck.config.proj_dim = static_cast<int>(r.u32());
  ck.config.n_classes = static_cast<int>(r.u32());
  const std::uint32_t agg = r.u32();
  if (agg > 2) throw Error(Errc::parse_error, path.string() + ": bad aggregation code");
  ck.config.aggregation = static_cast<Aggregation>(agg);
  const std::uint32_t flags = r.u32();
  ck.config.pool_softmax = flags & 1u;
  ck.config.context_broadcast = flags & 2u;
  ck.config.shared_frame_projection = flags & 4u;
  ck.config.validate();

  ck.params = ModelParams<double>::zero(ck.config);
  for_each_tensor([&](auto tensor) {
    r.need(tensor.size() * 4);
    for (double& v : tensor) v = r.f32();
  }, ck.params);
  if (r.remaining() != 0)
    throw Error(Errc::parse_error, path.string() + ": trailing bytes after parameters");
  return ck;
}

}  // namespace eamser
