#pragma once

// File formats: KITTI velodyne scans, SemanticKITTI labels, KITTI pose
// lists, SGM1 checkpoints, key=value configuration and dataset manifests.

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <zlib.h>

#include "sgm/errors.hpp"
#include "sgm/geometry.hpp"
#include "sgm/instances.hpp"
#include "sgm/nets.hpp"
#include "sgm/optim.hpp"
#include "sgm/pipeline.hpp"
#include "sgm/training.hpp"

namespace sgm {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Raw bytes

inline std::vector<unsigned char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return bytes;
}

inline void write_file(const fs::path& path, std::span<const unsigned char> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

namespace detail {

inline std::uint32_t load_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

inline std::uint64_t load_u64(const unsigned char* p) {
  return static_cast<std::uint64_t>(load_u32(p)) | static_cast<std::uint64_t>(load_u32(p + 4)) << 32;
}

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int s = 0; s < 32; s += 8) out.push_back(static_cast<unsigned char>(v >> s));
}

inline void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int s = 0; s < 64; s += 8) out.push_back(static_cast<unsigned char>(v >> s));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// KITTI scans and labels

inline PointCloud parse_scan(std::span<const unsigned char> bytes, const std::string& what = "scan") {
  if (bytes.size() % 16 != 0) {
    throw FormatError(what + ": size " + std::to_string(bytes.size()) + " is not a multiple of 16 bytes");
  }
  PointCloud c;
  const std::size_t n = bytes.size() / 16;
  c.points.reserve(n);
  c.intensity.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    float f[4];
    for (int k = 0; k < 4; ++k) f[k] = std::bit_cast<float>(detail::load_u32(bytes.data() + 16 * i + 4 * k));
    c.points.emplace_back(f[0], f[1], f[2]);
    c.intensity.push_back(f[3]);
  }
  return c;
}

inline PointCloud read_scan(const fs::path& path) { return parse_scan(read_file(path), path.string()); }

// Coordinates are stored as f32; intensity defaults to 0 when absent.
inline std::vector<unsigned char> encode_scan(const PointCloud& c) {
  std::vector<unsigned char> out;
  out.reserve(16 * c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    const float f[4] = {static_cast<float>(c.points[i].x()), static_cast<float>(c.points[i].y()),
                        static_cast<float>(c.points[i].z()),
                        i < c.intensity.size() ? static_cast<float>(c.intensity[i]) : 0.0f};
    for (float v : f) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline void write_scan(const fs::path& path, const PointCloud& c) { write_file(path, encode_scan(c)); }

inline std::vector<std::uint32_t> parse_labels(std::span<const unsigned char> bytes, std::size_t point_count,
                                               const std::string& what = "labels") {
  if (bytes.size() % 4 != 0 || bytes.size() / 4 != point_count) {
    throw FormatError(what + ": " + std::to_string(bytes.size() / 4) + " labels (" + std::to_string(bytes.size()) +
                      " bytes) for " + std::to_string(point_count) + " points");
  }
  std::vector<std::uint32_t> out(point_count);
  for (std::size_t i = 0; i < point_count; ++i) out[i] = detail::load_u32(bytes.data() + 4 * i) & 0xFFFFu;
  return out;
}

inline std::vector<std::uint32_t> read_labels(const fs::path& path, std::size_t point_count) {
  return parse_labels(read_file(path), point_count, path.string());
}

inline void write_labels(const fs::path& path, std::span<const std::uint32_t> labels) {
  std::vector<unsigned char> out;
  out.reserve(4 * labels.size());
  for (auto l : labels) detail::put_u32(out, l);
  write_file(path, out);
}

inline SemanticPointCloud read_semantic_scan(const fs::path& scan, const fs::path& labels) {
  SemanticPointCloud s;
  s.cloud = read_scan(scan);
  s.labels = read_labels(labels, s.cloud.size());
  return s;
}

// ---------------------------------------------------------------------------
// Poses: one row-major 3x4 [R | t] per non-empty line.

inline constexpr double kPoseOrthonormalityTolerance = 1e-3;

inline RigidTransform pose_from_numbers(std::span<const double> v, const std::string& where) {
  RigidTransform t;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) t.rotation(r, c) = v[static_cast<std::size_t>(4 * r + c)];
    t.translation(r) = v[static_cast<std::size_t>(4 * r + 3)];
  }
  if (!t.rotation.allFinite() || !t.translation.allFinite()) throw FormatError(where + ": non-finite pose entry");
  if (!is_rotation(t.rotation, kPoseOrthonormalityTolerance)) {
    throw FormatError(where + ": rotation is not orthonormal within 1e-3");
  }
  t.rotation = project_to_rotation(t.rotation);
  return t;
}

inline std::vector<RigidTransform> parse_poses(std::istream& in, const std::string& what = "poses") {
  std::vector<RigidTransform> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::vector<double> v;
    std::string tok;
    while (ls >> tok) {
      try {
        std::size_t used = 0;
        v.push_back(std::stod(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::logic_error&) {
        throw FormatError(what + ":" + std::to_string(line_no) + ": not a number: " + tok);
      }
    }
    if (v.empty()) continue;
    if (v.size() != 12) {
      throw FormatError(what + ":" + std::to_string(line_no) + ": expected 12 numbers, found " +
                        std::to_string(v.size()));
    }
    out.push_back(pose_from_numbers(v, what + ":" + std::to_string(line_no)));
  }
  return out;
}

inline std::vector<RigidTransform> read_poses(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return parse_poses(in, path.string());
}

// Maps coordinates of frame b into frame a.
inline RigidTransform relative_pose(const RigidTransform& pose_a, const RigidTransform& pose_b) {
  return pose_a.inverse() * pose_b;
}

// 12 numbers, KITTI layout.
inline void write_transform(std::ostream& os, const RigidTransform& t) {
  os << std::setprecision(17);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) os << t.rotation(r, c) << ' ';
    os << t.translation(r) << (r < 2 ? ' ' : '\n');
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr char kCheckpointMagic[4] = {'S', 'G', 'M', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr unsigned char kDtypeF64 = 1;

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

inline std::uint32_t crc32_of(std::span<const unsigned char> bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(::crc32(0L, Z_NULL, 0), bytes.data(), static_cast<uInt>(bytes.size())));
}

inline std::vector<unsigned char> encode_checkpoint(std::span<const NamedTensor> tensors) {
  std::set<std::string> names;
  std::vector<unsigned char> out(kCheckpointMagic, kCheckpointMagic + 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (!names.insert(t.name).second) throw ValidationError("checkpoint: duplicate tensor name " + t.name);
    if (shape_numel(t.shape) != t.values.size()) throw ValidationError("checkpoint: size mismatch for " + t.name);
    detail::put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    detail::put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
    out.push_back(kDtypeF64);
    for (double v : t.values) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  detail::put_u32(out, crc32_of(out));
  return out;
}

inline std::vector<NamedTensor> decode_checkpoint(std::span<const unsigned char> bytes) {
  if (bytes.size() < 16) throw CrcError("checkpoint: truncated (" + std::to_string(bytes.size()) + " bytes)");
  const std::size_t body = bytes.size() - 4;
  if (crc32_of(bytes.first(body)) != detail::load_u32(bytes.data() + body)) {
    throw CrcError("checkpoint: CRC mismatch");
  }
  if (!std::equal(kCheckpointMagic, kCheckpointMagic + 4, bytes.begin())) throw FormatError("checkpoint: bad magic");
  const std::uint32_t version = detail::load_u32(bytes.data() + 4);
  if (version != kCheckpointVersion) throw VersionError("checkpoint: unsupported version " + std::to_string(version));
  std::size_t pos = 12;
  const auto need = [&](std::size_t n) {
    if (pos + n > body) throw FormatError("checkpoint: record runs past the end of the file");
  };
  const auto u32 = [&] {
    need(4);
    const auto v = detail::load_u32(bytes.data() + pos);
    pos += 4;
    return v;
  };
  const std::uint32_t count = detail::load_u32(bytes.data() + 8);
  std::vector<NamedTensor> out;
  for (std::uint32_t t = 0; t < count; ++t) {
    NamedTensor nt;
    const std::uint32_t len = u32();
    need(len);
    nt.name.assign(reinterpret_cast<const char*>(bytes.data() + pos), len);
    pos += len;
    const std::uint32_t rank = u32();
    for (std::uint32_t r = 0; r < rank; ++r) nt.shape.push_back(u32());
    need(1);
    if (bytes[pos++] != kDtypeF64) throw FormatError("checkpoint: unsupported dtype for " + nt.name);
    const std::size_t n = shape_numel(nt.shape);
    need(8 * n);
    nt.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) nt.values[i] = std::bit_cast<double>(detail::load_u64(bytes.data() + pos + 8 * i));
    pos += 8 * n;
    out.push_back(std::move(nt));
  }
  if (pos != body) throw FormatError("checkpoint: trailing bytes after the last tensor");
  return out;
}

inline std::vector<NamedTensor> named_tensors(const ParameterStore& store) {
  std::vector<NamedTensor> out;
  for (const auto& p : store.params()) {
    out.push_back({p.name, p.tensor.shape(), std::vector<double>(p.tensor.data().begin(), p.tensor.data().end())});
  }
  return out;
}

inline void save_checkpoint(const ParameterStore& store, const fs::path& path) {
  write_file(path, encode_checkpoint(named_tensors(store)));
}

inline std::vector<NamedTensor> load_checkpoint(const fs::path& path) { return decode_checkpoint(read_file(path)); }

// Copies loaded values into the store. Names and shapes must match exactly.
inline void apply_checkpoint(ParameterStore& store, std::span<const NamedTensor> tensors) {
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t;
  std::vector<std::string> missing, extra, reshaped;
  std::set<std::string> expected;
  for (auto& p : store.params()) {
    expected.insert(p.name);
    auto it = by_name.find(p.name);
    if (it == by_name.end()) {
      missing.push_back(p.name);
    } else if (it->second->shape != p.tensor.shape()) {
      reshaped.push_back(p.name + " " + shape_str(it->second->shape) + " vs " + shape_str(p.tensor.shape()));
    }
  }
  for (const auto& t : tensors)
    if (!expected.count(t.name)) extra.push_back(t.name);
  if (!missing.empty() || !extra.empty() || !reshaped.empty()) {
    std::string msg = "schema mismatch";
    const auto list = [&](const char* label, const std::vector<std::string>& v) {
      if (v.empty()) return;
      msg += std::string("; ") + label + ":";
      for (const auto& s : v) msg += " " + s;
    };
    list("missing", missing);
    list("unexpected", extra);
    list("shape", reshaped);
    throw SchemaError(msg);
  }
  for (auto& p : store.params()) {
    const auto& src = by_name.at(p.name)->values;
    std::copy(src.begin(), src.end(), p.tensor.mutable_data().begin());
    std::fill(p.momentum.begin(), p.momentum.end(), 0.0);
  }
}

// ---------------------------------------------------------------------------
// Configuration: flat "key = value" lines, '#' starts a comment.

struct AppConfig {
  std::uint64_t seed = 7;
  ModelConfig model;
  TrainConfig train;
  SceneGenConfig gen;
  RegistrationConfig registration;
  EvalConfig eval;
  CategoryConfig categories = default_category_config();
  std::size_t train_pairs = 500;
  std::size_t val_pairs = 50;
  std::size_t synth_pairs = 100;
  std::size_t eval_pairs = 100;
  // Velodyne -> pose frame; identity unless the poses are camera-frame.
  RigidTransform extrinsic = RigidTransform::identity();

  AppConfig() { set_seed(seed); }

  // --seed drives model init, data generation and shuffling.
  void set_seed(std::uint64_t s) {
    seed = s;
    model.seed = s;
    train.seed = s;
    gen.seed = s;
  }

  void validate() const {
    model.validate();
    train.validate();
    gen.validate();
    categories.validate();
    if (categories.num_categories() != model.num_categories) {
      throw ValidationError("config: model expects " + std::to_string(model.num_categories) + " categories, table has " +
                            std::to_string(categories.num_categories()));
    }
    if (train.shape_points != model.shape_points) throw ValidationError("config: train and model K differ");
    extrinsic.validate();
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream in(value);
  T v{};
  in >> v;
  if (in.fail() || !(in >> std::ws).eof()) throw ValidationError("config: bad value for " + key + ": '" + value + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw ValidationError("config: bad boolean for " + key + ": '" + value + "'");
}

}  // namespace detail

// category.<name> = <index> <radius> <min_points> <raw,raw,...>
// Any category line replaces the built-in table as a whole.
inline AppConfig parse_config(std::istream& in, const std::string& what = "config") {
  AppConfig cfg;
  std::map<std::string, std::pair<std::string, std::size_t>> kv;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ValidationError(what + ":" + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    if (!kv.emplace(key, std::pair{detail::trim(line.substr(eq + 1)), line_no}).second) {
      throw ValidationError(what + ":" + std::to_string(line_no) + ": duplicate key " + key);
    }
  }

  using detail::parse_bool;
  using detail::parse_number;
  using Setter = std::function<void(const std::string&, const std::string&)>;
  const auto sz = [](std::size_t& field) -> Setter {
    return [&field](const std::string& k, const std::string& v) { field = parse_number<std::size_t>(k, v); };
  };
  const auto dbl = [](double& field) -> Setter {
    return [&field](const std::string& k, const std::string& v) { field = parse_number<double>(k, v); };
  };
  const auto flag = [](bool& field) -> Setter {
    return [&field](const std::string& k, const std::string& v) { field = parse_bool(k, v); };
  };
  std::map<std::string, Setter> setters{
      {"seed", [&](const std::string& k, const std::string& v) { cfg.set_seed(parse_number<std::uint64_t>(k, v)); }},
      {"model.shape_points", sz(cfg.model.shape_points)},
      {"model.spatial_scale", dbl(cfg.model.spatial_scale)},
      {"model.gcn_mean", flag(cfg.model.gcn_mean)},
      {"model.attention_scaled", flag(cfg.model.attention_scaled)},
      {"model.attention_residual", flag(cfg.model.attention_residual)},
      {"train.batch_size", sz(cfg.train.batch_size)},
      {"train.learning_rate", dbl(cfg.train.learning_rate)},
      {"train.lr_decay", dbl(cfg.train.lr_decay)},
      {"train.momentum", dbl(cfg.train.momentum)},
      {"train.epochs", sz(cfg.train.epochs)},
      {"train.threshold", dbl(cfg.train.threshold)},
      {"train.beta", dbl(cfg.train.beta)},
      {"train.graph_k", sz(cfg.train.graph_k)},
      {"train.dustbin_loss", flag(cfg.train.loss.dustbin_term)},
      {"train.pairs", sz(cfg.train_pairs)},
      {"train.val_pairs", sz(cfg.val_pairs)},
      {"sinkhorn.max_iters", sz(cfg.train.sinkhorn.max_iters)},
      {"sinkhorn.tol", dbl(cfg.train.sinkhorn.tol)},
      {"gen.min_instances", sz(cfg.gen.min_instances)},
      {"gen.max_instances", sz(cfg.gen.max_instances)},
      {"gen.min_points", sz(cfg.gen.min_points)},
      {"gen.max_points", sz(cfg.gen.max_points)},
      {"gen.point_noise", dbl(cfg.gen.point_noise)},
      {"gen.centroid_jitter", dbl(cfg.gen.centroid_jitter)},
      {"gen.dropout", dbl(cfg.gen.dropout)},
      {"gen.max_rotation_deg", dbl(cfg.gen.max_rotation_deg)},
      {"gen.max_tilt_deg", dbl(cfg.gen.max_tilt_deg)},
      {"gen.max_translation", dbl(cfg.gen.max_translation)},
      {"gen.scene_half_extent", dbl(cfg.gen.scene_half_extent)},
      {"gen.pairs", sz(cfg.synth_pairs)},
      {"icp.max_iters", sz(cfg.registration.icp.max_iters)},
      {"icp.eps", dbl(cfg.registration.icp.convergence_eps)},
      {"icp.max_distance", dbl(cfg.registration.icp.max_correspondence_distance)},
      {"register.min_instances", sz(cfg.registration.min_instances)},
      {"register.min_correspondences", sz(cfg.registration.min_correspondences)},
      {"register.coarse_trim", dbl(cfg.registration.coarse_trim)},
      {"eval.beta", dbl(cfg.eval.beta)},
      {"eval.rre_threshold", dbl(cfg.eval.rre_threshold)},
      {"eval.rte_threshold", dbl(cfg.eval.rte_threshold)},
      {"eval.pairs", sz(cfg.eval_pairs)},
      {"eval.threads", sz(cfg.eval.threads)},
      {"kitti.extrinsic",
       [&](const std::string& k, const std::string& v) {
         std::vector<double> n;
         for (const auto& tok : detail::split_list(v, ' ')) n.push_back(parse_number<double>(k, tok));
         if (n.size() != 12) throw ValidationError("config: " + k + " needs 12 numbers");
         try {
           cfg.extrinsic = pose_from_numbers(n, k);
         } catch (const FormatError& e) {
           throw ValidationError(std::string("config: ") + e.what());
         }
       }},
  };

  if (auto it = kv.find("seed"); it != kv.end()) setters.at("seed")("seed", it->second.first);
  CategoryConfig custom;
  bool have_custom = false;
  for (const auto& [key, entry] : kv) {
    const auto& [value, line] = entry;
    const std::string where = what + ":" + std::to_string(line);
    if (key == "seed") continue;
    if (key.rfind("category.", 0) == 0) {
      const auto parts = detail::split_list(value, ' ');
      if (parts.size() != 4) throw ValidationError(where + ": expected <index> <radius> <min_points> <raw,...>");
      CategorySpec spec;
      spec.name = key.substr(9);
      spec.index = parse_number<std::size_t>(key, parts[0]);
      spec.cluster_radius = parse_number<double>(key, parts[1]);
      spec.min_points = parse_number<std::size_t>(key, parts[2]);
      for (const auto& r : detail::split_list(parts[3], ',')) spec.raw_labels.push_back(parse_number<std::uint32_t>(key, r));
      custom.categories.push_back(spec);
      have_custom = true;
      continue;
    }
    if (key == "ignored") {
      custom.ignored.clear();
      for (const auto& r : detail::split_list(value, ',')) custom.ignored.insert(parse_number<std::uint32_t>(key, r));
      continue;
    }
    const auto it = setters.find(key);
    if (it == setters.end()) throw ValidationError(where + ": unknown key " + key);
    it->second(key, value);
  }
  if (have_custom) {
    std::sort(custom.categories.begin(), custom.categories.end(),
              [](const CategorySpec& a, const CategorySpec& b) { return a.index < b.index; });
    if (!kv.count("ignored")) custom.ignored = cfg.categories.ignored;
    cfg.categories = std::move(custom);
  } else if (kv.count("ignored")) {
    cfg.categories.ignored = custom.ignored;
  }
  cfg.model.num_categories = cfg.categories.num_categories();
  cfg.train.shape_points = cfg.model.shape_points;
  cfg.registration.sinkhorn = cfg.train.sinkhorn;
  cfg.registration.threshold = cfg.train.threshold;
  cfg.registration.graph_k = cfg.train.graph_k;
  cfg.eval.registration = cfg.registration;
  cfg.validate();
  return cfg;
}

inline AppConfig read_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return parse_config(in, path.string());
}

// ---------------------------------------------------------------------------
// Dataset manifests. Line forms (paths relative to the manifest's directory):
//   stride <n>
//   sequence <dir>        # dir/velodyne/*.bin, dir/labels/*.label, dir/poses.txt
//   pair <x.bin> <x.label> <y.bin> <y.label> <gt.txt>
// A sequence yields pairs (i, i + stride); X is frame i, Y frame i + stride.

struct SequenceEntry {
  fs::path directory;
  std::vector<fs::path> scans, labels;
  fs::path poses;
};

struct PairEntry {
  fs::path x_scan, x_labels, y_scan, y_labels, gt;
};

struct DatasetManifest {
  std::size_t stride = 1;
  std::vector<SequenceEntry> sequences;
  std::vector<PairEntry> pairs;
};

inline std::vector<fs::path> sorted_files(const fs::path& dir, const std::string& ext) {
  std::vector<fs::path> out;
  std::error_code ec;
  for (fs::directory_iterator it(dir, ec), end; !ec && it != end; it.increment(ec)) {
    if (it->is_regular_file() && it->path().extension() == ext) out.push_back(it->path());
  }
  if (ec) throw IoError("cannot list " + dir.string() + ": " + ec.message());
  std::sort(out.begin(), out.end());
  return out;
}

inline DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  const fs::path base = path.parent_path();
  const auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };
  DatasetManifest m;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::vector<std::string> tok;
    for (std::string t; ls >> t;) tok.push_back(t);
    if (tok.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (tok[0] == "stride" && tok.size() == 2) {
      m.stride = detail::parse_number<std::size_t>("stride", tok[1]);
      if (m.stride < 1) throw ValidationError(where + ": stride must be >= 1");
    } else if (tok[0] == "sequence" && tok.size() == 2) {
      SequenceEntry s;
      s.directory = resolve(tok[1]);
      s.scans = sorted_files(s.directory / "velodyne", ".bin");
      s.labels = sorted_files(s.directory / "labels", ".label");
      s.poses = s.directory / "poses.txt";
      if (s.scans.size() != s.labels.size()) {
        throw ValidationError(where + ": " + std::to_string(s.scans.size()) + " scans but " +
                              std::to_string(s.labels.size()) + " label files");
      }
      m.sequences.push_back(std::move(s));
    } else if (tok[0] == "pair" && tok.size() == 6) {
      m.pairs.push_back({resolve(tok[1]), resolve(tok[2]), resolve(tok[3]), resolve(tok[4]), resolve(tok[5])});
    } else {
      throw ValidationError(where + ": unrecognised manifest line");
    }
  }
  return m;
}

inline RigidTransform read_single_transform(const fs::path& path) {
  const auto poses = read_poses(path);
  if (poses.size() != 1) throw FormatError(path.string() + ": expected exactly one transform");
  return poses.front();
}

// Loads every pair the manifest describes. Sequence poses are converted to
// the scan frame with `extrinsic` (scan -> pose frame).
inline std::vector<EvalInput> load_manifest_pairs(const DatasetManifest& m,
                                                  const RigidTransform& extrinsic = RigidTransform::identity()) {
  std::vector<EvalInput> out;
  for (const auto& p : m.pairs) {
    out.push_back({read_semantic_scan(p.x_scan, p.x_labels), read_semantic_scan(p.y_scan, p.y_labels),
                   read_single_transform(p.gt), p.x_scan.stem().string() + "-" + p.y_scan.stem().string()});
  }
  const RigidTransform ext_inv = extrinsic.inverse();
  for (const auto& s : m.sequences) {
    const auto poses = read_poses(s.poses);
    if (poses.size() < s.scans.size()) {
      throw ValidationError(s.poses.string() + ": " + std::to_string(poses.size()) + " poses for " +
                            std::to_string(s.scans.size()) + " scans");
    }
    for (std::size_t i = 0; i + m.stride < s.scans.size(); i += m.stride) {
      const std::size_t j = i + m.stride;
      // X = frame i, Y = frame j: p_j = pose_j^-1 pose_i p_i in the pose frame.
      const RigidTransform gt = ext_inv * relative_pose(poses[j], poses[i]) * extrinsic;
      out.push_back({read_semantic_scan(s.scans[i], s.labels[i]), read_semantic_scan(s.scans[j], s.labels[j]), gt,
                     s.directory.filename().string() + ":" + std::to_string(i) + "-" + std::to_string(j)});
    }
  }
  return out;
}

}  // namespace sgm
