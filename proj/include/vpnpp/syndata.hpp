#pragma once

// Synthetic paired video/pose classification data: skeleton topology,
// deterministic generator, binary sample files, CSV manifests and pose
// corruption.

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "vpnpp/tensor.hpp"

namespace vpnpp {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Skeleton

struct SkeletonTopology {
  std::size_t joint_count = 0;
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  /// Symmetric 0/1 adjacency including self loops.
  Tensor<double> adjacency;

  static SkeletonTopology from_edges(std::size_t joints,
                                     std::vector<std::pair<std::size_t, std::size_t>> edges) {
    SkeletonTopology t;
    t.joint_count = joints;
    t.edges = std::move(edges);
    t.adjacency = Tensor<double>({joints, joints});
    for (std::size_t j = 0; j < joints; ++j) t.adjacency(j, j) = 1.0;
    for (auto [a, b] : t.edges) {
      if (a >= joints || b >= joints) throw ConfigError("skeleton edge out of range");
      t.adjacency(a, b) = 1.0;
      t.adjacency(b, a) = 1.0;
    }
    if (!t.connected()) throw ConfigError("skeleton graph is not connected");
    return t;
  }

  /// 13-joint upper body + legs: head, neck, l/r shoulder-elbow-wrist,
  /// pelvis, l/r hip-knee.
  static SkeletonTopology body13() {
    return from_edges(13, {{0, 1},
                           {1, 2},
                           {2, 3},
                           {3, 4},
                           {1, 5},
                           {5, 6},
                           {6, 7},
                           {1, 8},
                           {8, 9},
                           {9, 10},
                           {8, 11},
                           {11, 12}});
  }

  /// Path graph 0-1-...-(J-1), used for small test skeletons.
  static SkeletonTopology chain(std::size_t joints) {
    std::vector<std::pair<std::size_t, std::size_t>> e;
    for (std::size_t j = 1; j < joints; ++j) e.emplace_back(j - 1, j);
    return from_edges(joints, std::move(e));
  }

  bool connected() const {
    if (joint_count == 0) return false;
    std::vector<bool> seen(joint_count, false);
    std::vector<std::size_t> stack{0};
    seen[0] = true;
    while (!stack.empty()) {
      const std::size_t j = stack.back();
      stack.pop_back();
      for (std::size_t k = 0; k < joint_count; ++k)
        if (adjacency(j, k) > 0 && !seen[k]) {
          seen[k] = true;
          stack.push_back(k);
        }
    }
    return std::all_of(seen.begin(), seen.end(), [](bool b) { return b; });
  }

  Tensor<double> row_normalized() const {
    Tensor<double> a = adjacency;
    for (std::size_t j = 0; j < joint_count; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < joint_count; ++k) s += a(j, k);
      for (std::size_t k = 0; k < joint_count; ++k) a(j, k) /= s;
    }
    return a;
  }
};

// ---------------------------------------------------------------------------
// Samples

/// 3 x J x t_p joint coordinates.
struct PoseSequence {
  Tensor<float> coords;

  std::size_t joints() const { return coords.dim(1); }
  std::size_t frames() const { return coords.dim(2); }

  void validate() const {
    if (coords.rank() != 3 || coords.dim(0) != 3)
      throw ShapeError("pose sequence must be 3 x J x t_p, got " + shape_str(coords.shape()));
    if (!coords.all_finite()) throw DataError("pose sequence has non-finite values");
  }
};

/// ch x T x H x W frames in [0, 1].
struct VideoClip {
  Tensor<float> frames;

  void validate() const {
    if (frames.rank() != 4) throw ShapeError("video clip must be rank 4, got " + shape_str(frames.shape()));
    for (float v : frames.vec())
      if (!(v >= 0.f && v <= 1.f)) throw DataError("video clip value outside [0,1]");
  }
};

// ---------------------------------------------------------------------------
// Binary sample files: "VPSD", u16 version, u8 rank, u32 dims, f32 payload,
// all little-endian.

inline constexpr std::array<char, 4> kSampleMagic{'V', 'P', 'S', 'D'};
inline constexpr std::uint16_t kSampleVersion = 1;

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(const std::string& in, std::size_t& pos) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i)
    v |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += sizeof(U);
  return v;
}

inline void put_f32(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_le<std::uint32_t>(out, bits);
}

inline float get_f32(const std::string& in, std::size_t& pos) {
  const auto bits = get_le<std::uint32_t>(in, pos);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

inline std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw DataError("cannot open " + p.string());
  return std::string(std::istreambuf_iterator<char>(is), {});
}

inline void write_file(const fs::path& p, const std::string& bytes) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw ConfigError("cannot write " + p.string());
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw ConfigError("short write to " + p.string());
}

}  // namespace detail

inline std::string encode_array(const Tensor<float>& t) {
  std::string out(kSampleMagic.begin(), kSampleMagic.end());
  detail::put_le<std::uint16_t>(out, kSampleVersion);
  out.push_back(static_cast<char>(t.rank()));
  for (auto d : t.shape()) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  out.reserve(out.size() + 4 * t.size());
  for (float v : t.vec()) detail::put_f32(out, v);
  return out;
}

inline Tensor<float> decode_array(const std::string& bytes) {
  constexpr std::size_t fixed = 4 + 2 + 1;
  if (bytes.size() < fixed) throw MalformedHeader("file shorter than sample header");
  if (!std::equal(kSampleMagic.begin(), kSampleMagic.end(), bytes.begin()))
    throw MalformedHeader("bad magic, expected VPSD");
  std::size_t pos = 4;
  const auto version = detail::get_le<std::uint16_t>(bytes, pos);
  if (version != kSampleVersion) throw MalformedHeader("unsupported sample version " + std::to_string(version));
  const auto rank = static_cast<std::size_t>(static_cast<unsigned char>(bytes[pos++]));
  if (rank == 0 || rank > 8) throw MalformedHeader("invalid rank " + std::to_string(rank));
  if (bytes.size() < fixed + 4 * rank) throw MalformedHeader("file truncated inside dims");
  Shape shape(rank);
  for (auto& d : shape) d = detail::get_le<std::uint32_t>(bytes, pos);
  const std::size_t n = shape_numel(shape);
  if (bytes.size() - pos != 4 * n)
    throw ShapeMismatch("header declares " + shape_str(shape) + " (" + std::to_string(n) +
                        " floats) but payload holds " + std::to_string((bytes.size() - pos) / 4.0) + " floats");
  std::vector<float> data(n);
  for (auto& v : data) {
    v = detail::get_f32(bytes, pos);
    if (!std::isfinite(v)) throw DataError("non-finite value in sample payload");
  }
  return Tensor<float>(std::move(shape), std::move(data));
}

inline void save_array(const fs::path& p, const Tensor<float>& t) { detail::write_file(p, encode_array(t)); }
inline Tensor<float> load_array(const fs::path& p) { return decode_array(detail::read_file(p)); }

inline void save_sample(const fs::path& clip_path, const fs::path& pose_path, const VideoClip& v,
                        const PoseSequence& p) {
  save_array(clip_path, v.frames);
  save_array(pose_path, p.coords);
}

/// Number of load_sample calls so far; lets callers prove a timed region
/// performed no file I/O.
inline std::atomic<std::size_t> g_sample_loads{0};

inline std::pair<VideoClip, PoseSequence> load_sample(const fs::path& clip_path, const fs::path& pose_path) {
  g_sample_loads.fetch_add(1, std::memory_order_relaxed);
  VideoClip v{load_array(clip_path)};
  PoseSequence p{load_array(pose_path)};
  if (v.frames.rank() != 4) throw ShapeMismatch("clip file must hold a rank-4 array");
  if (p.coords.rank() != 3 || p.coords.dim(0) != 3) throw ShapeMismatch("pose file must hold a 3 x J x t_p array");
  return {std::move(v), std::move(p)};
}

// ---------------------------------------------------------------------------
// Generator configuration

struct GenConfig {
  std::size_t class_count = 8;
  std::size_t samples_per_class = 40;
  std::size_t test_samples_per_class = 20;
  std::size_t J = 13;
  std::size_t t_p = 20;
  std::size_t channels = 3;
  std::size_t T = 16;
  std::size_t H = 32;
  std::size_t W = 32;
  double pose_signal_strength = 1.0;
  double appearance_pair_fraction = 0.25;
  double pixel_noise_std = 0.05;
  /// Per-sample motion variability (phase, amplitude, placement), in [0,1].
  double intra_class_variation = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    if (class_count < 1 || samples_per_class < 1 || J < 1 || t_p < 1 || channels < 1 || T < 1 || H < 1 || W < 1)
      throw ConfigError("generator counts must be positive");
    if (J != 13) throw ConfigError("the generator renders the 13-joint skeleton only (J=13)");
    if (channels != 3) throw ConfigError("the generator renders 3-channel clips only");
    auto in01 = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!in01(pose_signal_strength) || !in01(appearance_pair_fraction) || !in01(intra_class_variation))
      throw ConfigError("generator fractions must lie in [0,1]");
    if (!(pixel_noise_std >= 0.0)) throw ConfigError("pixel_noise_std must be nonnegative");
  }

  std::size_t appearance_pairs() const {
    return static_cast<std::size_t>(std::llround(appearance_pair_fraction * static_cast<double>(class_count / 2)));
  }

  /// Class whose pose prototype class k renders with.
  std::size_t pose_prototype(std::size_t k) const {
    const std::size_t first_pair_class = class_count - 2 * appearance_pairs();
    if (k < first_pair_class) return k;
    return first_pair_class + ((k - first_pair_class) / 2) * 2;
  }

  bool is_appearance_class(std::size_t k) const { return k >= class_count - 2 * appearance_pairs(); }

  nlohmann::json to_json() const {
    return {{"class_count", class_count},
            {"samples_per_class", samples_per_class},
            {"test_samples_per_class", test_samples_per_class},
            {"J", J},
            {"t_p", t_p},
            {"channels", channels},
            {"T", T},
            {"H", H},
            {"W", W},
            {"pose_signal_strength", pose_signal_strength},
            {"appearance_pair_fraction", appearance_pair_fraction},
            {"pixel_noise_std", pixel_noise_std},
            {"intra_class_variation", intra_class_variation},
            {"seed", seed}};
  }

  static GenConfig from_json(const nlohmann::json& j) {
    GenConfig c;
    const nlohmann::json ref = c.to_json();
    for (auto it = j.begin(); it != j.end(); ++it)
      if (!ref.contains(it.key())) throw ConfigError("unknown generator key '" + it.key() + "'");
    try {
      c.class_count = j.value("class_count", c.class_count);
      c.samples_per_class = j.value("samples_per_class", c.samples_per_class);
      c.test_samples_per_class = j.value("test_samples_per_class", c.test_samples_per_class);
      c.J = j.value("J", c.J);
      c.t_p = j.value("t_p", c.t_p);
      c.channels = j.value("channels", c.channels);
      c.T = j.value("T", c.T);
      c.H = j.value("H", c.H);
      c.W = j.value("W", c.W);
      c.pose_signal_strength = j.value("pose_signal_strength", c.pose_signal_strength);
      c.appearance_pair_fraction = j.value("appearance_pair_fraction", c.appearance_pair_fraction);
      c.pixel_noise_std = j.value("pixel_noise_std", c.pixel_noise_std);
      c.intra_class_variation = j.value("intra_class_variation", c.intra_class_variation);
      c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("generator config: ") + e.what());
    }
    c.validate();
    return c;
  }

  std::uint64_t hash() const {
    const std::string s = to_json().dump();
    return fnv1a(s.data(), s.size());
  }
};

// ---------------------------------------------------------------------------
// Manifest

enum class Split { train, test };

inline std::string split_name(Split s) { return s == Split::train ? "train" : "test"; }

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw DataError("unknown split '" + s + "'");
}

struct ManifestEntry {
  std::string sample_id;
  fs::path clip_path;  // absolute once loaded
  fs::path pose_path;
  std::size_t label = 0;
  Split split = Split::train;
};

struct DatasetManifest {
  std::vector<ManifestEntry> samples;
  std::size_t class_count = 0;
  Split split = Split::train;
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;

  std::size_t size() const { return samples.size(); }

  void validate() const {
    std::set<std::string> ids;
    for (const auto& s : samples) {
      if (s.label >= class_count) throw DataError("label out of range for sample " + s.sample_id);
      if (!ids.insert(s.sample_id).second) throw DataError("duplicate sample id " + s.sample_id);
    }
  }
};

inline std::string manifest_filename(Split s) { return "manifest_" + split_name(s) + ".csv"; }

/// Writes the CSV plus a sidecar dataset.json (class count, hash, seed).
inline void write_manifest(const fs::path& dir, const DatasetManifest& m, const GenConfig* cfg = nullptr) {
  std::string csv = "sample_id,clip_path,pose_path,label,split\n";
  for (const auto& s : m.samples)
    csv += s.sample_id + "," + s.clip_path.filename().string() + "," + s.pose_path.filename().string() + "," +
           std::to_string(s.label) + "," + split_name(s.split) + "\n";
  detail::write_file(dir / manifest_filename(m.split), csv);
  nlohmann::json meta = {{"class_count", m.class_count}, {"config_hash", hex64(m.config_hash)}, {"seed", m.seed}};
  if (cfg) meta["generator"] = cfg->to_json();
  detail::write_file(dir / "dataset.json", meta.dump(2) + "\n");
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

inline DatasetManifest read_manifest(const fs::path& csv_path) {
  std::ifstream is(csv_path);
  if (!is) throw DataError("cannot open manifest " + csv_path.string());
  const fs::path dir = csv_path.parent_path();
  std::string line;
  if (!std::getline(is, line) || split_csv_line(line) != std::vector<std::string>{"sample_id", "clip_path", "pose_path", "label", "split"})
    throw DataError("manifest header mismatch in " + csv_path.string());
  DatasetManifest m;
  std::size_t max_label = 0;
  bool first = true;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto f = split_csv_line(line);
    if (f.size() != 5) throw DataError("manifest row has " + std::to_string(f.size()) + " fields: " + line);
    ManifestEntry e;
    e.sample_id = f[0];
    e.clip_path = dir / f[1];
    e.pose_path = dir / f[2];
    try {
      e.label = std::stoul(f[3]);
    } catch (const std::exception&) {
      throw DataError("bad label in manifest row: " + line);
    }
    e.split = parse_split(f[4]);
    if (first) m.split = e.split;
    first = false;
    max_label = std::max(max_label, e.label);
    if (!fs::exists(e.clip_path) || !fs::exists(e.pose_path))
      throw DataError("manifest references missing file for " + e.sample_id);
    m.samples.push_back(std::move(e));
  }
  m.class_count = max_label + 1;
  const fs::path meta_path = dir / "dataset.json";
  if (fs::exists(meta_path)) {
    try {
      const auto meta = nlohmann::json::parse(detail::read_file(meta_path));
      m.class_count = std::max(m.class_count, meta.at("class_count").get<std::size_t>());
      m.config_hash = std::stoull(meta.at("config_hash").get<std::string>(), nullptr, 16);
      m.seed = meta.at("seed").get<std::uint64_t>();
    } catch (const std::exception& e) {
      throw DataError(std::string("bad dataset.json: ") + e.what());
    }
  }
  m.validate();
  return m;
}

// ---------------------------------------------------------------------------
// Generator

namespace detail {

// Rest-pose geometry of the 13-joint skeleton: parent joint, bone length
// and absolute bone angle (radians, y up). Joint 8 (pelvis) is the root.
struct Bone {
  int parent;
  double length;
  double rest_angle;
  double max_swing;
};

inline const std::array<Bone, 13>& body13_bones() {
  static const std::array<Bone, 13> bones{{
      {1, 0.18, M_PI / 2, 0.35},            // 0 head
      {8, 0.45, M_PI / 2, 0.25},            // 1 neck (spine)
      {1, 0.18, M_PI, 0.2},                 // 2 l shoulder
      {2, 0.26, 3 * M_PI / 2, 1.4},         // 3 l elbow
      {3, 0.22, 3 * M_PI / 2, 1.6},         // 4 l wrist
      {1, 0.18, 0.0, 0.2},                  // 5 r shoulder
      {5, 0.26, 3 * M_PI / 2, 1.4},         // 6 r elbow
      {6, 0.22, 3 * M_PI / 2, 1.6},         // 7 r wrist
      {-1, 0.0, 0.0, 0.0},                  // 8 pelvis
      {8, 0.13, 7 * M_PI / 6, 0.2},         // 9 l hip
      {9, 0.32, 3 * M_PI / 2, 0.7},         // 10 l knee
      {8, 0.13, -M_PI / 6, 0.2},            // 11 r hip
      {11, 0.32, 3 * M_PI / 2, 0.7},        // 12 r knee
  }};
  return bones;
}

// Forward kinematics visits parents before children.
inline constexpr std::array<std::size_t, 13> kFkOrder{8, 1, 0, 2, 3, 4, 5, 6, 7, 9, 10, 11, 12};

struct MotionPrototype {
  std::array<double, 13> amplitude{};
  std::array<double, 13> phase{};
  std::array<double, 13> depth_phase{};
  double frequency = 1.0;   // cycles per clip
  double sway = 0.0;        // root horizontal sway amplitude
  double bob = 0.0;         // root vertical amplitude
};

inline MotionPrototype make_prototype(std::uint64_t seed, std::size_t proto) {
  Rng rng = make_rng(seed, 0x70726f74ull + proto);
  MotionPrototype m;
  const auto& bones = body13_bones();
  m.frequency = 0.5 + 0.5 * static_cast<double>(uniform_index(rng, 4));
  for (std::size_t b = 0; b < 13; ++b) {
    m.amplitude[b] = bones[b].max_swing * (0.2 + 0.8 * uniform01(rng));
    m.phase[b] = 2 * M_PI * uniform01(rng);
    m.depth_phase[b] = 2 * M_PI * uniform01(rng);
  }
  m.sway = 0.15 * (2 * uniform01(rng) - 1);
  m.bob = 0.08 * (2 * uniform01(rng) - 1);
  return m;
}

struct SampleJitter {
  double phase_shift;
  double amp_scale;
  double offset_x;
  double offset_y;
  double body_scale;
  double angle_noise;
};

inline PoseSequence render_pose(const MotionPrototype& m, const SampleJitter& s, std::size_t t_p, Rng& rng) {
  const auto& bones = body13_bones();
  PoseSequence p{Tensor<float>({3, 13, t_p})};
  for (std::size_t tau = 0; tau < t_p; ++tau) {
    const double phase = 2 * M_PI * (m.frequency * static_cast<double>(tau) / static_cast<double>(t_p)) + s.phase_shift;
    std::array<double, 13> x{}, y{}, z{};
    x[8] = s.offset_x + m.sway * std::sin(phase);
    y[8] = s.offset_y - 0.05 + m.bob * std::sin(2 * phase);
    z[8] = 0.0;
    for (std::size_t j : kFkOrder) {
      if (bones[j].parent < 0) continue;
      const auto par = static_cast<std::size_t>(bones[j].parent);
      const double angle = bones[j].rest_angle + s.amp_scale * m.amplitude[j] * std::sin(phase + m.phase[j]) +
                           s.angle_noise * normal(rng);
      const double len = bones[j].length * s.body_scale;
      x[j] = x[par] + len * std::cos(angle);
      y[j] = y[par] + len * std::sin(angle);
      z[j] = z[par] + 0.3 * len * std::sin(phase + m.depth_phase[j]);
    }
    for (std::size_t j = 0; j < 13; ++j) {
      p.coords(0, j, tau) = static_cast<float>(std::clamp(1.25 * x[j], -1.0, 1.0));
      p.coords(1, j, tau) = static_cast<float>(std::clamp(1.25 * y[j], -1.0, 1.0));
      p.coords(2, j, tau) = static_cast<float>(std::clamp(1.25 * z[j], -1.0, 1.0));
    }
  }
  return p;
}

}  // namespace detail

/// Pixel (row, col) of a normalized (x, y) coordinate under orthographic projection.
inline std::pair<double, double> project_joint(double x, double y, std::size_t H, std::size_t W) {
  return {(1.0 - y) * 0.5 * static_cast<double>(H - 1), (x + 1.0) * 0.5 * static_cast<double>(W - 1)};
}

/// Pose coordinates linearly interpolated at video frame `frame` of `T`.
inline std::array<double, 2> pose_at_frame(const PoseSequence& p, std::size_t joint, std::size_t frame, std::size_t T) {
  const std::size_t tp = p.frames();
  const double s = T > 1 ? static_cast<double>(frame) * static_cast<double>(tp - 1) / static_cast<double>(T - 1) : 0.0;
  const auto i0 = static_cast<std::size_t>(std::floor(s));
  const std::size_t i1 = std::min(i0 + 1, tp - 1);
  const double a = s - static_cast<double>(i0);
  return {(1 - a) * p.coords(0, joint, i0) + a * p.coords(0, joint, i1),
          (1 - a) * p.coords(1, joint, i0) + a * p.coords(1, joint, i1)};
}

inline constexpr double kBlobSigma = 1.5;
inline constexpr float kBackground = 0.2f;
inline constexpr float kBlobPeak = 0.8f;
inline constexpr float kPatchLevel = 0.6f;

/// Renders a clip: Gaussian blobs (max-composited) at projected joints, an
/// optional static coloured patch, then i.i.d. Gaussian pixel noise.
inline VideoClip render_clip(const PoseSequence& pose, const GenConfig& cfg, std::optional<std::size_t> patch_color,
                             Rng& noise_rng) {
  const std::size_t T = cfg.T, H = cfg.H, W = cfg.W;
  VideoClip v{Tensor<float>({cfg.channels, T, H, W})};
  Tensor<float> blob({H, W});
  const double inv2s2 = 1.0 / (2.0 * kBlobSigma * kBlobSigma);
  const std::size_t patch = std::max<std::size_t>(2, H / 8);
  for (std::size_t t = 0; t < T; ++t) {
    blob.zero();
    if (cfg.pose_signal_strength > 0.0) {
      for (std::size_t j = 0; j < pose.joints(); ++j) {
        const auto xy = pose_at_frame(pose, j, t, T);
        const auto [r, c] = project_joint(xy[0], xy[1], H, W);
        for (std::size_t i = 0; i < H; ++i)
          for (std::size_t k = 0; k < W; ++k) {
            const double dr = static_cast<double>(i) - r, dc = static_cast<double>(k) - c;
            const auto g = static_cast<float>(std::exp(-(dr * dr + dc * dc) * inv2s2));
            blob(i, k) = std::max(blob(i, k), g);
          }
      }
    }
    for (std::size_t ch = 0; ch < cfg.channels; ++ch)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t k = 0; k < W; ++k) {
          float val = kBackground + kBlobPeak * static_cast<float>(cfg.pose_signal_strength) * blob(i, k);
          if (patch_color && i >= 1 && i < 1 + patch && k >= 1 && k < 1 + patch && ch == *patch_color % cfg.channels)
            val += kPatchLevel;
          val += static_cast<float>(cfg.pixel_noise_std * normal(noise_rng));
          v.frames(ch, t, i, k) = std::clamp(val, 0.f, 1.f);
        }
  }
  return v;
}

/// One generated sample; a pure function of (cfg, split, index).
inline std::pair<VideoClip, PoseSequence> generate_sample(const GenConfig& cfg, Split split, std::size_t index,
                                                          std::size_t label) {
  const std::uint64_t stream = (split == Split::train ? 0x1000000ull : 0x2000000ull) + index;
  Rng rng = make_rng(cfg.seed, stream);
  const auto proto = detail::make_prototype(cfg.seed, cfg.pose_prototype(label));
  const double v = cfg.intra_class_variation;
  detail::SampleJitter s{};
  s.phase_shift = v * 0.6 * (2 * uniform01(rng) - 1);
  s.amp_scale = 1.0 + v * 0.3 * (2 * uniform01(rng) - 1);
  s.offset_x = v * 0.15 * (2 * uniform01(rng) - 1);
  s.offset_y = v * 0.1 * (2 * uniform01(rng) - 1);
  s.body_scale = 1.0 + v * 0.15 * (2 * uniform01(rng) - 1);
  s.angle_noise = v * 0.08;
  PoseSequence pose = detail::render_pose(proto, s, cfg.t_p, rng);
  std::optional<std::size_t> patch;
  if (cfg.is_appearance_class(label)) {
    const std::size_t first = cfg.class_count - 2 * cfg.appearance_pairs();
    patch = (label - first) % 2;
  }
  VideoClip clip = render_clip(pose, cfg, patch, rng);
  return {std::move(clip), std::move(pose)};
}

/// Generates one split under out_dir and writes its manifest.
inline DatasetManifest gen_dataset(const GenConfig& cfg, const fs::path& out_dir, Split split = Split::train) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw ConfigError("cannot create output directory " + out_dir.string());
  {
    const fs::path probe = out_dir / ".write_probe";
    std::ofstream os(probe);
    if (!os) throw ConfigError("output directory not writable: " + out_dir.string());
    os.close();
    fs::remove(probe, ec);
  }
  const std::size_t per_class = split == Split::train ? cfg.samples_per_class : cfg.test_samples_per_class;
  DatasetManifest m;
  m.class_count = cfg.class_count;
  m.split = split;
  m.config_hash = cfg.hash();
  m.seed = cfg.seed;
  const std::size_t n = per_class * cfg.class_count;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % cfg.class_count;
    char id[32];
    std::snprintf(id, sizeof id, "%s_%05zu", split_name(split).c_str(), i);
    ManifestEntry e{id, out_dir / (std::string(id) + "_clip.vpsd"), out_dir / (std::string(id) + "_pose.vpsd"), label,
                    split};
    auto [clip, pose] = generate_sample(cfg, split, i, label);
    save_sample(e.clip_path, e.pose_path, clip, pose);
    m.samples.push_back(std::move(e));
  }
  write_manifest(out_dir, m, &cfg);
  return m;
}

// ---------------------------------------------------------------------------
// Pose corruption

inline constexpr double kMaxOcclusionFraction = 0.5;
inline constexpr double kMaxJitterStd = 0.1;

/// Zeroes random joint tracks (probability 0.5 * level each) and adds
/// Gaussian jitter (std 0.1 * level) to the rest.
inline PoseSequence corrupt_poses(const PoseSequence& p, double level, std::uint64_t seed) {
  if (!(level >= 0.0 && level <= 1.0)) throw ConfigError("corruption level must lie in [0,1]");
  PoseSequence out = p;
  if (level == 0.0) return out;
  Rng rng = make_rng(seed, 0x636f7272ull);
  const double occl = kMaxOcclusionFraction * level;
  const double jitter = kMaxJitterStd * level;
  for (std::size_t j = 0; j < p.joints(); ++j) {
    const bool occluded = uniform01(rng) < occl;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t t = 0; t < p.frames(); ++t) {
        float& v = out.coords(c, j, t);
        v = occluded ? 0.f : static_cast<float>(v + jitter * normal(rng));
      }
  }
  return out;
}

}  // namespace vpnpp
