#pragma once

// Training orchestration for the teacher and student recipes, multi-crop
// evaluation, late fusion, checkpointing and inference timing.

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "vpnpp/checkpoint.hpp"
#include "vpnpp/distill.hpp"

namespace vpnpp {

enum class Recipe { pose_teacher, vpn_teacher, rgb_student, vpn_f, vpn_a, vpn_pp };

inline std::string recipe_name(Recipe r) {
  switch (r) {
    case Recipe::pose_teacher: return "pose_teacher";
    case Recipe::vpn_teacher: return "vpn_teacher";
    case Recipe::rgb_student: return "rgb_student";
    case Recipe::vpn_f: return "vpn_f";
    case Recipe::vpn_a: return "vpn_a";
    case Recipe::vpn_pp: return "vpn_pp";
  }
  return "?";
}

inline Recipe parse_recipe(const std::string& s) {
  for (Recipe r : {Recipe::pose_teacher, Recipe::vpn_teacher, Recipe::rgb_student, Recipe::vpn_f, Recipe::vpn_a,
                   Recipe::vpn_pp})
    if (recipe_name(r) == s) return r;
  throw ConfigError("unknown recipe '" + s + "'");
}

inline bool is_student_recipe(Recipe r) {
  return r == Recipe::rgb_student || r == Recipe::vpn_f || r == Recipe::vpn_a || r == Recipe::vpn_pp;
}
inline bool needs_pose_teacher(Recipe r) { return r == Recipe::vpn_f || r == Recipe::vpn_pp; }
inline bool uses_contrastive(Recipe r) { return r == Recipe::vpn_f || r == Recipe::vpn_pp; }
inline bool uses_attention_distill(Recipe r) { return r == Recipe::vpn_a || r == Recipe::vpn_pp; }

// ---------------------------------------------------------------------------

struct TrainConfig {
  Recipe recipe = Recipe::pose_teacher;
  std::size_t epochs = 60;
  /// Items per step. Student recipes take batch_size / 2 videos per step
  /// (each repeated in its positive and negative pairs).
  std::size_t batch_size = 16;
  double lr = 0.01;
  double momentum = 0.9;
  double lr_decay = 0.1;
  std::size_t lr_decay_every = 10;
  double weight_decay = 0.0;
  /// Gradient-norm clip applied per network; 0 disables.
  double grad_clip = 0.0;
  double alpha = 50.0;
  double beta = 50.0;
  std::size_t negatives_per_positive = 1;
  std::optional<double> nce_constant;
  std::uint64_t seed = 0;
  bool with_se = true;
  VpnLossWeights vpn_weights;
  VideoBackboneConfig video;
  StudentConfig student{64, 0};  // d_att 0: one bin per feature-map position
  std::size_t se_dim = 32;
  double pose_corruption = 0.0;
  int crop_shift = 2;
  bool eval_each_epoch = true;

  void validate() const {
    if (!(lr > 0)) throw ConfigError("lr must be positive");
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
    if (lr_decay_every == 0) throw ConfigError("lr_decay_every must be positive");
    if (!(grad_clip >= 0)) throw ConfigError("grad_clip must be nonnegative");
    if (!(alpha >= 0) || !(beta >= 0)) throw ConfigError("alpha and beta must be nonnegative");
    if (nce_constant && !(*nce_constant > 0)) throw ConfigError("nce_constant must be positive");
    if (!(pose_corruption >= 0 && pose_corruption <= 1)) throw ConfigError("pose_corruption must lie in [0,1]");
    video.validate();
  }

  nlohmann::json to_json() const {
    nlohmann::json pools = nlohmann::json::array();
    for (const auto& p : video.pools) pools.push_back({p[0], p[1], p[2]});
    nlohmann::json j = {{"recipe", recipe_name(recipe)},
                        {"epochs", epochs},
                        {"batch_size", batch_size},
                        {"lr", lr},
                        {"momentum", momentum},
                        {"lr_decay", lr_decay},
                        {"lr_decay_every", lr_decay_every},
                        {"weight_decay", weight_decay},
                        {"grad_clip", grad_clip},
                        {"alpha", alpha},
                        {"beta", beta},
                        {"negatives_per_positive", negatives_per_positive},
                        {"seed", seed},
                        {"with_se", with_se},
                        {"vpn_entropy_weight", vpn_weights.entropy},
                        {"vpn_embedding_weight", vpn_weights.embedding},
                        {"vpn_attention_reg_weight", vpn_weights.attention_reg},
                        {"vpn_attention_reg", vpn_weights.use_attention_reg},
                        {"video_channels", video.channels},
                        {"video_pools", pools},
                        {"feat_dim", student.feat_dim},
                        {"d_att", student.d_att},
                        {"se_dim", se_dim},
                        {"pose_corruption", pose_corruption},
                        {"crop_shift", crop_shift},
                        {"eval_each_epoch", eval_each_epoch}};
    j["nce_constant"] = nce_constant ? nlohmann::json(*nce_constant) : nlohmann::json(nullptr);
    return j;
  }

  /// Overlays keys from j onto this config. Unknown keys are errors.
  void apply_json(const nlohmann::json& j) {
    const nlohmann::json ref = to_json();
    for (auto it = j.begin(); it != j.end(); ++it)
      if (!ref.contains(it.key())) throw ConfigError("unknown training key '" + it.key() + "'");
    try {
      if (j.contains("recipe")) recipe = parse_recipe(j["recipe"].get<std::string>());
      epochs = j.value("epochs", epochs);
      batch_size = j.value("batch_size", batch_size);
      lr = j.value("lr", lr);
      momentum = j.value("momentum", momentum);
      lr_decay = j.value("lr_decay", lr_decay);
      lr_decay_every = j.value("lr_decay_every", lr_decay_every);
      weight_decay = j.value("weight_decay", weight_decay);
      grad_clip = j.value("grad_clip", grad_clip);
      alpha = j.value("alpha", alpha);
      beta = j.value("beta", beta);
      negatives_per_positive = j.value("negatives_per_positive", negatives_per_positive);
      seed = j.value("seed", seed);
      with_se = j.value("with_se", with_se);
      vpn_weights.entropy = j.value("vpn_entropy_weight", vpn_weights.entropy);
      vpn_weights.embedding = j.value("vpn_embedding_weight", vpn_weights.embedding);
      vpn_weights.attention_reg = j.value("vpn_attention_reg_weight", vpn_weights.attention_reg);
      vpn_weights.use_attention_reg = j.value("vpn_attention_reg", vpn_weights.use_attention_reg);
      if (j.contains("video_channels")) video.channels = j["video_channels"].get<std::vector<std::size_t>>();
      if (j.contains("video_pools")) {
        video.pools.clear();
        for (const auto& p : j["video_pools"]) video.pools.push_back({p.at(0), p.at(1), p.at(2)});
      }
      student.feat_dim = j.value("feat_dim", student.feat_dim);
      student.d_att = j.value("d_att", student.d_att);
      se_dim = j.value("se_dim", se_dim);
      pose_corruption = j.value("pose_corruption", pose_corruption);
      crop_shift = j.value("crop_shift", crop_shift);
      eval_each_epoch = j.value("eval_each_epoch", eval_each_epoch);
      if (j.contains("nce_constant"))
        nce_constant = j["nce_constant"].is_null() ? std::nullopt : std::optional<double>(j["nce_constant"].get<double>());
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("training config: ") + e.what());
    }
    validate();
  }

  std::uint64_t hash() const {
    const std::string s = to_json().dump();
    return fnv1a(s.data(), s.size());
  }
};

// ---------------------------------------------------------------------------

/// A split held in memory.
struct Dataset {
  DatasetManifest manifest;
  std::vector<Tensor<float>> clips;
  std::vector<PoseSequence> poses;
  std::vector<std::size_t> labels;
  std::size_t class_count = 0;

  std::size_t size() const { return labels.size(); }
  Shape clip_shape() const { return clips.at(0).shape(); }
};

/// Loads every sample; poses are corrupted at `pose_corruption` with a
/// per-sample seed when it is nonzero.
inline Dataset load_dataset(const DatasetManifest& m, double pose_corruption = 0.0, std::uint64_t corruption_seed = 0) {
  if (m.samples.empty()) throw DataError("dataset is empty");
  Dataset d;
  d.manifest = m;
  d.class_count = m.class_count;
  for (std::size_t i = 0; i < m.samples.size(); ++i) {
    const auto& e = m.samples[i];
    auto [clip, pose] = load_sample(e.clip_path, e.pose_path);
    if (i > 0 && clip.frames.shape() != d.clips.front().shape()) throw DataError("clip shapes differ in dataset");
    d.clips.push_back(std::move(clip.frames));
    d.poses.push_back(pose_corruption > 0 ? corrupt_poses(pose, pose_corruption, corruption_seed * 1000003ull + i)
                                          : std::move(pose));
    d.labels.push_back(e.label);
  }
  return d;
}

// ---------------------------------------------------------------------------

/// Shapes needed to rebuild the networks of a checkpoint.
struct Architecture {
  std::size_t classes = 0;
  Shape clip_shape;
  SkeletonTopology topology;
  VideoBackboneConfig video;
  StudentConfig student;
  std::size_t se_dim = 32;

  static Architecture make(const Dataset& d, const TrainConfig& cfg) {
    Architecture a;
    a.classes = d.class_count;
    a.clip_shape = d.clip_shape();
    const std::size_t J = d.poses.at(0).joints();
    a.topology = J == 13 ? SkeletonTopology::body13() : SkeletonTopology::chain(J);
    a.video = cfg.video;
    a.video.in_channels = a.clip_shape[0];
    a.student = cfg.student;
    const Shape fs = a.video.feature_shape(a.clip_shape[1], a.clip_shape[2], a.clip_shape[3]);
    if (a.student.d_att == 0) a.student.d_att = fs[1] * fs[2] * fs[3];
    a.se_dim = cfg.se_dim;
    return a;
  }

  nlohmann::json to_json() const {
    nlohmann::json pools = nlohmann::json::array();
    for (const auto& p : video.pools) pools.push_back({p[0], p[1], p[2]});
    nlohmann::json edges = nlohmann::json::array();
    for (auto [x, y] : topology.edges) edges.push_back({x, y});
    return {{"classes", classes},    {"clip_shape", clip_shape},     {"joints", topology.joint_count},
            {"edges", edges},        {"video_channels", video.channels}, {"video_pools", pools},
            {"feat_dim", student.feat_dim}, {"d_att", student.d_att}, {"se_dim", se_dim}};
  }

  static Architecture from_json(const nlohmann::json& j) {
    Architecture a;
    try {
      a.classes = j.at("classes");
      a.clip_shape = j.at("clip_shape").get<Shape>();
      std::vector<std::pair<std::size_t, std::size_t>> edges;
      for (const auto& e : j.at("edges")) edges.emplace_back(e.at(0), e.at(1));
      a.topology = SkeletonTopology::from_edges(j.at("joints"), edges);
      a.video.in_channels = a.clip_shape.at(0);
      a.video.channels = j.at("video_channels").get<std::vector<std::size_t>>();
      a.video.pools.clear();
      for (const auto& p : j.at("video_pools")) a.video.pools.push_back({p.at(0), p.at(1), p.at(2)});
      a.student.feat_dim = j.at("feat_dim");
      a.student.d_att = j.at("d_att");
      a.se_dim = j.at("se_dim");
    } catch (const nlohmann::json::exception& e) {
      throw MalformedHeader(std::string("checkpoint architecture: ") + e.what());
    }
    return a;
  }
};

/// The sub-networks a recipe trains or consumes.
struct Models {
  Architecture arch;
  std::optional<PoseTeacher<float>> pose_teacher;
  std::optional<VpnTeacher<float>> vpn;
  std::optional<Student<float>> student;
  bool pose_teacher_frozen = false;

  static constexpr const char* kPoseTeacher = "pose_teacher";
  static constexpr const char* kVpn = "vpn_teacher";
  static constexpr const char* kStudent = "student";

  void visit(const ParamVisitor<float>& f) {
    if (pose_teacher) pose_teacher->visit(kPoseTeacher, f);
    if (vpn) vpn->visit(kVpn, f);
    if (student) student->visit(kStudent, f);
  }

  std::uint64_t hash(const std::string& prefix) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    visit([&](const std::string& name, Param<float>& p) {
      if (name.rfind(prefix, 0) != 0) return;
      h = fnv1a(name.data(), name.size(), h);
      h = fnv1a(p.value.data(), p.value.size() * sizeof(float), h);
    });
    return h;
  }
};

enum Stream : std::uint64_t {
  kInitPose = 1,
  kInitVpn = 2,
  kInitStudent = 3,
  kDropPose = 11,
  kDropVpn = 12,
  kDropStudent = 13,
  kShuffle = 20,
  kPairs = 21,
  kCorruption = 30,
};

inline PoseTeacher<float> make_pose_teacher(const Architecture& a, std::uint64_t seed) {
  PoseTeacher<float> m(a.topology, a.classes);
  Rng rng = make_rng(seed, kInitPose);
  m.init(rng);
  return m;
}

inline VpnTeacher<float> make_vpn_teacher(const Architecture& a, std::uint64_t seed) {
  VpnTeacher<float> m(a.video, a.clip_shape, a.topology, a.classes, a.se_dim);
  Rng rng = make_rng(seed, kInitVpn);
  m.init(rng);
  return m;
}

inline Student<float> make_student(const Architecture& a, std::uint64_t seed) {
  Student<float> m(a.video, a.clip_shape, a.classes, a.student);
  Rng rng = make_rng(seed, kInitStudent);
  m.init(rng);
  return m;
}

/// Copies the blobs under `prefix` from a checkpoint into the visited params.
inline void load_params(Models& m, const Checkpoint& c, const std::string& prefix) {
  m.visit([&](const std::string& name, Param<float>& p) {
    if (name.rfind(prefix, 0) != 0) return;
    const ParamBlob* b = c.find(name);
    if (!b) throw MalformedHeader("checkpoint lacks parameter " + name);
    if (b->value.shape() != p.value.shape())
      throw MalformedHeader("checkpoint parameter " + name + " has shape " + shape_str(b->value.shape()));
    p.value = b->value;
  });
}

inline Models models_from_checkpoint(const Checkpoint& c) {
  Models m;
  m.arch = Architecture::from_json(c.meta.at("architecture"));
  if (c.has_prefix(std::string(Models::kPoseTeacher) + ".")) {
    m.pose_teacher = make_pose_teacher(m.arch, 0);
    m.pose_teacher_frozen = c.find(std::string(Models::kPoseTeacher) + ".backbone.gc1.weight")->frozen &&
                            c.recipe != recipe_name(Recipe::pose_teacher);
  }
  if (c.has_prefix(std::string(Models::kVpn) + ".")) m.vpn = make_vpn_teacher(m.arch, 0);
  if (c.has_prefix(std::string(Models::kStudent) + ".")) m.student = make_student(m.arch, 0);
  load_params(m, c, "");
  return m;
}

// ---------------------------------------------------------------------------

struct Sgd {
  std::vector<Param<float>*> params;
  std::vector<std::string> names;
  std::vector<Tensor<float>> velocity;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double clip = 0.0;

  void add(const std::string& name, Param<float>& p) {
    names.push_back(name);
    params.push_back(&p);
    velocity.emplace_back(p.value.shape());
  }

  void zero_grad() {
    for (auto* p : params) p->zero_grad();
  }

  /// Network a parameter belongs to: its name up to the first '.'.
  static std::string group_of(const std::string& name) { return name.substr(0, name.find('.')); }

  /// Global L2 norm of the gradients in `group` (all groups when empty).
  double grad_norm(const std::string& group = "") const {
    double s = 0;
    for (std::size_t i = 0; i < params.size(); ++i)
      if (group.empty() || group_of(names[i]) == group)
        for (float g : params[i]->grad.vec()) s += static_cast<double>(g) * g;
    return std::sqrt(s);
  }

  /// Clips each network's gradient norm separately, then takes a momentum step.
  void step(double lr) {
    if (clip > 0) {
      std::set<std::string> groups;
      for (const auto& n : names) groups.insert(group_of(n));
      for (const auto& g : groups) {
        const double n = grad_norm(g);
        if (n > clip)
          for (std::size_t i = 0; i < params.size(); ++i)
            if (group_of(names[i]) == g) params[i]->grad *= static_cast<float>(clip / n);
      }
    }
    const auto mu = static_cast<float>(momentum), wd = static_cast<float>(weight_decay), eta = static_cast<float>(lr);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = *params[i];
      auto& v = velocity[i];
      for (std::size_t k = 0; k < p.value.size(); ++k) {
        const float g = p.grad[k] + wd * p.value[k];
        v[k] = mu * v[k] + g;
        p.value[k] -= eta * v[k];
      }
    }
  }
};

// ---------------------------------------------------------------------------

struct EpochRow {
  std::size_t epoch = 0;
  LossBundle loss;
  double train_acc = 0;
  double test_acc = std::nan("");
};

struct TrainReport {
  std::vector<EpochRow> rows;

  static constexpr const char* kHeader = "epoch,L_C_S,L_C_T,L_SCD,L_D,L_e,total,train_acc,test_acc";

  std::string to_csv() const {
    std::string s = std::string(kHeader) + "\n";
    char buf[512];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.4f,%.4f\n", r.epoch, r.loss.L_C_S,
                    r.loss.L_C_T, r.loss.L_SCD, r.loss.L_D, r.loss.L_e, r.loss.total, r.train_acc,
                    std::isnan(r.test_acc) ? 0.0 : r.test_acc);
      s += buf;
    }
    return s;
  }

  nlohmann::json to_json() const {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& r : rows)
      a.push_back({{"epoch", r.epoch},     {"L_C_S", r.loss.L_C_S}, {"L_C_T", r.loss.L_C_T},
                   {"L_SCD", r.loss.L_SCD}, {"L_D", r.loss.L_D},     {"L_e", r.loss.L_e},
                   {"total", r.loss.total}, {"train_acc", r.train_acc},
                   {"test_acc", std::isnan(r.test_acc) ? nlohmann::json(nullptr) : nlohmann::json(r.test_acc)}});
    return a;
  }
};

// ---------------------------------------------------------------------------
// Inference

enum class InferencePath { student, pose_teacher, vpn_teacher, late_fusion };

inline std::string path_name(InferencePath p) {
  switch (p) {
    case InferencePath::student: return "student_rgb";
    case InferencePath::pose_teacher: return "pose_teacher";
    case InferencePath::vpn_teacher: return "vpn_teacher_rgb_pose";
    case InferencePath::late_fusion: return "late_fusion_student_pose";
  }
  return "?";
}

/// Horizontal translation by dx pixels with edge replication.
inline Tensor<float> shift_clip(const Tensor<float>& clip, int dx) {
  if (dx == 0) return clip;
  Tensor<float> out(clip.shape());
  const std::size_t C = clip.dim(0), T = clip.dim(1), H = clip.dim(2), W = clip.dim(3);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          const long src = std::clamp(static_cast<long>(w) - dx, 0L, static_cast<long>(W) - 1);
          out(c, t, h, w) = clip(c, t, h, static_cast<std::size_t>(src));
        }
  return out;
}

inline std::vector<int> crop_offsets(int shift) { return shift == 0 ? std::vector<int>{0} : std::vector<int>{-shift, 0, shift}; }

/// Softmax scores of every crop, [crops x C].
template <typename F>
Tensor<double> per_crop_scores(const Tensor<float>& clip, int shift, F&& classify) {
  const auto offs = crop_offsets(shift);
  Tensor<double> s;
  for (std::size_t k = 0; k < offs.size(); ++k) {
    const Tensor<float> p = classify(shift_clip(clip, offs[k]));
    if (k == 0) s = Tensor<double>({offs.size(), p.size()});
    for (std::size_t c = 0; c < p.size(); ++c) s(k, c) = p[c];
  }
  return s;
}

/// Class-wise max over crops (not renormalized).
inline std::vector<double> max_pool_crops(const Tensor<double>& crops) {
  std::vector<double> m(crops.dim(1), 0.0);
  for (std::size_t k = 0; k < crops.dim(0); ++k)
    for (std::size_t c = 0; c < crops.dim(1); ++c) m[c] = std::max(m[c], crops(k, c));
  return m;
}

inline std::vector<double> renormalize(std::vector<double> v) {
  double s = 0;
  for (double x : v) s += x;
  for (double& x : v) x /= s;
  return v;
}

/// Scores of one sample along one inference path, rows renormalized.
inline std::vector<double> infer(const Models& m, InferencePath path, const Tensor<float>& clip,
                                 const PoseSequence& pose, int shift) {
  auto pose_scores = [&] {
    const Tensor<float> p = m.pose_teacher->forward(pose, nullptr, nullptr).second;
    return std::vector<double>(p.vec().begin(), p.vec().end());
  };
  auto student_scores = [&] {
    return renormalize(max_pool_crops(
        per_crop_scores(clip, shift, [&](const Tensor<float>& c) { return m.student->classify(c); })));
  };
  switch (path) {
    case InferencePath::student: return student_scores();
    case InferencePath::pose_teacher: return pose_scores();
    case InferencePath::vpn_teacher:
      return renormalize(max_pool_crops(per_crop_scores(clip, shift, [&](const Tensor<float>& c) {
        return m.vpn->forward(c, pose, false, nullptr, nullptr).probs;
      })));
    case InferencePath::late_fusion: {
      auto a = student_scores();
      const auto b = pose_scores();
      for (std::size_t i = 0; i < a.size(); ++i) a[i] = 0.5 * (a[i] + b[i]);
      return a;
    }
  }
  return {};
}

struct Metrics {
  double top1 = 0;
  std::vector<double> per_class;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  double mean_latency_ms = 0;
  Tensor<double> scores;  // [N x C], rows sum to 1
  std::vector<std::size_t> labels;

  std::string confusion_csv() const {
    std::string s = "true\\pred";
    for (std::size_t c = 0; c < confusion.size(); ++c) s += "," + std::to_string(c);
    s += "\n";
    for (std::size_t r = 0; r < confusion.size(); ++r) {
      s += std::to_string(r);
      for (auto v : confusion[r]) s += "," + std::to_string(v);
      s += "\n";
    }
    return s;
  }
};

inline Metrics metrics_from_scores(const Tensor<double>& scores, const std::vector<std::size_t>& labels,
                                   std::size_t classes) {
  if (scores.rank() != 2 || scores.dim(0) != labels.size() || scores.dim(1) != classes)
    throw ShapeError("score matrix does not match labels");
  Metrics m;
  m.scores = scores;
  m.labels = labels;
  m.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::size_t pred = argmax<double>(std::span<const double>(scores.data() + i * classes, classes));
    ++m.confusion[labels[i]][pred];
    correct += pred == labels[i];
  }
  m.top1 = labels.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(labels.size());
  m.per_class.assign(classes, 0.0);
  for (std::size_t c = 0; c < classes; ++c) {
    std::size_t n = 0;
    for (auto v : m.confusion[c]) n += v;
    m.per_class[c] = n ? static_cast<double>(m.confusion[c][c]) / static_cast<double>(n) : 0.0;
  }
  return m;
}

inline Metrics evaluate_path(const Models& m, InferencePath path, const Dataset& d, int shift) {
  const bool need_student = path == InferencePath::student || path == InferencePath::late_fusion;
  const bool need_pose = path == InferencePath::pose_teacher || path == InferencePath::late_fusion;
  if (need_student && !m.student) throw MissingArtifact("no student network for " + path_name(path));
  if (need_pose && !m.pose_teacher) throw MissingArtifact("no pose teacher for " + path_name(path));
  if (path == InferencePath::vpn_teacher && !m.vpn) throw MissingArtifact("no video-pose teacher network");
  Tensor<double> scores({d.size(), m.arch.classes});
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto s = infer(m, path, d.clips[i], d.poses[i], shift);
    for (std::size_t c = 0; c < s.size(); ++c) scores(i, c) = s[c];
  }
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  Metrics met = metrics_from_scores(scores, d.labels, m.arch.classes);
  met.mean_latency_ms = std::max(ms / static_cast<double>(d.size()), 1e-9);
  return met;
}

inline InferencePath default_path(Recipe r) {
  if (r == Recipe::pose_teacher) return InferencePath::pose_teacher;
  if (r == Recipe::vpn_teacher) return InferencePath::vpn_teacher;
  return InferencePath::student;
}

/// Evaluates a checkpoint's primary network. Students run on RGB only.
inline Metrics evaluate(const Checkpoint& ckpt, const Dataset& d, bool pose_inputs, int shift = 2) {
  const Recipe r = parse_recipe(ckpt.recipe);
  if (is_student_recipe(r) && pose_inputs)
    throw ConfigError("student checkpoint '" + ckpt.recipe + "' has no pose input path");
  if (!is_student_recipe(r) && !pose_inputs)
    throw ConfigError("teacher checkpoint '" + ckpt.recipe + "' requires pose inputs");
  const Models m = models_from_checkpoint(ckpt);
  return evaluate_path(m, default_path(r), d, shift);
}

/// Elementwise mean of two score matrices.
inline Tensor<double> late_fuse(const Tensor<double>& a, const Tensor<double>& b) {
  if (a.shape() != b.shape() || a.rank() != 2) throw ShapeError("late fusion needs equal-shape score matrices");
  for (const Tensor<double>* s : {&a, &b})
    for (std::size_t i = 0; i < s->dim(0); ++i) {
      double sum = 0;
      for (std::size_t c = 0; c < s->dim(1); ++c) {
        if ((*s)(i, c) < 0) throw ConfigError("late fusion input has a negative score");
        sum += (*s)(i, c);
      }
      if (std::abs(sum - 1.0) > 1e-4) throw ConfigError("late fusion input row is not a distribution");
    }
  Tensor<double> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = 0.5 * (a[i] + b[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainResult {
  Checkpoint checkpoint;
  TrainReport report;
};

namespace detail {

struct StepStats {
  double ce_s = 0, ce_t = 0, scd = 0, ld = 0, le = 0;
  std::size_t steps = 0, seen = 0, correct = 0;

  void add_step() { ++steps; }
  LossBundle bundle(double alpha, double beta) const {
    const double n = std::max<std::size_t>(steps, 1);
    LossBundle b = total_loss(ce_s / n, ce_t / n, scd / n, ld / n, alpha, beta, le / n);
    return b;
  }
};

inline std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a * 0x9e3779b97f4a7c15ull + b + 0x632be59bd9b4e019ull;
  x ^= x >> 31;
  x *= 0xbf58476d1ce4e5b9ull;
  return x ^ (x >> 29);
}

class Trainer {
 public:
  Trainer(const TrainConfig& cfg, const Dataset& train, const Dataset* test, Models& models)
      : cfg_(cfg), train_(train), test_(test), m_(models) {
    drop_pose_ = make_rng(cfg.seed, kDropPose);
    drop_vpn_ = make_rng(cfg.seed, kDropVpn);
    drop_student_ = make_rng(cfg.seed, kDropStudent);
    shuffle_ = make_rng(cfg.seed, kShuffle);
    if (needs_pose_teacher(cfg.recipe)) {
      if (m_.student->feat_proj.out_dim() != m_.pose_teacher->backbone.feature_dim())
        throw ConfigError("student.feat_dim must equal the pose teacher feature size (" +
                          std::to_string(m_.pose_teacher->backbone.feature_dim()) + ")");
      teacher_feats_.resize(train.size());
      for (std::size_t i = 0; i < train.size(); ++i)
        teacher_feats_[i] = l2_normalize(m_.pose_teacher->forward(train.poses[i], nullptr, nullptr).first.pooled);
    }
    switch (cfg.recipe) {
      case Recipe::pose_teacher: m_.pose_teacher->visit(Models::kPoseTeacher, adder()); break;
      case Recipe::vpn_teacher: m_.vpn->visit(Models::kVpn, adder()); break;
      default:
        m_.student->visit(Models::kStudent, adder());
        if (uses_attention_distill(cfg.recipe)) m_.vpn->visit(Models::kVpn, adder());
    }
    opt_.momentum = cfg.momentum;
    opt_.weight_decay = cfg.weight_decay;
    opt_.clip = cfg.grad_clip;
  }

  const Sgd& optimizer() const { return opt_; }

  /// One pass over the training split. epoch 0 is a no-update, no-dropout
  /// evaluation of the initial parameters.
  EpochRow run_epoch(std::size_t epoch) {
    const bool update = epoch > 0;
    std::vector<std::size_t> order(train_.size());
    std::iota(order.begin(), order.end(), 0);
    if (update) std::shuffle(order.begin(), order.end(), shuffle_);
    const std::size_t per_step = is_student_recipe(cfg_.recipe) ? cfg_.batch_size / 2 : cfg_.batch_size;
    const double lr = cfg_.lr * std::pow(cfg_.lr_decay, static_cast<double>((std::max<std::size_t>(epoch, 1) - 1) /
                                                                            cfg_.lr_decay_every));
    StepStats st;
    for (std::size_t start = 0, step = 0; start < order.size(); start += per_step, ++step) {
      const std::vector<std::size_t> ids(order.begin() + static_cast<long>(start),
                                         order.begin() + static_cast<long>(std::min(start + per_step, order.size())));
      if (update) opt_.zero_grad();
      run_step(ids, update, mix(mix(cfg_.seed, epoch), step), st);
      if (update) opt_.step(lr);
    }
    EpochRow row;
    row.epoch = epoch;
    const bool student = is_student_recipe(cfg_.recipe);
    const double alpha = uses_contrastive(cfg_.recipe) ? cfg_.alpha : 0.0;
    const double beta = uses_attention_distill(cfg_.recipe) ? cfg_.beta : 0.0;
    row.loss = st.bundle(student ? alpha : 0.0, student ? beta : 0.0);
    if (cfg_.recipe == Recipe::vpn_teacher) {
      // Teacher objective: convex combination of entropy, embedding and
      // attention regularization.
      row.loss.total = st.ce_t / std::max<std::size_t>(st.steps, 1) * cfg_.vpn_weights.entropy +
                       (cfg_.with_se ? cfg_.vpn_weights.embedding * row.loss.L_e : 0.0) + reg_sum_ / std::max<std::size_t>(st.steps, 1);
      reg_sum_ = 0;
    }
    row.train_acc = st.seen ? static_cast<double>(st.correct) / static_cast<double>(st.seen) : 0.0;
    if (test_ && cfg_.eval_each_epoch)
      row.test_acc = evaluate_path(m_, default_path(cfg_.recipe), *test_, cfg_.crop_shift).top1;
    return row;
  }

 private:
  ParamVisitor<float> adder() {
    return [this](const std::string& n, Param<float>& p) { opt_.add(n, p); };
  }

  void run_step(const std::vector<std::size_t>& ids, bool update, std::uint64_t step_seed, StepStats& st) {
    const auto B = static_cast<float>(ids.size());
    switch (cfg_.recipe) {
      case Recipe::pose_teacher: {
        for (std::size_t id : ids) {
          typename PoseTeacher<float>::Cache c;
          auto [feat, probs] = m_.pose_teacher->forward(train_.poses[id], update ? &drop_pose_ : nullptr, &c);
          st.ce_t += cross_entropy(probs, train_.labels[id]) / B;
          tally(st, probs, id);
          if (update) m_.pose_teacher->backward_ce(c, train_.labels[id], 1.0f / B);
        }
        break;
      }
      case Recipe::vpn_teacher: {
        for (std::size_t id : ids) {
          typename VpnTeacher<float>::Cache c;
          auto out = m_.vpn->forward(train_.clips[id], train_.poses[id], cfg_.with_se, update ? &drop_vpn_ : nullptr, &c);
          st.ce_t += cross_entropy(out.probs, train_.labels[id]) / B;
          if (out.embedding_loss) st.le += *out.embedding_loss / B;
          if (cfg_.vpn_weights.use_attention_reg) {
            float s = 0;
            for (float v : out.factors.z2.vec()) s += v;
            reg_sum_ += cfg_.vpn_weights.attention_reg * s / B;
          }
          tally(st, out.probs, id);
          if (update) m_.vpn->backward(c, train_.labels[id], cfg_.vpn_weights, 1.0f / B);
        }
        break;
      }
      default: student_step(ids, update, step_seed, st);
    }
    st.add_step();
  }

  void student_step(const std::vector<std::size_t>& ids, bool update, std::uint64_t step_seed, StepStats& st) {
    const auto B = static_cast<float>(ids.size());
    const bool contrastive = uses_contrastive(cfg_.recipe);
    const bool attn = uses_attention_distill(cfg_.recipe);
    const auto alpha = static_cast<float>(cfg_.alpha), beta = static_cast<float>(cfg_.beta);

    std::vector<typename Student<float>::Cache> caches(ids.size());
    std::vector<StudentOutput<float>> outs;
    outs.reserve(ids.size());
    for (std::size_t k = 0; k < ids.size(); ++k) {
      outs.push_back(
          m_.student->forward(train_.clips[ids[k]], update ? &drop_student_ : nullptr, &caches[k], contrastive || attn));
      st.ce_s += cross_entropy(outs[k].probs, train_.labels[ids[k]]) / B;
      tally(st, outs[k].probs, ids[k]);
    }

    std::map<std::size_t, Tensor<float>> scd_grads;
    if (contrastive) {
      const PairBatch pb = build_pair_batch(train_.manifest, ids, cfg_.negatives_per_positive, step_seed, cfg_.nce_constant);
      std::map<std::size_t, Tensor<float>> tf, ef;
      for (const auto& it : pb.items) tf.emplace(it.pose_index, teacher_feats_[it.pose_index]);
      for (std::size_t k = 0; k < ids.size(); ++k) ef.emplace(ids[k], outs[k].feat_embedding);
      st.scd += scd_loss(pb, tf, ef, &scd_grads);
    }

    std::vector<Tensor<float>> att_grads(ids.size());
    if (attn) {
      for (std::size_t k = 0; k < ids.size(); ++k) {
        const std::size_t id = ids[k];
        typename VpnTeacher<float>::Cache c;
        auto out = m_.vpn->forward(train_.clips[id], train_.poses[id], false, update ? &drop_vpn_ : nullptr, &c);
        st.ce_t += cross_entropy(out.probs, train_.labels[id]) / B;
        const AttentionEmbeddings<float> emb{project_teacher_attention(out.attention, m_.arch.student.d_att),
                                             outs[k].att_embedding};
        st.ld += attention_distill_loss(emb) / B;
        if (update) {
          // teacher side: cross-entropy only
          m_.vpn->backward(c, train_.labels[id], VpnLossWeights{1.0, 0.0, 0.0, false}, 1.0f / B);
          att_grads[k] = attention_distill_grad(emb);
          att_grads[k] *= beta / B;
        }
      }
    }

    if (!update) return;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      Tensor<float> dfeat;
      const Tensor<float>* dfeat_p = nullptr;
      if (contrastive && alpha != 0.0f) {
        dfeat = scd_grads.at(ids[k]);
        dfeat *= -alpha;  // L contains -alpha * L_SCD
        dfeat_p = &dfeat;
      }
      const Tensor<float>* datt_p = (attn && beta != 0.0f) ? &att_grads[k] : nullptr;
      m_.student->backward(caches[k], train_.labels[ids[k]], 1.0f / B, dfeat_p, datt_p);
    }
  }

  void tally(StepStats& st, const Tensor<float>& probs, std::size_t id) {
    ++st.seen;
    st.correct += argmax<float>(probs.span()) == train_.labels[id];
  }

  const TrainConfig& cfg_;
  const Dataset& train_;
  const Dataset* test_;
  Models& m_;
  Sgd opt_;
  Rng drop_pose_, drop_vpn_, drop_student_, shuffle_;
  std::vector<Tensor<float>> teacher_feats_;
  double reg_sum_ = 0;
};

}  // namespace detail

inline Checkpoint make_checkpoint(Models& m, Recipe r, const nlohmann::json& meta, const Sgd* opt) {
  Checkpoint c;
  c.recipe = recipe_name(r);
  c.meta = meta;
  c.meta["architecture"] = m.arch.to_json();
  m.visit([&](const std::string& name, Param<float>& p) {
    const bool frozen = name.rfind(Models::kPoseTeacher, 0) == 0 && m.pose_teacher_frozen;
    c.blobs.push_back({name, p.value, frozen});
  });
  if (opt)
    for (std::size_t i = 0; i < opt->params.size(); ++i)
      c.blobs.push_back({"momentum/" + opt->names[i], opt->velocity[i], false});
  return c;
}

/// Trains one recipe. `pose_teacher_ckpt` is required by the contrastive
/// recipes and its parameters stay frozen. `on_epoch` observes each row.
inline TrainResult train(const TrainConfig& cfg, const Dataset& train_set, const Dataset* test_set,
                         const Checkpoint* pose_teacher_ckpt = nullptr,
                         const std::function<void(const EpochRow&)>& on_epoch = {}) {
  cfg.validate();
  if (train_set.size() == 0) throw DataError("training set is empty");
  if (train_set.class_count < 2 && uses_contrastive(cfg.recipe)) throw ConfigError("contrastive recipes need >= 2 classes");
  Models m;
  m.arch = Architecture::make(train_set, cfg);
  std::uint64_t frozen_hash = 0;
  if (needs_pose_teacher(cfg.recipe)) {
    if (!pose_teacher_ckpt || pose_teacher_ckpt->recipe != recipe_name(Recipe::pose_teacher))
      throw MissingArtifact("recipe " + recipe_name(cfg.recipe) + " requires a trained pose_teacher checkpoint");
    const Architecture ta = Architecture::from_json(pose_teacher_ckpt->meta.at("architecture"));
    if (ta.classes != m.arch.classes || ta.topology.joint_count != m.arch.topology.joint_count)
      throw ConfigError("pose teacher checkpoint does not match the dataset");
    m.pose_teacher = make_pose_teacher(m.arch, cfg.seed);
    load_params(m, *pose_teacher_ckpt, Models::kPoseTeacher);
    m.pose_teacher_frozen = true;
    frozen_hash = m.hash(Models::kPoseTeacher);
  }
  switch (cfg.recipe) {
    case Recipe::pose_teacher: m.pose_teacher = make_pose_teacher(m.arch, cfg.seed); break;
    case Recipe::vpn_teacher: m.vpn = make_vpn_teacher(m.arch, cfg.seed); break;
    default:
      m.student = make_student(m.arch, cfg.seed);
      if (uses_attention_distill(cfg.recipe)) m.vpn = make_vpn_teacher(m.arch, cfg.seed);
  }

  detail::Trainer tr(cfg, train_set, test_set, m);
  TrainReport report;
  for (std::size_t e = 0; e <= cfg.epochs; ++e) {
    report.rows.push_back(tr.run_epoch(e));
    if (on_epoch) on_epoch(report.rows.back());
    if (m.pose_teacher_frozen && m.hash(Models::kPoseTeacher) != frozen_hash)
      throw FrozenMutation("frozen pose teacher parameters changed during epoch " + std::to_string(e));
  }

  nlohmann::json meta = {{"config", cfg.to_json()},
                         {"config_hash", hex64(cfg.hash())},
                         {"epoch", cfg.epochs},
                         {"metrics", report.to_json()}};
  if (m.pose_teacher_frozen) meta["frozen_hash"] = hex64(frozen_hash);
  return {make_checkpoint(m, cfg.recipe, meta, &tr.optimizer()), std::move(report)};
}

// ---------------------------------------------------------------------------
// Timing

struct TimingRow {
  InferencePath path;
  double mean_ms = 0;
  double std_ms = 0;
  double top1 = 0;
  std::size_t clips = 0;
  std::size_t loads_during_timing = 0;
};

struct TimingReport {
  std::vector<TimingRow> rows;

  const TimingRow* find(InferencePath p) const {
    for (const auto& r : rows)
      if (r.path == p) return &r;
    return nullptr;
  }

  std::string to_csv() const {
    std::string s = "path,mean_ms_per_clip,std_ms_per_clip,top1,clips\n";
    char buf[256];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.4f,%zu\n", path_name(r.path).c_str(), r.mean_ms, r.std_ms, r.top1,
                    r.clips);
      s += buf;
    }
    return s;
  }
};

/// Wall-clock per clip for every path the given networks support. Inputs
/// are held in memory; `warmup` passes are excluded from the statistics.
inline TimingReport bench_inference(const Models& m, const Dataset& d, std::size_t repeats, std::size_t max_clips = 32,
                                    std::size_t warmup = 2, int shift = 2) {
  if (repeats < 5) throw ConfigError("bench needs at least 5 repeats");
  std::vector<InferencePath> paths;
  if (m.student) paths.push_back(InferencePath::student);
  if (m.pose_teacher) paths.push_back(InferencePath::pose_teacher);
  if (m.vpn) paths.push_back(InferencePath::vpn_teacher);
  if (m.student && m.pose_teacher) paths.push_back(InferencePath::late_fusion);
  const std::size_t n = std::min(max_clips, d.size());
  TimingReport rep;
  for (InferencePath p : paths) {
    TimingRow row;
    row.path = p;
    row.clips = n;
    row.top1 = evaluate_path(m, p, d, shift).top1;
    const std::size_t loads_before = g_sample_loads.load();
    std::vector<double> per_clip;
    volatile double sink = 0;
    for (std::size_t r = 0; r < warmup + repeats; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      for (std::size_t i = 0; i < n; ++i) sink = sink + infer(m, p, d.clips[i], d.poses[i], shift)[0];
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      if (r >= warmup) per_clip.push_back(ms / static_cast<double>(n));
    }
    row.loads_during_timing = g_sample_loads.load() - loads_before;
    double mean = 0;
    for (double v : per_clip) mean += v;
    mean /= static_cast<double>(per_clip.size());
    double var = 0;
    for (double v : per_clip) var += (v - mean) * (v - mean);
    row.mean_ms = mean;
    row.std_ms = std::sqrt(var / static_cast<double>(per_clip.size() - 1));
    rep.rows.push_back(row);
  }
  return rep;
}

}  // namespace vpnpp
