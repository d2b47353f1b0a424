#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <future>
#include <iostream>

#include "vpnpp/trainer.hpp"

using namespace vpnpp;

namespace {

enum ExitCode { kOk = 0, kConfig = 2, kMissing = 3, kData = 4 };

struct Experiment {
  GenConfig gen;
  nlohmann::json common = nlohmann::json::object();
  nlohmann::json recipes = nlohmann::json::object();
  fs::path out = "runs";
  std::optional<std::uint64_t> seed;

  static Experiment load(const std::string& path) {
    Experiment e;
    if (path.empty()) return e;
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config " + path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& ex) {
      throw ConfigError("config " + path + ": " + ex.what());
    }
    if (!j.is_object()) throw ConfigError("config root must be an object");
    for (auto it = j.begin(); it != j.end(); ++it)
      if (it.key() != "gen" && it.key() != "train" && it.key() != "recipes" && it.key() != "out")
        throw ConfigError("unknown config section '" + it.key() + "'");
    if (j.contains("gen")) e.gen = GenConfig::from_json(j["gen"]);
    if (j.contains("train")) e.common = j["train"];
    if (j.contains("recipes")) e.recipes = j["recipes"];
    if (j.contains("out")) e.out = j["out"].get<std::string>();
    if (!e.common.is_object() || !e.recipes.is_object()) throw ConfigError("train and recipes must be objects");
    for (auto it = e.recipes.begin(); it != e.recipes.end(); ++it) parse_recipe(it.key());
    return e;
  }

  TrainConfig config(Recipe r) const {
    TrainConfig c;
    c.apply_json(common);
    if (recipes.contains(recipe_name(r))) c.apply_json(recipes[recipe_name(r)]);
    c.recipe = r;
    if (seed) c.seed = *seed;
    c.validate();
    return c;
  }

  fs::path data_dir() const { return out / ("data_" + hex64(gen.hash())); }
};

void notice(const std::string& s) { std::cerr << "vpnpp: " << s << "\n"; }

void write_text(const fs::path& p, const std::string& s) {
  fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + p.string());
  os << s;
}

std::size_t worker_cap() {
  const char* v = std::getenv("VPNPP_THREADS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) throw ConfigError("VPNPP_THREADS must be a positive integer");
  return static_cast<std::size_t>(n);
}

bool data_ready(const fs::path& dir) {
  return fs::exists(dir / manifest_filename(Split::train)) && fs::exists(dir / manifest_filename(Split::test));
}

void ensure_data(const Experiment& e, bool force) {
  const fs::path dir = e.data_dir();
  if (data_ready(dir) && !force) {
    notice("dataset " + dir.string() + " exists, skipping (use --force to regenerate)");
    return;
  }
  gen_dataset(e.gen, dir, Split::train);
  gen_dataset(e.gen, dir, Split::test);
  std::cout << dir.string() << "\n";
}

Dataset load_split(const Experiment& e, Split s, const TrainConfig& c) {
  const fs::path m = e.data_dir() / manifest_filename(s);
  if (!fs::exists(m)) throw MissingArtifact("dataset not generated: " + m.string() + " (run gen first)");
  return load_dataset(read_manifest(m), c.pose_corruption, c.seed);
}

using detail::mix;

TrainConfig teacher_config(const Experiment& e, const TrainConfig& c) {
  TrainConfig t = e.config(Recipe::pose_teacher);
  t.pose_corruption = c.pose_corruption;
  return t;
}

/// Artifact key: training config plus everything it was trained from.
std::uint64_t artifact_key(const Experiment& e, const TrainConfig& c) {
  std::uint64_t h = mix(c.hash(), e.gen.hash());
  if (needs_pose_teacher(c.recipe)) h = mix(h, artifact_key(e, teacher_config(e, c)));
  return h;
}

std::string stem(const Experiment& e, const TrainConfig& c) {
  return recipe_name(c.recipe) + "_" + hex64(artifact_key(e, c));
}

fs::path ckpt_path(const Experiment& e, const TrainConfig& c, const fs::path& dir) {
  return dir / (stem(e, c) + ".ckpt");
}

/// Trains one recipe into `dir`; its pose teacher is looked up in `dep_dir`.
/// A missing teacher is an error unless `build_deps` is set.
Checkpoint ensure_checkpoint(const Experiment& e, const TrainConfig& c, const fs::path& dir, const fs::path& dep_dir,
                             bool force, bool build_deps) {
  const fs::path p = ckpt_path(e, c, dir);
  if (fs::exists(p) && !force) {
    notice(p.filename().string() + " exists, skipping (use --force to retrain)");
    return load_checkpoint(p);
  }
  std::optional<Checkpoint> teacher;
  if (needs_pose_teacher(c.recipe)) {
    const TrainConfig tc = teacher_config(e, c);
    const fs::path tp = ckpt_path(e, tc, dep_dir);
    if (fs::exists(tp))
      teacher = load_checkpoint(tp);
    else if (build_deps)
      teacher = ensure_checkpoint(e, tc, dep_dir, dep_dir, false, true);
    else
      throw MissingArtifact("recipe " + recipe_name(c.recipe) + " needs " + tp.string() +
                            " (train --recipe pose_teacher first)");
  }
  const Dataset tr = load_split(e, Split::train, c);
  const Dataset te = load_split(e, Split::test, c);
  fs::create_directories(dir);
  TrainResult res = train(c, tr, c.eval_each_epoch ? &te : nullptr, teacher ? &*teacher : nullptr);
  save_checkpoint(p, res.checkpoint);
  write_text(dir / (stem(e, c) + "_report.csv"), res.report.to_csv());
  std::cout << p.string() << "\n";
  return res.checkpoint;
}

Checkpoint require_checkpoint(const Experiment& e, const TrainConfig& c) {
  const fs::path p = ckpt_path(e, c, e.out);
  if (!fs::exists(p)) throw MissingArtifact("no checkpoint " + p.string() + " (train --recipe " + recipe_name(c.recipe) + ")");
  return load_checkpoint(p);
}

InferencePath parse_path(const std::string& s, Recipe r) {
  if (s.empty()) return default_path(r);
  const std::pair<const char*, InferencePath> names[] = {{"student", InferencePath::student},
                                                         {"pose_teacher", InferencePath::pose_teacher},
                                                         {"vpn_teacher", InferencePath::vpn_teacher},
                                                         {"late_fusion", InferencePath::late_fusion}};
  for (auto [n, p] : names)
    if (s == n || s == path_name(p)) return p;
  throw ConfigError("unknown inference path '" + s + "'");
}

void cmd_eval(const Experiment& e, Recipe r, const std::string& path_flag, bool force) {
  const TrainConfig c = e.config(r);
  const InferencePath path = parse_path(path_flag, r);
  const std::string base = stem(e, c) + "_eval_" + path_name(path);
  const fs::path csv = e.out / (base + ".csv");
  if (fs::exists(csv) && !force) {
    notice(csv.filename().string() + " exists, skipping (use --force to recompute)");
    return;
  }
  const Checkpoint ck = require_checkpoint(e, c);
  const Models m = models_from_checkpoint(ck);
  const Metrics met = evaluate_path(m, path, load_split(e, Split::test, c), c.crop_shift);
  std::string s = "class,accuracy\n";
  char buf[64];
  for (std::size_t k = 0; k < met.per_class.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%zu,%.4f\n", k, met.per_class[k]);
    s += buf;
  }
  std::snprintf(buf, sizeof buf, "all,%.4f\n", met.top1);
  s += buf;
  write_text(csv, s);
  write_text(e.out / (base + "_confusion.csv"), met.confusion_csv());
  std::printf("%s %s top1=%.4f\n", recipe_name(r).c_str(), path_name(path).c_str(), met.top1);
}

void cmd_bench(const Experiment& e, Recipe r, std::size_t repeats, bool force) {
  const TrainConfig c = e.config(r);
  const fs::path csv = e.out / (stem(e, c) + "_bench.csv");
  if (fs::exists(csv) && !force) {
    notice(csv.filename().string() + " exists, skipping (use --force to rerun)");
    return;
  }
  const Models m = models_from_checkpoint(require_checkpoint(e, c));
  const TimingReport rep = bench_inference(m, load_split(e, Split::test, c), repeats, 32, 2, c.crop_shift);
  write_text(csv, rep.to_csv());
  std::cout << rep.to_csv();
}

struct GridPoint {
  std::string label;
  std::vector<TrainConfig> configs;
};

void cmd_ablate(const Experiment& e, Recipe r, const std::string& grid, bool pose_quality, bool force) {
  if (grid.empty() == !pose_quality) throw ConfigError("ablate takes exactly one of --grid or --pose-quality");
  const TrainConfig base = e.config(r);
  std::vector<GridPoint> points;
  std::string header;
  std::string kind;
  if (!grid.empty()) {
    if (grid != "alpha" && grid != "beta") throw ConfigError("--grid must be alpha or beta");
    kind = grid;
    header = grid + ",top1";
    for (double v : {0.0, 1.0, 10.0, 50.0, 75.0, 100.0}) {
      TrainConfig c = base;
      (grid == "alpha" ? c.alpha : c.beta) = v;
      char label[32];
      std::snprintf(label, sizeof label, "%g", v);
      points.push_back({label, {c}});
    }
  } else {
    kind = "pose_quality";
    header = "level,pose_teacher_top1," + recipe_name(r) + "_top1";
    for (double level : {0.0, 0.5, 1.0}) {
      TrainConfig t = e.config(Recipe::pose_teacher);
      TrainConfig c = base;
      t.pose_corruption = c.pose_corruption = level;
      char label[32];
      std::snprintf(label, sizeof label, "%g", level);
      points.push_back({label, {t, c}});
    }
  }
  const std::string tag = "ablate_" + kind + "_" + recipe_name(r) + "_" + hex64(mix(base.hash(), e.gen.hash()));
  const fs::path csv = e.out / (tag + ".csv");
  if (fs::exists(csv) && !force) {
    notice(csv.filename().string() + " exists, skipping (use --force to rerun)");
    return;
  }
  const fs::path work = e.out / tag;

  auto run_point = [&](const GridPoint& g) {
    std::string row = g.label;
    char buf[32];
    for (const TrainConfig& c : g.configs) {
      const fs::path dir = pose_quality ? work / g.label : work / (kind + "_" + g.label);
      const Checkpoint ck = ensure_checkpoint(e, c, dir, pose_quality ? dir : work, force, true);
      const Models m = models_from_checkpoint(ck);
      const double acc = evaluate_path(m, default_path(c.recipe), load_split(e, Split::test, c), c.crop_shift).top1;
      std::snprintf(buf, sizeof buf, ",%.4f", acc);
      row += buf;
    }
    return row + "\n";
  };

  if (!pose_quality && needs_pose_teacher(r)) ensure_checkpoint(e, teacher_config(e, base), work, work, force, true);

  std::vector<std::string> rows(points.size());
  const std::size_t cap = worker_cap();
  for (std::size_t start = 0; start < points.size(); start += cap) {
    std::vector<std::future<std::string>> jobs;
    for (std::size_t i = start; i < std::min(points.size(), start + cap); ++i)
      jobs.push_back(std::async(cap > 1 ? std::launch::async : std::launch::deferred, [&, i] {
        enable_flush_to_zero();
        return run_point(points[i]);
      }));
    for (std::size_t i = 0; i < jobs.size(); ++i) rows[start + i] = jobs[i].get();
  }
  std::string s = header + "\n";
  for (const auto& row : rows) s += row;
  write_text(csv, s);
  std::cout << s;
}

/// Grayscale grid: t panels of m x n, each cell upsampled by `scale`.
void write_pgm(const fs::path& p, const Tensor<float>& a, std::size_t scale = 8) {
  const std::size_t t = a.dim(0), m = a.dim(1), n = a.dim(2);
  const std::size_t gap = 1, W = t * n * scale + (t - 1) * gap, H = m * scale;
  float hi = 0;
  for (float v : a.vec()) hi = std::max(hi, v);
  std::vector<unsigned char> px(W * H, 0);
  for (std::size_t k = 0; k < t; ++k)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < n * scale; ++x) {
        const float v = hi > 0 ? a(k, y / scale, x / scale) / hi : 0.0f;
        px[y * W + k * (n * scale + gap) + x] = static_cast<unsigned char>(std::lround(255.0f * v));
      }
  fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  os << "P5\n" << W << " " << H << "\n255\n";
  os.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
}

void cmd_dump_attention(const Experiment& e, Recipe r, std::size_t samples, bool force) {
  const TrainConfig c = e.config(r);
  const fs::path dir = e.out / ("attention_" + stem(e, c));
  if (fs::exists(dir) && !force) {
    notice(dir.filename().string() + " exists, skipping (use --force to redraw)");
    return;
  }
  const Models m = models_from_checkpoint(require_checkpoint(e, c));
  if (!m.vpn && !m.student) throw MissingArtifact("checkpoint " + recipe_name(r) + " has no attention to draw");
  const Dataset d = load_split(e, Split::test, c);
  const Shape fs_ = m.arch.video.feature_shape(m.arch.clip_shape[1], m.arch.clip_shape[2], m.arch.clip_shape[3]);
  for (std::size_t i = 0; i < std::min(samples, d.size()); ++i) {
    const std::string name = d.manifest.samples[i].sample_id + "_label" + std::to_string(d.labels[i]);
    if (m.vpn) {
      const auto out = m.vpn->forward(d.clips[i], d.poses[i], false, nullptr, nullptr);
      write_pgm(dir / (name + "_teacher.pgm"), out.attention.A);
    }
    if (m.student) {
      const auto out = m.student->forward(d.clips[i], nullptr, nullptr, false);
      write_pgm(dir / (name + "_student.pgm"), attention_saliency(out.attention).reshaped({fs_[1], fs_[2], fs_[3]}));
    }
  }
  std::cout << dir.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  enable_flush_to_zero();
  CLI::App app{"Pose-to-video distillation experiments on synthetic data"};
  app.require_subcommand(1);

  std::string config_path, recipe_flag, out_flag, grid, path_flag;
  std::optional<std::uint64_t> seed;
  bool force = false, pose_quality = false;
  std::size_t repeats = 10, samples = 4;

  auto common = [&](CLI::App* sub, bool recipe) {
    sub->add_option("--config", config_path, "experiment JSON with gen/train/recipes sections");
    sub->add_option("--out", out_flag, "output directory");
    sub->add_option("--seed", seed, "training seed override");
    sub->add_flag("--force", force, "recompute existing artifacts");
    if (recipe) sub->add_option("--recipe", recipe_flag, "recipe name");
  };
  auto* gen = app.add_subcommand("gen", "generate the synthetic dataset");
  common(gen, false);
  auto* tr = app.add_subcommand("train", "train one recipe");
  common(tr, true);
  tr->get_option("--recipe")->required();
  auto* ev = app.add_subcommand("eval", "evaluate a trained recipe on the test split");
  common(ev, true);
  ev->get_option("--recipe")->required();
  ev->add_option("--path", path_flag, "student, pose_teacher, vpn_teacher or late_fusion");
  auto* be = app.add_subcommand("bench", "per-clip inference latency of every path");
  common(be, true);
  be->get_option("--recipe")->required();
  be->add_option("--repeats", repeats, "timed passes");
  auto* ab = app.add_subcommand("ablate", "loss-weight grid or pose-quality sweep");
  common(ab, true);
  ab->add_option("--grid", grid, "alpha or beta");
  ab->add_flag("--pose-quality", pose_quality, "corruption levels 0, 0.5, 1");
  auto* da = app.add_subcommand("dump-attention", "write attention heatmaps as PGM grids");
  common(da, true);
  da->get_option("--recipe")->required();
  da->add_option("--samples", samples, "test clips to draw");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    Experiment e = Experiment::load(config_path);
    if (!out_flag.empty()) e.out = out_flag;
    e.seed = seed;
    if (gen->parsed()) {
      ensure_data(e, force);
    } else if (tr->parsed()) {
      ensure_checkpoint(e, e.config(parse_recipe(recipe_flag)), e.out, e.out, force, false);
    } else if (ev->parsed()) {
      cmd_eval(e, parse_recipe(recipe_flag), path_flag, force);
    } else if (be->parsed()) {
      cmd_bench(e, parse_recipe(recipe_flag), repeats, force);
    } else if (ab->parsed()) {
      cmd_ablate(e, parse_recipe(recipe_flag.empty() ? "vpn_pp" : recipe_flag), grid, pose_quality, force);
    } else if (da->parsed()) {
      cmd_dump_attention(e, parse_recipe(recipe_flag), samples, force);
    }
  } catch (const ConfigError& ex) {
    std::cerr << "config error: " << ex.what() << "\n";
    return kConfig;
  } catch (const MissingArtifact& ex) {
    std::cerr << "missing artifact: " << ex.what() << "\n";
    return kMissing;
  } catch (const DataError& ex) {
    std::cerr << "data error: " << ex.what() << "\n";
    return kData;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  return kOk;
}
