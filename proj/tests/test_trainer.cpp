#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace vpnpp;
using namespace vpnpp::oracle;

namespace {

GenConfig tiny_gen(std::size_t classes = 4) {
  GenConfig g;
  g.class_count = classes;
  g.samples_per_class = 6;
  g.test_samples_per_class = 3;
  g.T = 4;
  g.H = 8;
  g.W = 8;
  return g;
}

TrainConfig tiny_train(Recipe r, std::size_t epochs = 2) {
  TrainConfig c;
  c.recipe = r;
  c.epochs = epochs;
  c.batch_size = 8;
  c.lr = 0.02;
  c.grad_clip = 1.0;
  c.video.channels = {8, 8};
  c.video.pools = {{2, 2, 2}, {1, 1, 1}};
  c.se_dim = 8;
  c.crop_shift = 1;
  c.eval_each_epoch = false;
  return c;
}

class TrainerTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("trainer");
    const GenConfig g = tiny_gen();
    train_ = new Dataset(load_dataset(gen_dataset(g, dir_->path, Split::train)));
    test_ = new Dataset(load_dataset(gen_dataset(g, dir_->path, Split::test)));
    teacher_ = new Checkpoint(train(tiny_train(Recipe::pose_teacher, 3), *train_, nullptr).checkpoint);
  }
  static void TearDownTestSuite() {
    delete teacher_;
    delete test_;
    delete train_;
    delete dir_;
  }

  static TempDir* dir_;
  static Dataset* train_;
  static Dataset* test_;
  static Checkpoint* teacher_;
};

TempDir* TrainerTest::dir_ = nullptr;
Dataset* TrainerTest::train_ = nullptr;
Dataset* TrainerTest::test_ = nullptr;
Checkpoint* TrainerTest::teacher_ = nullptr;

std::map<std::string, Tensor<float>> blobs_under(const Checkpoint& c, const std::string& prefix) {
  std::map<std::string, Tensor<float>> out;
  for (const auto& b : c.blobs)
    if (b.name.rfind(prefix, 0) == 0) out[b.name] = b.value;
  return out;
}

}  // namespace

TEST(TrainConfig, JsonRoundTripAndErrors) {
  TrainConfig c = tiny_train(Recipe::vpn_pp);
  c.nce_constant = 2.5;
  TrainConfig back;
  back.apply_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.hash(), c.hash());
  back.alpha = 49;
  EXPECT_NE(back.hash(), c.hash());
  TrainConfig d;
  EXPECT_THROW(d.apply_json({{"learning_rate", 0.1}}), ConfigError);
  EXPECT_THROW(d.apply_json({{"lr", 0.0}}), ConfigError);
  EXPECT_THROW(d.apply_json({{"epochs", 0}}), ConfigError);
  EXPECT_THROW(d.apply_json({{"recipe", "vpn_zz"}}), ConfigError);
  EXPECT_THROW(d.apply_json({{"lr", "fast"}}), ConfigError);
  for (Recipe r : {Recipe::pose_teacher, Recipe::vpn_teacher, Recipe::rgb_student, Recipe::vpn_f, Recipe::vpn_a,
                   Recipe::vpn_pp})
    EXPECT_EQ(parse_recipe(recipe_name(r)), r);
}

TEST(Sgd, ClipsEachNetworkSeparately) {
  Param<float> a({2}), b({1});
  a.grad = Tensor<float>({2}, std::vector<float>{3, 4});
  b.grad = Tensor<float>({1}, std::vector<float>{0.5f});
  Sgd opt;
  opt.momentum = 0;
  opt.clip = 1.0;
  opt.add("student.x", a);
  opt.add("vpn_teacher.y", b);
  opt.step(1.0);
  EXPECT_NEAR(a.value[0], -0.6f, 1e-6);
  EXPECT_NEAR(a.value[1], -0.8f, 1e-6);
  EXPECT_NEAR(b.value[0], -0.5f, 1e-6);
}

TEST(Crops, ShiftReplicatesEdgesAndMaxPoolDominatesEachCrop) {
  Tensor<float> clip({1, 1, 1, 4}, std::vector<float>{1, 2, 3, 4});
  EXPECT_EQ(shift_clip(clip, 1).vec(), (std::vector<float>{1, 1, 2, 3}));
  EXPECT_EQ(shift_clip(clip, -2).vec(), (std::vector<float>{3, 4, 4, 4}));
  EXPECT_EQ(crop_offsets(2), (std::vector<int>{-2, 0, 2}));
  Rng rng = make_rng(1, 1);
  for (int trial = 0; trial < 20; ++trial) {
    auto crops = random_tensor<double>({3, 5}, rng);
    for (std::size_t k = 0; k < 3; ++k) softmax_inplace(std::span<double>(crops.data() + k * 5, 5));
    const auto pooled = max_pool_crops(crops);
    for (std::size_t k = 0; k < 3; ++k)
      for (std::size_t c = 0; c < 5; ++c) EXPECT_GE(pooled[c], crops(k, c));
  }
}

TEST(Metrics, PerfectPredictorGivesDiagonalConfusion) {
  const std::size_t n = 320, C = 8;
  Tensor<double> s({n, C});
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = i % C;
    s(i, labels[i]) = 1.0;
  }
  const auto m = metrics_from_scores(s, labels, C);
  EXPECT_EQ(m.top1, 1.0);
  for (std::size_t r = 0; r < C; ++r)
    for (std::size_t c = 0; c < C; ++c) EXPECT_EQ(m.confusion[r][c], r == c ? n / C : 0u);
  EXPECT_THROW(metrics_from_scores(s, std::vector<std::size_t>(3), C), ShapeError);
}

TEST(Metrics, RandomPredictorScoresChanceAndTop1IsTraceOverTotal) {
  const std::size_t n = 320, C = 8;
  double mean = 0;
  const int seeds = 20;
  for (int seed = 0; seed < seeds; ++seed) {
    Rng rng = make_rng(static_cast<std::uint64_t>(seed), 5);
    Tensor<double> s({n, C});
    std::vector<std::size_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      labels[i] = i % C;
      for (std::size_t c = 0; c < C; ++c) s(i, c) = uniform01(rng);
    }
    const auto m = metrics_from_scores(s, labels, C);
    std::size_t trace = 0, total = 0;
    for (std::size_t r = 0; r < C; ++r)
      for (std::size_t c = 0; c < C; ++c) {
        total += m.confusion[r][c];
        if (r == c) trace += m.confusion[r][c];
      }
    EXPECT_DOUBLE_EQ(m.top1, static_cast<double>(trace) / static_cast<double>(total));
    mean += m.top1 / seeds;
  }
  EXPECT_NEAR(mean, 0.125, 0.04);
}

TEST(LateFuse, ContractExamples) {
  Tensor<double> a({1, 2}, std::vector<double>{1, 0}), b({1, 2}, std::vector<double>{0, 1});
  EXPECT_EQ(late_fuse(a, b).vec(), (std::vector<double>{0.5, 0.5}));
  Rng rng = make_rng(2, 1);
  auto rows = [&](std::size_t n) {
    auto t = random_tensor<double>({n, 4}, rng);
    for (std::size_t i = 0; i < n; ++i) softmax_inplace(std::span<double>(t.data() + i * 4, 4));
    return t;
  };
  const auto p = rows(10), q = rows(10);
  EXPECT_LT(max_abs_diff(late_fuse(p, p), p), 1e-15);
  const auto f = late_fuse(p, q);
  for (std::size_t i = 0; i < 10; ++i) {
    double s = 0;
    for (std::size_t c = 0; c < 4; ++c) s += f(i, c);
    EXPECT_NEAR(s, 1.0, 1e-12);
    const auto ap = argmax<double>(std::span<const double>(p.data() + i * 4, 4));
    if (ap == argmax<double>(std::span<const double>(q.data() + i * 4, 4))) {
      EXPECT_EQ(argmax<double>(std::span<const double>(f.data() + i * 4, 4)), ap);
    }
  }
  EXPECT_THROW(late_fuse(p, rows(9)), ShapeError);
  EXPECT_THROW(late_fuse(a, Tensor<double>({1, 2}, std::vector<double>{0.7, 0.7})), ConfigError);
}

TEST_F(TrainerTest, ContrastiveRecipesNeedAPoseTeacherCheckpoint) {
  EXPECT_THROW(train(tiny_train(Recipe::vpn_f, 1), *train_, nullptr), MissingArtifact);
  EXPECT_THROW(train(tiny_train(Recipe::vpn_pp, 1), *train_, nullptr), MissingArtifact);
  Checkpoint wrong = *teacher_;
  wrong.recipe = "rgb_student";
  EXPECT_THROW(train(tiny_train(Recipe::vpn_f, 1), *train_, nullptr, &wrong), MissingArtifact);
  TrainConfig narrow = tiny_train(Recipe::vpn_f, 1);
  narrow.student.feat_dim = 8;
  EXPECT_THROW(train(narrow, *train_, nullptr, teacher_), ConfigError);
}

TEST_F(TrainerTest, FrozenTeacherIsUnchangedAndFlagged) {
  const auto res = train(tiny_train(Recipe::vpn_f, 2), *train_, nullptr, teacher_);
  EXPECT_EQ(res.checkpoint.hash("pose_teacher."), teacher_->hash("pose_teacher."));
  for (const auto& b : res.checkpoint.blobs) {
    if (b.name.rfind("pose_teacher.", 0) == 0) {
      EXPECT_TRUE(b.frozen) << b.name;
    }
    if (b.name.rfind("student.", 0) == 0) {
      EXPECT_FALSE(b.frozen) << b.name;
    }
  }
  EXPECT_EQ(res.checkpoint.meta.at("frozen_hash"), hex64(models_from_checkpoint(*teacher_).hash("pose_teacher")));
  for (const auto& b : teacher_->blobs) EXPECT_FALSE(b.frozen);
}

TEST_F(TrainerTest, ZeroWeightDistillationEqualsPlainStudent) {
  TrainConfig pp = tiny_train(Recipe::vpn_pp, 2);
  pp.alpha = 0;
  pp.beta = 0;
  const auto a = train(pp, *train_, nullptr, teacher_);
  const auto b = train(tiny_train(Recipe::rgb_student, 2), *train_, nullptr);
  const auto sa = blobs_under(a.checkpoint, "student."), sb = blobs_under(b.checkpoint, "student.");
  ASSERT_FALSE(sa.empty());
  EXPECT_EQ(sa, sb);
}

TEST_F(TrainerTest, TrainingIsDeterministic) {
  const auto a = train(tiny_train(Recipe::vpn_pp, 1), *train_, nullptr, teacher_);
  const auto b = train(tiny_train(Recipe::vpn_pp, 1), *train_, nullptr, teacher_);
  EXPECT_EQ(encode_checkpoint(a.checkpoint), encode_checkpoint(b.checkpoint));
  EXPECT_EQ(a.report.to_csv(), b.report.to_csv());
}

TEST_F(TrainerTest, ReportCsvHasFixedSchema) {
  const auto res = train(tiny_train(Recipe::vpn_a, 1), *train_, test_);
  const std::string csv = res.report.to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,L_C_S,L_C_T,L_SCD,L_D,L_e,total,train_acc,test_acc");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  for (const auto& r : res.report.rows) {
    EXPECT_GE(r.loss.L_D, 0.0);
    EXPECT_LE(r.loss.L_D, 4.0);
    EXPECT_NEAR(r.loss.total, r.loss.L_C_S + r.loss.L_C_T + 50 * r.loss.L_D, 1e-9);
  }
}

TEST_F(TrainerTest, CheckpointRoundTripReproducesScoresBitwise) {
  const auto res = train(tiny_train(Recipe::vpn_pp, 1), *train_, nullptr, teacher_);
  const fs::path p = dir_->path / "vpn_pp.vpck";
  save_checkpoint(p, res.checkpoint);
  const Checkpoint back = load_checkpoint(p);
  EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(res.checkpoint));
  const auto before = evaluate(res.checkpoint, *test_, false, 1);
  const auto after = evaluate(back, *test_, false, 1);
  EXPECT_EQ(before.scores, after.scores);
  const Models m = models_from_checkpoint(back);
  EXPECT_TRUE(m.pose_teacher_frozen);
  EXPECT_TRUE(m.vpn.has_value());
  EXPECT_THROW(load_checkpoint(dir_->path / "absent.vpck"), MissingArtifact);
  std::string bytes = encode_checkpoint(res.checkpoint);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 7)), MalformedHeader);
  bytes[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bytes), MalformedHeader);
}

TEST_F(TrainerTest, EvaluateEnforcesInputModality) {
  const auto student = train(tiny_train(Recipe::vpn_f, 1), *train_, nullptr, teacher_).checkpoint;
  const auto m = evaluate(student, *test_, false, 1);
  EXPECT_GT(m.mean_latency_ms, 0.0);
  EXPECT_EQ(m.scores.dim(0), test_->size());
  EXPECT_THROW(evaluate(student, *test_, true), ConfigError);
  EXPECT_THROW(evaluate(*teacher_, *test_, false), ConfigError);
  EXPECT_NO_THROW(evaluate(*teacher_, *test_, true));
  const Models tm = models_from_checkpoint(*teacher_);
  EXPECT_THROW(evaluate_path(tm, InferencePath::late_fusion, *test_, 1), MissingArtifact);
}

TEST_F(TrainerTest, InitialLossIsNearUniformCrossEntropy) {
  TempDir dir("trainer_c8");
  GenConfig g = tiny_gen(8);
  g.samples_per_class = 3;
  const Dataset d = load_dataset(gen_dataset(g, dir.path, Split::train));
  TrainConfig c = tiny_train(Recipe::vpn_a, 1);
  const auto res = train(c, d, nullptr);
  const auto& r0 = res.report.rows.at(0);
  EXPECT_NEAR(r0.loss.L_C_S + r0.loss.L_C_T, 2 * std::log(8.0), 0.5);
  EXPECT_NEAR(r0.loss.total, r0.loss.L_C_S + r0.loss.L_C_T + c.beta * r0.loss.L_D, 1e-9);
}

TEST_F(TrainerTest, EveryRecipeLowersItsTrainingLoss) {
  for (Recipe r : {Recipe::pose_teacher, Recipe::vpn_teacher, Recipe::rgb_student, Recipe::vpn_f, Recipe::vpn_a,
                   Recipe::vpn_pp}) {
    const auto res = train(tiny_train(r, 6), *train_, nullptr, needs_pose_teacher(r) ? teacher_ : nullptr);
    EXPECT_LT(res.report.rows.back().loss.total, res.report.rows.front().loss.total) << recipe_name(r);
  }
}

TEST_F(TrainerTest, BenchExcludesLoadingAndOrdersPaths) {
  const auto ck = train(tiny_train(Recipe::vpn_pp, 1), *train_, nullptr, teacher_).checkpoint;
  const Models m = models_from_checkpoint(ck);
  EXPECT_THROW(bench_inference(m, *test_, 4), ConfigError);
  const auto rep = bench_inference(m, *test_, 5, 8);
  ASSERT_EQ(rep.rows.size(), 4u);
  for (const auto& r : rep.rows) {
    EXPECT_GT(r.mean_ms, 0.0);
    EXPECT_EQ(r.loads_during_timing, 0u);
    EXPECT_EQ(r.clips, 8u);
  }
  EXPECT_LT(rep.find(InferencePath::student)->mean_ms, rep.find(InferencePath::vpn_teacher)->mean_ms);
  const std::string csv = rep.to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "path,mean_ms_per_clip,std_ms_per_clip,top1,clips");
}
