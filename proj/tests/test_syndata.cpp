#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace vpnpp;
using namespace vpnpp::oracle;

namespace {

GenConfig small_config() {
  GenConfig c;
  c.samples_per_class = 4;
  c.test_samples_per_class = 2;
  c.T = 4;
  c.H = 16;
  c.W = 16;
  return c;
}

std::string file_bytes(const fs::path& p) { return detail::read_file(p); }

}  // namespace

TEST(Skeleton, Body13IsSymmetricConnectedAndRowStochastic) {
  const auto topo = SkeletonTopology::body13();
  ASSERT_EQ(topo.joint_count, 13u);
  EXPECT_TRUE(topo.connected());
  for (std::size_t j = 0; j < 13; ++j)
    for (std::size_t k = 0; k < 13; ++k) EXPECT_EQ(topo.adjacency(j, k), topo.adjacency(k, j));
  const auto rn = topo.row_normalized();
  for (std::size_t j = 0; j < 13; ++j) {
    double s = 0;
    for (std::size_t k = 0; k < 13; ++k) s += rn(j, k);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_THROW(SkeletonTopology::from_edges(4, {{0, 1}, {2, 3}}), ConfigError);
}

TEST(GenDataset, SampleCountFollowsClassesTimesPerClass) {
  TempDir tmp("gen_count");
  GenConfig c = small_config();
  c.samples_per_class = 40;
  c.T = 2;
  c.H = 8;
  c.W = 8;
  const auto m = gen_dataset(c, tmp.path);
  EXPECT_EQ(m.size(), 320u);
  std::vector<int> per_class(8, 0);
  for (const auto& s : m.samples) ++per_class[s.label];
  for (int n : per_class) EXPECT_EQ(n, 40);
}

TEST(GenDataset, SameConfigGivesByteIdenticalFiles) {
  TempDir a("gen_a"), b("gen_b");
  const GenConfig c = small_config();
  const auto ma = gen_dataset(c, a.path);
  const auto mb = gen_dataset(c, b.path);
  ASSERT_EQ(ma.size(), mb.size());
  EXPECT_EQ(file_bytes(a.path / "manifest_train.csv"), file_bytes(b.path / "manifest_train.csv"));
  for (std::size_t i = 0; i < ma.size(); ++i) {
    EXPECT_EQ(file_bytes(ma.samples[i].clip_path), file_bytes(mb.samples[i].clip_path));
    EXPECT_EQ(file_bytes(ma.samples[i].pose_path), file_bytes(mb.samples[i].pose_path));
  }
}

TEST(GenDataset, DistinctSeedsGiveDistinctPayloads) {
  GenConfig c = small_config();
  auto [v0, p0] = generate_sample(c, Split::train, 3, 3);
  c.seed = 1;
  auto [v1, p1] = generate_sample(c, Split::train, 3, 3);
  EXPECT_FALSE(v0.frames == v1.frames);
  EXPECT_FALSE(p0.coords == p1.coords);
}

TEST(GenDataset, ManifestReadsBackAndInvariantsHold) {
  TempDir tmp("gen_manifest");
  const GenConfig c = small_config();
  const auto m = gen_dataset(c, tmp.path, Split::test);
  const auto r = read_manifest(tmp.path / manifest_filename(Split::test));
  ASSERT_EQ(r.size(), m.size());
  EXPECT_EQ(r.class_count, 8u);
  EXPECT_EQ(r.config_hash, c.hash());
  std::set<std::string> ids;
  for (std::size_t i = 0; i < r.size(); ++i) {
    EXPECT_EQ(r.samples[i].label, m.samples[i].label);
    EXPECT_LT(r.samples[i].label, 8u);
    EXPECT_TRUE(ids.insert(r.samples[i].sample_id).second);
    auto [v, p] = load_sample(r.samples[i].clip_path, r.samples[i].pose_path);
    EXPECT_EQ(v.frames.shape(), (Shape{3, 4, 16, 16}));
    EXPECT_EQ(p.coords.shape(), (Shape{3, 13, 20}));
    EXPECT_NO_THROW(v.validate());
    EXPECT_NO_THROW(p.validate());
  }
}

TEST(GenConfig, JsonRoundTripAndValidation) {
  GenConfig c = small_config();
  c.pose_signal_strength = 0.3;
  const auto back = GenConfig::from_json(c.to_json());
  EXPECT_EQ(back.hash(), c.hash());
  EXPECT_THROW(GenConfig::from_json({{"bogus", 1}}), ConfigError);
  EXPECT_THROW(GenConfig::from_json({{"pose_signal_strength", 1.5}}), ConfigError);
  EXPECT_THROW(GenConfig::from_json({{"samples_per_class", 0}}), ConfigError);
  EXPECT_THROW(GenConfig::from_json({{"T", "eight"}}), ConfigError);
}

TEST(GenConfig, AppearancePairsSharePosePrototypes) {
  GenConfig c;
  c.appearance_pair_fraction = 0.25;
  EXPECT_EQ(c.appearance_pairs(), 1u);
  for (std::size_t k = 0; k < 6; ++k) {
    EXPECT_EQ(c.pose_prototype(k), k);
    EXPECT_FALSE(c.is_appearance_class(k));
  }
  EXPECT_EQ(c.pose_prototype(6), 6u);
  EXPECT_EQ(c.pose_prototype(7), 6u);
  EXPECT_TRUE(c.is_appearance_class(7));
}

TEST(LoadSample, RoundTripIsBitwise) {
  TempDir tmp("roundtrip");
  const GenConfig c = small_config();
  for (std::size_t i = 0; i < 8; ++i) {
    auto [v, p] = generate_sample(c, Split::train, i, i % 8);
    const fs::path cp = tmp.path / "c.vpsd", pp = tmp.path / "p.vpsd";
    save_sample(cp, pp, v, p);
    auto [v2, p2] = load_sample(cp, pp);
    EXPECT_EQ(v.frames, v2.frames);
    EXPECT_EQ(p.coords, p2.coords);
  }
}

TEST(LoadSample, TruncatedFileIsMalformedHeader) {
  TempDir tmp("trunc");
  const GenConfig c = small_config();
  auto [v, p] = generate_sample(c, Split::train, 0, 0);
  const fs::path cp = tmp.path / "c.vpsd", pp = tmp.path / "p.vpsd";
  save_sample(cp, pp, v, p);
  detail::write_file(pp, file_bytes(pp).substr(0, 5));
  EXPECT_THROW(load_sample(cp, pp), MalformedHeader);
  detail::write_file(tmp.path / "bad.vpsd", "XXXX\x01\x00\x01\x00\x00\x00\x00");
  EXPECT_THROW(load_array(tmp.path / "bad.vpsd"), MalformedHeader);
}

TEST(LoadSample, HeaderPayloadDisagreementIsShapeMismatch) {
  TempDir tmp("mismatch");
  const GenConfig c = small_config();
  auto [v, p] = generate_sample(c, Split::train, 0, 0);
  const fs::path cp = tmp.path / "c.vpsd", pp = tmp.path / "p.vpsd";
  save_sample(cp, pp, v, p);
  // header says 3x13x20, payload holds 3x13x19 frames
  const std::string bytes = file_bytes(pp);
  detail::write_file(pp, bytes.substr(0, bytes.size() - 3 * 13 * 4));
  EXPECT_THROW(load_sample(cp, pp), ShapeMismatch);
}

TEST(CorruptPoses, LevelZeroIsIdentity) {
  Rng rng = make_rng(1, 1);
  const PoseSequence p = random_pose(13, 20, rng);
  EXPECT_EQ(corrupt_poses(p, 0.0, 5).coords, p.coords);
  EXPECT_THROW(corrupt_poses(p, 1.5, 5), ConfigError);
}

TEST(CorruptPoses, FullLevelZeroesHalfTheJointsOnAverage) {
  Rng rng = make_rng(2, 1);
  PoseSequence p = random_pose(13, 20, rng);
  for (auto& v : p.coords.vec()) v += 2.0f;
  double zeroed = 0;
  const int seeds = 1000;
  for (int s = 0; s < seeds; ++s) {
    const auto q = corrupt_poses(p, 1.0, static_cast<std::uint64_t>(s));
    for (std::size_t j = 0; j < 13; ++j) {
      bool all_zero = true;
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t t = 0; t < 20; ++t) all_zero = all_zero && q.coords(c, j, t) == 0.f;
      zeroed += all_zero;
    }
  }
  EXPECT_NEAR(zeroed / (13.0 * seeds), 0.5, 0.1);
}

TEST(CorruptPoses, SameSeedIsDeterministic) {
  Rng rng = make_rng(3, 1);
  const PoseSequence p = random_pose(13, 20, rng);
  EXPECT_EQ(corrupt_poses(p, 0.5, 9).coords, corrupt_poses(p, 0.5, 9).coords);
  EXPECT_FALSE(corrupt_poses(p, 0.5, 9).coords == corrupt_poses(p, 0.5, 10).coords);
}

TEST(Rendering, JointLocationsRecoverableFromCleanFrames) {
  GenConfig c = small_config();
  c.pixel_noise_std = 0.0;
  c.pose_signal_strength = 1.0;
  c.T = 6;
  c.H = 24;
  c.W = 24;
  auto [unused, pose] = generate_sample(c, Split::train, 0, 0);
  for (std::size_t j = 0; j < 13; ++j) {
    // every joint follows joint j, leaving one blob per frame
    PoseSequence single = pose;
    for (std::size_t k = 0; k < 13; ++k)
      for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t t = 0; t < 20; ++t) single.coords(ch, k, t) = pose.coords(ch, j, t);
    Rng noise = make_rng(0, 0);
    const VideoClip v = render_clip(single, c, std::nullopt, noise);
    for (std::size_t t = 0; t < c.T; ++t) {
      std::size_t bi = 0, bk = 0;
      float best = -1;
      for (std::size_t i = 0; i < c.H; ++i)
        for (std::size_t k = 0; k < c.W; ++k)
          if (v.frames(0, t, i, k) > best) {
            best = v.frames(0, t, i, k);
            bi = i;
            bk = k;
          }
      const auto xy = pose_at_frame(pose, j, t, c.T);
      const auto [r, col] = project_joint(xy[0], xy[1], c.H, c.W);
      if (r < 0 || col < 0 || r > c.H - 1.0 || col > c.W - 1.0) continue;
      EXPECT_LE(std::abs(static_cast<double>(bi) - r), 1.0) << "joint " << j << " frame " << t;
      EXPECT_LE(std::abs(static_cast<double>(bk) - col), 1.0) << "joint " << j << " frame " << t;
    }
  }
}

TEST(Rendering, WithoutPoseSignalMeanPixelsDoNotRevealPoseClasses) {
  GenConfig c;
  c.pose_signal_strength = 0.0;
  c.T = 4;
  c.H = 16;
  c.W = 16;
  const std::size_t pose_classes = 6, train_n = 40, test_n = 20;
  auto features = [&](Split split, std::size_t i, std::size_t label) {
    auto [v, p] = generate_sample(c, split, i, label);
    std::array<double, 3> f{};
    const std::size_t n = v.frames.size() / 3;
    for (std::size_t ch = 0; ch < 3; ++ch) {
      for (std::size_t q = 0; q < n; ++q) f[ch] += v.frames[ch * n + q];
      f[ch] /= static_cast<double>(n);
    }
    return f;
  };
  // nearest-centroid probe on per-channel mean pixels
  std::vector<std::array<double, 3>> centroid(pose_classes, std::array<double, 3>{});
  for (std::size_t k = 0; k < pose_classes; ++k)
    for (std::size_t s = 0; s < train_n; ++s) {
      const auto f = features(Split::train, s * 8 + k, k);
      for (std::size_t ch = 0; ch < 3; ++ch) centroid[k][ch] += f[ch] / static_cast<double>(train_n);
    }
  std::size_t correct = 0, total = 0;
  for (std::size_t k = 0; k < pose_classes; ++k)
    for (std::size_t s = 0; s < test_n; ++s) {
      const auto f = features(Split::test, s * 8 + k, k);
      std::size_t best = 0;
      double bd = 1e300;
      for (std::size_t q = 0; q < pose_classes; ++q) {
        double d = 0;
        for (std::size_t ch = 0; ch < 3; ++ch) d += (f[ch] - centroid[q][ch]) * (f[ch] - centroid[q][ch]);
        if (d < bd) {
          bd = d;
          best = q;
        }
      }
      correct += best == k;
      ++total;
    }
  const double acc = static_cast<double>(correct) / static_cast<double>(total);
  EXPECT_LE(acc, 1.0 / pose_classes + 0.05);
}
