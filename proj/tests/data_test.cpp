#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "cdcnas/data.hpp"

using namespace cdcnas;

namespace {

SynthSpec quiet_spec(std::vector<std::string> classes = gesture_classes()) {
  SynthSpec s;
  s.classes = std::move(classes);
  s.frames = 16;
  s.size = 24;
  s.radius = 3.0;
  s.rgb_noise = 0.0;
  return s;
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("cdcnas_data_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

Tensor<float> random_clip(std::int64_t c, std::int64_t t, std::int64_t hw, Rng& rng) {
  Tensor<float> x(Shape5{1, c, t, hw, hw});
  for (auto& v : x.data()) v = static_cast<float>(rng.uniform());
  return x;
}

std::vector<float> vals(const Tensor<float>& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(Synth, MirrorClassesAreMirrorImages) {
  const auto spec = quiet_spec({"left-sweep", "right-sweep"});
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const ClipParams p = draw_params(spec, rng);
    Rng unused(0);
    const auto a = render_clip(spec, 0, p, unused);
    const auto b = render_clip(spec, 1, p, unused);
    for (const auto& [m, ta] : a.modalities) {
      const auto& tb = b.modalities.at(m);
      const auto& s = ta.shape();
      for (std::int64_t c = 0; c < s.c(); ++c)
        for (std::int64_t t = 0; t < s.t(); ++t)
          for (std::int64_t y = 0; y < s.h(); ++y)
            for (std::int64_t x = 0; x < s.w(); ++x) ASSERT_EQ(ta.at(0, c, t, y, x), tb.at(0, c, t, y, s.w() - 1 - x));
    }
  }
}

TEST(Synth, SameSeedIsBitIdentical) {
  SynthSpec s = quiet_spec();
  s.rgb_noise = 0.05;
  const auto a = synthesize(s, 2), b = synthesize(s, 2);
  ASSERT_EQ(a.size(), 12u);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(encode_clip(a[i]), encode_clip(b[i]));
  s.seed = 1;
  EXPECT_NE(encode_clip(synthesize(s, 2)[0]), encode_clip(a[0]));
}

TEST(Synth, DepthCentroidFollowsTrajectory) {
  SynthSpec s = quiet_spec();
  s.size = 32;
  s.radius = 4.0;
  Rng rng(8);
  for (int label = 0; label < static_cast<int>(s.classes.size()); ++label) {
    const ClipParams p = draw_params(s, rng);
    Rng unused(0);
    const auto clip = render_clip(s, label, p, unused);
    const auto& d = clip.modalities.at("depth");
    for (int t = 0; t < s.frames; ++t) {
      double sx = 0, sy = 0, n = 0;
      for (std::int64_t y = 0; y < s.size; ++y)
        for (std::int64_t x = 0; x < s.size; ++x)
          if (d.at(0, 0, t, y, x) > 0.5f) {
            sx += x + 0.5;
            sy += y + 0.5;
            n += 1;
          }
      ASSERT_GT(n, 0);
      const auto c = blob_centre(s, s.classes[static_cast<std::size_t>(label)], t, p);
      EXPECT_NEAR(sx / n, c[0], 0.5) << s.classes[static_cast<std::size_t>(label)] << " t=" << t;
      EXPECT_NEAR(sy / n, c[1], 0.5) << s.classes[static_cast<std::size_t>(label)] << " t=" << t;
    }
  }
}

TEST(Synth, ValuesInUnitRangeAndShapesShared) {
  SynthSpec s = quiet_spec();
  s.rgb_noise = 0.3;
  s.depth_noise = 0.2;
  for (const auto& clip : synthesize(s, 1)) {
    const auto& r = clip.modalities.at("rgb").shape();
    const auto& d = clip.modalities.at("depth").shape();
    EXPECT_EQ(r.c(), 3);
    EXPECT_EQ(d.c(), 1);
    EXPECT_EQ(r.t(), d.t());
    EXPECT_EQ(r.h(), d.h());
    for (const auto& [m, t] : clip.modalities)
      for (float v : t.data()) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
  }
}

TEST(Synth, DepthThresholdIsIdempotent) {
  for (const auto& clip : synthesize(quiet_spec(), 1)) {
    for (float v : clip.modalities.at("depth").data()) EXPECT_EQ(v > 0.5f ? 1.0f : 0.0f, v);
  }
}

TEST(Synth, InvalidSpecsRejected) {
  SynthSpec s = quiet_spec({"left-sweep"});
  EXPECT_THROW(s.validate(), ConfigError);
  s = quiet_spec({"left-sweep", "wave"});
  EXPECT_THROW(s.validate(), ConfigError);
  s = quiet_spec();
  s.size = 12;
  s.radius = 3.0;
  EXPECT_THROW(synthesize(s, 1), ConfigError);
}

TEST(Synth, TrajectoriesAreDistinct) {
  const auto names = gesture_classes();
  ClipParams p;
  for (std::size_t i = 0; i < names.size(); ++i) {
    for (std::size_t j = i + 1; j < names.size(); ++j) {
      double dist = 0;
      for (int k = 0; k <= 20; ++k) {
        const auto a = trajectory(names[i], k / 20.0, p), b = trajectory(names[j], k / 20.0, p);
        dist = std::max(dist, std::hypot(a[0] - b[0], a[1] - b[1]));
      }
      EXPECT_GT(dist, 0.2) << names[i] << " vs " << names[j];
    }
  }
}

// ---------------------------------------------------------------- sampling

TEST(Sampling, IndexGrid) {
  EXPECT_EQ(multirate_indices(64, 8), (std::vector<std::int64_t>{0, 8, 16, 24, 32, 40, 48, 56}));
  EXPECT_EQ(multirate_indices(10, 4), (std::vector<std::int64_t>{0, 2, 5, 7}));
  EXPECT_THROW(multirate_indices(16, 32), ShapeError);
}

TEST(Sampling, FullRateIsIdentity) {
  Rng rng(1);
  const auto x = random_clip(2, 32, 4, rng);
  const auto y = sample_multirate(x, 32);
  EXPECT_EQ(vals(y), vals(x));
}

TEST(Sampling, EveryFrameComesFromTheSource) {
  Rng rng(2);
  const auto x = random_clip(3, 64, 5, rng);
  const std::int64_t plane = 25;
  for (int r : {8, 16, 32}) {
    const auto y = sample_multirate(x, r);
    for (std::int64_t c = 0; c < 3; ++c) {
      for (std::int64_t f = 0; f < r; ++f) {
        bool found = false;
        for (std::int64_t s = 0; s < 64 && !found; ++s)
          found = std::equal(y.ptr() + (c * r + f) * plane, y.ptr() + (c * r + f + 1) * plane, x.ptr() + (c * 64 + s) * plane);
        EXPECT_TRUE(found);
      }
    }
  }
}

TEST(Sampling, LowerRateGridsNest) {
  const auto i8 = multirate_indices(64, 8), i16 = multirate_indices(64, 16), i32 = multirate_indices(64, 32);
  for (auto v : i8) EXPECT_NE(std::find(i16.begin(), i16.end(), v), i16.end());
  for (auto v : i16) EXPECT_NE(std::find(i32.begin(), i32.end(), v), i32.end());
}

// ---------------------------------------------------------------- augmentation

TEST(Augment, NoFlipFullCropIsIdentity) {
  Rng rng(4);
  const auto x = random_clip(3, 4, 9, rng);
  const auto a = draw_augment(9, 9, 0.0, rng);
  EXPECT_FALSE(a.flip);
  EXPECT_EQ(vals(apply_augment(x, a)), vals(x));
}

TEST(Augment, FlipIsAnInvolution) {
  Rng rng(5);
  const auto x = random_clip(2, 3, 7, rng);
  const AugmentParams f{true, 0, 0, 7};
  EXPECT_EQ(vals(apply_augment(apply_augment(x, f), f)), vals(x));
  EXPECT_NE(vals(apply_augment(x, f)), vals(x));
}

TEST(Augment, CropOffsetsSharedAcrossModalities) {
  // Encode pixel coordinates so the crop offset can be read back.
  Tensor<float> rgb(Shape5{1, 3, 2, 12, 12}), depth(Shape5{1, 1, 2, 12, 12});
  for (std::int64_t y = 0; y < 12; ++y)
    for (std::int64_t x = 0; x < 12; ++x) {
      for (std::int64_t c = 0; c < 3; ++c)
        for (std::int64_t t = 0; t < 2; ++t) rgb.at(0, c, t, y, x) = static_cast<float>(y * 100 + x);
      for (std::int64_t t = 0; t < 2; ++t) depth.at(0, 0, t, y, x) = static_cast<float>(y * 100 + x);
    }
  Rng rng(6);
  std::set<std::pair<std::int64_t, std::int64_t>> offsets;
  for (int draw = 0; draw < 1000; ++draw) {
    const auto a = draw_augment(12, 8, 0.5, rng);
    const auto r = apply_augment(rgb, a), d = apply_augment(depth, a);
    for (std::int64_t c = 0; c < 3; ++c) {
      for (std::int64_t t = 0; t < 2; ++t) {
        ASSERT_EQ(r.at(0, c, t, 0, 0), d.at(0, 0, t, 0, 0));
        ASSERT_EQ(r.at(0, c, t, 7, 7), d.at(0, 0, t, 7, 7));
      }
    }
    const auto v = static_cast<std::int64_t>(r.at(0, 0, 0, 0, 0));
    EXPECT_EQ(v / 100, a.top);
    EXPECT_EQ(v % 100, a.flip ? a.left + 7 : a.left);
    offsets.emplace(a.top, a.left);
  }
  EXPECT_EQ(offsets.size(), 25u);
}

TEST(Augment, SamplingCommutesWithFlipAndCrop) {
  Rng rng(7);
  const auto x = random_clip(3, 64, 10, rng);
  for (int draw = 0; draw < 20; ++draw) {
    const auto a = draw_augment(10, 6, 0.5, rng);
    for (int r : {8, 16, 32}) {
      EXPECT_EQ(vals(apply_augment(sample_multirate(x, r), a)), vals(sample_multirate(apply_augment(x, a), r)));
    }
  }
}

TEST(Augment, CentreCropAndBadSizes) {
  const auto a = centre_crop(48, 40);
  EXPECT_EQ(a.top, 4);
  EXPECT_EQ(a.left, 4);
  Rng rng(1);
  EXPECT_THROW(draw_augment(8, 9, 0.0, rng), ShapeError);
  EXPECT_THROW(centre_crop(8, 0), ShapeError);
}

// ---------------------------------------------------------------- clip format

namespace {

ClipRecord sample_record() {
  SynthSpec s = quiet_spec();
  s.frames = 4;
  s.size = 16;
  s.rgb_noise = 0.1;
  auto clips = synthesize(s, 1);
  return clips[3];
}

}  // namespace

TEST(ClipFormat, RoundTripIsBitExact) {
  const auto dir = scratch("roundtrip");
  const auto r = sample_record();
  write_clip((dir / "a.cdcv").string(), r);
  const auto back = read_clip((dir / "a.cdcv").string());
  EXPECT_EQ(back.label, r.label);
  ASSERT_EQ(back.modalities.size(), 2u);
  for (const auto& [m, t] : r.modalities) {
    EXPECT_EQ(back.modalities.at(m).shape(), t.shape());
    EXPECT_EQ(vals(back.modalities.at(m)), vals(t));
  }
  EXPECT_EQ(encode_clip(back), encode_clip(r));
}

TEST(ClipFormat, HeaderLayout) {
  const auto bytes = encode_clip(sample_record());
  EXPECT_EQ(bytes.substr(0, 4), "CDCV");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1);
  EXPECT_EQ(static_cast<unsigned char>(bytes[5]), 0);
  EXPECT_EQ(static_cast<unsigned char>(bytes[6]), 3);  // label
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 2);  // modalities
  EXPECT_EQ(static_cast<unsigned char>(bytes[9]), 5);  // "depth" sorts first
  EXPECT_EQ(bytes.substr(10, 5), "depth");
  const std::size_t expected = 9 + (1 + 5 + 16 + 4 * 1 * 4 * 16 * 16) + (1 + 3 + 16 + 4 * 3 * 4 * 16 * 16);
  EXPECT_EQ(bytes.size(), expected);
}

namespace {

FormatError::Kind decode_kind(const std::string& bytes) {
  try {
    decode_clip(bytes);
  } catch (const FormatError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "decode succeeded";
  return FormatError::Kind::Corrupt;
}

}  // namespace

TEST(ClipFormat, DistinctErrorKinds) {
  const auto good = encode_clip(sample_record());
  auto bad = good;
  bad[0] = 'X';
  EXPECT_EQ(decode_kind(bad), FormatError::Kind::BadMagic);
  bad = good;
  bad[4] = 2;
  EXPECT_EQ(decode_kind(bad), FormatError::Kind::UnknownVersion);
  EXPECT_EQ(decode_kind(good.substr(0, good.size() - 1)), FormatError::Kind::Truncated);
  EXPECT_EQ(decode_kind(good + "x"), FormatError::Kind::Corrupt);
  EXPECT_EQ(decode_kind("CD"), FormatError::Kind::BadMagic);
}

TEST(ClipFormat, FuzzedLengthFieldsNeverDecodeSilently) {
  const auto good = encode_clip(sample_record());
  // extents of the first modality start after magic/version/label/count and "depth".
  const std::size_t ext0 = 9 + 1 + 5;
  Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    auto bad = good;
    const auto pos = ext0 + static_cast<std::size_t>(rng.below(16));
    const auto delta = static_cast<char>(1 + rng.below(255));
    bad[pos] = static_cast<char>(bad[pos] + delta);
    const auto kind = decode_kind(bad);
    EXPECT_TRUE(kind == FormatError::Kind::Truncated || kind == FormatError::Kind::Corrupt);
  }
}

TEST(ClipFormat, MissingFile) { EXPECT_THROW(read_clip("/nonexistent/x.cdcv"), MissingArtifactError); }

// ---------------------------------------------------------------- splits and datasets

TEST(Splits, DisjointStratifiedAndSeeded) {
  std::vector<int> labels;
  for (int c = 0; c < 6; ++c)
    for (int i = 0; i < 20; ++i) labels.push_back(c);
  const auto a = stratified_split(labels, 0.6, 0.2, 4);
  EXPECT_EQ(a, stratified_split(labels, 0.6, 0.2, 4));
  EXPECT_NE(a, stratified_split(labels, 0.6, 0.2, 5));
  for (int c = 0; c < 6; ++c) {
    int n[3] = {0, 0, 0};
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == c) ++n[static_cast<int>(a[i])];
    EXPECT_EQ(n[0], 12);
    EXPECT_EQ(n[1], 4);
    EXPECT_EQ(n[2], 4);
  }
  EXPECT_THROW(stratified_split(labels, 0.8, 0.3, 0), ConfigError);
}

TEST(Splits, DatasetIndicesPartition) {
  Dataset ds;
  ds.splits = {Split::Train, Split::Test, Split::Val, Split::Train};
  EXPECT_EQ(ds.indices(Split::Train), (std::vector<std::size_t>{0, 3}));
  EXPECT_EQ(ds.indices(Split::Val), (std::vector<std::size_t>{2}));
  EXPECT_EQ(parse_split("test"), Split::Test);
  EXPECT_THROW(parse_split("dev"), FormatError);
}

TEST(Datasets, WriteLoadRoundTrip) {
  const auto dir = scratch("dataset");
  SynthSpec s = quiet_spec({"left-sweep", "circle"});
  s.frames = 4;
  s.size = 16;
  Dataset ds;
  ds.clips = synthesize(s, 3);
  std::vector<int> labels;
  for (const auto& c : ds.clips) labels.push_back(c.label);
  ds.splits = stratified_split(labels, 0.5, 0.25, 0);
  ds.class_names = s.classes;
  write_dataset(dir.string(), ds);
  const auto back = load_dataset(dir.string());
  EXPECT_EQ(back.class_names, ds.class_names);
  EXPECT_EQ(back.splits, ds.splits);
  ASSERT_EQ(back.clips.size(), ds.clips.size());
  for (std::size_t i = 0; i < ds.clips.size(); ++i) {
    EXPECT_EQ(back.clips[i].clip_id, ds.clips[i].clip_id);
    EXPECT_EQ(encode_clip(back.clips[i]), encode_clip(ds.clips[i]));
  }
  EXPECT_THROW(load_dataset((dir / "missing").string()), MissingArtifactError);
}
