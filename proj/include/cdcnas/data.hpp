#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "cdcnas/errors.hpp"
#include "cdcnas/rng.hpp"
#include "cdcnas/tensor.hpp"

namespace cdcnas {

/// One labelled clip; every modality is a (1, C, T0, H, W) tensor in [0, 1].
struct ClipRecord {
  std::string clip_id;
  int label = 0;
  std::map<std::string, Tensor<float>> modalities;

  std::int64_t frames() const { return modalities.empty() ? 0 : modalities.begin()->second.shape().t(); }
  bool operator==(const ClipRecord& o) const { return label == o.label && modalities == o.modalities; }
};

// ---------------------------------------------------------------- CDCV I/O

namespace detail {

inline void put_u8(std::string& s, std::uint8_t v) { s.push_back(static_cast<char>(v)); }
inline void put_u16(std::string& s, std::uint16_t v) {
  for (int i = 0; i < 2; ++i) put_u8(s, static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) put_u8(s, static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : b_(bytes) {}
  void need(std::size_t n, const char* what) const {
    if (pos_ + n > b_.size()) {
      throw FormatError(FormatError::Kind::Truncated, std::string("CDCV: truncated while reading ") + what);
    }
  }
  std::uint64_t uint(int bytes, const char* what) {
    need(static_cast<std::size_t>(bytes), what);
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_++])) << (8 * i);
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline constexpr std::uint16_t kClipVersion = 1;

/// Little-endian: "CDCV", u16 version, u16 label, u8 modality count, then per
/// modality u8 name length, ASCII name, u32 C, T, H, W and C*T*H*W f32.
inline std::string encode_clip(const ClipRecord& r) {
  std::string s = "CDCV";
  detail::put_u16(s, kClipVersion);
  detail::put_u16(s, static_cast<std::uint16_t>(r.label));
  detail::put_u8(s, static_cast<std::uint8_t>(r.modalities.size()));
  for (const auto& [name, t] : r.modalities) {
    detail::put_u8(s, static_cast<std::uint8_t>(name.size()));
    s += name;
    for (int d = 1; d < 5; ++d) detail::put_u32(s, static_cast<std::uint32_t>(t.shape()[static_cast<std::size_t>(d)]));
    for (float v : t.data()) {
      std::uint32_t u;
      std::memcpy(&u, &v, 4);
      detail::put_u32(s, u);
    }
  }
  return s;
}

inline ClipRecord decode_clip(const std::string& bytes, const std::string& clip_id = "") {
  detail::Reader rd(bytes);
  if (rd.remaining() < 4 || bytes.compare(0, 4, "CDCV") != 0) {
    throw FormatError(FormatError::Kind::BadMagic, "CDCV: bad magic");
  }
  rd.str(4, "magic");
  const auto version = rd.uint(2, "version");
  if (version != kClipVersion) {
    throw FormatError(FormatError::Kind::UnknownVersion, "CDCV: unknown version " + std::to_string(version));
  }
  ClipRecord r;
  r.clip_id = clip_id;
  r.label = static_cast<int>(rd.uint(2, "label"));
  const auto count = rd.uint(1, "modality count");
  for (std::uint64_t m = 0; m < count; ++m) {
    const auto len = rd.uint(1, "name length");
    const std::string name = rd.str(len, "name");
    std::array<std::int64_t, 4> ext{};
    for (auto& e : ext) e = static_cast<std::int64_t>(rd.uint(4, "extents"));
    const std::int64_t n = ext[0] * ext[1] * ext[2] * ext[3];
    rd.need(static_cast<std::size_t>(n) * 4, "payload");
    std::vector<float> data(static_cast<std::size_t>(n));
    for (auto& v : data) {
      const auto u = static_cast<std::uint32_t>(rd.uint(4, "payload"));
      std::memcpy(&v, &u, 4);
    }
    if (r.modalities.count(name)) throw FormatError(FormatError::Kind::Corrupt, "CDCV: duplicate modality " + name);
    r.modalities.emplace(name, Tensor<float>(Shape5{1, ext[0], ext[1], ext[2], ext[3]}, std::move(data)));
  }
  if (rd.remaining() != 0) throw FormatError(FormatError::Kind::Corrupt, "CDCV: trailing bytes after payload");
  return r;
}

inline void write_clip(const std::string& path, const ClipRecord& r) {
  std::ofstream out(path, std::ios::binary);
  const std::string bytes = encode_clip(r);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("cannot write clip " + path);
}

inline ClipRecord read_clip(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("clip not found: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return decode_clip(ss.str(), std::filesystem::path(path).stem().string());
}

// ---------------------------------------------------------------- synthesis

inline const std::vector<std::string>& gesture_classes() {
  static const std::vector<std::string> names{"left-sweep", "right-sweep", "up-sweep", "circle", "zigzag",
                                              "hold-then-flick"};
  return names;
}

struct SynthSpec {
  std::vector<std::string> classes = gesture_classes();
  int frames = 64;
  int size = 48;
  double radius = 5.0;
  double rgb_noise = 0.04;
  double depth_noise = 0.0;
  double texture = 0.25;
  std::uint64_t seed = 0;

  void validate() const {
    if (classes.size() < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
    for (const auto& c : classes) {
      if (std::find(gesture_classes().begin(), gesture_classes().end(), c) == gesture_classes().end()) {
        throw ConfigError("unknown gesture class '" + c + "'");
      }
    }
    if (frames < 1) throw ConfigError("frames must be positive");
    if (radius <= 0 || size < 4 * radius + 4) {
      throw ConfigError("resolution " + std::to_string(size) + " too small for blob radius " + std::to_string(radius));
    }
  }
};

/// Per-clip nuisance parameters; classes differ only through the trajectory.
struct ClipParams {
  double radius = 5.0;
  double offset = 0.0;   // cross-axis offset in [-1, 1] units
  double phase = 0.0;    // circle start angle
  double t0 = 0.0;       // time warp: s = t0 + span * tau
  double span = 1.0;
  std::array<double, 3> colour{1.0, 0.2, 0.2};
  std::array<double, 3> background{0.4, 0.4, 0.4};
  std::array<double, 4> texture{0, 0, 0, 0};  // amplitude, fx, fy, phase
  double noise = 0.0;
  double depth_noise = 0.0;
};

inline ClipParams draw_params(const SynthSpec& spec, Rng& rng) {
  ClipParams p;
  p.radius = spec.radius * rng.uniform(0.85, 1.15);
  p.offset = rng.uniform(-0.35, 0.35);
  p.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  p.t0 = rng.uniform(0.0, 0.08);
  p.span = rng.uniform(0.85, 0.92);
  for (auto& c : p.colour) c = rng.uniform(0.55, 1.0);
  const double base = rng.uniform(0.1, 0.35);
  for (auto& c : p.background) c = base + rng.uniform(-0.05, 0.05);
  p.texture = {spec.texture * rng.uniform(0.5, 1.0), rng.uniform(0.1, 0.5), rng.uniform(0.1, 0.5),
               rng.uniform(0.0, 2.0 * std::numbers::pi)};
  p.noise = spec.rgb_noise;
  p.depth_noise = spec.depth_noise;
  return p;
}

/// Trajectory in unit coordinates ([-1, 1]^2, y pointing down) at s in [0, 1].
inline std::array<double, 2> trajectory(const std::string& cls, double s, const ClipParams& p) {
  const double pi = std::numbers::pi;
  if (cls == "left-sweep") return {0.8 - 1.6 * s, p.offset};
  if (cls == "right-sweep") return {-0.8 + 1.6 * s, p.offset};
  if (cls == "up-sweep") return {p.offset, 0.8 - 1.6 * s};
  if (cls == "circle") return {0.65 * std::cos(2 * pi * s + p.phase), 0.65 * std::sin(2 * pi * s + p.phase)};
  if (cls == "zigzag") {
    const double tri = std::abs(2.0 * (1.5 * s - std::floor(1.5 * s + 0.5)));  // 0..1..0, 1.5 periods
    return {-0.7 + 1.4 * tri, -0.7 + 1.4 * s};
  }
  if (cls == "hold-then-flick") {
    const double u = s < 0.6 ? 0.0 : (s - 0.6) / 0.4;
    return {-0.6 + 1.4 * u * u, p.offset};
  }
  throw ConfigError("unknown gesture class '" + cls + "'");
}

/// Pixel-space blob centre of frame f (pixel centres at i + 0.5).
inline std::array<double, 2> blob_centre(const SynthSpec& spec, const std::string& cls, int f, const ClipParams& p) {
  const double tau = spec.frames > 1 ? static_cast<double>(f) / (spec.frames - 1) : 0.0;
  const auto u = trajectory(cls, p.t0 + p.span * tau, p);
  const double half = spec.size / 2.0, reach = half - p.radius - 1.0;
  return {half + u[0] * reach, half + u[1] * reach};
}

/// Renders one clip: "rgb" (3 channels: textured background, coloured disc,
/// pixel noise) and "depth" (1 channel: disc at exactly 1 over 0).
inline ClipRecord render_clip(const SynthSpec& spec, int label, const ClipParams& p, Rng& noise_rng) {
  const std::string& cls = spec.classes.at(static_cast<std::size_t>(label));
  const std::int64_t T = spec.frames, S = spec.size;
  Tensor<float> rgb(Shape5{1, 3, T, S, S}), depth(Shape5{1, 1, T, S, S});
  for (std::int64_t t = 0; t < T; ++t) {
    const auto c = blob_centre(spec, cls, static_cast<int>(t), p);
    for (std::int64_t y = 0; y < S; ++y) {
      for (std::int64_t x = 0; x < S; ++x) {
        const double dx = x + 0.5 - c[0], dy = y + 0.5 - c[1];
        const bool inside = dx * dx + dy * dy <= p.radius * p.radius;
        // texture symmetric in x about the frame centre
        const double xc = x + 0.5 - S / 2.0;
        const double tex = p.texture[0] * std::cos(p.texture[1] * xc) * std::cos(p.texture[2] * (y + 0.5) + p.texture[3]);
        for (std::int64_t ch = 0; ch < 3; ++ch) {
          double v = inside ? p.colour[ch] : p.background[ch] + tex;
          if (p.noise > 0) v += p.noise * noise_rng.normal();
          rgb.at(0, ch, t, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
        double d = inside ? 1.0 : 0.0;
        if (p.depth_noise > 0) d += p.depth_noise * noise_rng.normal();
        depth.at(0, 0, t, y, x) = static_cast<float>(std::clamp(d, 0.0, 1.0));
      }
    }
  }
  ClipRecord r;
  r.label = label;
  r.modalities.emplace("rgb", std::move(rgb));
  r.modalities.emplace("depth", std::move(depth));
  return r;
}

/// n_per_class clips per class, deterministic in spec.seed; clips are
/// ordered class-major.
inline std::vector<ClipRecord> synthesize(const SynthSpec& spec, int n_per_class) {
  spec.validate();
  Rng rng(spec.seed);
  std::vector<ClipRecord> out;
  for (int c = 0; c < static_cast<int>(spec.classes.size()); ++c) {
    for (int i = 0; i < n_per_class; ++i) {
      Rng clip_rng = rng.split();
      const ClipParams p = draw_params(spec, clip_rng);
      ClipRecord r = render_clip(spec, c, p, clip_rng);
      char id[32];
      std::snprintf(id, sizeof id, "clip_%05zu", out.size());
      r.clip_id = id;
      out.push_back(std::move(r));
    }
  }
  return out;
}

// ---------------------------------------------------------------- sampling / augmentation

/// Start-aligned uniform frame indices floor(i * T0 / rate).
inline std::vector<std::int64_t> multirate_indices(std::int64_t t0, int rate) {
  if (rate < 1 || t0 < rate) {
    throw ShapeError("cannot sample " + std::to_string(rate) + " frames from a " + std::to_string(t0) + "-frame clip");
  }
  std::vector<std::int64_t> idx;
  for (int i = 0; i < rate; ++i) idx.push_back(static_cast<std::int64_t>(i) * t0 / rate);
  return idx;
}

template <typename T>
Tensor<T> select_frames(const Tensor<T>& x, const std::vector<std::int64_t>& frames) {
  const auto& s = x.shape();
  Tensor<T> out(Shape5{s.n(), s.c(), static_cast<std::int64_t>(frames.size()), s.h(), s.w()});
  const std::int64_t plane = s.h() * s.w();
  for (std::int64_t nc = 0; nc < s.n() * s.c(); ++nc)
    for (std::size_t f = 0; f < frames.size(); ++f)
      std::copy_n(x.ptr() + (nc * s.t() + frames[f]) * plane, plane,
                  out.ptr() + (nc * static_cast<std::int64_t>(frames.size()) + static_cast<std::int64_t>(f)) * plane);
  return out;
}

template <typename T>
Tensor<T> sample_multirate(const Tensor<T>& clip, int rate) {
  return select_frames(clip, multirate_indices(clip.shape().t(), rate));
}

struct AugmentParams {
  bool flip = false;
  std::int64_t top = 0;
  std::int64_t left = 0;
  std::int64_t crop = 0;
};

/// One flip decision and one crop offset per clip.
inline AugmentParams draw_augment(std::int64_t size, std::int64_t crop, double flip_prob, Rng& rng) {
  if (crop > size || crop < 1) throw ShapeError("crop size exceeds frame size");
  AugmentParams a;
  a.flip = rng.bernoulli(flip_prob);
  a.top = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(size - crop + 1)));
  a.left = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(size - crop + 1)));
  a.crop = crop;
  return a;
}

inline AugmentParams centre_crop(std::int64_t size, std::int64_t crop) {
  if (crop > size || crop < 1) throw ShapeError("crop size exceeds frame size");
  return {false, (size - crop) / 2, (size - crop) / 2, crop};
}

template <typename T>
Tensor<T> apply_augment(const Tensor<T>& x, const AugmentParams& a) {
  const auto& s = x.shape();
  if (a.top + a.crop > s.h() || a.left + a.crop > s.w()) throw ShapeError("crop window outside the frame");
  Tensor<T> out(Shape5{s.n(), s.c(), s.t(), a.crop, a.crop});
  for (std::int64_t n = 0; n < s.n(); ++n)
    for (std::int64_t c = 0; c < s.c(); ++c)
      for (std::int64_t t = 0; t < s.t(); ++t)
        for (std::int64_t y = 0; y < a.crop; ++y)
          for (std::int64_t x0 = 0; x0 < a.crop; ++x0) {
            const std::int64_t sx = a.left + (a.flip ? a.crop - 1 - x0 : x0);
            out.at(n, c, t, y, x0) = x.at(n, c, t, a.top + y, sx);
          }
  return out;
}

// ---------------------------------------------------------------- datasets

enum class Split { Train, Val, Test };

inline const char* to_string(Split s) { return s == Split::Train ? "train" : s == Split::Val ? "val" : "test"; }
inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw FormatError(FormatError::Kind::Corrupt, "unknown split '" + s + "'");
}

/// Stratified split: within every class, a seeded shuffle assigns the first
/// round(train * n) clips to train, the next round(val * n) to val, the rest to test.
inline std::vector<Split> stratified_split(const std::vector<int>& labels, double train, double val, std::uint64_t seed) {
  if (train < 0 || val < 0 || train + val > 1.0 + 1e-12) throw ConfigError("split ratios must be >= 0 and sum <= 1");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  std::vector<Split> out(labels.size(), Split::Test);
  Rng rng(seed);
  for (auto& [label, idx] : by_class) {
    rng.shuffle(idx.begin(), idx.end());
    const auto n = static_cast<double>(idx.size());
    const auto n_train = static_cast<std::size_t>(std::lround(train * n));
    const auto n_val = static_cast<std::size_t>(std::lround(val * n));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      out[idx[k]] = k < n_train ? Split::Train : k < n_train + n_val ? Split::Val : Split::Test;
    }
  }
  return out;
}

struct Dataset {
  std::vector<ClipRecord> clips;
  std::vector<Split> splits;
  std::vector<std::string> class_names;

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < splits.size(); ++i)
      if (splits[i] == s) out.push_back(i);
    return out;
  }
  int num_classes() const { return static_cast<int>(class_names.size()); }
};

/// Writes clips/<id>.cdcv, manifest.tsv ("path\tlabel\tsplit") and classes.txt.
inline void write_dataset(const std::string& dir, const Dataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "clips");
  std::ofstream manifest(fs::path(dir) / "manifest.tsv");
  for (std::size_t i = 0; i < ds.clips.size(); ++i) {
    const std::string rel = "clips/" + ds.clips[i].clip_id + ".cdcv";
    write_clip((fs::path(dir) / rel).string(), ds.clips[i]);
    manifest << rel << '\t' << ds.clips[i].label << '\t' << to_string(ds.splits[i]) << '\n';
  }
  std::ofstream classes(fs::path(dir) / "classes.txt");
  for (const auto& c : ds.class_names) classes << c << '\n';
  if (!manifest || !classes) throw std::runtime_error("cannot write dataset to " + dir);
}

inline Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream manifest(fs::path(dir) / "manifest.tsv");
  if (!manifest) throw MissingArtifactError("dataset manifest not found in " + dir);
  Dataset ds;
  std::ifstream classes(fs::path(dir) / "classes.txt");
  for (std::string line; std::getline(classes, line);)
    if (!line.empty()) ds.class_names.push_back(line);
  for (std::string line; std::getline(manifest, line);) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string path, label, split;
    if (!std::getline(ls, path, '\t') || !std::getline(ls, label, '\t') || !std::getline(ls, split)) {
      throw FormatError(FormatError::Kind::Corrupt, "malformed manifest line: " + line);
    }
    ClipRecord r = read_clip((fs::path(dir) / path).string());
    if (r.label != std::stoi(label)) throw FormatError(FormatError::Kind::Corrupt, "label mismatch for " + path);
    ds.clips.push_back(std::move(r));
    ds.splits.push_back(parse_split(split));
  }
  if (ds.class_names.empty()) {
    int k = 0;
    for (const auto& c : ds.clips) k = std::max(k, c.label + 1);
    for (int i = 0; i < k; ++i) ds.class_names.push_back("class" + std::to_string(i));
  }
  return ds;
}

}  // namespace cdcnas
