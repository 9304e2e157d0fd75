// Clip datasets: a synthetic moving-object task and on-disk frame folders.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ca3d/tensor.hpp"

namespace ca3d {

/// A labelled collection of (C, T, H, W) clips with values in [0, 1].
class ClipDataset {
 public:
  virtual ~ClipDataset() = default;
  virtual std::size_t size() const = 0;
  virtual std::size_t num_classes() const = 0;
  virtual Shape clip_shape() const = 0;
  virtual int label(std::size_t i) const = 0;
  /// `augment` is null for deterministic (evaluation) preprocessing.
  virtual std::vector<float> clip(std::size_t i, std::mt19937_64* augment) const = 0;
};

/// Reorders the frames of a (C, T, H, W) clip: output frame t is input frame order[t].
inline std::vector<float> permute_frames(std::span<const float> clip, const Shape& shape,
                                         std::span<const std::size_t> order) {
  const std::size_t c = shape[0], t_len = shape[1], hw = shape[2] * shape[3];
  if (order.size() != t_len) throw std::invalid_argument("permute_frames: order length != T");
  std::vector<float> out(clip.size());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t t = 0; t < t_len; ++t)
      std::copy_n(clip.data() + (ch * t_len + order[t]) * hw, hw, out.data() + (ch * t_len + t) * hw);
  return out;
}

/// Batch tensor (B, C, T, H, W) and labels for the given sample indices.
/// `frame_orders`, when given, permutes each clip's frames.
template <class T>
std::pair<Tensor<T>, std::vector<int>> make_batch(const ClipDataset& ds, std::span<const std::size_t> indices,
                                                  std::mt19937_64* augment,
                                                  const std::vector<std::vector<std::size_t>>* frame_orders = nullptr) {
  const Shape cs = ds.clip_shape();
  const std::size_t per = shape_numel(cs);
  Tensor<T> batch({indices.size(), cs[0], cs[1], cs[2], cs[3]});
  std::vector<int> labels;
  labels.reserve(indices.size());
  for (std::size_t j = 0; j < indices.size(); ++j) {
    std::vector<float> c = ds.clip(indices[j], augment);
    if (frame_orders != nullptr) c = permute_frames(c, cs, (*frame_orders)[j]);
    std::transform(c.begin(), c.end(), batch.ptr() + j * per, [](float v) { return static_cast<T>(v); });
    labels.push_back(ds.label(indices[j]));
  }
  return {std::move(batch), std::move(labels)};
}

// ---------------------------------------------------------------------------
// Synthetic motion-direction task

enum class Motion : int { left = 0, right = 1, up = 2, down = 3 };

inline const char* motion_name(int label) {
  static constexpr std::array<const char*, 4> names{"left", "right", "up", "down"};
  return label >= 0 && label < 4 ? names[static_cast<std::size_t>(label)] : "?";
}

/// Two identical bright squares on uniform noise with toroidal wrap. The
/// signal translates kSignalSpeed px/frame in the class direction. The
/// distractor visits the positions of a perpendicular translation at the same
/// speed, but in random frame order. Start positions are uniform, so a single
/// frame says nothing about the class; and once frames are shuffled the two
/// objects are statistically identical, so the axis is hidden too. Only frame
/// order separates the classes.
class SyntheticMotionDataset final : public ClipDataset {
 public:
  static constexpr std::size_t kObjectSize = 3;
  static constexpr float kNoiseLevel = 0.15f;

  SyntheticMotionDataset(std::uint64_t seed, std::size_t n, std::size_t frames, std::size_t height, std::size_t width)
      : seed_(seed), n_(n), frames_(frames), height_(height), width_(width) {
    if (n < 4) throw std::invalid_argument("synthetic dataset needs n >= 4 (one clip per class)");
    if (frames < 2) throw std::invalid_argument("synthetic dataset needs T >= 2");
    if (height < kObjectSize || width < kObjectSize) {
      throw std::invalid_argument("synthetic frames must be at least the object size");
    }
    clips_.reserve(n);
    for (std::size_t i = 0; i < n; ++i) clips_.push_back(render(i));
  }

  std::size_t size() const override { return n_; }
  std::size_t num_classes() const override { return 4; }
  Shape clip_shape() const override { return {3, frames_, height_, width_}; }
  int label(std::size_t i) const override { return static_cast<int>(i % 4); }
  /// Augmentation is a random toroidal translation (the periodic analogue of
  /// a random crop); flips are never applied since they change the label.
  std::vector<float> clip(std::size_t i, std::mt19937_64* augment) const override {
    const std::vector<float>& src = clips_.at(i);
    if (augment == nullptr) return src;
    const std::size_t oy = std::uniform_int_distribution<std::size_t>(0, height_ - 1)(*augment);
    const std::size_t ox = std::uniform_int_distribution<std::size_t>(0, width_ - 1)(*augment);
    std::vector<float> out(src.size());
    const std::size_t hw = height_ * width_;
    for (std::size_t plane = 0; plane < 3 * frames_; ++plane)
      for (std::size_t y = 0; y < height_; ++y)
        for (std::size_t x = 0; x < width_; ++x)
          out[plane * hw + ((y + oy) % height_) * width_ + (x + ox) % width_] = src[plane * hw + y * width_ + x];
    return out;
  }
  std::uint64_t seed() const { return seed_; }

  static constexpr int kSignalSpeed = 4;

  /// Estimates a clip's class from frame-to-frame motion: the axis-aligned
  /// shift of signal speed that best aligns consecutive frames (channel 0).
  static int infer_label(std::span<const float> clip, const Shape& shape) {
    const std::size_t t_len = shape[1], h = shape[2], w = shape[3];
    static constexpr std::array<std::array<int, 2>, 4> shifts{
        {{-kSignalSpeed, 0}, {kSignalSpeed, 0}, {0, -kSignalSpeed}, {0, kSignalSpeed}}};
    std::array<double, 4> score{};
    for (std::size_t t = 0; t + 1 < t_len; ++t) {
      const float* a = clip.data() + t * h * w;
      const float* b = clip.data() + (t + 1) * h * w;
      for (std::size_t c = 0; c < 4; ++c) {
        const std::size_t sx = static_cast<std::size_t>(shifts[c][0] + static_cast<int>(w));
        const std::size_t sy = static_cast<std::size_t>(shifts[c][1] + static_cast<int>(h));
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x)
            score[c] += static_cast<double>(a[y * w + x]) * b[((y + sy) % h) * w + (x + sx) % w];
      }
    }
    return static_cast<int>(std::max_element(score.begin(), score.end()) - score.begin());
  }

 private:
  std::vector<float> render(std::size_t i) const {
    std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                      static_cast<std::uint32_t>(i), 0x5eedu};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<float> noise(0.0f, kNoiseLevel);
    std::uniform_int_distribution<std::size_t> px(0, width_ - 1), py(0, height_ - 1);
    std::bernoulli_distribution coin(0.5);
    const long sx0 = static_cast<long>(px(rng)), sy0 = static_cast<long>(py(rng));
    const long dx0 = static_cast<long>(px(rng)), dy0 = static_cast<long>(py(rng));
    const long sign = coin(rng) ? 1 : -1;
    std::vector<long> visit(frames_);
    std::iota(visit.begin(), visit.end(), 0L);
    std::shuffle(visit.begin(), visit.end(), rng);
    long svx = 0, svy = 0, dvx = 0, dvy = 0;
    switch (static_cast<Motion>(label(i))) {
      case Motion::left: svx = -kSignalSpeed; dvy = sign * kSignalSpeed; break;
      case Motion::right: svx = kSignalSpeed; dvy = sign * kSignalSpeed; break;
      case Motion::up: svy = -kSignalSpeed; dvx = sign * kSignalSpeed; break;
      case Motion::down: svy = kSignalSpeed; dvx = sign * kSignalSpeed; break;
    }
    const std::size_t hw = height_ * width_;
    std::vector<float> out(3 * frames_ * hw);
    for (float& v : out) v = noise(rng);
    const auto wrap = [](long v, std::size_t m) {
      const long mm = static_cast<long>(m);
      return static_cast<std::size_t>(((v % mm) + mm) % mm);
    };
    const auto stamp = [&](std::size_t t, long cx, long cy) {
      for (std::size_t dy = 0; dy < kObjectSize; ++dy)
        for (std::size_t dx = 0; dx < kObjectSize; ++dx) {
          const std::size_t y = wrap(cy + static_cast<long>(dy), height_);
          const std::size_t x = wrap(cx + static_cast<long>(dx), width_);
          for (std::size_t c = 0; c < 3; ++c) out[(c * frames_ + t) * hw + y * width_ + x] = 1.0f;
        }
    };
    for (std::size_t t = 0; t < frames_; ++t) {
      const long tt = static_cast<long>(t);
      stamp(t, sx0 + svx * tt, sy0 + svy * tt);
      stamp(t, dx0 + dvx * visit[t], dy0 + dvy * visit[t]);
    }
    return out;
  }

  std::uint64_t seed_;
  std::size_t n_, frames_, height_, width_;
  std::vector<std::vector<float>> clips_;
};

inline SyntheticMotionDataset generate_synthetic(std::uint64_t seed, std::size_t n, std::size_t frames,
                                                 std::size_t height, std::size_t width) {
  return SyntheticMotionDataset(seed, n, frames, height, width);
}

// ---------------------------------------------------------------------------
// Frame folders: root/<class>/<clip>/<frames as binary PPM/PGM>

struct RgbImage {
  std::size_t width = 0, height = 0;
  std::vector<float> rgb;  // interleaved, [0, 1]
};

/// Reads binary PPM (P6) or PGM (P5) with maxval <= 255.
inline RgbImage read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open image '" + path.string() + "'");
  auto token = [&]() {
    std::string tok;
    char ch;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(ch);
    }
    return tok;
  };
  const std::string magic = token();
  if (magic != "P6" && magic != "P5") throw std::runtime_error("'" + path.string() + "' is not a binary PPM/PGM");
  RgbImage img;
  try {
    img.width = std::stoul(token());
    img.height = std::stoul(token());
    const unsigned long maxval = std::stoul(token());
    if (maxval == 0 || maxval > 255) throw std::runtime_error("unsupported maxval");
    const std::size_t channels = magic == "P6" ? 3 : 1;
    std::vector<unsigned char> raw(img.width * img.height * channels);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!in) throw std::runtime_error("truncated pixel data");
    img.rgb.resize(img.width * img.height * 3);
    for (std::size_t p = 0; p < img.width * img.height; ++p)
      for (std::size_t c = 0; c < 3; ++c)
        img.rgb[p * 3 + c] = static_cast<float>(raw[p * channels + (channels == 3 ? c : 0)]) / static_cast<float>(maxval);
  } catch (const std::invalid_argument&) {
    throw std::runtime_error("malformed header in '" + path.string() + "'");
  }
  if (img.width == 0 || img.height == 0) throw std::runtime_error("empty image '" + path.string() + "'");
  return img;
}

inline void write_ppm(const std::filesystem::path& path, const RgbImage& img) {
  std::ofstream out(path, std::ios::binary);
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  for (float v : img.rgb) out.put(static_cast<char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
}

/// Bilinear resize (half-pixel centers).
inline RgbImage resize_bilinear(const RgbImage& src, std::size_t width, std::size_t height) {
  RgbImage dst{width, height, std::vector<float>(width * height * 3)};
  const double sx = static_cast<double>(src.width) / width, sy = static_cast<double>(src.height) / height;
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy), y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - y0;
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx), x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - x0;
      for (std::size_t c = 0; c < 3; ++c) {
        auto at = [&](std::size_t yy, std::size_t xx) { return src.rgb[(yy * src.width + xx) * 3 + c]; };
        const double top = at(y0, x0) * (1 - wx) + at(y0, x1) * wx;
        const double bottom = at(y1, x0) * (1 - wx) + at(y1, x1) * wx;
        dst.rgb[(y * width + x) * 3 + c] = static_cast<float>(top * (1 - wy) + bottom * wy);
      }
    }
  }
  return dst;
}

/// Clips stored as one directory per class holding one directory per clip of
/// numbered frames. Frames are uniformly subsampled to `frames`, resized so
/// the short side is `short_side`, then cropped to `size` x `size` (center
/// crop, or random crop plus horizontal flip when augmenting).
class FrameFolderDataset final : public ClipDataset {
 public:
  explicit FrameFolderDataset(const std::filesystem::path& root, std::size_t frames = 16, std::size_t size = 112,
                              std::size_t short_side = 128)
      : frames_(frames), size_(size), short_side_(std::max(short_side, size)) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw std::runtime_error("dataset root '" + root.string() + "' is not a directory");
    std::vector<fs::path> class_dirs;
    for (const auto& e : fs::directory_iterator(root))
      if (e.is_directory()) class_dirs.push_back(e.path());
    std::sort(class_dirs.begin(), class_dirs.end());
    for (std::size_t c = 0; c < class_dirs.size(); ++c) {
      classes_.push_back(class_dirs[c].filename().string());
      std::vector<fs::path> clip_dirs;
      for (const auto& e : fs::directory_iterator(class_dirs[c]))
        if (e.is_directory()) clip_dirs.push_back(e.path());
      std::sort(clip_dirs.begin(), clip_dirs.end());
      for (const fs::path& d : clip_dirs) {
        std::vector<fs::path> frames_on_disk;
        for (const auto& e : fs::directory_iterator(d)) {
          const std::string ext = e.path().extension().string();
          if (e.is_regular_file() && (ext == ".ppm" || ext == ".pgm" || ext == ".pnm")) frames_on_disk.push_back(e.path());
        }
        if (frames_on_disk.empty()) throw std::runtime_error("clip '" + d.string() + "' has no PPM/PGM frames");
        std::sort(frames_on_disk.begin(), frames_on_disk.end());
        items_.push_back({std::move(frames_on_disk), static_cast<int>(c)});
      }
    }
    if (items_.empty()) throw std::runtime_error("dataset root '" + root.string() + "' contains no clips");
  }

  std::size_t size() const override { return items_.size(); }
  std::size_t num_classes() const override { return classes_.size(); }
  Shape clip_shape() const override { return {3, frames_, size_, size_}; }
  int label(std::size_t i) const override { return items_.at(i).label; }
  const std::vector<std::string>& class_names() const { return classes_; }

  std::vector<float> clip(std::size_t i, std::mt19937_64* augment) const override {
    const Item& item = items_.at(i);
    const std::size_t n = item.frames.size();
    std::optional<std::size_t> crop_x, crop_y;
    bool flip = false;
    const std::size_t plane = size_ * size_;
    std::vector<float> out(3 * frames_ * plane);
    for (std::size_t t = 0; t < frames_; ++t) {
      const RgbImage raw = read_pnm(item.frames[t * n / frames_]);
      const double scale = static_cast<double>(short_side_) / std::min(raw.width, raw.height);
      const std::size_t rw = std::max(size_, static_cast<std::size_t>(std::lround(raw.width * scale)));
      const std::size_t rh = std::max(size_, static_cast<std::size_t>(std::lround(raw.height * scale)));
      const RgbImage img = resize_bilinear(raw, rw, rh);
      if (!crop_x) {
        if (augment != nullptr) {
          crop_x = std::uniform_int_distribution<std::size_t>(0, rw - size_)(*augment);
          crop_y = std::uniform_int_distribution<std::size_t>(0, rh - size_)(*augment);
          flip = std::bernoulli_distribution(0.5)(*augment);
        } else {
          crop_x = (rw - size_) / 2;
          crop_y = (rh - size_) / 2;
        }
      }
      for (std::size_t y = 0; y < size_; ++y)
        for (std::size_t x = 0; x < size_; ++x) {
          const std::size_t sxp = *crop_x + (flip ? size_ - 1 - x : x);
          for (std::size_t c = 0; c < 3; ++c)
            out[(c * frames_ + t) * plane + y * size_ + x] = img.rgb[((*crop_y + y) * rw + sxp) * 3 + c];
        }
    }
    return out;
  }

 private:
  struct Item {
    std::vector<std::filesystem::path> frames;
    int label = 0;
  };
  std::size_t frames_, size_, short_side_;
  std::vector<std::string> classes_;
  std::vector<Item> items_;
};

}  // namespace ca3d
