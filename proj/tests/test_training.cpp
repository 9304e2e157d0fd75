#include <gtest/gtest.h>

#include <filesystem>

#include "oracles.hpp"

using namespace ca3d;
namespace fs = std::filesystem;

namespace {

// A model whose logits ignore the input and always favour `cls`.
Ca3dModel<float> constant_model(const ModelConfig& c, int cls) {
  Ca3dModel<float> m(c, 1, NumericMode::full32());
  Parameter<float>& w = m.parameter("head.weight");
  w.value = Tensor<float>::filled(w.value.shape(), 0.0f);
  m.parameter("head.bias").value[static_cast<std::size_t>(cls)] = 1.0f;
  return m;
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("ca3d_test_" + std::to_string(::getpid()) + "_" +
                                        std::to_string(std::rand()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_gray(const fs::path& p, std::size_t w, std::size_t h, float v) {
  write_ppm(p, RgbImage{w, h, std::vector<float>(w * h * 3, v)});
}

}  // namespace

TEST(Synthetic, BalancedLabelsAndRange) {
  const SyntheticMotionDataset ds(1, 40, 8, 16, 16);
  std::array<int, 4> count{};
  for (std::size_t i = 0; i < ds.size(); ++i) ++count[static_cast<std::size_t>(ds.label(i))];
  EXPECT_EQ(count, (std::array<int, 4>{10, 10, 10, 10}));
  EXPECT_EQ(ds.clip_shape(), (Shape{3, 8, 16, 16}));
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (float v : ds.clip(i, nullptr)) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
}

TEST(Synthetic, DeterministicInSeed) {
  const SyntheticMotionDataset a(7, 8, 6, 12, 12), b(7, 8, 6, 12, 12), c(8, 8, 6, 12, 12);
  EXPECT_EQ(a.clip(3, nullptr), b.clip(3, nullptr));
  EXPECT_NE(a.clip(3, nullptr), c.clip(3, nullptr));
}

TEST(Synthetic, LabelIsRecoverableFromMotion) {
  const SyntheticMotionDataset ds(2, 64, 16, 32, 32);
  std::size_t right = 0;
  for (std::size_t i = 0; i < ds.size(); ++i)
    right += SyntheticMotionDataset::infer_label(ds.clip(i, nullptr), ds.clip_shape()) == ds.label(i);
  EXPECT_GE(right, 60u);
}

TEST(Synthetic, ReversingTimeFlipsTheLabel) {
  const SyntheticMotionDataset ds(3, 16, 16, 32, 32);
  std::vector<std::size_t> reverse(16);
  for (std::size_t t = 0; t < 16; ++t) reverse[t] = 15 - t;
  static constexpr std::array<int, 4> opposite{1, 0, 3, 2};
  std::size_t agree = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::vector<float> r = permute_frames(ds.clip(i, nullptr), ds.clip_shape(), reverse);
    agree += SyntheticMotionDataset::infer_label(r, ds.clip_shape()) == opposite[static_cast<std::size_t>(ds.label(i))];
  }
  EXPECT_GE(agree, 15u);
}

TEST(Synthetic, SingleFramesCarryNoLabelStatistics) {
  // Mean brightness per frame is the same in expectation for every class.
  const SyntheticMotionDataset ds(4, 400, 4, 16, 16);
  std::array<double, 4> mean{};
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::vector<float> c = ds.clip(i, nullptr);
    double s = 0;
    for (std::size_t k = 0; k < 16 * 16; ++k) s += c[k];
    mean[static_cast<std::size_t>(ds.label(i))] += s / 100.0;
  }
  for (double m : mean) EXPECT_NEAR(m, mean[0], 0.05 * mean[0]);
}

TEST(Synthetic, AugmentationIsATranslation) {
  const SyntheticMotionDataset ds(5, 4, 4, 8, 8);
  std::mt19937_64 rng(1);
  std::vector<float> a = ds.clip(0, nullptr), b = ds.clip(0, &rng);
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  EXPECT_EQ(a, b);
}

TEST(Synthetic, RejectsBadArguments) {
  EXPECT_THROW(SyntheticMotionDataset(1, 3, 8, 16, 16), std::invalid_argument);
  EXPECT_THROW(SyntheticMotionDataset(1, 8, 1, 16, 16), std::invalid_argument);
  EXPECT_THROW(SyntheticMotionDataset(1, 8, 8, 2, 16), std::invalid_argument);
}

TEST(FrameFolder, LoadsSubsamplesAndCrops) {
  TempDir dir;
  for (const char* cls : {"a", "b"})
    for (int clip = 0; clip < 2; ++clip) {
      const fs::path d = dir.path / cls / ("clip" + std::to_string(clip));
      fs::create_directories(d);
      for (int f = 0; f < 20; ++f) {
        char name[16];
        std::snprintf(name, sizeof name, "%03d.ppm", f);
        write_gray(d / name, 160, 120, static_cast<float>(f) / 19.0f);
      }
    }
  const FrameFolderDataset ds(dir.path);
  EXPECT_EQ(ds.size(), 4u);
  EXPECT_EQ(ds.num_classes(), 2u);
  EXPECT_EQ(ds.class_names(), (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(ds.label(0), 0);
  EXPECT_EQ(ds.label(3), 1);
  EXPECT_EQ(ds.clip_shape(), (Shape{3, 16, 112, 112}));
  const std::vector<float> c = ds.clip(0, nullptr);
  ASSERT_EQ(c.size(), 3u * 16 * 112 * 112);
  // Frame t comes from file floor(t * 20 / 16).
  for (std::size_t t : {0u, 5u, 15u})
    EXPECT_NEAR(c[t * 112 * 112 + 50], std::round(static_cast<float>(t * 20 / 16) / 19.0f * 255) / 255, 1e-6);
  std::mt19937_64 rng(2);
  EXPECT_EQ(ds.clip(1, &rng).size(), c.size());
}

TEST(FrameFolder, Errors) {
  EXPECT_THROW(FrameFolderDataset("/nonexistent/ca3d"), std::runtime_error);
  TempDir dir;
  EXPECT_THROW(FrameFolderDataset{dir.path}, std::runtime_error);
  fs::create_directories(dir.path / "a" / "clip");
  EXPECT_THROW(FrameFolderDataset{dir.path}, std::runtime_error);
  std::ofstream(dir.path / "a" / "clip" / "0.ppm") << "P3\n1 1\n255\n0 0 0\n";
  const FrameFolderDataset ds(dir.path, 2, 8);
  EXPECT_THROW(ds.clip(0, nullptr), std::runtime_error);
}

TEST(FrameFolder, PgmIsGrayscale) {
  TempDir dir;
  {
    std::ofstream out(dir.path / "g.pgm", std::ios::binary);
    out << "P5\n# comment\n2 1\n255\n";
    out.put(static_cast<char>(0));
    out.put(static_cast<char>(255));
  }
  const RgbImage img = read_pnm(dir.path / "g.pgm");
  EXPECT_EQ(img.rgb, (std::vector<float>{0, 0, 0, 1, 1, 1}));
}

TEST(Evaluate, ConstantModelScoresItsClassShare) {
  const ModelConfig c = presets::tiny(4, 4, 16);
  const SyntheticMotionDataset ds(1, 40, 4, 16, 16);
  Ca3dModel<float> m = constant_model(c, 0);
  const EvalResult r = evaluate(m, ds);
  EXPECT_EQ(r.correct, 10u);
  EXPECT_EQ(r.n, 40u);
  EXPECT_DOUBLE_EQ(r.accuracy, 0.25);
  EXPECT_DOUBLE_EQ(r.half_width, 1.96 * std::sqrt(0.25 * 0.75 / 40));
  EXPECT_NEAR(r.loss, std::log(3.0 + std::exp(1.0)) - (0.25 * 1.0), 1e-6);
}

TEST(Evaluate, HalfWidthExample) {
  EXPECT_NEAR(binomial_half_width(0.5, 100), 0.098, 1e-12);
  EXPECT_EQ(binomial_half_width(1.0, 100), 0.0);
  EXPECT_EQ(binomial_half_width(0.5, 0), 0.0);
}

TEST(Evaluate, IndependentOfBatchSize) {
  const ModelConfig c = presets::tiny(4, 4, 16);
  const SyntheticMotionDataset ds(2, 12, 4, 16, 16);
  Ca3dModel<double> m(c, 3, NumericMode::full32());
  const EvalResult a = evaluate(m, ds, 1), b = evaluate(m, ds, 5), d = evaluate(m, ds, 12);
  EXPECT_EQ(a.correct, b.correct);
  EXPECT_EQ(a.correct, d.correct);
  EXPECT_NEAR(a.loss, b.loss, 1e-12);
  EXPECT_EQ(shuffle_frames_control(m, ds, 9, 1), shuffle_frames_control(m, ds, 9, 7));
  EXPECT_THROW(evaluate(m, ds, 0), std::invalid_argument);
}

TEST(Evaluate, IndependentOfSampleOrder) {
  class Reversed final : public ClipDataset {
   public:
    explicit Reversed(const ClipDataset& d) : d_(d) {}
    std::size_t size() const override { return d_.size(); }
    std::size_t num_classes() const override { return d_.num_classes(); }
    Shape clip_shape() const override { return d_.clip_shape(); }
    int label(std::size_t i) const override { return d_.label(d_.size() - 1 - i); }
    std::vector<float> clip(std::size_t i, std::mt19937_64* a) const override { return d_.clip(d_.size() - 1 - i, a); }

   private:
    const ClipDataset& d_;
  };
  const SyntheticMotionDataset ds(3, 12, 4, 16, 16);
  Ca3dModel<double> m(presets::tiny(4, 4, 16), 5, NumericMode::full32());
  const EvalResult a = evaluate(m, ds, 4), b = evaluate(m, Reversed(ds), 4);
  EXPECT_EQ(a.correct, b.correct);
  EXPECT_NEAR(a.loss, b.loss, 1e-12);
}

TEST(Evaluate, ShufflingIsHarmlessWhenFramesAreIdentical) {
  // Every frame of each clip equal: any permutation leaves the input unchanged.
  class Static final : public ClipDataset {
   public:
    std::size_t size() const override { return 6; }
    std::size_t num_classes() const override { return 4; }
    Shape clip_shape() const override { return {3, 4, 16, 16}; }
    int label(std::size_t i) const override { return static_cast<int>(i % 4); }
    std::vector<float> clip(std::size_t i, std::mt19937_64*) const override {
      std::vector<float> v(3 * 4 * 256);
      for (std::size_t k = 0; k < v.size(); ++k) v[k] = static_cast<float>(((k % 256) * 7 + i * 13) % 17) / 17.0f;
      return v;
    }
  } ds;
  Ca3dModel<float> m(presets::tiny(4, 4, 16), 4, NumericMode::full32());
  EXPECT_EQ(evaluate(m, ds), shuffle_frames_control(m, ds));
}

TEST(Evaluate, PermutationPreservesFrameMultiset) {
  const SyntheticMotionDataset ds(6, 4, 8, 8, 8);
  std::vector<std::size_t> order{3, 1, 7, 0, 2, 6, 5, 4};
  const std::vector<float> c = ds.clip(0, nullptr);
  const std::vector<float> p = permute_frames(c, ds.clip_shape(), order);
  for (std::size_t t = 0; t < 8; ++t)
    EXPECT_TRUE(std::equal(p.begin() + t * 64, p.begin() + t * 64 + 64, c.begin() + order[t] * 64));
}

TEST(Train, ZeroEpochsReturnsTheInitialModel) {
  const ModelConfig c = presets::tiny(4, 4, 16);
  const SyntheticMotionDataset ds(1, 8, 4, 16, 16);
  TrainOptions opt;
  opt.epochs = 0;
  opt.test = &ds;
  const TrainResult<float> r = train<float>(c, ds, NumericMode::full32(), opt);
  EXPECT_TRUE(r.report.epochs.empty());
  const Ca3dModel<float> init(c, opt.seed, NumericMode::full32());
  for (std::size_t k = 0; k < init.parameters().size(); ++k)
    EXPECT_TRUE(r.model.parameters()[k].value == init.parameters()[k].value);
  ASSERT_TRUE(r.report.test.has_value());
  EXPECT_EQ(r.report.test->n, 8u);
}

TEST(Train, DeterministicAndFinite) {
  const ModelConfig c = presets::tiny(4, 4, 16);
  const SyntheticMotionDataset ds(1, 16, 4, 16, 16), val(2, 8, 4, 16, 16);
  TrainOptions opt;
  opt.epochs = 2;
  opt.val = &val;
  for (NumericMode mode : {NumericMode::full32(), NumericMode::pure16(0.1), NumericMode::qat()}) {
    TrainResult<float> a = train<float>(c, ds, mode, opt), b = train<float>(c, ds, mode, opt);
    b.report.started = a.report.started;
    b.report.wall_seconds = a.report.wall_seconds;
    b.report.frames_per_second = a.report.frames_per_second;
    EXPECT_EQ(a.report, b.report) << to_string(mode.kind);
    ASSERT_EQ(a.report.epochs.size(), 4u);
    EXPECT_EQ(a.report.epochs[1].split, "val");
    for (const EpochRecord& e : a.report.epochs) EXPECT_TRUE(std::isfinite(e.loss));
  }
}

TEST(Train, StaticPostQuantEndsInBinary16) {
  const ModelConfig c = presets::tiny(4, 4, 16);
  const SyntheticMotionDataset ds(1, 8, 4, 16, 16);
  TrainOptions opt;
  opt.epochs = 1;
  const TrainResult<float> r = train<float>(c, ds, NumericMode::static_post_quant(), opt);
  EXPECT_EQ(r.model.storage(), Storage::half);
}

TEST(Train, RejectsMismatchedData) {
  const SyntheticMotionDataset ds(1, 8, 8, 16, 16);
  EXPECT_THROW(train<float>(presets::tiny(4, 4, 16), ds, NumericMode::full32()), std::invalid_argument);
  TrainOptions opt;
  opt.batch = 0;
  const SyntheticMotionDataset ok(1, 8, 4, 16, 16);
  EXPECT_THROW(train<float>(presets::tiny(4, 4, 16), ok, NumericMode::full32(), opt), std::invalid_argument);
}

TEST(Report, KeyValueRoundTrip) {
  TrainReport r;
  r.model = "tiny";
  r.mode = "f16";
  r.scale_t = 0.1;
  r.seed = 42;
  r.params = 307428;
  r.gflops = 0.123456789;
  r.epochs.push_back({1, "train", 0.5, 1.25, {1, 2, 3, 4.5}});
  r.epochs.push_back({1, "val", 1.0 / 3.0, std::nan(""), {}});
  r.totals = {1, 2, 3, 4.5};
  r.test = EvalResult{7, 8, 0.875, binomial_half_width(0.875, 8), 0.3};
  r.started = "2026-01-01T00:00:00Z";
  r.wall_seconds = 1.5;
  r.frames_per_second = 100.25;
  const TrainReport back = TrainReport::from_kv(r.to_kv());
  EXPECT_EQ(back.to_kv(), r.to_kv());
  EXPECT_EQ(back.epochs[0], r.epochs[0]);
  EXPECT_TRUE(std::isnan(back.epochs[1].loss));
  EXPECT_EQ(back.test, r.test);
  EXPECT_NE(r.to_text().find("87.5"), std::string::npos);
}

TEST(Report, MalformedInputIsRejected) {
  EXPECT_THROW(TrainReport::from_kv("model tiny\n"), std::runtime_error);
  EXPECT_THROW(TrainReport::from_kv("bogus line=1\n"), std::runtime_error);
}
