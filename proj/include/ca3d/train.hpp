// Training loop, evaluation and experiment reports.
#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ca3d/data.hpp"
#include "ca3d/model.hpp"
#include "ca3d/quantization.hpp"

namespace ca3d {

struct EvalResult {
  std::size_t correct = 0;
  std::size_t n = 0;
  double accuracy = 0.0;
  double half_width = 0.0;  // 95% binomial
  double loss = 0.0;

  friend bool operator==(const EvalResult&, const EvalResult&) = default;
};

inline double binomial_half_width(double p, std::size_t n) {
  return n == 0 ? 0.0 : 1.96 * std::sqrt(p * (1.0 - p) / static_cast<double>(n));
}

namespace detail {

/// Index of the largest finite-or-infinite logit; NaNs never win. -1 if all NaN.
template <class T>
int argmax_row(const T* row, std::size_t k) {
  int best = -1;
  for (std::size_t j = 0; j < k; ++j) {
    if (std::isnan(row[j])) continue;
    if (best < 0 || row[j] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(j);
  }
  return best;
}

// Cross-entropy of one row, computed in double so totals don't depend on batching.
template <class T>
double row_loss(const T* row, std::size_t k, int label) {
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < k; ++j) m = std::max(m, static_cast<double>(row[j]));
  double s = 0.0;
  for (std::size_t j = 0; j < k; ++j) s += std::exp(static_cast<double>(row[j]) - m);
  return std::log(s) + m - static_cast<double>(row[static_cast<std::size_t>(label)]);
}

inline std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed, std::uint64_t stream) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

}  // namespace detail

/// Single-clip, single-crop evaluation. `frame_seed` permutes every clip's
/// frames (per-sample seeded, so results don't depend on batching).
template <class T>
EvalResult evaluate(Ca3dModel<T>& model, const ClipDataset& ds, std::size_t batch = 8,
                    std::optional<std::uint64_t> frame_seed = std::nullopt) {
  if (ds.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
  if (batch == 0) throw std::invalid_argument("evaluate: batch must be positive");
  const std::size_t frames = ds.clip_shape()[1];
  EvalResult r;
  r.n = ds.size();
  for (std::size_t start = 0; start < ds.size(); start += batch) {
    std::vector<std::size_t> idx;
    std::vector<std::vector<std::size_t>> orders;
    for (std::size_t i = start; i < std::min(ds.size(), start + batch); ++i) {
      idx.push_back(i);
      if (frame_seed) orders.push_back(detail::seeded_permutation(frames, *frame_seed, i));
    }
    auto [x, labels] = make_batch<T>(ds, idx, nullptr, frame_seed ? &orders : nullptr);
    Tape<T> tape(false);
    const Var<T> logits = model.forward(tape, x, false);
    const std::size_t k = logits.shape()[1];
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const T* row = logits.value().ptr() + j * k;
      if (detail::argmax_row(row, k) == labels[j]) ++r.correct;
      r.loss += detail::row_loss(row, k, labels[j]);
    }
  }
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.n);
  r.half_width = binomial_half_width(r.accuracy, r.n);
  r.loss /= static_cast<double>(r.n);
  return r;
}

/// Accuracy with each clip's frames randomly permuted in time.
template <class T>
EvalResult shuffle_frames_control(Ca3dModel<T>& model, const ClipDataset& ds, std::uint64_t seed = 7,
                                  std::size_t batch = 8) {
  return evaluate(model, ds, batch, seed);
}

struct EpochRecord {
  std::size_t epoch = 0;
  std::string split;  // "train" or "val"
  double acc = 0.0;
  double loss = 0.0;
  TrainingHealth health;

  friend bool operator==(const EpochRecord& a, const EpochRecord& b) {
    return a.epoch == b.epoch && a.split == b.split && a.acc == b.acc && a.loss == b.loss &&
           a.health.overflow_count == b.health.overflow_count &&
           a.health.underflow_to_zero_count == b.health.underflow_to_zero_count &&
           a.health.nan_count == b.health.nan_count && a.health.grad_norm == b.health.grad_norm;
  }
};

struct TrainReport {
  std::string model = "custom";
  std::string mode = "full32";
  double scale_t = 1.0;
  std::uint64_t seed = 0;
  std::uint64_t params = 0;
  double gflops = 0.0;
  std::vector<EpochRecord> epochs;
  TrainingHealth totals;
  std::optional<EvalResult> test;
  // Run-dependent; serialized on the single "timing" line.
  std::string started;
  double wall_seconds = 0.0;
  double frames_per_second = 0.0;

  /// Key-value records, one metric group per line. Only the first line varies between identical runs.
  std::string to_kv() const;
  static TrainReport from_kv(const std::string& text);
  /// Human-readable log.
  std::string to_text() const;

  friend bool operator==(const TrainReport& a, const TrainReport& b) {
    auto same_health = [](const TrainingHealth& x, const TrainingHealth& y) {
      return x.overflow_count == y.overflow_count && x.underflow_to_zero_count == y.underflow_to_zero_count &&
             x.nan_count == y.nan_count && x.grad_norm == y.grad_norm;
    };
    return a.model == b.model && a.mode == b.mode && a.scale_t == b.scale_t && a.seed == b.seed &&
           a.params == b.params && a.gflops == b.gflops && a.epochs == b.epochs && same_health(a.totals, b.totals) &&
           a.test == b.test && a.started == b.started && a.wall_seconds == b.wall_seconds &&
           a.frames_per_second == b.frames_per_second;
  }
};

namespace detail {

// Shortest round-trip representation.
inline std::string num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_num(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw std::runtime_error("bad number '" + s + "'");
  return v;
}

inline std::uint64_t parse_u64(const std::string& s) {
  std::uint64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw std::runtime_error("bad integer '" + s + "'");
  return v;
}

inline std::string health_kv(const TrainingHealth& h) {
  return "overflows=" + std::to_string(h.overflow_count) + " underflows=" + std::to_string(h.underflow_to_zero_count) +
         " nans=" + std::to_string(h.nan_count) + " grad_norm=" + num(h.grad_norm);
}

inline void check_token(const std::string& s) {
  if (s.empty() || s.find_first_of(" \t\n=") != std::string::npos) {
    throw std::invalid_argument("report field '" + s + "' must be a non-empty token without spaces or '='");
  }
}

}  // namespace detail

inline std::string TrainReport::to_kv() const {
  using detail::num;
  detail::check_token(model);
  detail::check_token(mode);
  std::ostringstream os;
  os << "timing started=" << (started.empty() ? "-" : started) << " wall_s=" << num(wall_seconds)
     << " frames_per_s=" << num(frames_per_second) << '\n';
  os << "run model=" << model << " mode=" << mode << " scale_t=" << num(scale_t) << " seed=" << seed
     << " params=" << params << " gflops=" << num(gflops) << '\n';
  for (const EpochRecord& e : epochs) {
    detail::check_token(e.split);
    os << "epoch=" << e.epoch << " split=" << e.split << " acc=" << num(e.acc) << " loss=" << num(e.loss) << ' '
       << detail::health_kv(e.health) << '\n';
  }
  os << "health " << detail::health_kv(totals) << '\n';
  if (test) {
    os << "test acc=" << num(test->accuracy) << " halfwidth=" << num(test->half_width) << " n=" << test->n
       << " correct=" << test->correct << " loss=" << num(test->loss) << '\n';
  }
  return os.str();
}

inline TrainReport TrainReport::from_kv(const std::string& text) {
  using detail::parse_num;
  using detail::parse_u64;
  TrainReport r;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tag, tok;
    std::map<std::string, std::string> kv;
    std::vector<std::string> tokens;
    while (ls >> tok) tokens.push_back(tok);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const auto eq = tokens[i].find('=');
      if (eq == std::string::npos) {
        if (i != 0) throw std::runtime_error("malformed report line: " + line);
        tag = tokens[i];
      } else {
        kv[tokens[i].substr(0, eq)] = tokens[i].substr(eq + 1);
      }
    }
    auto at = [&](const std::string& k) {
      const auto it = kv.find(k);
      if (it == kv.end()) throw std::runtime_error("report line lacks '" + k + "': " + line);
      return it->second;
    };
    auto health = [&]() {
      TrainingHealth h;
      h.overflow_count = parse_u64(at("overflows"));
      h.underflow_to_zero_count = parse_u64(at("underflows"));
      h.nan_count = parse_u64(at("nans"));
      h.grad_norm = parse_num(at("grad_norm"));
      return h;
    };
    if (tag == "timing") {
      r.started = at("started") == "-" ? "" : at("started");
      r.wall_seconds = parse_num(at("wall_s"));
      r.frames_per_second = parse_num(at("frames_per_s"));
    } else if (tag == "run") {
      r.model = at("model");
      r.mode = at("mode");
      r.scale_t = parse_num(at("scale_t"));
      r.seed = parse_u64(at("seed"));
      r.params = parse_u64(at("params"));
      r.gflops = parse_num(at("gflops"));
    } else if (tag.empty() && kv.count("epoch")) {
      EpochRecord e;
      e.epoch = parse_u64(at("epoch"));
      e.split = at("split");
      e.acc = parse_num(at("acc"));
      e.loss = parse_num(at("loss"));
      e.health = health();
      r.epochs.push_back(e);
    } else if (tag == "health") {
      r.totals = health();
    } else if (tag == "test") {
      EvalResult t;
      t.accuracy = parse_num(at("acc"));
      t.half_width = parse_num(at("halfwidth"));
      t.n = parse_u64(at("n"));
      t.correct = parse_u64(at("correct"));
      t.loss = parse_num(at("loss"));
      r.test = t;
    } else {
      throw std::runtime_error("unknown report line: " + line);
    }
  }
  return r;
}

inline std::string TrainReport::to_text() const {
  std::ostringstream os;
  os << std::fixed;
  os << "started " << (started.empty() ? "-" : started) << ", wall " << std::setprecision(1) << wall_seconds
     << " s, " << frames_per_second << " frames/s\n";
  os << "model " << model << ", mode " << mode;
  if (mode == "f16") os << " (T=" << detail::num(scale_t) << ")";
  os << ", seed " << seed << ", " << params << " params, " << std::setprecision(4) << gflops << " GFLOPs/clip\n";
  for (const EpochRecord& e : epochs) {
    os << "epoch " << std::setw(3) << e.epoch << "  " << std::left << std::setw(5) << e.split << std::right
       << "  acc " << std::setprecision(4) << e.acc << "  loss " << e.loss;
    if (e.split == "train") {
      os << "  overflow " << e.health.overflow_count << "  underflow " << e.health.underflow_to_zero_count << "  nan "
         << e.health.nan_count << "  |g| " << std::setprecision(3) << e.health.grad_norm;
    }
    os << '\n';
  }
  os << "health: overflow " << totals.overflow_count << ", underflow-to-zero " << totals.underflow_to_zero_count
     << ", nan " << totals.nan_count << '\n';
  if (test) {
    os << "test accuracy " << std::setprecision(2) << 100.0 * test->accuracy << "% +- " << 100.0 * test->half_width
       << " (" << test->correct << "/" << test->n << ")\n";
  }
  return os.str();
}

struct TrainOptions {
  std::size_t epochs = 30;
  std::size_t batch = 8;
  // lr 0.01 with momentum 0.9 blows up on the tiny model (gradient norms in
  // the thousands once block-4 channels die); 0.003 with a norm cap is stable.
  SgdHyper sgd{0.003, 0.9, 20.0};
  std::uint64_t seed = 1;
  bool augment = false;  // flip/crop; off for the synthetic task, where flips change the label
  const ClipDataset* val = nullptr;
  const ClipDataset* test = nullptr;
  std::string model_label = "custom";
  std::function<void(const EpochRecord&)> on_epoch;
};

template <class T>
struct TrainResult {
  Ca3dModel<T> model;
  TrainReport report;
};

namespace detail {

inline std::string utc_now() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace detail

/// Mini-batch SGD with cross-entropy. The pre-parameter path is used iff the
/// mode is pure16_preparam; static_post_quant trains in full precision and
/// quantizes at the end. Divergence doesn't abort: it shows up in the health
/// counters and the loss trace.
template <class T>
TrainResult<T> train(const ModelConfig& config, const ClipDataset& data, NumericMode mode,
                     const TrainOptions& opt = {}) {
  config.validate();
  mode.validate();
  opt.sgd.validate();
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
  if (opt.batch == 0) throw std::invalid_argument("train: batch must be positive");
  const Shape cs = data.clip_shape();
  if (cs != Shape{config.input_channels, config.input_t, config.input_h, config.input_w}) {
    throw std::invalid_argument("train: dataset clips " + shape_str(cs) + " do not match the model input");
  }
  if (data.num_classes() > config.num_classes) throw std::invalid_argument("train: dataset has more classes than the model");

  TrainResult<T> out{Ca3dModel<T>(config, opt.seed, mode), {}};
  TrainReport& rep = out.report;
  rep.model = opt.model_label;
  rep.mode = to_string(mode.kind);
  rep.scale_t = mode.scale_t;
  rep.seed = opt.seed;
  rep.params = out.model.count_params();
  rep.gflops = estimate_flops(config);
  rep.started = detail::utc_now();

  Ca3dModel<T>& model = out.model;
  ModelOptimizer<T> optimizer(model, opt.sgd);
  std::seed_seq aug_seq{static_cast<std::uint32_t>(opt.seed), 0xa9u};
  std::mt19937_64 aug_rng(aug_seq);
  const auto t0 = std::chrono::steady_clock::now();
  std::uint64_t step = 0;
  for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
    const std::vector<std::size_t> order = detail::seeded_permutation(data.size(), opt.seed, epoch);
    EpochRecord rec{epoch, "train", 0.0, 0.0, {}};
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + opt.batch)));
      auto [x, labels] = make_batch<T>(data, idx, opt.augment ? &aug_rng : nullptr);
      Tape<T> tape(true);
      model.zero_grad();
      const Var<T> logits = model.forward(tape, x, true, opt.seed * 1000003ULL + step++);
      const Var<T> loss = cross_entropy(logits, std::span<const int>(labels));
      tape.backward(loss);
      TrainingHealth h;
      optimizer.step(model, h);
      rec.health += h;
      rec.loss += static_cast<double>(loss.value()[0]) * static_cast<double>(idx.size());
      const std::size_t k = logits.shape()[1];
      for (std::size_t j = 0; j < idx.size(); ++j)
        if (detail::argmax_row(logits.value().ptr() + j * k, k) == labels[j]) ++correct;
    }
    rec.loss /= static_cast<double>(data.size());
    rec.acc = static_cast<double>(correct) / static_cast<double>(data.size());
    rep.totals += rec.health;
    rep.epochs.push_back(rec);
    if (opt.on_epoch) opt.on_epoch(rec);
    if (opt.val != nullptr) {
      const EvalResult v = evaluate(model, *opt.val, opt.batch);
      EpochRecord vr{epoch, "val", v.accuracy, v.loss, {}};
      rep.epochs.push_back(vr);
      if (opt.on_epoch) opt.on_epoch(vr);
    }
  }
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double frames = static_cast<double>(opt.epochs * data.size() * config.input_t);
  rep.frames_per_second = rep.wall_seconds > 0.0 ? frames / rep.wall_seconds : 0.0;

  if (mode.kind == ModeKind::static_post_quant) out.model = static_quantize_model(model);
  if (opt.test != nullptr) rep.test = evaluate(out.model, *opt.test, opt.batch);
  return out;
}

}  // namespace ca3d
