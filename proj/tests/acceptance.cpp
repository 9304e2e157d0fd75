// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
#include <chrono>
#include <cstdio>
#include <iostream>
#include <sstream>

#include "oracles.hpp"

using namespace ca3d;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::string detail;
};

int failures = 0;

void report(int id, const char* title, const Outcome& o, Clock::time_point t0) {
  const double s = std::chrono::duration<double>(Clock::now() - t0).count();
  std::printf("criterion %d %-34s %s  %s  (%.1fs)\n", id, title, o.pass ? "PASS" : "FAIL", o.detail.c_str(), s);
  std::fflush(stdout);
  failures += !o.pass;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Tensor<double> rand_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  const std::size_t n = shape_numel(s);
  return Tensor<double>(std::move(s), oracle::uniform(n, rng, lo, hi));
}

// Fixed random projection to a scalar, so every output coordinate matters.
Var<double> weighted_sum(const Var<double>& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, y.tape().constant(rand_tensor(y.shape(), rng))));
}

oracle::AttentionWeights random_weights(std::size_t channels, std::size_t heads, std::size_t max_t, std::mt19937_64& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(channels));
  oracle::AttentionWeights p{channels, heads, max_t, {}, {}, {}, {}, {}, {}, {}, {}, {}};
  p.pos = oracle::uniform(max_t * channels, rng, -0.5, 0.5);
  for (auto* w : {&p.wq, &p.wk, &p.wv, &p.wo}) *w = oracle::uniform(channels * channels, rng, -2 * s, 2 * s);
  for (auto* b : {&p.bq, &p.bk, &p.bv, &p.bo}) *b = oracle::uniform(channels, rng, -0.1, 0.1);
  return p;
}

template <class T>
AttentionVars<T> bind(Tape<T>& tape, const oracle::AttentionWeights& p) {
  const std::size_t c = p.channels;
  auto mk = [&](const std::vector<double>& v, Shape s) { return tape.constant(Tensor<T>(std::move(s), std::vector<T>(v.begin(), v.end()))); };
  return {mk(p.pos, {p.max_t, c}), mk(p.wq, {c, c, 1, 1, 1}), mk(p.bq, {c}), mk(p.wk, {c, c, 1, 1, 1}), mk(p.bk, {c}),
          mk(p.wv, {c, c, 1, 1, 1}),  mk(p.bv, {c}),             mk(p.wo, {c, c, 1, 1, 1}), mk(p.bo, {c})};
}

// 1 ---------------------------------------------------------------------------

Outcome gradient_correctness() {
  constexpr double kEps = 1e-3, kOpTol = 1e-2, kE2eTol = 2e-2;
  constexpr std::size_t kCoords = 100;
  std::mt19937_64 rng(10);
  std::vector<std::pair<std::string, double>> worst;
  auto op = [&](std::string name, std::vector<Tensor<double>> in, const auto& f) {
    worst.emplace_back(std::move(name), oracle::grad_check(std::move(in), f, kCoords, kEps, worst.size() + 1).worst);
  };
  for (const ConvSpec& s : {ConvSpec::spatial(2, 3, 3, 2, 1), ConvSpec::temporal(3, 2, 3, 1, 1), ConvSpec::pointwise(3, 3)})
    op("conv", {rand_tensor({2, s.in_channels, 4, 5, 5}, rng), rand_tensor(s.weight_shape(), rng), rand_tensor({s.out_channels}, rng)},
       [&](Tape<double>&, const std::vector<Var<double>>& v) { return weighted_sum(conv3d(v[0], v[1], &v[2], s), 1); });
  for (bool training : {true, false})
    op(training ? "bn_train" : "bn_eval", {rand_tensor({3, 3, 2, 3, 3}, rng), rand_tensor({3}, rng, 0.5, 1.5), rand_tensor({3}, rng)},
       [&](Tape<double>&, const std::vector<Var<double>>& v) {
         BatchNormState<double> s(3, Storage::full, 1e-5);
         s.running_var = Tensor<double>::filled({3}, 0.7);
         return weighted_sum(batchnorm(v[0], v[1], v[2], s, training), 2);
       });
  // Keep inputs away from the ReLU and max-pool kinks.
  Tensor<double> x = rand_tensor({2, 3, 4, 3, 3}, rng);
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] = (x[i] < 0 ? -0.1 : 0.1) + x[i] + 0.01 * static_cast<double>(i % 7);
  op("relu", {x}, [](Tape<double>&, const auto& v) { return weighted_sum(relu(v[0]), 3); });
  op("max_pool_t", {x}, [](Tape<double>&, const auto& v) { return weighted_sum(max_pool_temporal(v[0], 2, 2), 3); });
  op("avg_pool", {x}, [](Tape<double>&, const auto& v) { return weighted_sum(global_avg_pool(v[0]), 3); });
  op("add_mul", {x, rand_tensor(x.shape(), rng)}, [](Tape<double>&, const auto& v) { return weighted_sum(mul(add(v[0], v[1]), v[1]), 3); });
  op("dropout", {rand_tensor({2, 50}, rng)}, [](Tape<double>&, const auto& v) {
    std::mt19937_64 mask(5);
    return weighted_sum(dropout(v[0], 0.5, true, mask), 4);
  });
  const std::vector<int> labels{2, 0, 1};
  op("linear_ce", {rand_tensor({3, 6}, rng), rand_tensor({4, 6}, rng), rand_tensor({4}, rng)},
     [&](Tape<double>&, const std::vector<Var<double>>& v) { return cross_entropy(linear(v[0], v[1], v[2]), std::span<const int>(labels)); });
  {
    const oracle::AttentionWeights p = random_weights(4, 2, 5, rng);
    auto t = [](const std::vector<double>& v, Shape s) { return Tensor<double>(std::move(s), v); };
    op("local_mhsa",
       {rand_tensor({2, 4, 5, 1, 2}, rng), t(p.pos, {5, 4}), t(p.wq, {4, 4, 1, 1, 1}), t(p.bq, {4}), t(p.wk, {4, 4, 1, 1, 1}),
        t(p.bk, {4}), t(p.wv, {4, 4, 1, 1, 1}), t(p.bv, {4}), t(p.wo, {4, 4, 1, 1, 1}), t(p.bo, {4})},
       [&](Tape<double>&, const std::vector<Var<double>>& v) {
         const AttentionVars<double> av{v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8], v[9]};
         return weighted_sum(local_temporal_mhsa(v[0], av, AttentionConfig{4, 2, 2, 3, 5}), 6);
       });
  }
  double op_worst = 0.0;
  std::string op_name;
  for (const auto& [name, w] : worst)
    if (w >= op_worst) op_worst = w, op_name = name;

  // End to end through the tiny model, in double with a small step: at a 1e-3
  // step the ReLU/BatchNorm stack's curvature dominates the difference quotient.
  ModelConfig cfg = presets::tiny(4, 4, 16);
  cfg.dropout_rate = 0.0;
  cfg.zero_init_residual = false;
  Ca3dModel<double> m(cfg, 3, NumericMode::full32());
  std::mt19937_64 xr(3);
  const Tensor<double> clip(cfg.input_shape(2), oracle::uniform(shape_numel(cfg.input_shape(2)), xr));
  const std::vector<int> y{1, 3};
  auto loss = [&](Ca3dModel<double>& model, Tape<double>& tape) {
    return cross_entropy(model.forward(tape, clip, true, 5), std::span<const int>(y));
  };
  {
    Ca3dModel<double> g = m;
    g.zero_grad();
    Tape<double> tape(true);
    tape.backward(loss(g, tape));
    for (std::size_t k = 0; k < m.parameters().size(); ++k) m.parameters()[k].grad = g.parameters()[k].grad;
  }
  auto eval = [&] {
    Ca3dModel<double> g = m;
    Tape<double> tape(false);
    return loss(g, tape).value()[0];
  };
  const double eps = 1e-6;
  std::size_t total = 0;
  for (const auto& p : m.parameters()) total += p.value.numel();
  std::mt19937_64 pick(99);
  double e2e = 0.0;
  for (std::size_t n = 0; n < kCoords; ++n) {
    std::size_t j = pick() % total, k = 0;
    while (j >= m.parameters()[k].value.numel()) j -= m.parameters()[k++].value.numel();
    Parameter<double>& p = m.parameters()[k];
    const double orig = p.value[j];
    p.value[j] = orig + eps;
    const double up = eval();
    p.value[j] = orig - eps;
    const double down = eval();
    p.value[j] = orig;
    e2e = std::max(e2e, grad_relative_error(p.grad[j], (up - down) / (2 * eps), 1e-4));
  }
  return {op_worst < kOpTol && e2e < kE2eTol,
          fmt("per-op worst %.2e (%s, %zu ops) < 1e-2; end-to-end %.2e < 2e-2", op_worst, op_name.c_str(), worst.size(), e2e)};
}

// 2 ---------------------------------------------------------------------------

Outcome oracle_equivalence() {
  std::mt19937_64 rng(2);
  double worst = 0.0;
  for (std::size_t t = 1; t <= 8; ++t)
    for (std::size_t k : {1, 3, 5}) {
      const oracle::AttentionWeights p = random_weights(8, 2, 8, rng);
      const Shape xs{2, 8, t, 2, 3};
      const std::vector<double> xv = oracle::uniform(shape_numel(xs), rng);
      const std::vector<double> ref = oracle::masked_full_attention(xv, xs, p, k);
      Tape<float> tape(false);
      const Var<float> y = local_temporal_mhsa(tape.constant(Tensor<float>(xs, std::vector<float>(xv.begin(), xv.end()))),
                                               bind<float>(tape, p), AttentionConfig{8, 2, 4, k, 8});
      for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::fabs(y.value()[i] - ref[i]));
    }
  return {worst < 1e-5, fmt("max-abs %.2e < 1e-5 over T=1..8, k={1,3,5}", worst)};
}

// 3 ---------------------------------------------------------------------------

Outcome linear_complexity() {
  std::mt19937_64 rng(7);
  const std::vector<std::size_t> ts{4, 8, 16, 32};
  const oracle::AttentionWeights p = random_weights(8, 2, 32, rng);
  std::vector<double> local;
  std::uint64_t full16 = 0, full32 = 0;
  for (std::size_t t : ts) {
    const Shape xs{1, 8, t, 1, 1};
    const std::vector<double> xv = oracle::uniform(shape_numel(xs), rng);
    Tape<float> tape(false);
    const Var<float> x = tape.constant(Tensor<float>(xs, std::vector<float>(xv.begin(), xv.end())));
    const AttentionVars<float> v = bind<float>(tape, p);
    std::uint64_t n = 0;
    {
      ScopedMacCount count;
      windowed_attention(x, x, x, 2, 3);
      n = count.value();
    }
    local.push_back(static_cast<double>(n));
    std::uint64_t full = 0;
    oracle::masked_full_attention(xv, xs, p, 2 * t - 1, &full);
    if (t == 16) full16 = full;
    if (t == 32) full32 = full;
  }
  const double a = (local[1] - local[0]) / static_cast<double>(ts[1] - ts[0]);
  const double b = local[0] - a * static_cast<double>(ts[0]);
  double residual = 0.0;
  for (std::size_t i = 0; i < ts.size(); ++i) residual = std::max(residual, std::fabs(local[i] - (a * static_cast<double>(ts[i]) + b)));
  const double ratio = static_cast<double>(full32) / static_cast<double>(full16);
  return {residual == 0.0 && ratio > 2.5,
          fmt("local MAC(T) = %.0f*T %+.0f, residual %.0f; full MAC(32)/MAC(16) = %.2f > 2.5", a, b, residual, ratio)};
}

// 4 ---------------------------------------------------------------------------

Outcome receptive_field() {
  const std::size_t t_len = 7;
  std::string detail;
  bool pass = true;
  for (std::size_t layers : {1u, 2u}) {
    std::mt19937_64 rng(9 + layers);
    std::vector<oracle::AttentionWeights> ws;
    for (std::size_t l = 0; l < layers; ++l) ws.push_back(random_weights(4, 2, t_len, rng));
    const Tensor<double> xv(Shape{1, 4, t_len, 1, 1}, oracle::uniform(4 * t_len, rng));
    std::size_t reach = 0;
    bool exact = true;
    for (std::size_t t = 0; t < t_len; ++t) {
      Tape<double> tape;
      const Var<double> x = tape.leaf(xv);
      Var<double> h = x;
      for (const auto& w : ws) h = local_temporal_mhsa(h, bind<double>(tape, w), AttentionConfig{4, 2, 2, 3, t_len});
      Tensor<double> sel(h.shape());
      for (std::size_t c = 0; c < 4; ++c) sel[c * t_len + t] = 1.0;
      tape.backward(sum(mul(h, tape.constant(sel))));
      for (std::size_t s = 0; s < t_len; ++s) {
        double mass = 0.0;
        for (std::size_t c = 0; c < 4; ++c) mass += std::fabs(x.grad()[c * t_len + s]);
        const std::size_t d = t > s ? t - s : s - t;
        if (mass != 0.0) reach = std::max(reach, d);
        exact = exact && ((d <= layers) == (mass != 0.0));
      }
    }
    pass = pass && exact && reach == layers;
    detail += fmt("%zu layer%s: nonzero exactly for |t-s| <= %zu%s; ", layers, layers > 1 ? "s" : "", reach, exact ? "" : " (pattern mismatch)");
  }
  detail.resize(detail.size() - 2);
  return {pass, detail};
}

// 5 ---------------------------------------------------------------------------

Outcome architecture() {
  const ModelConfig c = presets::ca3d(101);
  Ca3dModel<float> m(c, 1, NumericMode::full32());
  std::mt19937_64 rng(1);
  const Shape s = c.input_shape(2);
  const std::vector<double> v = oracle::uniform(shape_numel(s), rng);
  ShapeTrace trace;
  Tape<float> tape(false);
  const Var<float> y = m.forward(tape, Tensor<float>(s, std::vector<float>(v.begin(), v.end())), false, 0, &trace);
  const std::vector<Shape> expect{{2, 64, 16, 56, 56}, {2, 128, 8, 28, 28}, {2, 256, 4, 14, 14}, {2, 512, 4, 7, 7}};
  const Footprint f = analyze(c);
  const bool pass = y.shape() == Shape{2, 101} && trace.after_block == expect && f.counted_layers == 31 &&
                    m.count_params() == f.params();
  return {pass, fmt("out %s, spatial 56/28/14/7, temporal 16/8/4/4 %s, layers %zu; params %.2fM (paper 7M), "
                    "GFLOPs %.2f (paper 6.3)",
                    shape_str(y.shape()).c_str(), trace.after_block == expect ? "ok" : "MISMATCH", f.counted_layers,
                    static_cast<double>(f.params()) / 1e6, f.gflops())};
}

// 6 ---------------------------------------------------------------------------

Outcome preparam_equivalence() {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> log_t(std::log(0.01), std::log(10.0)), lr(1e-3, 0.5);
  double worst = 0.0, t_lo = 10.0, t_hi = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const double t = std::exp(log_t(rng));
    t_lo = std::min(t_lo, t);
    t_hi = std::max(t_hi, t);
    const SgdHyper hp{lr(rng), trial % 2 ? 0.9 : 0.0};
    std::vector<Tensor<double>> w{rand_tensor({7}, rng), rand_tensor({3, 2}, rng)};
    PreParamStore<double> store = PreParamStore<double>::from_weights(w, t, false);
    std::vector<Tensor<double>> vel;
    for (int step = 0; step < 100; ++step) {
      const std::vector<Tensor<double>> g{rand_tensor({7}, rng), rand_tensor({3, 2}, rng)};
      sgd_step_preparam(store, g, hp);
      sgd_step_plain(w, g, vel, hp, false);
      for (std::size_t k = 0; k < w.size(); ++k)
        for (std::size_t i = 0; i < w[k].numel(); ++i) worst = std::max(worst, std::fabs(store.w[k][i] - w[k][i]));
    }
  }
  return {worst <= 1e-12, fmt("max |w_pre - w_plain| %.2e <= 1e-12 (20 runs x 100 steps, T in [%.3f, %.2f])", worst, t_lo, t_hi)};
}

// 7-9 -------------------------------------------------------------------------

struct Run {
  TrainResult<float> result;
  double accuracy = 0.0;
};

Run train_run(const char* label, NumericMode mode, const ClipDataset& train_set, const ClipDataset& test_set) {
  const auto t0 = Clock::now();
  TrainOptions opt;
  opt.epochs = 30;
  opt.seed = 1;
  opt.test = &test_set;
  opt.model_label = "tiny";
  const ModelConfig cfg = presets::tiny(4, train_set.clip_shape()[1], train_set.clip_shape()[2]);
  Run r{train<float>(cfg, train_set, mode, opt), 0.0};
  r.accuracy = r.result.report.test->accuracy;
  const TrainingHealth& h = r.result.report.totals;
  std::printf("  run %-10s test %.2f%% (+-%.2f)  final train loss %.4f  underflow %llu  overflow %llu  nan %llu  (%.0fs)\n", label,
              100 * r.accuracy, 100 * r.result.report.test->half_width, r.result.report.epochs.back().loss,
              static_cast<unsigned long long>(h.underflow_to_zero_count), static_cast<unsigned long long>(h.overflow_count),
              static_cast<unsigned long long>(h.nan_count), std::chrono::duration<double>(Clock::now() - t0).count());
  std::fflush(stdout);
  return r;
}

}  // namespace

int main() {
  const auto start = Clock::now();
  auto timed = [](int id, const char* title, Outcome (*f)()) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    report(id, title, o, t0);
  };
  timed(1, "gradient correctness", gradient_correctness);
  timed(2, "local attention oracle", oracle_equivalence);
  timed(3, "linear attention cost", linear_complexity);
  timed(4, "receptive field growth", receptive_field);
  timed(5, "architecture fidelity", architecture);
  timed(6, "pre-parameter SGD equivalence", preparam_equivalence);

  // Synthetic motion task: 512 train / 128 test clips of 16 frames at 32x32.
  const auto t7 = Clock::now();
  const SyntheticMotionDataset train_set(1, 512, 16, 32, 32), test_set(2, 128, 16, 32, 32);
  try {
    Run full = train_run("full32", NumericMode::full32(), train_set, test_set);
    Run f16 = train_run("f16 T=0.1", NumericMode::pure16(0.1), train_set, test_set);
    Run naive = train_run("f16 naive", NumericMode::pure16_naive(), train_set, test_set);
    const auto f16_under = f16.result.report.totals.underflow_to_zero_count;
    const auto naive_under = naive.result.report.totals.underflow_to_zero_count;
    const bool a = full.accuracy >= 0.90;
    const bool b = f16.accuracy >= full.accuracy - 0.03;
    const bool c_acc = naive.accuracy < full.accuracy - 0.10, c_under = naive_under > f16_under;
    report(7, "quantized training convergence",
           {a && b && (c_acc || c_under),
            fmt("(a) full32 %.2f%% >= 90 %s; (b) f16 T=0.1 %.2f%%, gap %.2f <= 3 %s; (c) naive %.2f%% %s full32-10, "
                "underflows naive %llu vs T=0.1 %llu %s",
                100 * full.accuracy, a ? "ok" : "no", 100 * f16.accuracy, 100 * (full.accuracy - f16.accuracy), b ? "ok" : "no",
                100 * naive.accuracy, c_acc ? "<" : ">=", static_cast<unsigned long long>(naive_under),
                static_cast<unsigned long long>(f16_under), c_acc || c_under ? "ok" : "no")},
           t7);

    const auto t8 = Clock::now();
    const EvalResult ordered = evaluate(full.result.model, test_set);
    const EvalResult shuffled = shuffle_frames_control(full.result.model, test_set);
    report(8, "frame-shuffle control",
           {shuffled.accuracy < 0.40 && ordered.accuracy >= 0.90,
            fmt("full32 model: shuffled %.2f%% < 40, ordered %.2f%% >= 90", 100 * shuffled.accuracy, 100 * ordered.accuracy)},
           t8);

    const auto t9 = Clock::now();
    Run qat = train_run("qat", NumericMode::qat(), train_set, test_set);
    const EvalResult fake = evaluate(qat.result.model, test_set);
    Ca3dModel<float> deployed = static_quantize_model(qat.result.model);
    const EvalResult stat = evaluate(deployed, test_set);
    const double loss_pts = 100 * (fake.accuracy - stat.accuracy);
    report(9, "QAT static quantization",
           {loss_pts < 1.0, fmt("fake-quant %.2f%%, static binary16 %.2f%%, loss %.2f < 1 point", 100 * fake.accuracy,
                                100 * stat.accuracy, loss_pts)},
           t9);
  } catch (const std::exception& e) {
    for (int id = 7; id <= 9; ++id) report(id, "training experiments", {false, std::string("exception: ") + e.what()}, t7);
  }
  std::printf("acceptance: %d of 9 criteria failed, total %.0fs\n", failures,
              std::chrono::duration<double>(Clock::now() - start).count());
  return failures == 0 ? 0 : 1;
}
