// Command-line front end: train, eval, bench-attn, bench-flops, report.
#include <CLI11.hpp>

#include <ca3d/ca3d.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>

namespace fs = std::filesystem;
using namespace ca3d;

namespace {

struct RunConfig {
  std::string command;
  std::string model = "tiny";
  std::string mode = "full32";
  double scale_t = 0.1;
  std::uint64_t seed = 1;
  std::string data = "synthetic";
  std::size_t epochs = 30;
  double lr = TrainOptions{}.sgd.lr;
  double momentum = TrainOptions{}.sgd.momentum;
  double clip_norm = TrainOptions{}.sgd.clip_norm;
  std::size_t batch = 8;
  std::size_t window = 3;
  std::string out = "ca3d_out";
  std::string checkpoint;
  std::vector<std::size_t> t_values{4, 8, 16, 32};
  std::size_t frames = 16;
  std::size_t size = 32;
  std::size_t train_samples = 512;
  std::size_t test_samples = 128;
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

NumericMode numeric_mode(const RunConfig& rc) {
  const ModeKind kind = parse_mode_kind(rc.mode);
  NumericMode m{kind, kind == ModeKind::pure16_preparam ? rc.scale_t : 1.0};
  m.validate();
  return m;
}

ModelConfig model_config(const RunConfig& rc, std::size_t num_classes) {
  if (rc.model == "ca3d") return presets::ca3d(num_classes);
  if (rc.model == "ca3d-l") return presets::ca3d_l(num_classes);
  return presets::tiny(num_classes, rc.frames, rc.size);
}

void validate(const RunConfig& rc) {
  const std::vector<std::string> commands{"train", "eval", "bench-attn", "bench-flops", "report"};
  if (std::find(commands.begin(), commands.end(), rc.command) == commands.end())
    throw UsageError("unknown command '" + rc.command + "'");
  if (rc.model != "ca3d" && rc.model != "ca3d-l" && rc.model != "tiny")
    throw UsageError("--model must be ca3d, ca3d-l or tiny");
  try {
    numeric_mode(rc);
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("--mode/--scale-t: ") + e.what());
  }
  if (rc.batch == 0) throw UsageError("--batch must be positive");
  if (rc.window == 0 || rc.window % 2 == 0) throw UsageError("--window must be a positive odd number");
  if (rc.t_values.empty()) throw UsageError("--t-values must not be empty");
  for (std::size_t t : rc.t_values)
    if (t == 0) throw UsageError("--t-values entries must be positive");
  if (rc.frames < 2 || rc.size == 0) throw UsageError("--frames must be >= 2 and --size positive");
  if (rc.train_samples < 4 || rc.test_samples < 4) throw UsageError("sample counts must be >= 4");
  try {
    SgdHyper{rc.lr, rc.momentum, rc.clip_norm}.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (rc.data != "synthetic" && !fs::is_directory(rc.data))
    throw UsageError("--data: '" + rc.data + "' is neither 'synthetic' nor a readable directory");
  if (rc.command == "eval" && rc.checkpoint.empty()) throw UsageError("eval needs --checkpoint");
  if (!rc.checkpoint.empty() && rc.command == "eval" && !fs::is_regular_file(rc.checkpoint))
    throw UsageError("--checkpoint: cannot read '" + rc.checkpoint + "'");
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

struct Data {
  std::unique_ptr<ClipDataset> train, test;
};

Data load_data(const RunConfig& rc, const ModelConfig* shape_from) {
  Data d;
  if (rc.data == "synthetic") {
    const std::size_t t = shape_from ? shape_from->input_t : rc.frames;
    const std::size_t h = shape_from ? shape_from->input_h : rc.size;
    const std::size_t w = shape_from ? shape_from->input_w : rc.size;
    d.train = std::make_unique<SyntheticMotionDataset>(rc.seed, rc.train_samples, t, h, w);
    d.test = std::make_unique<SyntheticMotionDataset>(rc.seed + 1, rc.test_samples, t, h, w);
    return d;
  }
  // A folder with train/ and test/ splits, or one folder used for both.
  const fs::path root(rc.data);
  const std::size_t frames = shape_from ? shape_from->input_t : 16;
  const std::size_t size = shape_from ? shape_from->input_h : 112;
  if (fs::is_directory(root / "train") && fs::is_directory(root / "test")) {
    d.train = std::make_unique<FrameFolderDataset>(root / "train", frames, size);
    d.test = std::make_unique<FrameFolderDataset>(root / "test", frames, size);
  } else {
    d.train = std::make_unique<FrameFolderDataset>(root, frames, size);
    d.test = std::make_unique<FrameFolderDataset>(root, frames, size);
  }
  return d;
}

int cmd_train(const RunConfig& rc) {
  const NumericMode mode = numeric_mode(rc);
  // Frame folders carry their own class count; peek at it before building the model.
  std::size_t classes = 4;
  if (rc.data != "synthetic") classes = load_data(rc, nullptr).train->num_classes();
  const ModelConfig config = model_config(rc, classes);
  Data d = load_data(rc, &config);

  TrainOptions o;
  o.epochs = rc.epochs;
  o.batch = rc.batch;
  o.sgd = {rc.lr, rc.momentum, rc.clip_norm};
  o.seed = rc.seed;
  o.augment = rc.data != "synthetic";
  o.test = d.test.get();
  o.model_label = rc.model;
  o.on_epoch = [](const EpochRecord& e) {
    std::cout << "epoch " << e.epoch << ' ' << e.split << " acc=" << std::fixed << std::setprecision(4) << e.acc
              << " loss=" << e.loss << std::defaultfloat << std::endl;
  };
  TrainResult<float> r = train<float>(config, *d.train, mode, o);

  const fs::path out(rc.out);
  fs::create_directories(out);
  write_file(out / "report.txt", r.report.to_text());
  write_file(out / "report.kv", r.report.to_kv());
  checkpoint_save(r.model, (out / "model.ckpt").string());
  std::cout << r.report.to_text();
  return 0;
}

int cmd_eval(const RunConfig& rc) {
  Ca3dModel<float> model = checkpoint_load<float>(rc.checkpoint);
  Data d = load_data(rc, &model.config());
  if (d.test->num_classes() != model.config().num_classes)
    throw UsageError("dataset has " + std::to_string(d.test->num_classes()) + " classes, checkpoint expects " +
                     std::to_string(model.config().num_classes));
  const EvalResult ordered = evaluate(model, *d.test, rc.batch);
  const EvalResult shuffled = shuffle_frames_control(model, *d.test, rc.seed, rc.batch);
  std::ostringstream os;
  os << "ordered acc=" << ordered.accuracy << " halfwidth=" << ordered.half_width << " n=" << ordered.n << '\n';
  os << "shuffled acc=" << shuffled.accuracy << " halfwidth=" << shuffled.half_width << " n=" << shuffled.n << '\n';
  fs::create_directories(rc.out);
  write_file(fs::path(rc.out) / "eval.txt", os.str());
  std::cout << os.str();
  return 0;
}

// Instrumented MACs of the attention operator (scores plus weighted sum) on
// one spatial position. Projections cost the same per token either way.
std::uint64_t attention_macs(std::size_t t, std::size_t window, std::size_t heads, std::size_t head_dim) {
  Tape<float> tape(false);
  std::mt19937_64 rng(t);
  std::normal_distribution<float> nd;
  Tensor<float> x({1, heads * head_dim, t, 1, 1});
  for (float& v : x.data()) v = nd(rng);
  const Var<float> q = tape.constant(x);
  ScopedMacCount count;
  windowed_attention(q, q, q, heads, window);
  return count.value();
}

int cmd_bench_attn(const RunConfig& rc) {
  const std::size_t heads = 8, head_dim = 8;
  std::ostringstream os;
  os << "window=" << rc.window << " heads=" << heads << " head_dim=" << head_dim << '\n';
  os << std::setw(6) << "T" << std::setw(14) << "local_macs" << std::setw(14) << "full_macs" << std::setw(16)
     << "layer_macs" << '\n';
  std::vector<double> ts, local;
  for (std::size_t t : rc.t_values) {
    const std::uint64_t l = attention_macs(t, rc.window, heads, head_dim);
    const std::uint64_t f = attention_macs(t, 2 * t - 1, heads, head_dim);  // covers every pair
    const AttentionConfig layer{heads * head_dim, heads, head_dim, rc.window, t};
    os << std::setw(6) << t << std::setw(14) << l << std::setw(14) << f << std::setw(16)
       << local_mhsa_macs(layer, 1, t, 1) << '\n';
    ts.push_back(static_cast<double>(t));
    local.push_back(static_cast<double>(l));
  }
  if (ts.size() >= 2) {
    // Line through the first two points; every other point must lie on it.
    const double a = (local[1] - local[0]) / (ts[1] - ts[0]);
    const double b = local[0] - a * ts[0];
    double residual = 0.0;
    for (std::size_t i = 0; i < ts.size(); ++i) residual = std::max(residual, std::abs(local[i] - (a * ts[i] + b)));
    os << "fit local_macs = " << a << " * T + " << b << "  max_residual=" << residual << '\n';
  }
  fs::create_directories(rc.out);
  write_file(fs::path(rc.out) / "bench_attn.txt", os.str());
  std::cout << os.str();
  return 0;
}

int cmd_bench_flops(const RunConfig& rc) {
  const ModelConfig config = model_config(rc, rc.model == "tiny" ? 4 : 101);
  const Footprint f = analyze(config);
  std::ostringstream os;
  os << "model=" << rc.model << " input=" << shape_str(config.input_shape(1)) << '\n';
  os << "layers=" << f.counted_layers << '\n';
  os << "params=" << f.params() << " (" << std::fixed << std::setprecision(2) << f.params() / 1e6 << "M)\n";
  os << "gflops=" << f.gflops() << std::defaultfloat << '\n';
  if (rc.model == "ca3d") os << "reference params=7M gflops=6.3 (published CA3D figures)\n";
  fs::create_directories(rc.out);
  write_file(fs::path(rc.out) / "bench_flops.txt", os.str());
  std::cout << os.str();
  return 0;
}

int cmd_report(const RunConfig& rc) {
  const fs::path path = fs::path(rc.out) / "report.kv";
  std::ifstream in(path);
  if (!in) throw UsageError("no report at '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  std::cout << TrainReport::from_kv(ss.str()).to_text();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CA3D video recognition: train, evaluate and benchmark"};
  RunConfig rc;
  app.set_config("--config", "", "Flat 'key = value' file; flags override it");
  app.allow_config_extras(false);
  app.add_option("command", rc.command, "train | eval | bench-attn | bench-flops | report")->required();
  app.add_option("--model", rc.model, "ca3d | ca3d-l | tiny")->capture_default_str();
  app.add_option("--mode", rc.mode, "full32 | qat | f16 | f16-naive | static")->capture_default_str();
  app.add_option("--scale-t", rc.scale_t, "Pre-parameter constant T (f16 mode)")->capture_default_str();
  app.add_option("--seed", rc.seed)->capture_default_str();
  app.add_option("--data", rc.data, "'synthetic' or a frame-folder root")->capture_default_str();
  app.add_option("--epochs", rc.epochs)->capture_default_str();
  app.add_option("--lr", rc.lr)->capture_default_str();
  app.add_option("--momentum", rc.momentum)->capture_default_str();
  app.add_option("--clip-norm", rc.clip_norm, "Global gradient-norm cap, 0 = off")->capture_default_str();
  app.add_option("--batch", rc.batch)->capture_default_str();
  app.add_option("--window", rc.window, "Attention window for bench-attn")->capture_default_str();
  app.add_option("--out", rc.out, "Output directory")->capture_default_str();
  app.add_option("--checkpoint", rc.checkpoint, "Model file for eval");
  app.add_option("--t-values", rc.t_values, "Sequence lengths for bench-attn")->delimiter(',');
  app.add_option("--frames", rc.frames, "Clip length for the tiny model")->capture_default_str();
  app.add_option("--size", rc.size, "Frame side for the tiny model")->capture_default_str();
  app.add_option("--train-samples", rc.train_samples, "Synthetic training clips")->capture_default_str();
  app.add_option("--test-samples", rc.test_samples, "Synthetic test clips")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    validate(rc);
    if (rc.command == "train") return cmd_train(rc);
    if (rc.command == "eval") return cmd_eval(rc);
    if (rc.command == "bench-attn") return cmd_bench_attn(rc);
    if (rc.command == "bench-flops") return cmd_bench_flops(rc);
    return cmd_report(rc);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
