// CAST blocks and the CA3D network family.
//
// A CAST block is a spatial part (strided per-frame conv -> ReLU -> BatchNorm,
// then a residual column of spatial convs) followed by an optional temporal
// part (local temporal attention -> BatchNorm, then a residual column of
// temporal convs) and an optional temporal max pool. Residual stages use
// pre-activation ordering: x + conv(BN(ReLU(conv(BN(ReLU(x)))))).
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ca3d/attention.hpp"
#include "ca3d/ops.hpp"

namespace ca3d {

/// basic: two kernel-3 convs per stage; bottleneck: 1-3-1 convs at width C/4.
enum class ColumnStyle : unsigned char { basic, bottleneck };

struct TemporalPool {
  std::size_t size = 2;
  std::size_t stride = 2;
  friend bool operator==(const TemporalPool&, const TemporalPool&) = default;
};

struct CastBlockConfig {
  std::size_t channels = 64;
  std::size_t spatial_kernel = 3;
  std::size_t spatial_stride = 2;
  std::size_t spatial_column_stages = 2;
  bool has_temporal_attention = false;
  std::size_t heads = 0;
  std::size_t head_dim = 0;
  std::size_t attn_window = 3;
  std::size_t temporal_column_stages = 0;
  std::optional<TemporalPool> temporal_pool;

  friend bool operator==(const CastBlockConfig&, const CastBlockConfig&) = default;
};

struct ModelConfig {
  std::vector<CastBlockConfig> blocks;
  std::size_t num_classes = 101;
  double dropout_rate = 0.5;
  std::size_t input_channels = 3, input_t = 16, input_h = 112, input_w = 112;
  ColumnStyle column_style = ColumnStyle::basic;
  // Start every residual branch at zero so columns begin as identities.
  bool zero_init_residual = false;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;

  Shape input_shape(std::size_t batch) const { return {batch, input_channels, input_t, input_h, input_w}; }

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("invalid model config: " + m); };
    if (blocks.empty()) fail("no blocks");
    if (num_classes == 0) fail("num_classes must be positive");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail("dropout_rate must lie in [0, 1)");
    if (input_channels == 0 || input_t == 0 || input_h == 0 || input_w == 0) fail("input dims must be positive");
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const CastBlockConfig& b = blocks[i];
      const std::string at = "block " + std::to_string(i + 1) + ": ";
      if (b.channels == 0 || b.spatial_kernel == 0 || b.spatial_stride == 0) fail(at + "sizes must be positive");
      if (b.spatial_kernel % 2 == 0) fail(at + "spatial kernel must be odd");
      if (column_style == ColumnStyle::bottleneck && b.channels % 4 != 0) fail(at + "bottleneck needs channels % 4 == 0");
      if (b.has_temporal_attention) {
        if (b.heads * b.head_dim != b.channels) {
          fail(at + "heads x head_dim (" + std::to_string(b.heads) + "x" + std::to_string(b.head_dim) +
               ") != channels (" + std::to_string(b.channels) + ")");
        }
        if (b.attn_window == 0 || b.attn_window % 2 == 0) fail(at + "attention window must be odd");
      }
      if (b.temporal_pool && (b.temporal_pool->size == 0 || b.temporal_pool->stride == 0)) fail(at + "bad pool");
    }
  }
};

namespace presets {

inline ModelConfig ca3d(std::size_t num_classes = 101) {
  ModelConfig c;
  c.num_classes = num_classes;
  c.blocks = {
      {64, 7, 2, 2, false, 0, 0, 3, 0, std::nullopt},
      {128, 3, 2, 2, false, 0, 0, 3, 0, TemporalPool{2, 2}},
      {256, 3, 2, 2, true, 4, 64, 3, 2, TemporalPool{2, 2}},
      {512, 3, 2, 2, true, 8, 64, 3, 2, std::nullopt},
  };
  return c;
}

/// Deeper residual columns: 4 stages at block 3, 8 at block 4.
inline ModelConfig ca3d_l(std::size_t num_classes = 101) {
  ModelConfig c = ca3d(num_classes);
  c.blocks[2].spatial_column_stages = c.blocks[2].temporal_column_stages = 4;
  c.blocks[3].spatial_column_stages = c.blocks[3].temporal_column_stages = 8;
  return c;
}

/// Desk-scale CA3D: same topology at widths 8/16/32/64 on 16x16 clips.
inline ModelConfig tiny(std::size_t num_classes = 4, std::size_t frames = 16, std::size_t size = 16) {
  ModelConfig c = ca3d(num_classes);
  const std::size_t widths[] = {8, 16, 32, 64};
  for (std::size_t i = 0; i < 4; ++i) c.blocks[i].channels = widths[i];
  c.blocks[2].heads = 4;
  c.blocks[2].head_dim = 8;
  c.blocks[3].heads = 8;
  c.blocks[3].head_dim = 8;
  c.input_t = frames;
  c.input_h = c.input_w = size;
  c.zero_init_residual = true;
  return c;
}

}  // namespace presets

/// Shape of the feature map after the stem of each block and after each block.
struct ShapeTrace {
  std::vector<Shape> after_block;
};

namespace detail {

struct ConvSlot {
  ConvSpec spec;
  std::size_t weight = 0, bias = 0;
};
struct NormSlot {
  std::size_t gamma = 0, beta = 0, state = 0;
};
struct UnitSlot {  // ReLU -> BN -> conv
  NormSlot norm;
  ConvSlot conv;
};
struct StageSlot {
  std::vector<UnitSlot> units;
};
struct AttentionSlot {
  AttentionConfig cfg;
  std::size_t pos = 0, wq = 0, bq = 0, wk = 0, bk = 0, wv = 0, bv = 0, wo = 0, bo = 0;
  NormSlot norm;
};
struct BlockSlot {
  ConvSlot conv;
  NormSlot norm;
  std::vector<StageSlot> spatial;
  std::optional<AttentionSlot> attention;
  std::vector<StageSlot> temporal;
  std::optional<TemporalPool> pool;
};

inline std::size_t same_padding(std::size_t k) { return (k - 1) / 2; }

}  // namespace detail

template <class T>
class Ca3dModel {
 public:
  Ca3dModel(ModelConfig config, std::uint64_t seed, NumericMode mode)
      : config_(std::move(config)), mode_(mode), storage_(mode.training_storage()) {
    config_.validate();
    mode_.validate();
    build(seed);
    if (config_.zero_init_residual) zero_residual_branches();
  }

  const ModelConfig& config() const { return config_; }
  const NumericMode& mode() const { return mode_; }
  Storage storage() const { return storage_; }
  bool fake_quantized() const { return mode_.kind == ModeKind::qat && storage_ == Storage::full; }

  std::vector<Parameter<T>>& parameters() { return params_; }
  const std::vector<Parameter<T>>& parameters() const { return params_; }
  std::vector<std::pair<std::string, BatchNormState<T>>>& norm_states() { return norms_; }
  const std::vector<std::pair<std::string, BatchNormState<T>>>& norm_states() const { return norms_; }

  Parameter<T>& parameter(const std::string& name) {
    for (Parameter<T>& p : params_) {
      if (p.name == name) return p;
    }
    throw std::out_of_range("no parameter named '" + name + "'");
  }

  std::size_t count_params() const {
    std::size_t n = 0;
    for (const Parameter<T>& p : params_) n += p.value.numel();
    return n;
  }

  void zero_grad() {
    for (Parameter<T>& p : params_) p.zero_grad();
  }

  /// Switches parameter and statistic storage; used by static quantization.
  void set_storage(Storage st) {
    storage_ = st;
    for (Parameter<T>& p : params_) p.value = p.value.to_storage(st);
    for (auto& [name, s] : norms_) {
      s.running_mean = s.running_mean.to_storage(st);
      s.running_var = s.running_var.to_storage(st);
    }
  }

  void set_mode(NumericMode mode) {
    mode.validate();
    mode_ = mode;
  }

  /// Zeroes the last conv of every residual stage so each column is the identity.
  void zero_residual_branches() {
    auto zero = [&](std::vector<detail::StageSlot>& stages) {
      for (detail::StageSlot& s : stages) {
        const detail::ConvSlot& c = s.units.back().conv;
        params_[c.weight].value = Tensor<T>::zeros_like(params_[c.weight].value);
        params_[c.bias].value = Tensor<T>::zeros_like(params_[c.bias].value);
      }
    };
    for (detail::BlockSlot& b : blocks_) {
      zero(b.spatial);
      zero(b.temporal);
    }
  }

  /// Logits (B, num_classes). Training mode uses batch statistics, updates
  /// running statistics and applies dropout drawn from `dropout_seed`.
  Var<T> forward(Tape<T>& tape, const Tensor<T>& clip, bool training, std::uint64_t dropout_seed = 0,
                 ShapeTrace* trace = nullptr, bool skip_columns = false) {
    const Shape& s = clip.shape();
    if (s.size() != 5 || s[1] != config_.input_channels || s[2] != config_.input_t || s[3] != config_.input_h ||
        s[4] != config_.input_w) {
      throw std::invalid_argument("forward: clip shape " + shape_str(s) + " does not match model input " +
                                  shape_str(config_.input_shape(s.empty() ? 0 : s[0])));
    }
    const bool fq = fake_quantized();
    auto q = [&](const Var<T>& v) { return fq ? fake_quantize(v) : v; };
    auto param = [&](std::size_t i) { return q(tape.param(params_[i])); };
    auto conv = [&](const Var<T>& x, const detail::ConvSlot& c) {
      const Var<T> w = param(c.weight), b = param(c.bias);
      return q(conv3d(x, w, &b, c.spec));
    };
    auto norm = [&](const Var<T>& x, const detail::NormSlot& n) {
      return q(batchnorm(x, param(n.gamma), param(n.beta), norms_[n.state].second, training));
    };
    auto stage = [&](const Var<T>& x, const detail::StageSlot& st) {
      Var<T> h = x;
      for (const detail::UnitSlot& u : st.units) h = conv(norm(relu(h), u.norm), u.conv);
      return q(add(x, h));
    };

    Var<T> h = q(tape.constant(clip.to_storage(storage_)));
    for (const detail::BlockSlot& b : blocks_) {
      h = norm(relu(conv(h, b.conv)), b.norm);
      if (!skip_columns)
        for (const detail::StageSlot& st : b.spatial) h = stage(h, st);
      if (b.attention) {
        const detail::AttentionSlot& a = *b.attention;
        AttentionVars<T> vars{param(a.pos), param(a.wq), param(a.bq), param(a.wk), param(a.bk),
                              param(a.wv),  param(a.bv), param(a.wo), param(a.bo)};
        h = norm(q(local_temporal_mhsa(h, vars, a.cfg)), a.norm);
      }
      if (!skip_columns)
        for (const detail::StageSlot& st : b.temporal) h = stage(h, st);
      if (b.pool) h = max_pool_temporal(h, b.pool->size, b.pool->stride);
      if (trace) trace->after_block.push_back(h.shape());
    }
    h = global_avg_pool(h);
    std::mt19937_64 rng(dropout_seed);
    h = dropout(h, config_.dropout_rate, training, rng);
    return q(linear(h, param(head_weight_), param(head_bias_)));
  }

 private:
  void build(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::size_t in_ch = config_.input_channels;
    std::size_t t_len = config_.input_t;
    for (std::size_t i = 0; i < config_.blocks.size(); ++i) {
      const CastBlockConfig& bc = config_.blocks[i];
      const std::string prefix = "block" + std::to_string(i + 1);
      detail::BlockSlot slot;
      slot.conv = add_conv(prefix + ".conv",
                           ConvSpec::spatial(in_ch, bc.channels, bc.spatial_kernel, bc.spatial_stride,
                                             detail::same_padding(bc.spatial_kernel)),
                           rng);
      slot.norm = add_norm(prefix + ".norm", bc.channels);
      for (std::size_t s = 0; s < bc.spatial_column_stages; ++s)
        slot.spatial.push_back(add_stage(prefix + ".spatial" + std::to_string(s), bc.channels, true, rng));
      if (bc.has_temporal_attention) slot.attention = add_attention(prefix + ".attn", bc, t_len, rng);
      for (std::size_t s = 0; s < bc.temporal_column_stages; ++s)
        slot.temporal.push_back(add_stage(prefix + ".temporal" + std::to_string(s), bc.channels, false, rng));
      slot.pool = bc.temporal_pool;
      if (bc.temporal_pool && t_len >= bc.temporal_pool->size)
        t_len = (t_len - bc.temporal_pool->size) / bc.temporal_pool->stride + 1;
      blocks_.push_back(std::move(slot));
      in_ch = bc.channels;
    }
    head_weight_ = add_param("head.weight", {config_.num_classes, in_ch}, std::sqrt(1.0 / in_ch), rng);
    head_bias_ = add_param("head.bias", {config_.num_classes}, 0.0, rng);
  }

  std::size_t add_param(std::string name, Shape shape, double stddev, std::mt19937_64& rng, double fill = 0.0) {
    Tensor<T> value(std::move(shape));
    if (stddev > 0.0) {
      std::normal_distribution<double> dist(0.0, stddev);
      for (T& v : value.data()) v = static_cast<T>(dist(rng));
    } else {
      for (T& v : value.data()) v = static_cast<T>(fill);
    }
    value = value.to_storage(storage_);
    params_.push_back({std::move(name), std::move(value), Tensor<T>()});
    return params_.size() - 1;
  }

  detail::ConvSlot add_conv(const std::string& name, const ConvSpec& spec, std::mt19937_64& rng) {
    const std::size_t fan_in = spec.in_channels * spec.kt * spec.kh * spec.kw;
    detail::ConvSlot c{spec, 0, 0};
    c.weight = add_param(name + ".weight", spec.weight_shape(), std::sqrt(2.0 / fan_in), rng);
    c.bias = add_param(name + ".bias", {spec.out_channels}, 0.0, rng);
    return c;
  }

  detail::NormSlot add_norm(const std::string& name, std::size_t channels) {
    detail::NormSlot n;
    n.gamma = add_param(name + ".gamma", {channels}, 0.0, dummy_rng_, 1.0);
    n.beta = add_param(name + ".beta", {channels}, 0.0, dummy_rng_, 0.0);
    norms_.emplace_back(name, BatchNormState<T>(channels, storage_, default_bn_eps(storage_)));
    n.state = norms_.size() - 1;
    return n;
  }

  detail::StageSlot add_stage(const std::string& name, std::size_t channels, bool spatial, std::mt19937_64& rng) {
    detail::StageSlot st;
    auto kernel3 = [&](std::size_t cin, std::size_t cout) {
      return spatial ? ConvSpec::spatial(cin, cout, 3, 1, 1) : ConvSpec::temporal(cin, cout, 3, 1, 1);
    };
    std::vector<ConvSpec> specs;
    if (config_.column_style == ColumnStyle::basic) {
      specs = {kernel3(channels, channels), kernel3(channels, channels)};
    } else {
      const std::size_t inner = channels / 4;
      specs = {ConvSpec::pointwise(channels, inner), kernel3(inner, inner), ConvSpec::pointwise(inner, channels)};
    }
    for (std::size_t u = 0; u < specs.size(); ++u) {
      const std::string un = name + ".unit" + std::to_string(u);
      detail::UnitSlot unit;
      unit.norm = add_norm(un + ".norm", specs[u].in_channels);
      unit.conv = add_conv(un + ".conv", specs[u], rng);
      st.units.push_back(unit);
    }
    return st;
  }

  detail::AttentionSlot add_attention(const std::string& name, const CastBlockConfig& bc, std::size_t t_len,
                                      std::mt19937_64& rng) {
    detail::AttentionSlot a;
    a.cfg = {bc.channels, bc.heads, bc.head_dim, bc.attn_window, t_len};
    a.cfg.validate();
    const std::size_t c = bc.channels;
    const double proj_std = std::sqrt(1.0 / c);
    a.pos = add_param(name + ".pos_emb", {t_len, c}, 0.02, rng);
    const Shape w = ConvSpec::pointwise(c, c).weight_shape();
    a.wq = add_param(name + ".q.weight", w, proj_std, rng);
    a.bq = add_param(name + ".q.bias", {c}, 0.0, rng);
    a.wk = add_param(name + ".k.weight", w, proj_std, rng);
    a.bk = add_param(name + ".k.bias", {c}, 0.0, rng);
    a.wv = add_param(name + ".v.weight", w, proj_std, rng);
    a.bv = add_param(name + ".v.bias", {c}, 0.0, rng);
    a.wo = add_param(name + ".o.weight", w, proj_std, rng);
    a.bo = add_param(name + ".o.bias", {c}, 0.0, rng);
    a.norm = add_norm(name + ".norm", c);
    return a;
  }

  ModelConfig config_;
  NumericMode mode_;
  Storage storage_ = Storage::full;
  std::vector<Parameter<T>> params_;
  std::vector<std::pair<std::string, BatchNormState<T>>> norms_;
  std::vector<detail::BlockSlot> blocks_;
  std::size_t head_weight_ = 0, head_bias_ = 0;
  std::mt19937_64 dummy_rng_{0};
};

template <class T>
Ca3dModel<T> build_model(const ModelConfig& config, std::uint64_t seed, NumericMode mode) {
  return Ca3dModel<T>(config, seed, mode);
}

// ---------------------------------------------------------------------------
// Analytic accounting, derived from the config alone.

struct LayerCost {
  std::string name;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
  Shape output;  // (C, T, H, W)
};

struct Footprint {
  std::vector<LayerCost> layers;
  std::size_t counted_layers = 0;  // convs + attention (as one) + classifier
  std::vector<Shape> block_outputs;

  std::uint64_t params() const {
    std::uint64_t n = 0;
    for (const LayerCost& l : layers) n += l.params;
    return n;
  }
  std::uint64_t macs() const {
    std::uint64_t n = 0;
    for (const LayerCost& l : layers) n += l.macs;
    return n;
  }
  double gflops() const { return 2.0 * static_cast<double>(macs()) / 1e9; }
};

/// Per-layer parameters and MACs for one clip of the config's input shape.
inline Footprint analyze(const ModelConfig& config) {
  config.validate();
  Footprint fp;
  std::size_t c = config.input_channels, t = config.input_t, h = config.input_h, w = config.input_w;
  auto conv = [&](const std::string& name, const ConvSpec& spec) {
    const ConvGeometry g{spec.in_channels, t, h, w, spec.kt, spec.kh, spec.kw,
                         spec.st,          spec.sh, spec.sw, spec.pt, spec.ph, spec.pw};
    t = g.out_t();
    h = g.out_h();
    w = g.out_w();
    c = spec.out_channels;
    fp.layers.push_back({name, spec.param_count(),
                         static_cast<std::uint64_t>(spec.out_channels) * g.patch() * g.positions(),
                         {c, t, h, w}});
    ++fp.counted_layers;
  };
  auto norm_params = [&](const std::string& name, std::size_t ch) {
    fp.layers.push_back({name, 2 * ch, 0, {c, t, h, w}});
  };
  auto stage = [&](const std::string& name, bool spatial) {
    const std::size_t ch = c;
    auto k3 = [&](std::size_t cin, std::size_t cout) {
      return spatial ? ConvSpec::spatial(cin, cout, 3, 1, 1) : ConvSpec::temporal(cin, cout, 3, 1, 1);
    };
    std::vector<ConvSpec> specs;
    if (config.column_style == ColumnStyle::basic) {
      specs = {k3(ch, ch), k3(ch, ch)};
    } else {
      specs = {ConvSpec::pointwise(ch, ch / 4), k3(ch / 4, ch / 4), ConvSpec::pointwise(ch / 4, ch)};
    }
    for (std::size_t u = 0; u < specs.size(); ++u) {
      norm_params(name + ".unit" + std::to_string(u) + ".norm", specs[u].in_channels);
      conv(name + ".unit" + std::to_string(u) + ".conv", specs[u]);
    }
  };
  for (std::size_t i = 0; i < config.blocks.size(); ++i) {
    const CastBlockConfig& b = config.blocks[i];
    const std::string prefix = "block" + std::to_string(i + 1);
    conv(prefix + ".conv", ConvSpec::spatial(c, b.channels, b.spatial_kernel, b.spatial_stride,
                                             detail::same_padding(b.spatial_kernel)));
    norm_params(prefix + ".norm", b.channels);
    for (std::size_t s = 0; s < b.spatial_column_stages; ++s) stage(prefix + ".spatial" + std::to_string(s), true);
    if (b.has_temporal_attention) {
      const AttentionConfig cfg{c, b.heads, b.head_dim, b.attn_window, t};
      const std::uint64_t params = t * c + 4 * (c * c + c);
      fp.layers.push_back({prefix + ".attn", params, local_mhsa_macs(cfg, 1, t, h * w), {c, t, h, w}});
      ++fp.counted_layers;
      norm_params(prefix + ".attn.norm", c);
    }
    for (std::size_t s = 0; s < b.temporal_column_stages; ++s) stage(prefix + ".temporal" + std::to_string(s), false);
    if (b.temporal_pool && t >= b.temporal_pool->size) t = (t - b.temporal_pool->size) / b.temporal_pool->stride + 1;
    fp.block_outputs.push_back({c, t, h, w});
  }
  fp.layers.push_back({"head", static_cast<std::uint64_t>(config.num_classes) * c + config.num_classes,
                       static_cast<std::uint64_t>(config.num_classes) * c, {config.num_classes, 1, 1, 1}});
  ++fp.counted_layers;
  return fp;
}

/// GFLOPs (2 per MAC) for one clip of `config`'s input shape.
inline double estimate_flops(const ModelConfig& config) { return analyze(config).gflops(); }

/// Convs, attention layers (one each) and the classifier.
inline std::size_t count_layers(const ModelConfig& config) { return analyze(config).counted_layers; }

// ---------------------------------------------------------------------------
// Canonical text form of a config (also embedded in checkpoints).

inline std::string to_string(ColumnStyle s) { return s == ColumnStyle::basic ? "basic" : "bottleneck"; }

inline std::string config_to_text(const ModelConfig& c) {
  std::ostringstream os;
  os << "num_classes = " << c.num_classes << '\n';
  os.precision(17);
  os << "dropout_rate = " << c.dropout_rate << '\n';
  os << "input = " << c.input_channels << ',' << c.input_t << ',' << c.input_h << ',' << c.input_w << '\n';
  os << "column_style = " << to_string(c.column_style) << '\n';
  os << "zero_init_residual = " << (c.zero_init_residual ? 1 : 0) << '\n';
  os << "blocks = " << c.blocks.size() << '\n';
  for (std::size_t i = 0; i < c.blocks.size(); ++i) {
    const CastBlockConfig& b = c.blocks[i];
    os << "block" << i + 1 << " = " << b.channels << ',' << b.spatial_kernel << ',' << b.spatial_stride << ','
       << b.spatial_column_stages << ',' << (b.has_temporal_attention ? 1 : 0) << ',' << b.heads << ','
       << b.head_dim << ',' << b.attn_window << ',' << b.temporal_column_stages << ','
       << (b.temporal_pool ? b.temporal_pool->size : 0) << ',' << (b.temporal_pool ? b.temporal_pool->stride : 0)
       << '\n';
  }
  return os.str();
}

inline ModelConfig config_from_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) throw std::runtime_error("malformed config line: '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 3);
  }
  auto get = [&](const std::string& k) {
    const auto it = kv.find(k);
    if (it == kv.end()) throw std::runtime_error("config text missing key '" + k + "'");
    return it->second;
  };
  auto numbers = [](const std::string& s) {
    std::vector<std::size_t> out;
    std::istringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ',')) out.push_back(std::stoull(part));
    return out;
  };
  ModelConfig c;
  c.num_classes = std::stoull(get("num_classes"));
  c.dropout_rate = std::stod(get("dropout_rate"));
  const auto in = numbers(get("input"));
  if (in.size() != 4) throw std::runtime_error("config text: input needs 4 dims");
  c.input_channels = in[0];
  c.input_t = in[1];
  c.input_h = in[2];
  c.input_w = in[3];
  const std::string style = get("column_style");
  if (style != "basic" && style != "bottleneck") throw std::runtime_error("config text: bad column_style");
  c.column_style = style == "basic" ? ColumnStyle::basic : ColumnStyle::bottleneck;
  const std::string zr = get("zero_init_residual");
  if (zr != "0" && zr != "1") throw std::runtime_error("config text: zero_init_residual must be 0 or 1");
  c.zero_init_residual = zr == "1";
  const std::size_t nblocks = std::stoull(get("blocks"));
  for (std::size_t i = 0; i < nblocks; ++i) {
    const auto v = numbers(get("block" + std::to_string(i + 1)));
    if (v.size() != 11) throw std::runtime_error("config text: block needs 11 fields");
    CastBlockConfig b{v[0], v[1], v[2], v[3], v[4] != 0, v[5], v[6], v[7], v[8], std::nullopt};
    if (v[9] != 0) b.temporal_pool = TemporalPool{v[9], v[10]};
    c.blocks.push_back(b);
  }
  c.validate();
  return c;
}

}  // namespace ca3d
