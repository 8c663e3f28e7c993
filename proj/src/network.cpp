#include "cunet/network.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cunet/byteio.hpp"
#include "cunet/error.hpp"
#include "cunet/ops.hpp"

namespace cunet {

namespace {

constexpr std::string_view kParamMagic = "CUNETP1";
constexpr std::size_t kConvKernel = 3;

}  // namespace

NetConfig NetConfig::full() { return scaled(16, 5); }

NetConfig NetConfig::scaled(std::size_t base_width, std::size_t depth) {
  NetConfig cfg;
  cfg.base_width = base_width;
  cfg.depth = depth;
  cfg.encoder_widths.clear();
  std::size_t w = 2 * base_width;
  for (std::size_t i = 0; i < depth; ++i, w *= 2) cfg.encoder_widths.push_back(w);
  return cfg;
}

void NetConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ContractError("NetConfig: " + msg); };
  if (in_modalities == 0) fail("in_modalities must be positive");
  if (num_classes < 2) fail("num_classes must be at least 2");
  if (base_width < 2 || base_width % 2 != 0) fail("base_width must be even and >= 2");
  if (depth == 0) fail("depth must be positive");
  if (encoder_widths.size() != depth) {
    fail("encoder_widths has " + std::to_string(encoder_widths.size()) + " entries for depth " +
         std::to_string(depth));
  }
  if (encoder_widths[0] != 2 * base_width) fail("encoder_widths[0] must equal 2 * base_width");
  for (std::size_t i = 1; i < encoder_widths.size(); ++i) {
    if (encoder_widths[i] != 2 * encoder_widths[i - 1]) {
      fail("encoder_widths must double at every level (index " + std::to_string(i) + ")");
    }
  }
  if (rib_rates.empty()) fail("rib_rates must not be empty");
  for (std::size_t i = 0; i < rib_rates.size(); ++i) {
    if (rib_rates[i] == 0) fail("rib_rates must be positive");
    if (i > 0 && rib_rates[i] <= rib_rates[i - 1]) fail("rib_rates must be strictly increasing");
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail("dropout_rate must lie in [0, 1)");
}

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::Input: return "input";
    case LayerKind::Conv: return "conv";
    case LayerKind::InstanceNorm: return "instance_norm";
    case LayerKind::Relu: return "relu";
    case LayerKind::Dropout: return "dropout";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::Upsample: return "upsample";
    case LayerKind::Concat: return "concat";
    case LayerKind::Add: return "add";
    case LayerKind::Softmax: return "softmax";
  }
  return "?";
}

std::size_t LayerGraph::push(LayerNode node) {
  nodes_.push_back(std::move(node));
  output_ = nodes_.size() - 1;
  return output_;
}

std::size_t LayerGraph::checked(std::size_t id) const {
  if (id >= nodes_.size()) throw ContractError("layer graph: unknown node " + std::to_string(id));
  return id;
}

std::size_t LayerGraph::add_input(std::size_t channels) {
  for (const auto& n : nodes_) {
    if (n.kind == LayerKind::Input) throw ContractError("layer graph: input already defined");
  }
  LayerNode n;
  n.kind = LayerKind::Input;
  n.name = "input";
  n.channels = channels;
  return push(std::move(n));
}

std::size_t LayerGraph::add_conv(const std::string& name, std::size_t input,
                                 std::size_t out_channels, std::size_t kernel,
                                 std::size_t dilation) {
  const LayerNode& src = nodes_.at(checked(input));
  if (kernel % 2 == 0) throw ContractError("layer graph: conv kernels must be odd");
  LayerNode n;
  n.kind = LayerKind::Conv;
  n.name = name;
  n.inputs = {input};
  n.channels = out_channels;
  n.level = src.level;
  n.kernel = kernel;
  n.dilation = dilation;
  n.weight = name + ".weight";
  n.bias = name + ".bias";
  for (const auto& p : {n.weight, n.bias}) {
    if (params_.count(p)) throw ContractError("layer graph: duplicate parameter " + p);
  }
  params_[n.weight] = Tensor::zeros({out_channels, src.channels, kernel, kernel, kernel});
  params_[n.bias] = Tensor::zeros({out_channels});
  param_order_.push_back(n.weight);
  param_order_.push_back(n.bias);
  return push(std::move(n));
}

namespace {

LayerNode unary(LayerKind kind, const LayerNode& src, std::size_t input) {
  LayerNode n;
  n.kind = kind;
  n.name = layer_kind_name(kind);
  n.inputs = {input};
  n.channels = src.channels;
  n.level = src.level;
  return n;
}

}  // namespace

std::size_t LayerGraph::add_instance_norm(std::size_t input) {
  return push(unary(LayerKind::InstanceNorm, nodes_.at(checked(input)), input));
}

std::size_t LayerGraph::add_relu(std::size_t input) {
  return push(unary(LayerKind::Relu, nodes_.at(checked(input)), input));
}

std::size_t LayerGraph::add_dropout(std::size_t input, double rate) {
  LayerNode n = unary(LayerKind::Dropout, nodes_.at(checked(input)), input);
  n.rate = rate;
  return push(std::move(n));
}

std::size_t LayerGraph::add_maxpool(std::size_t input) {
  LayerNode n = unary(LayerKind::MaxPool, nodes_.at(checked(input)), input);
  n.level += 1;
  return push(std::move(n));
}

std::size_t LayerGraph::add_upsample(std::size_t input) {
  LayerNode n = unary(LayerKind::Upsample, nodes_.at(checked(input)), input);
  if (n.level == 0) throw ContractError("layer graph: upsample above the input resolution");
  n.level -= 1;
  return push(std::move(n));
}

std::size_t LayerGraph::add_concat(const std::vector<std::size_t>& inputs) {
  if (inputs.empty()) throw ContractError("layer graph: concat without inputs");
  LayerNode n;
  n.kind = LayerKind::Concat;
  n.name = "concat";
  n.inputs = inputs;
  n.level = nodes_.at(checked(inputs[0])).level;
  for (std::size_t id : inputs) {
    const LayerNode& src = nodes_.at(checked(id));
    if (src.level != n.level) throw ContractError("layer graph: concat across resolution levels");
    n.channels += src.channels;
  }
  return push(std::move(n));
}

std::size_t LayerGraph::add_add(const std::vector<std::size_t>& inputs) {
  if (inputs.size() < 2) throw ContractError("layer graph: add needs two or more inputs");
  LayerNode n;
  n.kind = LayerKind::Add;
  n.name = "add";
  n.inputs = inputs;
  const LayerNode& first = nodes_.at(checked(inputs[0]));
  n.level = first.level;
  n.channels = first.channels;
  for (std::size_t id : inputs) {
    const LayerNode& src = nodes_.at(checked(id));
    if (src.level != n.level || src.channels != n.channels) {
      throw ContractError("layer graph: add of mismatched operands (" +
                          std::to_string(src.channels) + " vs " + std::to_string(n.channels) +
                          " channels)");
    }
  }
  return push(std::move(n));
}

std::size_t LayerGraph::add_softmax(std::size_t input) {
  return push(unary(LayerKind::Softmax, nodes_.at(checked(input)), input));
}

void LayerGraph::set_output(std::size_t id) { output_ = checked(id); }

void LayerGraph::mark(const std::string& tag, std::size_t id) { marks_[tag] = checked(id); }

std::size_t LayerGraph::input_channels() const {
  for (const auto& n : nodes_) {
    if (n.kind == LayerKind::Input) return n.channels;
  }
  throw ContractError("layer graph: no input node");
}

std::size_t LayerGraph::max_level() const {
  std::size_t m = 0;
  for (const auto& n : nodes_) m = std::max(m, n.level);
  return m;
}

const Tensor& LayerGraph::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("layer graph: no parameter named " + name);
  return it->second;
}

Tensor& LayerGraph::param(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("layer graph: no parameter named " + name);
  return it->second;
}

std::vector<Tensor> LayerGraph::parameters() const {
  std::vector<Tensor> out;
  for (const auto& name : param_order_) out.push_back(params_.at(name));
  return out;
}

std::size_t LayerGraph::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

void LayerGraph::initialize(std::uint64_t seed) {
  Rng rng(seed);
  for (const auto& name : param_order_) {
    Tensor& t = params_.at(name);
    auto values = t.mutable_data();
    if (t.rank() == 1) {
      std::fill(values.begin(), values.end(), 0.0);
      continue;
    }
    const std::size_t fan_in = t.numel() / t.dim(0);
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (double& v : values) v = rng.uniform(-bound, bound);
  }
}

void LayerGraph::set_requires_grad(bool value) {
  for (auto& [name, t] : params_) t.set_requires_grad(value);
}

void LayerGraph::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

void LayerGraph::check_patch(const std::array<std::size_t, 3>& patch) const {
  const std::size_t divisor = std::size_t{1} << max_level();
  constexpr const char* axes[3] = {"depth", "height", "width"};
  for (int a = 0; a < 3; ++a) {
    if (patch[a] == 0 || patch[a] % divisor != 0) {
      throw ContractError("patch " + std::string(axes[a]) + " extent " + std::to_string(patch[a]) +
                          " is not divisible by " + std::to_string(divisor));
    }
  }
}

Tensor LayerGraph::forward(const Tensor& input, const ForwardOptions& opts) const {
  if (input.rank() != 5) {
    throw ContractError("forward: input must be order-5, got " + shape_str(input.shape()));
  }
  if (input.dim(1) != input_channels()) {
    throw ContractError("forward: input has " + std::to_string(input.dim(1)) +
                        " channels, graph expects " + std::to_string(input_channels()));
  }
  check_patch({input.dim(2), input.dim(3), input.dim(4)});

  // Release activations after their last consumer when no tape is recorded.
  std::vector<std::size_t> last_use(nodes_.size(), 0);
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    for (std::size_t in : nodes_[i].inputs) last_use[in] = i;
  last_use[output_] = nodes_.size();
  const bool release = !grad_enabled();

  std::vector<Tensor> values(nodes_.size());
  for (std::size_t i = 0; i <= output_; ++i) {
    const LayerNode& n = nodes_[i];
    auto in = [&](std::size_t k) -> const Tensor& { return values[n.inputs[k]]; };
    switch (n.kind) {
      case LayerKind::Input:
        values[i] = input;
        break;
      case LayerKind::Conv:
        values[i] = ops::conv3d(in(0), params_.at(n.weight), params_.at(n.bias),
                                ops::Conv3dOptions::same(n.kernel, n.dilation));
        break;
      case LayerKind::InstanceNorm:
        values[i] = ops::instance_norm(in(0));
        break;
      case LayerKind::Relu:
        values[i] = ops::relu(in(0));
        break;
      case LayerKind::Dropout:
        if (opts.training && n.rate > 0.0) {
          if (!opts.rng) throw ContractError("forward: training with dropout needs an rng");
          values[i] = ops::dropout(in(0), n.rate, *opts.rng, true);
        } else {
          values[i] = in(0);
        }
        break;
      case LayerKind::MaxPool:
        values[i] = ops::maxpool3d(in(0));
        break;
      case LayerKind::Upsample:
        values[i] = ops::upsample3d_trilinear(in(0));
        break;
      case LayerKind::Concat: {
        std::vector<Tensor> parts;
        for (std::size_t id : n.inputs) parts.push_back(values[id]);
        values[i] = ops::concat(parts);
        break;
      }
      case LayerKind::Add: {
        Tensor acc = in(0);
        for (std::size_t k = 1; k < n.inputs.size(); ++k) acc = ops::add(acc, in(k));
        values[i] = acc;
        break;
      }
      case LayerKind::Softmax:
        values[i] = ops::softmax_channels(in(0));
        break;
    }
    if (release) {
      for (std::size_t id : n.inputs)
        if (last_use[id] == i) values[id] = Tensor();
    }
  }
  return values[output_];
}

std::size_t add_conv_unit(LayerGraph& g, const std::string& name, std::size_t input,
                          std::size_t out_channels, std::size_t dilation) {
  const std::size_t conv = g.add_conv(name, input, out_channels, kConvKernel, dilation);
  return g.add_relu(g.add_instance_norm(conv));
}

std::size_t build_dense_block(LayerGraph& g, std::size_t input, std::size_t in_c,
                              const std::string& name, double dropout_rate, std::size_t out_c) {
  if (in_c == 0 || in_c % 2 != 0) {
    throw ContractError("dense block " + name + ": input channels must be even, got " +
                        std::to_string(in_c));
  }
  if (g.node(input).channels != in_c) {
    throw ContractError("dense block " + name + ": node has " +
                        std::to_string(g.node(input).channels) + " channels, expected " +
                        std::to_string(in_c));
  }
  if (out_c == 0) out_c = 2 * in_c;
  const std::size_t mid = in_c / 2;
  std::size_t l1 = add_conv_unit(g, name + ".conv1", input, mid);
  if (dropout_rate > 0.0) l1 = g.add_dropout(l1, dropout_rate);
  const std::size_t l2 = add_conv_unit(g, name + ".conv2", g.add_concat({input, l1}), mid);
  return add_conv_unit(g, name + ".conv3", g.add_concat({input, l1, l2}), out_c);
}

std::size_t build_rib(LayerGraph& g, std::size_t input, std::size_t in_c, std::size_t out_c,
                      const std::vector<std::size_t>& rates, const std::string& name) {
  if (in_c == 0 || out_c == 0) throw ContractError("rib " + name + ": channels must be positive");
  if (g.node(input).channels != in_c) {
    throw ContractError("rib " + name + ": node has " + std::to_string(g.node(input).channels) +
                        " channels, expected " + std::to_string(in_c));
  }
  std::vector<std::size_t> seen{input};
  std::vector<std::size_t> branches;
  for (std::size_t rate : rates) {
    const std::size_t src = seen.size() == 1 ? input : g.add_concat(seen);
    const std::size_t b =
        add_conv_unit(g, name + ".branch_d" + std::to_string(rate), src, out_c, rate);
    branches.push_back(b);
    seen.push_back(b);
  }
  std::size_t residual = input;
  if (in_c != out_c) residual = g.add_conv(name + ".proj", input, out_c, 1);
  branches.push_back(residual);
  return g.add_add(branches);
}

LayerGraph build_network(const NetConfig& cfg) {
  cfg.validate();
  LayerGraph g;
  const std::size_t x = g.add_input(cfg.in_modalities);
  const std::size_t half = cfg.base_width / 2;
  const std::size_t stem_conv = add_conv_unit(g, "stem.conv", x, half);
  const std::size_t stem_rib = build_rib(g, x, cfg.in_modalities, half, cfg.rib_rates, "stem.rib");
  std::size_t cur = g.add_concat({stem_conv, stem_rib});
  g.mark("stem", cur);
  std::size_t cur_c = cfg.base_width;

  std::vector<std::size_t> skips;
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    cur = build_dense_block(g, cur, cur_c, "enc" + std::to_string(l) + ".dense",
                            cfg.dropout_rate);
    cur_c = cfg.encoder_widths[l];
    skips.push_back(cur);
    g.mark("encoder" + std::to_string(l), cur);
    if (l + 1 < cfg.depth) cur = g.add_maxpool(cur);
  }
  for (std::size_t l = cfg.depth - 1; l-- > 0;) {
    const std::size_t width = cfg.encoder_widths[l];
    const std::string prefix = "dec" + std::to_string(l);
    cur = g.add_upsample(cur);
    cur = build_rib(g, cur, cur_c, width, cfg.rib_rates, prefix + ".rib");
    cur = g.add_add({cur, skips[l]});
    cur = build_dense_block(g, cur, width, prefix + ".dense", cfg.dropout_rate, width);
    cur_c = width;
  }
  const std::size_t logits = g.add_conv("head", cur, cfg.num_classes, 1);
  g.set_output(g.add_softmax(logits));
  g.initialize(cfg.init_seed);
  return g;
}

ArchReport inspect(const LayerGraph& graph, const std::array<std::size_t, 3>& patch) {
  graph.check_patch(patch);
  ArchReport r;
  r.parameter_count = graph.parameter_count();
  r.layer_convention =
      "conv_layers counts every convolution (3x3x3 units, 1x1x1 RIB projections and the 1x1x1 "
      "head); normalization, activation, pooling, upsampling, concat and add are not counted";

  // Receptive field along one axis, tracked as (extent, jump) per node.
  std::vector<double> rf(graph.nodes().size(), 1.0), jump(graph.nodes().size(), 1.0);
  const auto& nodes = graph.nodes();
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const LayerNode& n = nodes[i];
    if (!n.inputs.empty()) {
      for (std::size_t in : n.inputs) {
        rf[i] = std::max(rf[i], rf[in]);
        jump[i] = jump[in];
      }
    }
    switch (n.kind) {
      case LayerKind::Conv:
        ++r.conv_layers;
        if (n.kernel == 1) ++r.conv1_layers;
        else ++r.conv3_layers;
        rf[i] += static_cast<double>(n.dilation * (n.kernel - 1)) * jump[i];
        break;
      case LayerKind::MaxPool:
        rf[i] += jump[i];
        jump[i] *= 2.0;
        break;
      case LayerKind::Upsample:
        jump[i] /= 2.0;
        break;
      default:
        break;
    }
  }
  r.receptive_field = static_cast<std::size_t>(rf[graph.output()]);

  if (auto it = graph.marks().find("stem"); it != graph.marks().end()) {
    r.stem_width = nodes[it->second].channels;
  }
  for (std::size_t l = 0;; ++l) {
    auto it = graph.marks().find("encoder" + std::to_string(l));
    if (it == graph.marks().end()) break;
    const LayerNode& e = nodes[it->second];
    r.encoder_widths.push_back(e.channels);
    const std::size_t s = std::size_t{1} << e.level;
    r.encoder_shapes.push_back({e.level, e.channels, {patch[0] / s, patch[1] / s, patch[2] / s}});
  }
  return r;
}

std::vector<std::uint8_t> encode_tensor_table(const std::map<std::string, Tensor>& table) {
  byteio::Writer w;
  w.text(kParamMagic);
  w.u32(static_cast<std::uint32_t>(table.size()));
  for (const auto& [name, t] : table) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.text(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) w.u64(e);
    for (double v : t.data()) w.f64(v);
  }
  return w.take();
}

std::map<std::string, Tensor> decode_tensor_table(const std::vector<std::uint8_t>& bytes) {
  byteio::Reader r(bytes);
  const std::string magic = r.text(kParamMagic.size());
  if (magic != kParamMagic) throw FormatError("parameter file: bad magic");
  const std::uint32_t count = r.u32();
  std::map<std::string, Tensor> table;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.text(r.u32());
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) throw FormatError("parameter file: bad rank for " + name);
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& e : shape) {
      e = r.u64();
      if (e == 0 || e > (std::size_t{1} << 32)) {
        throw FormatError("parameter file: bad extent for " + name);
      }
      n *= e;
    }
    if (n * 8 > r.remaining()) {
      throw FormatError("unexpected EOF at byte " + std::to_string(bytes.size()));
    }
    std::vector<double> values(n);
    for (double& v : values) v = r.f64();
    if (!table.emplace(name, Tensor::from_data(shape, std::move(values))).second) {
      throw FormatError("parameter file: duplicate entry " + name);
    }
  }
  if (r.remaining() != 0) throw FormatError("parameter file: trailing bytes");
  return table;
}

std::vector<std::uint8_t> encode_params(const LayerGraph& graph) {
  std::map<std::string, Tensor> table;
  for (const auto& name : graph.param_names()) table.emplace(name, graph.param(name));
  return encode_tensor_table(table);
}

void decode_params(LayerGraph& graph, const std::vector<std::uint8_t>& bytes) {
  const auto table = decode_tensor_table(bytes);
  std::vector<std::string> problems;
  for (const auto& name : graph.param_names()) {
    auto it = table.find(name);
    if (it == table.end()) {
      problems.push_back("missing " + name);
    } else if (it->second.shape() != graph.param(name).shape()) {
      problems.push_back("shape mismatch for " + name + ": file " + shape_str(it->second.shape()) +
                         ", graph " + shape_str(graph.param(name).shape()));
    }
  }
  for (const auto& [name, t] : table) {
    const auto& names = graph.param_names();
    if (std::find(names.begin(), names.end(), name) == names.end()) {
      problems.push_back("unexpected " + name);
    }
  }
  if (!problems.empty()) {
    std::ostringstream os;
    os << "parameter file does not match graph; first mismatch: " << problems.front() << " ("
       << problems.size() << " total)";
    for (const auto& p : problems) os << "\n  " << p;
    throw FormatError(os.str());
  }
  for (const auto& name : graph.param_names()) {
    const auto src = table.at(name).data();
    auto dst = graph.param(name).mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

void save_params(const LayerGraph& graph, const std::filesystem::path& path) {
  byteio::write_file(path, encode_params(graph));
}

void load_params(LayerGraph& graph, const std::filesystem::path& path) {
  decode_params(graph, byteio::read_file(path));
}

}  // namespace cunet
