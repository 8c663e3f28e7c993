#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cunet/rng.hpp"
#include "cunet/tensor.hpp"

namespace cunet {

// Hyperparameters of the dense encoder-decoder. Encoder level i emits
// encoder_widths[i] channels; the stem emits base_width.
struct NetConfig {
  std::size_t in_modalities = 4;
  std::size_t num_classes = 4;
  std::size_t base_width = 16;
  std::vector<std::size_t> encoder_widths{32, 64, 128, 256, 512};
  std::vector<std::size_t> rib_rates{1, 3, 5};
  double dropout_rate = 0.2;
  std::size_t depth = 5;
  std::uint64_t init_seed = 0;

  // Full-width network: stem 16, levels 32..512.
  static NetConfig full();
  // Widths derived by doubling from base_width over `depth` levels.
  static NetConfig scaled(std::size_t base_width, std::size_t depth);
  // Laptop preset: base 4, depth 3.
  static NetConfig desk() { return scaled(4, 3); }

  void validate() const;
};

enum class LayerKind { Input, Conv, InstanceNorm, Relu, Dropout, MaxPool, Upsample, Concat, Add, Softmax };

const char* layer_kind_name(LayerKind kind);

struct LayerNode {
  LayerKind kind = LayerKind::Input;
  std::string name;
  std::vector<std::size_t> inputs;
  std::size_t channels = 0;  // output channels
  std::size_t level = 0;     // number of 2x downsamplings applied to the input grid
  // Conv
  std::size_t kernel = 0;
  std::size_t dilation = 1;
  std::string weight;
  std::string bias;
  // Dropout
  double rate = 0.0;
};

struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;  // required when training with dropout
};

// Declarative network: an append-only node list (hence topologically ordered)
// plus a named parameter store.
class LayerGraph {
 public:
  std::size_t add_input(std::size_t channels);
  std::size_t add_conv(const std::string& name, std::size_t input, std::size_t out_channels,
                       std::size_t kernel, std::size_t dilation = 1);
  std::size_t add_instance_norm(std::size_t input);
  std::size_t add_relu(std::size_t input);
  std::size_t add_dropout(std::size_t input, double rate);
  std::size_t add_maxpool(std::size_t input);
  std::size_t add_upsample(std::size_t input);
  std::size_t add_concat(const std::vector<std::size_t>& inputs);
  std::size_t add_add(const std::vector<std::size_t>& inputs);
  std::size_t add_softmax(std::size_t input);
  void set_output(std::size_t id);

  // Named landmarks (e.g. "stem", "encoder2") used by inspect().
  void mark(const std::string& tag, std::size_t id);
  const std::map<std::string, std::size_t>& marks() const { return marks_; }

  const std::vector<LayerNode>& nodes() const { return nodes_; }
  const LayerNode& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t output() const { return output_; }
  std::size_t input_channels() const;
  std::size_t output_channels() const { return nodes_.at(output_).channels; }
  // Largest downsampling level reached anywhere in the graph.
  std::size_t max_level() const;

  // Parameters in creation order; names are unique.
  const std::vector<std::string>& param_names() const { return param_order_; }
  const Tensor& param(const std::string& name) const;
  Tensor& param(const std::string& name);
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;

  // Fan-in scaled uniform weights (bound sqrt(6 / fan_in)), zero biases.
  void initialize(std::uint64_t seed);
  void set_requires_grad(bool value);
  void zero_grad();

  // Throws when a patch extent is not divisible by 2^max_level().
  void check_patch(const std::array<std::size_t, 3>& patch) const;

  Tensor forward(const Tensor& input, const ForwardOptions& opts = {}) const;

 private:
  std::size_t push(LayerNode node);
  std::size_t checked(std::size_t id) const;

  std::vector<LayerNode> nodes_;
  std::size_t output_ = 0;
  std::map<std::string, Tensor> params_;
  std::vector<std::string> param_order_;
  std::map<std::string, std::size_t> marks_;
};

// Conv(3^3, same padding) -> instance norm -> ReLU.
std::size_t add_conv_unit(LayerGraph& g, const std::string& name, std::size_t input,
                          std::size_t out_channels, std::size_t dilation = 1);

// Three conv units with dense wiring: unit l sees concat(block input, outputs
// of units 1..l-1). Units 1 and 2 emit in_c/2 channels, unit 3 emits
// out_c (default 2*in_c). Dropout follows unit 1 when rate > 0.
std::size_t build_dense_block(LayerGraph& g, std::size_t input, std::size_t in_c,
                              const std::string& name, double dropout_rate = 0.2,
                              std::size_t out_c = 0);

// Residual-inception block: branches with increasing dilation, each branch
// seeing the block input plus all earlier branch outputs; output is the sum of
// all branches plus the (1^3-projected when in_c != out_c) input.
std::size_t build_rib(LayerGraph& g, std::size_t input, std::size_t in_c, std::size_t out_c,
                      const std::vector<std::size_t>& rates, const std::string& name);

LayerGraph build_network(const NetConfig& cfg);

struct LevelShape {
  std::size_t level;
  std::size_t channels;
  std::array<std::size_t, 3> extent;
};

struct ArchReport {
  std::size_t parameter_count = 0;
  std::size_t conv_layers = 0;
  std::size_t conv3_layers = 0;   // 3x3x3 convolutions
  std::size_t conv1_layers = 0;   // 1x1x1 projections and head
  std::size_t stem_width = 0;
  std::vector<std::size_t> encoder_widths;
  std::vector<LevelShape> encoder_shapes;
  std::size_t receptive_field = 0;  // voxels per axis at the output
  std::string layer_convention;
};

ArchReport inspect(const LayerGraph& graph, const std::array<std::size_t, 3>& patch);

// "CUNETP1" parameter container; see docs/formats.md.
std::vector<std::uint8_t> encode_params(const LayerGraph& graph);
void decode_params(LayerGraph& graph, const std::vector<std::uint8_t>& bytes);
void save_params(const LayerGraph& graph, const std::filesystem::path& path);
void load_params(LayerGraph& graph, const std::filesystem::path& path);

// Generic named-tensor table in the same container format.
std::vector<std::uint8_t> encode_tensor_table(const std::map<std::string, Tensor>& table);
std::map<std::string, Tensor> decode_tensor_table(const std::vector<std::uint8_t>& bytes);

}  // namespace cunet
