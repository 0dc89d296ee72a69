#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "cbd/tensor.hpp"

namespace cbd {

struct Dataset;

enum class Mode { train, eval };
enum class ParamMask { all, bn_only };

struct ConvSpec {
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int pad = 1;
};
struct BatchNormSpec {
  float momentum = 0.1f;
  float epsilon = 1e-5f;
};
struct ReluSpec {};
struct MaxPoolSpec {
  int size = 2;  // stride == size
};
struct FlattenSpec {};
struct DenseSpec {
  int out_features = 0;
};

using LayerSpec = std::variant<ConvSpec, BatchNormSpec, ReluSpec, MaxPoolSpec, FlattenSpec, DenseSpec>;

struct NetworkConfig {
  std::vector<int> input_shape;  // {C,H,W}
  int classes = 0;
  std::vector<LayerSpec> layers;

  // 2 x (conv3x3 -> BN -> ReLU -> maxpool2) -> dense head.
  static NetworkConfig reference(int conv1 = 16, int conv2 = 32, int classes = 10,
                                 float bn_momentum = 0.1f, float bn_epsilon = 1e-5f);

  // Shape of each layer's output, in order; throws ConfigError when the
  // stack does not compose.
  std::vector<std::vector<int>> output_shapes() const;

  std::string to_text() const;
  static NetworkConfig from_text(const std::string& text);
};

// Per-channel affine + running statistics of one batch-normalization layer.
struct BatchNormState {
  Tensor gamma, beta;              // [C]
  Tensor running_mean, running_var;  // [C]
  float momentum = 0.1f;
  float epsilon = 1e-5f;
};

struct Layer {
  LayerSpec spec;
  Tensor weight, bias;  // conv: [out,in,k,k]/[out]; dense: [out,in]/[out]
  BatchNormState bn;
};

// Captures everything the backward pass needs from one forward pass.
struct ForwardTrace {
  Mode mode = Mode::eval;
  std::vector<Tensor> acts;  // acts[0] = input, acts[i+1] = output of layer i
  std::map<int, std::vector<int>> pool_argmax;  // layer index -> flat argmax per output element
  std::map<int, Tensor> bn_xhat;                // layer index -> normalized activations
  std::map<int, Tensor> bn_mean, bn_var;        // layer index -> batch stats (train mode)
};

struct Network {
  NetworkConfig config;
  std::vector<Layer> layers;

  static Network init(const NetworkConfig& cfg, std::uint64_t seed);

  int last_conv_index() const;  // -1 when the net has no conv layer
  bool has_batchnorm() const;

  // All tensors in fixed order (parameters plus BN running stats), with
  // stable names like "conv1.weight" or "bn2.running_mean".
  std::vector<std::pair<std::string, Tensor*>> named_tensors();
  std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;
  Tensor* find_tensor(const std::string& name);
};

using GradientMap = std::map<std::string, Tensor>;

// Forward pass over a [B,C,H,W] batch. Train mode updates BN running stats;
// eval mode mutates nothing.
Tensor forward(Network& net, const Tensor& batch, Mode mode, ForwardTrace* trace = nullptr);

// Eval forward of a single [C,H,W] image returning every layer's output.
std::pair<Tensor, std::vector<Tensor>> forward_with_activations(Network& net, const Tensor& image);

// Mean cross-entropy over softmax(logits); optionally writes dloss/dlogits.
float cross_entropy(const Tensor& logits, const std::vector<std::uint16_t>& labels,
                    Tensor* dlogits = nullptr);

// Train-mode forward + backward. Masked-out parameter groups are absent from
// the returned map.
std::pair<float, GradientMap> loss_and_grads(Network& net, const Tensor& batch,
                                             const std::vector<std::uint16_t>& labels,
                                             ParamMask mask = ParamMask::all);

// Backprop dlogits down to the output of layers[layer_index] without touching
// parameters; used for saliency. The trace must come from an eval forward.
Tensor grad_at_layer_output(Network& net, const ForwardTrace& trace, const Tensor& dlogits,
                            int layer_index);

void sgd_step(Network& net, const GradientMap& grads, float lr);

struct TrainResult {
  std::vector<float> epoch_loss;
};

TrainResult train(Network& net, const Dataset& data, int epochs, float lr, int batch_size,
                  std::uint64_t seed);

std::vector<int> predict(Network& net, const Tensor& batch);
int predict_one(Network& net, const Tensor& image);

// FNV-1a over the raw bytes of the selected tensors; used for repair reports.
std::uint64_t checksum_tensors(const Network& net, bool bn_tensors);

}  // namespace cbd
