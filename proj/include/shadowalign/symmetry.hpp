#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "shadowalign/nn.hpp"
#include "shadowalign/rng.hpp"

namespace shadowalign {

// Bijection over unit indices of one layer: mapping[d] is the destination
// index of unit d.
class Permutation {
 public:
  Permutation() = default;
  explicit Permutation(std::vector<std::size_t> mapping);

  static Permutation identity(std::size_t n);

  std::size_t size() const { return mapping_.size(); }
  std::size_t operator[](std::size_t d) const { return mapping_[d]; }
  const std::vector<std::size_t>& mapping() const { return mapping_; }

  Permutation inverse() const;
  // Applying *this first and then next.
  Permutation then(const Permutation& next) const;
  bool is_identity() const;

  bool operator==(const Permutation&) const = default;

 private:
  std::vector<std::size_t> mapping_;
};

// Uniform over the symmetric group (Fisher-Yates).
Permutation random_permutation(std::size_t n, Rng& rng);

// Moves unit d of layer l to position mapping[d]: rows of W^l and b^l, and
// the matching inputs of the next parameterised layer. At a conv -> dense
// junction the next layer's columns are permuted in contiguous groups of
// H*W, the (channel, row, column) flatten order. The output layer is refused.
Model permute_layer(const Model& model, std::size_t l, const Permutation& perm);

// Multiplies the incoming weights and bias of unit d by factors[d] > 0 and
// its outgoing weights by 1/factors[d]. Layer l must use ReLU or no
// activation.
Model rescale_neurons(const Model& model, std::size_t l, std::span<const float> factors);

// Negates incoming weights, bias and outgoing weights of units with sign -1.
// Layer l must use tanh and must not be followed by max pooling.
Model flip_signs(const Model& model, std::size_t l, std::span<const int> signs);

// Incoming weights of unit d of layer l, flattened, optionally followed by
// its bias.
std::vector<float> input_weights(const Model& model, std::size_t l, std::size_t d, bool include_bias = true);
// Outgoing weights of unit d of layer l: column d of the next dense layer
// (or its column group at a conv -> dense junction), or the d-th input
// channel slice of the next conv layer.
std::vector<float> output_weights(const Model& model, std::size_t l, std::size_t d);

struct SymmetryOp {
  enum class Kind { Permute, Rescale, Flip };
  Kind kind = Kind::Permute;
  std::size_t layer = 0;
  std::vector<std::size_t> mapping;
  std::vector<float> factors;
  std::vector<int> signs;
};

// Ordered record of transforms. The text form stores factors as hex floats
// so replaying a parsed log reproduces the transformed model bit for bit.
class SymmetryOpLog {
 public:
  void add_permute(std::size_t layer, const Permutation& perm);
  void add_rescale(std::size_t layer, std::span<const float> factors);
  void add_flip(std::size_t layer, std::span<const int> signs);

  const std::vector<SymmetryOp>& ops() const { return ops_; }
  bool empty() const { return ops_.empty(); }

  Model replay(const Model& model) const;

  std::string to_text() const;
  static SymmetryOpLog from_text(std::string_view text);

 private:
  std::vector<SymmetryOp> ops_;
};

// Evaluation-mode batch norm: y = (x - mean) / sqrt(var + eps) * weight + bias.
struct BatchNorm {
  std::vector<float> mean, var, weight, bias;
  float eps = 1e-5f;
};

// Top of a ResNet: block B7 with a 1x1 projection shortcut, block B8 with an
// identity shortcut, global average pooling and a dense classifier.
//   B(x) = bn2(conv2(relu(bn1(conv1(x)))));  y7 = relu(B7(x) + P(x)),
//   y8 = relu(B8(y7) + y7),  logits = fc(avgpool(y8)).
// 3x3 convolutions use padding 1; none carry a bias.
struct ResNetHead {
  Tensor b7_conv1, b7_conv2, proj_conv;
  BatchNorm b7_bn1, b7_bn2, proj_bn;
  Tensor b8_conv1, b8_conv2;
  BatchNorm b8_bn1, b8_bn2;
  Tensor fc_weight, fc_bias;

  std::size_t channels() const { return b8_conv2.dim(0); }
};

ResNetHead random_resnet_head(std::size_t in_channels, std::size_t channels, std::size_t classes, Rng& rng);
Tensor resnet_head_forward(const ResNetHead& head, const Tensor& x);

struct ResNetPermuteSteps {
  // Disabling this step breaks function preservation; it exists so tests
  // can confirm the oracle notices.
  bool block8_conv1_inputs = true;
};

// Permutes the classifier's input channels and propagates the permutation
// through B8 (bn2, conv2 outputs, conv1 inputs) down to B7 (bn2, conv2
// outputs) and the projection (bn, conv outputs).
ResNetHead permute_resnet_head(const ResNetHead& head, const Permutation& perm, ResNetPermuteSteps steps = {});

}  // namespace shadowalign
