#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "shadowalign/tensor.hpp"

namespace shadowalign {

enum class LayerKind { Dense, Conv2D, Flatten, Dropout, MaxPool2D };
enum class Activation { None, ReLU, Tanh, Sigmoid, Softmax };

std::string to_string(LayerKind kind);
std::string to_string(Activation act);
Activation parse_activation(std::string_view name);

// One op of a sequential network. Dense and Conv2D carry parameters and an
// activation; the others are parameter-free.
//
//   Dense:  weight (out x in), bias (out). Inputs of any rank are consumed
//           flattened in (channel, row, column) order.
//   Conv2D: weight (out_ch x in_ch x kh x kw), bias (out_ch); square stride
//           and zero padding.
//   MaxPool2D: non-overlapping window (window == stride).
//   Dropout: inverted dropout with keep-scale 1/(1-p); identity in eval mode.
struct Layer {
  LayerKind kind = LayerKind::Dense;
  Tensor weight;
  Tensor bias;
  Activation activation = Activation::None;
  float dropout_p = 0.0f;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t window = 2;

  bool has_params() const { return kind == LayerKind::Dense || kind == LayerKind::Conv2D; }
  // Number of neurons (Dense) or filters (Conv2D).
  std::size_t units() const { return weight.dim(0); }
  // Length of one unit's incoming weight vector (excluding bias).
  std::size_t fan_in() const { return units() ? weight.size() / units() : 0; }
};

Layer dense_layer(std::size_t in, std::size_t out, Activation act);
Layer conv_layer(std::size_t in_ch, std::size_t out_ch, std::size_t kh, std::size_t kw, std::size_t stride,
                 std::size_t padding, Activation act);
Layer max_pool_layer(std::size_t window);
Layer flatten_layer();
Layer dropout_layer(float p);

// A sequential network. "Layer l" in the public API of this library always
// means the l-th parameterised op (0-based), i.e. the l-th Dense/Conv2D.
class Model {
 public:
  std::string arch_id;
  Shape input_shape;
  std::vector<Layer> layers;

  // Throws ShapeError when shapes do not compose, Softmax is used anywhere
  // but the final op, or dropout_p is outside [0, 1).
  void validate() const;

  // Shape produced by each op, in op order.
  std::vector<Shape> output_shapes() const;
  std::size_t num_classes() const;

  std::vector<std::size_t> param_ops() const;
  std::size_t num_param_layers() const;
  std::size_t param_op(std::size_t l) const;
  Layer& param(std::size_t l);
  const Layer& param(std::size_t l) const;
};

// Architecture descriptors are ';'-separated op lists, e.g.
//   in=32;fc=64:relu;fc=32:relu;fc=4:softmax
//   in=1x16x16;conv=8:k5:s1:p0:relu;pool=2;conv=16:k5:relu;pool=2;flatten;fc=64:relu;dropout=0.2;fc=10:softmax
// build_model returns a model with all parameters zero.
Model build_model(std::string_view descriptor);
std::string describe(const Model& model);

// Multipliers (0 or 1/(1-p)) for every Dropout op, indexed by op; entries for
// other ops are empty.
struct DropoutMasks {
  std::vector<std::vector<float>> per_op;
};

struct ForwardTrace {
  // outputs[k] is the output of op k (after its activation).
  std::vector<Tensor> outputs;
  // Pre-activation output of the final op.
  Tensor logits;

  const Tensor& output() const { return outputs.back(); }
};

// Evaluation mode when masks is null (dropout is the identity). Throws
// ShapeError naming the op on mismatched input, NumericError on a non-finite
// intermediate value.
ForwardTrace forward(const Model& model, const Tensor& x, const DropoutMasks* masks = nullptr);

// Post-activation output of parameterised layer l.
const Tensor& layer_output(const Model& model, const ForwardTrace& trace, std::size_t l);
// Input vector actually consumed by parameterised layer l.
const Tensor& layer_input(const Model& model, const Tensor& x, const ForwardTrace& trace, std::size_t l);

Tensor predict(const Model& model, const Tensor& x);
std::size_t predict_class(const Model& model, const Tensor& x);

// Per parameterised layer, same shapes as weight and bias.
struct GradientSet {
  std::vector<Tensor> weight;
  std::vector<Tensor> bias;

  double squared_norm() const;
};

struct Backprop {
  GradientSet grads;
  Tensor input_grad;
};

// Backpropagates dL/d(logits) of the final op through the network.
Backprop backward_from(const Model& model, const Tensor& x, const ForwardTrace& trace, const Tensor& logit_grad,
                       const DropoutMasks* masks = nullptr);

inline constexpr double kProbabilityFloor = 1e-12;

// Cross-entropy gradients for one record. Model must end in Softmax.
GradientSet backward(const Model& model, const Tensor& x, std::size_t label, const DropoutMasks* masks = nullptr);

// -log(max(p_label, 1e-12)).
double loss(const Model& model, const Tensor& x, std::size_t label);
double cross_entropy(const Tensor& probabilities, std::size_t label);

void softmax_inplace(std::span<float> values);

// Direct-loop convolution. bias may be null.
Tensor conv2d_forward(const Tensor& x, const Tensor& weight, const Tensor* bias, std::size_t stride,
                      std::size_t padding);

}  // namespace shadowalign
