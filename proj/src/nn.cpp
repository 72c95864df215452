#include "shadowalign/nn.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

#include "shadowalign/error.hpp"

namespace shadowalign {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Conv2D: return "conv2d";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::Dropout: return "dropout";
    case LayerKind::MaxPool2D: return "maxpool2d";
  }
  return "?";
}

std::string to_string(Activation act) {
  switch (act) {
    case Activation::None: return "none";
    case Activation::ReLU: return "relu";
    case Activation::Tanh: return "tanh";
    case Activation::Sigmoid: return "sigmoid";
    case Activation::Softmax: return "softmax";
  }
  return "?";
}

Activation parse_activation(std::string_view name) {
  if (name == "none" || name == "linear") return Activation::None;
  if (name == "relu") return Activation::ReLU;
  if (name == "tanh") return Activation::Tanh;
  if (name == "sigmoid") return Activation::Sigmoid;
  if (name == "softmax") return Activation::Softmax;
  throw InvalidArgument("unknown activation '" + std::string(name) + "'");
}

Layer dense_layer(std::size_t in, std::size_t out, Activation act) {
  Layer l;
  l.kind = LayerKind::Dense;
  l.weight = Tensor({out, in});
  l.bias = Tensor({out});
  l.activation = act;
  return l;
}

Layer conv_layer(std::size_t in_ch, std::size_t out_ch, std::size_t kh, std::size_t kw, std::size_t stride,
                 std::size_t padding, Activation act) {
  if (stride == 0) throw InvalidArgument("conv stride must be positive");
  Layer l;
  l.kind = LayerKind::Conv2D;
  l.weight = Tensor({out_ch, in_ch, kh, kw});
  l.bias = Tensor({out_ch});
  l.activation = act;
  l.stride = stride;
  l.padding = padding;
  return l;
}

Layer max_pool_layer(std::size_t window) {
  if (window == 0) throw InvalidArgument("pool window must be positive");
  Layer l;
  l.kind = LayerKind::MaxPool2D;
  l.window = window;
  l.stride = window;
  return l;
}

Layer flatten_layer() {
  Layer l;
  l.kind = LayerKind::Flatten;
  return l;
}

Layer dropout_layer(float p) {
  Layer l;
  l.kind = LayerKind::Dropout;
  l.dropout_p = p;
  return l;
}

namespace {

std::string op_name(std::size_t k, const Layer& layer) {
  return "op " + std::to_string(k) + " (" + to_string(layer.kind) + ")";
}

Shape op_output_shape(std::size_t k, const Layer& layer, const Shape& in) {
  switch (layer.kind) {
    case LayerKind::Dense: {
      if (layer.weight.rank() != 2 || layer.bias.rank() != 1 || layer.bias.dim(0) != layer.weight.dim(0)) {
        throw ShapeError(op_name(k, layer) + ": weight/bias shapes inconsistent");
      }
      if (shape_size(in) != layer.weight.dim(1)) {
        throw ShapeError(op_name(k, layer) + ": expects " + std::to_string(layer.weight.dim(1)) +
                         " inputs, got " + shape_string(in));
      }
      return {layer.weight.dim(0)};
    }
    case LayerKind::Conv2D: {
      if (layer.weight.rank() != 4 || layer.bias.rank() != 1 || layer.bias.dim(0) != layer.weight.dim(0)) {
        throw ShapeError(op_name(k, layer) + ": weight/bias shapes inconsistent");
      }
      if (in.size() != 3 || in[0] != layer.weight.dim(1)) {
        throw ShapeError(op_name(k, layer) + ": expects " + std::to_string(layer.weight.dim(1)) +
                         " input channels, got " + shape_string(in));
      }
      const std::size_t kh = layer.weight.dim(2), kw = layer.weight.dim(3);
      if (in[1] + 2 * layer.padding < kh || in[2] + 2 * layer.padding < kw) {
        throw ShapeError(op_name(k, layer) + ": kernel larger than padded input " + shape_string(in));
      }
      return {layer.weight.dim(0), (in[1] + 2 * layer.padding - kh) / layer.stride + 1,
              (in[2] + 2 * layer.padding - kw) / layer.stride + 1};
    }
    case LayerKind::MaxPool2D: {
      if (in.size() != 3 || in[1] < layer.window || in[2] < layer.window) {
        throw ShapeError(op_name(k, layer) + ": cannot pool " + shape_string(in));
      }
      return {in[0], in[1] / layer.window, in[2] / layer.window};
    }
    case LayerKind::Flatten: return {shape_size(in)};
    case LayerKind::Dropout: {
      if (!(layer.dropout_p >= 0.0f && layer.dropout_p < 1.0f)) {
        throw ShapeError(op_name(k, layer) + ": dropout probability must lie in [0, 1)");
      }
      return in;
    }
  }
  return in;
}

}  // namespace

std::vector<Shape> Model::output_shapes() const {
  std::vector<Shape> shapes;
  shapes.reserve(layers.size());
  Shape cur = input_shape;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    cur = op_output_shape(k, layers[k], cur);
    shapes.push_back(cur);
  }
  return shapes;
}

void Model::validate() const {
  if (input_shape.empty() || shape_size(input_shape) == 0) throw ShapeError("model input shape is empty");
  if (layers.empty()) throw ShapeError("model has no layers");
  output_shapes();
  for (std::size_t k = 0; k < layers.size(); ++k) {
    if (layers[k].activation == Activation::Softmax && k + 1 != layers.size()) {
      throw ShapeError(op_name(k, layers[k]) + ": softmax is only allowed on the final op");
    }
    if (layers[k].has_params() && layers[k].weight.dim(0) == 0) {
      throw ShapeError(op_name(k, layers[k]) + ": zero units");
    }
  }
  if (!layers.back().has_params()) throw ShapeError("final op must be dense or conv2d");
}

std::size_t Model::num_classes() const { return shape_size(output_shapes().back()); }

std::vector<std::size_t> Model::param_ops() const {
  std::vector<std::size_t> ops;
  for (std::size_t k = 0; k < layers.size(); ++k)
    if (layers[k].has_params()) ops.push_back(k);
  return ops;
}

std::size_t Model::num_param_layers() const {
  return static_cast<std::size_t>(std::count_if(layers.begin(), layers.end(), [](const Layer& l) {
    return l.has_params();
  }));
}

std::size_t Model::param_op(std::size_t l) const {
  std::size_t seen = 0;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    if (!layers[k].has_params()) continue;
    if (seen == l) return k;
    ++seen;
  }
  throw InvalidArgument("layer index " + std::to_string(l) + " out of range (model has " + std::to_string(seen) +
                        " parameterised layers)");
}

Layer& Model::param(std::size_t l) { return layers[param_op(l)]; }
const Layer& Model::param(std::size_t l) const { return layers[param_op(l)]; }

// ---------------------------------------------------------------------------
// Descriptor parsing

namespace {

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    std::size_t end = s.find(sep, start);
    if (end == std::string_view::npos) end = s.size();
    std::string_view piece = s.substr(start, end - start);
    while (!piece.empty() && piece.front() == ' ') piece.remove_prefix(1);
    while (!piece.empty() && piece.back() == ' ') piece.remove_suffix(1);
    if (!piece.empty()) out.push_back(piece);
    start = end + 1;
  }
  return out;
}

std::size_t parse_size(std::string_view s, std::string_view what) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw InvalidArgument("bad " + std::string(what) + " '" + std::string(s) + "' in architecture descriptor");
  }
  return v;
}

float parse_float(std::string_view s) {
  try {
    std::size_t used = 0;
    float v = std::stof(std::string(s), &used);
    if (used != s.size()) throw InvalidArgument("");
    return v;
  } catch (const std::exception&) {
    throw InvalidArgument("bad number '" + std::string(s) + "' in architecture descriptor");
  }
}

Shape parse_dims(std::string_view s) {
  Shape shape;
  for (auto d : split(s, 'x')) shape.push_back(parse_size(d, "dimension"));
  return shape;
}

}  // namespace

Model build_model(std::string_view descriptor) {
  Model model;
  model.arch_id = std::string(descriptor);
  auto ops = split(descriptor, ';');
  if (ops.empty() || ops.front().substr(0, 3) != "in=") {
    throw InvalidArgument("architecture descriptor must start with in=<shape>");
  }
  model.input_shape = parse_dims(ops.front().substr(3));
  Shape cur = model.input_shape;
  for (std::size_t i = 1; i < ops.size(); ++i) {
    std::string_view op = ops[i];
    std::string_view name = op, args;
    if (auto eq = op.find('='); eq != std::string_view::npos) {
      name = op.substr(0, eq);
      args = op.substr(eq + 1);
    }
    auto parts = split(args, ':');
    Layer layer;
    if (name == "fc") {
      if (parts.empty()) throw InvalidArgument("fc needs a unit count");
      Activation act = parts.size() > 1 ? parse_activation(parts[1]) : Activation::None;
      layer = dense_layer(shape_size(cur), parse_size(parts[0], "unit count"), act);
    } else if (name == "conv") {
      if (parts.empty()) throw InvalidArgument("conv needs a filter count");
      if (cur.size() != 3) throw ShapeError("conv needs a CxHxW input, got " + shape_string(cur));
      std::size_t kh = 3, kw = 3, stride = 1, pad = 0;
      Activation act = Activation::None;
      for (std::size_t j = 1; j < parts.size(); ++j) {
        std::string_view p = parts[j];
        if (p[0] == 'k') {
          Shape k = parse_dims(p.substr(1));
          kh = k[0];
          kw = k.size() > 1 ? k[1] : k[0];
        } else if (p[0] == 's' && p != "sigmoid" && p != "softmax") {
          stride = parse_size(p.substr(1), "stride");
        } else if (p[0] == 'p') {
          pad = parse_size(p.substr(1), "padding");
        } else {
          act = parse_activation(p);
        }
      }
      layer = conv_layer(cur[0], parse_size(parts[0], "filter count"), kh, kw, stride, pad, act);
    } else if (name == "pool") {
      layer = max_pool_layer(parts.empty() ? 2 : parse_size(parts[0], "pool window"));
    } else if (name == "flatten") {
      layer = flatten_layer();
    } else if (name == "dropout") {
      layer = dropout_layer(parts.empty() ? 0.0f : parse_float(parts[0]));
    } else {
      throw InvalidArgument("unknown op '" + std::string(name) + "' in architecture descriptor");
    }
    cur = op_output_shape(model.layers.size(), layer, cur);
    model.layers.push_back(std::move(layer));
  }
  model.validate();
  return model;
}

std::string describe(const Model& model) {
  std::ostringstream os;
  os << "in=" << shape_string(model.input_shape);
  for (const auto& l : model.layers) {
    os << ';';
    switch (l.kind) {
      case LayerKind::Dense: os << "fc=" << l.weight.dim(0) << ':' << to_string(l.activation); break;
      case LayerKind::Conv2D:
        os << "conv=" << l.weight.dim(0) << ":k" << l.weight.dim(2) << 'x' << l.weight.dim(3) << ":s" << l.stride
           << ":p" << l.padding << ':' << to_string(l.activation);
        break;
      case LayerKind::MaxPool2D: os << "pool=" << l.window; break;
      case LayerKind::Flatten: os << "flatten"; break;
      case LayerKind::Dropout: os << "dropout=" << l.dropout_p; break;
    }
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Forward

void softmax_inplace(std::span<float> v) {
  if (v.empty()) return;
  float m = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (auto& x : v) {
    x = std::exp(x - m);
    sum += x;
  }
  for (auto& x : v) x = static_cast<float>(x / sum);
}

namespace {

void apply_activation(Activation act, Tensor& t) {
  switch (act) {
    case Activation::None: break;
    case Activation::ReLU:
      for (auto& v : t.data) v = v > 0.0f ? v : 0.0f;
      break;
    case Activation::Tanh:
      for (auto& v : t.data) v = std::tanh(v);
      break;
    case Activation::Sigmoid:
      for (auto& v : t.data) v = 1.0f / (1.0f + std::exp(-v));
      break;
    case Activation::Softmax: softmax_inplace(t.data); break;
  }
}

// d(act)/d(pre) expressed through the activation output y.
float activation_slope(Activation act, float y) {
  switch (act) {
    case Activation::ReLU: return y > 0.0f ? 1.0f : 0.0f;
    case Activation::Tanh: return 1.0f - y * y;
    case Activation::Sigmoid: return y * (1.0f - y);
    default: return 1.0f;
  }
}

Tensor dense_forward(const Layer& layer, const Tensor& x) {
  const std::size_t out = layer.weight.dim(0), in = layer.weight.dim(1);
  Tensor y({out});
  const float* w = layer.weight.data.data();
  for (std::size_t i = 0; i < out; ++i) {
    double acc = layer.bias[i];
    const float* row = w + i * in;
    for (std::size_t j = 0; j < in; ++j) acc += static_cast<double>(row[j]) * x[j];
    y[i] = static_cast<float>(acc);
  }
  return y;
}

Tensor pool_forward(const Layer& layer, const Tensor& x, const Shape& out_shape) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2), k = layer.window;
  const std::size_t Ho = out_shape[1], Wo = out_shape[2];
  Tensor y(out_shape);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        float m = x[(c * H + oy * k) * W + ox * k];
        for (std::size_t dy = 0; dy < k; ++dy)
          for (std::size_t dx = 0; dx < k; ++dx) m = std::max(m, x[(c * H + oy * k + dy) * W + ox * k + dx]);
        y[(c * Ho + oy) * Wo + ox] = m;
      }
  return y;
}

}  // namespace

Tensor conv2d_forward(const Tensor& x, const Tensor& weight, const Tensor* bias, std::size_t stride,
                      std::size_t padding) {
  const std::size_t O = weight.dim(0), C = weight.dim(1), KH = weight.dim(2), KW = weight.dim(3);
  const std::size_t H = x.dim(1), W = x.dim(2);
  const std::size_t Ho = (H + 2 * padding - KH) / stride + 1, Wo = (W + 2 * padding - KW) / stride + 1;
  Tensor y({O, Ho, Wo});
  const long pad = static_cast<long>(padding);
  for (std::size_t o = 0; o < O; ++o) {
    const double b = bias ? (*bias)[o] : 0.0;
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        double acc = b;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t ky = 0; ky < KH; ++ky) {
            long iy = static_cast<long>(oy * stride + ky) - pad;
            if (iy < 0 || iy >= static_cast<long>(H)) continue;
            const float* wrow = &weight.data[((o * C + c) * KH + ky) * KW];
            const float* xrow = &x.data[(c * H + static_cast<std::size_t>(iy)) * W];
            for (std::size_t kx = 0; kx < KW; ++kx) {
              long ix = static_cast<long>(ox * stride + kx) - pad;
              if (ix < 0 || ix >= static_cast<long>(W)) continue;
              acc += static_cast<double>(wrow[kx]) * xrow[ix];
            }
          }
        y[(o * Ho + oy) * Wo + ox] = static_cast<float>(acc);
      }
  }
  return y;
}

ForwardTrace forward(const Model& model, const Tensor& x, const DropoutMasks* masks) {
  if (x.size() != shape_size(model.input_shape)) {
    throw ShapeError("input of shape " + shape_string(x.shape) + " does not match model input " +
                     shape_string(model.input_shape));
  }
  const auto shapes = model.output_shapes();
  ForwardTrace trace;
  trace.outputs.reserve(model.layers.size());
  Tensor cur = x.reshaped(model.input_shape);
  for (std::size_t k = 0; k < model.layers.size(); ++k) {
    const Layer& layer = model.layers[k];
    Tensor out;
    switch (layer.kind) {
      case LayerKind::Dense: out = dense_forward(layer, cur); break;
      case LayerKind::Conv2D: out = conv2d_forward(cur, layer.weight, &layer.bias, layer.stride, layer.padding); break;
      case LayerKind::MaxPool2D: out = pool_forward(layer, cur, shapes[k]); break;
      case LayerKind::Flatten: out = cur.reshaped(shapes[k]); break;
      case LayerKind::Dropout:
        out = cur;
        if (masks) {
          if (k >= masks->per_op.size() || masks->per_op[k].size() != out.size()) {
            throw ShapeError(op_name(k, layer) + ": dropout mask missing or of wrong size");
          }
          for (std::size_t i = 0; i < out.size(); ++i) out[i] *= masks->per_op[k][i];
        }
        break;
    }
    if (k + 1 == model.layers.size()) trace.logits = out;
    if (layer.has_params()) apply_activation(layer.activation, out);
    if (!out.all_finite()) throw NumericError(op_name(k, layer) + ": non-finite activation");
    trace.outputs.push_back(out);
    cur = std::move(out);
  }
  return trace;
}

const Tensor& layer_output(const Model& model, const ForwardTrace& trace, std::size_t l) {
  return trace.outputs.at(model.param_op(l));
}

const Tensor& layer_input(const Model& model, const Tensor& x, const ForwardTrace& trace, std::size_t l) {
  std::size_t k = model.param_op(l);
  return k == 0 ? x : trace.outputs[k - 1];
}

Tensor predict(const Model& model, const Tensor& x) { return forward(model, x).output(); }

std::size_t predict_class(const Model& model, const Tensor& x) {
  Tensor out = predict(model, x);
  return static_cast<std::size_t>(std::max_element(out.data.begin(), out.data.end()) - out.data.begin());
}

// ---------------------------------------------------------------------------
// Backward

double GradientSet::squared_norm() const {
  double s = 0.0;
  for (const auto& t : weight)
    for (float v : t.data) s += static_cast<double>(v) * v;
  for (const auto& t : bias)
    for (float v : t.data) s += static_cast<double>(v) * v;
  return s;
}

Backprop backward_from(const Model& model, const Tensor& x, const ForwardTrace& trace, const Tensor& logit_grad,
                       const DropoutMasks* masks) {
  const std::size_t n_ops = model.layers.size();
  if (trace.outputs.size() != n_ops) throw ShapeError("trace does not belong to this model");
  if (logit_grad.size() != trace.logits.size()) throw ShapeError("logit gradient has wrong size");

  const std::size_t n_params = model.num_param_layers();
  Backprop result;
  result.grads.weight.resize(n_params);
  result.grads.bias.resize(n_params);

  Tensor input0 = x.reshaped(model.input_shape);
  // grad holds dL/d(output of op k) except for the final op where it is dL/d(logits).
  Tensor grad = logit_grad;
  std::size_t pl = n_params;
  for (std::size_t kk = n_ops; kk-- > 0;) {
    const Layer& layer = model.layers[kk];
    const Tensor& in = kk == 0 ? input0 : trace.outputs[kk - 1];
    const Tensor& out = trace.outputs[kk];
    Tensor din(in.shape);
    if (layer.has_params()) {
      --pl;
      if (kk + 1 != n_ops) {
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] *= activation_slope(layer.activation, out[i]);
      }
      Tensor dW(layer.weight.shape), db(layer.bias.shape);
      if (layer.kind == LayerKind::Dense) {
        const std::size_t O = layer.weight.dim(0), I = layer.weight.dim(1);
        std::vector<double> acc(I, 0.0);
        for (std::size_t i = 0; i < O; ++i) {
          const float g = grad[i];
          db[i] = g;
          float* dwrow = &dW.data[i * I];
          const float* wrow = &layer.weight.data[i * I];
          for (std::size_t j = 0; j < I; ++j) {
            dwrow[j] = g * in[j];
            acc[j] += static_cast<double>(wrow[j]) * g;
          }
        }
        for (std::size_t j = 0; j < I; ++j) din[j] = static_cast<float>(acc[j]);
      } else {
        const std::size_t O = layer.weight.dim(0), C = layer.weight.dim(1), KH = layer.weight.dim(2),
                          KW = layer.weight.dim(3);
        const std::size_t H = in.dim(1), W = in.dim(2), Ho = out.dim(1), Wo = out.dim(2);
        const long pad = static_cast<long>(layer.padding);
        std::vector<double> dw_acc(dW.size(), 0.0), dx_acc(din.size(), 0.0);
        for (std::size_t o = 0; o < O; ++o) {
          double bsum = 0.0;
          for (std::size_t oy = 0; oy < Ho; ++oy)
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              const double g = grad[(o * Ho + oy) * Wo + ox];
              if (g == 0.0) continue;
              bsum += g;
              for (std::size_t c = 0; c < C; ++c)
                for (std::size_t ky = 0; ky < KH; ++ky) {
                  long iy = static_cast<long>(oy * layer.stride + ky) - pad;
                  if (iy < 0 || iy >= static_cast<long>(H)) continue;
                  for (std::size_t kx = 0; kx < KW; ++kx) {
                    long ix = static_cast<long>(ox * layer.stride + kx) - pad;
                    if (ix < 0 || ix >= static_cast<long>(W)) continue;
                    const std::size_t wi = ((o * C + c) * KH + ky) * KW + kx;
                    const std::size_t xi = (c * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix);
                    dw_acc[wi] += g * in[xi];
                    dx_acc[xi] += g * layer.weight[wi];
                  }
                }
            }
          db[o] = static_cast<float>(bsum);
        }
        for (std::size_t i = 0; i < dW.size(); ++i) dW[i] = static_cast<float>(dw_acc[i]);
        for (std::size_t i = 0; i < din.size(); ++i) din[i] = static_cast<float>(dx_acc[i]);
      }
      if (!dW.all_finite() || !db.all_finite()) {
        throw NumericError(op_name(kk, layer) + ": non-finite gradient");
      }
      result.grads.weight[pl] = std::move(dW);
      result.grads.bias[pl] = std::move(db);
    } else {
      switch (layer.kind) {
        case LayerKind::Flatten: din = grad.reshaped(in.shape); break;
        case LayerKind::Dropout:
          din = grad.reshaped(in.shape);
          if (masks) {
            for (std::size_t i = 0; i < din.size(); ++i) din[i] *= masks->per_op[kk][i];
          }
          break;
        case LayerKind::MaxPool2D: {
          const std::size_t C = in.dim(0), H = in.dim(1), W = in.dim(2), k = layer.window;
          const std::size_t Ho = out.dim(1), Wo = out.dim(2);
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t oy = 0; oy < Ho; ++oy)
              for (std::size_t ox = 0; ox < Wo; ++ox) {
                std::size_t best = (c * H + oy * k) * W + ox * k;
                for (std::size_t dy = 0; dy < k; ++dy)
                  for (std::size_t dx = 0; dx < k; ++dx) {
                    std::size_t idx = (c * H + oy * k + dy) * W + ox * k + dx;
                    if (in[idx] > in[best]) best = idx;
                  }
                din[best] += grad[(c * Ho + oy) * Wo + ox];
              }
          break;
        }
        default: break;
      }
    }
    grad = std::move(din);
  }
  result.input_grad = std::move(grad);
  return result;
}

namespace {

void check_label(const Model& model, std::size_t label) {
  if (model.layers.empty() || model.layers.back().activation != Activation::Softmax) {
    throw InvalidArgument("cross-entropy needs a model ending in softmax");
  }
  if (label >= model.num_classes()) {
    throw InvalidArgument("class index " + std::to_string(label) + " out of range for " +
                          std::to_string(model.num_classes()) + " classes");
  }
}

}  // namespace

GradientSet backward(const Model& model, const Tensor& x, std::size_t label, const DropoutMasks* masks) {
  check_label(model, label);
  ForwardTrace trace = forward(model, x, masks);
  Tensor g = trace.output();
  g[label] -= 1.0f;
  return backward_from(model, x, trace, g, masks).grads;
}

double cross_entropy(const Tensor& probabilities, std::size_t label) {
  if (label >= probabilities.size()) throw InvalidArgument("class index out of range");
  return -std::log(std::max(static_cast<double>(probabilities[label]), kProbabilityFloor));
}

double loss(const Model& model, const Tensor& x, std::size_t label) {
  check_label(model, label);
  return cross_entropy(predict(model, x), label);
}

}  // namespace shadowalign
