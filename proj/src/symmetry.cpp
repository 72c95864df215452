#include "shadowalign/symmetry.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <sstream>

#include "shadowalign/error.hpp"

namespace shadowalign {

Permutation::Permutation(std::vector<std::size_t> mapping) : mapping_(std::move(mapping)) {
  std::vector<char> seen(mapping_.size(), 0);
  for (auto m : mapping_) {
    if (m >= mapping_.size() || seen[m]) throw InvalidArgument("mapping is not a bijection");
    seen[m] = 1;
  }
}

Permutation Permutation::identity(std::size_t n) {
  std::vector<std::size_t> m(n);
  std::iota(m.begin(), m.end(), std::size_t{0});
  return Permutation(std::move(m));
}

Permutation Permutation::inverse() const {
  std::vector<std::size_t> inv(mapping_.size());
  for (std::size_t d = 0; d < mapping_.size(); ++d) inv[mapping_[d]] = d;
  return Permutation(std::move(inv));
}

Permutation Permutation::then(const Permutation& next) const {
  if (next.size() != size()) throw InvalidArgument("composing permutations of different sizes");
  std::vector<std::size_t> m(size());
  for (std::size_t d = 0; d < size(); ++d) m[d] = next[mapping_[d]];
  return Permutation(std::move(m));
}

bool Permutation::is_identity() const {
  for (std::size_t d = 0; d < mapping_.size(); ++d)
    if (mapping_[d] != d) return false;
  return true;
}

Permutation random_permutation(std::size_t n, Rng& rng) {
  if (n == 0) throw InvalidArgument("permutation size must be at least 1");
  std::vector<std::size_t> m(n);
  std::iota(m.begin(), m.end(), std::size_t{0});
  rng.shuffle(m);
  return Permutation(std::move(m));
}

namespace {

// How unit d of layer l shows up in the next parameterised layer.
struct NextLayerView {
  std::size_t next_op = 0;
  std::size_t units = 0;
  // For a dense successor: number of consecutive input columns per unit.
  std::size_t group = 1;
  bool next_is_conv = false;
  bool pooled = false;
};

NextLayerView next_layer_view(const Model& model, std::size_t l) {
  const std::size_t n = model.num_param_layers();
  if (l + 1 >= n) {
    throw InvalidArgument("layer " + std::to_string(l) + " is the output layer (or out of range); it has no successor");
  }
  NextLayerView v;
  const std::size_t op = model.param_op(l);
  v.next_op = model.param_op(l + 1);
  v.units = model.layers[op].units();
  const auto shapes = model.output_shapes();
  const Shape& feeding = shapes[v.next_op - 1];
  const Layer& next = model.layers[v.next_op];
  for (std::size_t k = op + 1; k < v.next_op; ++k)
    if (model.layers[k].kind == LayerKind::MaxPool2D) v.pooled = true;
  if (next.kind == LayerKind::Conv2D) {
    v.next_is_conv = true;
    if (feeding[0] != v.units) throw ShapeError("channel count changes between layer " + std::to_string(l) + " and its successor");
  } else {
    const std::size_t cols = next.weight.dim(1);
    if (cols % v.units != 0) throw ShapeError("successor inputs are not grouped by unit");
    v.group = cols / v.units;
    if (feeding.size() == 3 && feeding[0] != v.units) throw ShapeError("channel count mismatch at junction");
  }
  return v;
}

std::size_t unit_block(const Tensor& w) { return w.size() / w.dim(0); }

// Calls fn(pointer to outgoing weight, unit d) for each outgoing weight.
template <typename Fn>
void for_each_outgoing(Layer& next, const NextLayerView& v, Fn&& fn) {
  if (v.next_is_conv) {
    const std::size_t O = next.weight.dim(0), C = next.weight.dim(1), K = next.weight.dim(2) * next.weight.dim(3);
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t k = 0; k < K; ++k) fn(next.weight.data[(o * C + c) * K + k], c);
  } else {
    const std::size_t O = next.weight.dim(0), I = next.weight.dim(1);
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t j = 0; j < I; ++j) fn(next.weight.data[o * I + j], j / v.group);
  }
}

}  // namespace

Model permute_layer(const Model& model, std::size_t l, const Permutation& perm) {
  const NextLayerView v = next_layer_view(model, l);
  if (perm.size() != v.units) {
    throw InvalidArgument("permutation of size " + std::to_string(perm.size()) + " for layer with " +
                          std::to_string(v.units) + " units");
  }
  Model out = model;
  const Layer& src = model.param(l);
  Layer& dst = out.param(l);
  const std::size_t block = unit_block(src.weight);
  for (std::size_t d = 0; d < v.units; ++d) {
    std::copy_n(src.weight.data.begin() + static_cast<long>(d * block), block,
                dst.weight.data.begin() + static_cast<long>(perm[d] * block));
    dst.bias[perm[d]] = src.bias[d];
  }
  const Layer& nsrc = model.layers[v.next_op];
  Layer& ndst = out.layers[v.next_op];
  if (v.next_is_conv) {
    const std::size_t O = nsrc.weight.dim(0), C = nsrc.weight.dim(1), K = nsrc.weight.dim(2) * nsrc.weight.dim(3);
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t c = 0; c < C; ++c)
        std::copy_n(nsrc.weight.data.begin() + static_cast<long>((o * C + c) * K), K,
                    ndst.weight.data.begin() + static_cast<long>((o * C + perm[c]) * K));
  } else {
    const std::size_t O = nsrc.weight.dim(0), I = nsrc.weight.dim(1);
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t d = 0; d < v.units; ++d)
        std::copy_n(nsrc.weight.data.begin() + static_cast<long>(o * I + d * v.group), v.group,
                    ndst.weight.data.begin() + static_cast<long>(o * I + perm[d] * v.group));
  }
  return out;
}

Model rescale_neurons(const Model& model, std::size_t l, std::span<const float> factors) {
  const NextLayerView v = next_layer_view(model, l);
  const Layer& src = model.param(l);
  if (src.activation != Activation::ReLU && src.activation != Activation::None) {
    throw InvalidArgument("rescaling needs a ReLU or linear layer, layer " + std::to_string(l) + " uses " +
                          to_string(src.activation));
  }
  if (factors.size() != v.units) throw InvalidArgument("one scale factor per unit required");
  for (float c : factors)
    if (!(c > 0.0f) || !std::isfinite(c)) throw InvalidArgument("scale factors must be positive and finite");

  Model out = model;
  Layer& dst = out.param(l);
  const std::size_t block = unit_block(dst.weight);
  for (std::size_t d = 0; d < v.units; ++d) {
    for (std::size_t i = 0; i < block; ++i) dst.weight[d * block + i] *= factors[d];
    dst.bias[d] *= factors[d];
  }
  for_each_outgoing(out.layers[v.next_op], v, [&](float& w, std::size_t d) { w /= factors[d]; });
  return out;
}

Model flip_signs(const Model& model, std::size_t l, std::span<const int> signs) {
  const NextLayerView v = next_layer_view(model, l);
  const Layer& src = model.param(l);
  if (src.activation != Activation::Tanh) {
    throw InvalidArgument("sign flips need an antisymmetric (tanh) layer, layer " + std::to_string(l) + " uses " +
                          to_string(src.activation));
  }
  if (v.pooled) throw InvalidArgument("sign flips do not commute with max pooling");
  if (signs.size() != v.units) throw InvalidArgument("one sign per unit required");
  for (int s : signs)
    if (s != 1 && s != -1) throw InvalidArgument("signs must be +1 or -1");

  Model out = model;
  Layer& dst = out.param(l);
  const std::size_t block = unit_block(dst.weight);
  for (std::size_t d = 0; d < v.units; ++d) {
    if (signs[d] == 1) continue;
    for (std::size_t i = 0; i < block; ++i) dst.weight[d * block + i] = -dst.weight[d * block + i];
    dst.bias[d] = -dst.bias[d];
  }
  for_each_outgoing(out.layers[v.next_op], v, [&](float& w, std::size_t d) {
    if (signs[d] == -1) w = -w;
  });
  return out;
}

std::vector<float> input_weights(const Model& model, std::size_t l, std::size_t d, bool include_bias) {
  const Layer& layer = model.param(l);
  if (d >= layer.units()) throw InvalidArgument("unit index out of range");
  const std::size_t block = unit_block(layer.weight);
  std::vector<float> f(layer.weight.data.begin() + static_cast<long>(d * block),
                       layer.weight.data.begin() + static_cast<long>((d + 1) * block));
  if (include_bias) f.push_back(layer.bias[d]);
  return f;
}

std::vector<float> output_weights(const Model& model, std::size_t l, std::size_t d) {
  const NextLayerView v = next_layer_view(model, l);
  if (d >= v.units) throw InvalidArgument("unit index out of range");
  const Layer& next = model.layers[v.next_op];
  std::vector<float> f;
  if (v.next_is_conv) {
    const std::size_t O = next.weight.dim(0), C = next.weight.dim(1), K = next.weight.dim(2) * next.weight.dim(3);
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t k = 0; k < K; ++k) f.push_back(next.weight.data[(o * C + d) * K + k]);
  } else {
    const std::size_t O = next.weight.dim(0), I = next.weight.dim(1);
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t g = 0; g < v.group; ++g) f.push_back(next.weight.data[o * I + d * v.group + g]);
  }
  return f;
}

// ---------------------------------------------------------------------------
// Op log

void SymmetryOpLog::add_permute(std::size_t layer, const Permutation& perm) {
  SymmetryOp op;
  op.kind = SymmetryOp::Kind::Permute;
  op.layer = layer;
  op.mapping = perm.mapping();
  ops_.push_back(std::move(op));
}

void SymmetryOpLog::add_rescale(std::size_t layer, std::span<const float> factors) {
  SymmetryOp op;
  op.kind = SymmetryOp::Kind::Rescale;
  op.layer = layer;
  op.factors.assign(factors.begin(), factors.end());
  ops_.push_back(std::move(op));
}

void SymmetryOpLog::add_flip(std::size_t layer, std::span<const int> signs) {
  SymmetryOp op;
  op.kind = SymmetryOp::Kind::Flip;
  op.layer = layer;
  op.signs.assign(signs.begin(), signs.end());
  ops_.push_back(std::move(op));
}

Model SymmetryOpLog::replay(const Model& model) const {
  Model m = model;
  for (const auto& op : ops_) {
    switch (op.kind) {
      case SymmetryOp::Kind::Permute: m = permute_layer(m, op.layer, Permutation(op.mapping)); break;
      case SymmetryOp::Kind::Rescale: m = rescale_neurons(m, op.layer, op.factors); break;
      case SymmetryOp::Kind::Flip: m = flip_signs(m, op.layer, op.signs); break;
    }
  }
  return m;
}

std::string SymmetryOpLog::to_text() const {
  std::ostringstream os;
  os << "# shadowalign symmetry log v1\n";
  for (const auto& op : ops_) {
    switch (op.kind) {
      case SymmetryOp::Kind::Permute:
        os << "permute " << op.layer;
        for (auto m : op.mapping) os << ' ' << m;
        break;
      case SymmetryOp::Kind::Rescale:
        os << "rescale " << op.layer << std::hexfloat;
        for (auto f : op.factors) os << ' ' << f;
        os << std::defaultfloat;
        break;
      case SymmetryOp::Kind::Flip:
        os << "flip " << op.layer;
        for (auto s : op.signs) os << ' ' << (s > 0 ? "+1" : "-1");
        break;
    }
    os << '\n';
  }
  return os.str();
}

SymmetryOpLog SymmetryOpLog::from_text(std::string_view text) {
  SymmetryOpLog log;
  std::istringstream is{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string kind;
    std::size_t layer = 0;
    if (!(ls >> kind >> layer)) throw FormatError("symmetry log line " + std::to_string(lineno) + ": malformed");
    std::string tok;
    std::vector<std::string> toks;
    while (ls >> tok) toks.push_back(tok);
    try {
      if (kind == "permute") {
        std::vector<std::size_t> m;
        for (auto& t : toks) m.push_back(std::stoull(t));
        log.add_permute(layer, Permutation(std::move(m)));
      } else if (kind == "rescale") {
        std::vector<float> f;
        for (auto& t : toks) f.push_back(std::strtof(t.c_str(), nullptr));
        log.add_rescale(layer, f);
      } else if (kind == "flip") {
        std::vector<int> s;
        for (auto& t : toks) s.push_back(std::stoi(t));
        log.add_flip(layer, s);
      } else {
        throw FormatError("unknown op '" + kind + "'");
      }
    } catch (const FormatError& e) {
      throw FormatError("symmetry log line " + std::to_string(lineno) + ": " + e.what());
    } catch (const std::exception& e) {
      throw FormatError("symmetry log line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return log;
}

// ---------------------------------------------------------------------------
// ResNet head

namespace {

BatchNorm random_bn(std::size_t n, Rng& rng) {
  BatchNorm bn;
  for (std::size_t i = 0; i < n; ++i) {
    bn.mean.push_back(static_cast<float>(0.2 * rng.normal()));
    bn.var.push_back(static_cast<float>(rng.uniform(0.5, 1.5)));
    bn.weight.push_back(static_cast<float>(rng.uniform(0.5, 1.5)));
    bn.bias.push_back(static_cast<float>(0.2 * rng.normal()));
  }
  return bn;
}

Tensor random_conv(std::size_t out, std::size_t in, std::size_t k, Rng& rng) {
  Tensor w({out, in, k, k});
  const double scale = 1.0 / std::sqrt(static_cast<double>(in * k * k));
  for (auto& v : w.data) v = static_cast<float>(scale * rng.normal());
  return w;
}

void bn_inplace(Tensor& x, const BatchNorm& bn) {
  const std::size_t C = x.dim(0), HW = x.size() / C;
  if (bn.mean.size() != C) throw ShapeError("batch norm size mismatch");
  for (std::size_t c = 0; c < C; ++c) {
    const float scale = bn.weight[c] / std::sqrt(bn.var[c] + bn.eps);
    for (std::size_t i = 0; i < HW; ++i) x[c * HW + i] = (x[c * HW + i] - bn.mean[c]) * scale + bn.bias[c];
  }
}

void relu_inplace(Tensor& x) {
  for (auto& v : x.data) v = v > 0.0f ? v : 0.0f;
}

void permute_bn(BatchNorm& bn, const Permutation& p) {
  auto apply = [&](std::vector<float>& v) {
    std::vector<float> out(v.size());
    for (std::size_t d = 0; d < v.size(); ++d) out[p[d]] = v[d];
    v = std::move(out);
  };
  apply(bn.mean);
  apply(bn.var);
  apply(bn.weight);
  apply(bn.bias);
}

void permute_conv_outputs(Tensor& w, const Permutation& p) {
  const std::size_t block = w.size() / w.dim(0);
  Tensor out(w.shape);
  for (std::size_t d = 0; d < w.dim(0); ++d)
    std::copy_n(w.data.begin() + static_cast<long>(d * block), block, out.data.begin() + static_cast<long>(p[d] * block));
  w = std::move(out);
}

void permute_conv_inputs(Tensor& w, const Permutation& p) {
  const std::size_t O = w.dim(0), C = w.dim(1), K = w.dim(2) * w.dim(3);
  Tensor out(w.shape);
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t c = 0; c < C; ++c)
      std::copy_n(w.data.begin() + static_cast<long>((o * C + c) * K), K,
                  out.data.begin() + static_cast<long>((o * C + p[c]) * K));
  w = std::move(out);
}

}  // namespace

ResNetHead random_resnet_head(std::size_t in_channels, std::size_t channels, std::size_t classes, Rng& rng) {
  ResNetHead h;
  h.b7_conv1 = random_conv(channels, in_channels, 3, rng);
  h.b7_bn1 = random_bn(channels, rng);
  h.b7_conv2 = random_conv(channels, channels, 3, rng);
  h.b7_bn2 = random_bn(channels, rng);
  h.proj_conv = random_conv(channels, in_channels, 1, rng);
  h.proj_bn = random_bn(channels, rng);
  h.b8_conv1 = random_conv(channels, channels, 3, rng);
  h.b8_bn1 = random_bn(channels, rng);
  h.b8_conv2 = random_conv(channels, channels, 3, rng);
  h.b8_bn2 = random_bn(channels, rng);
  h.fc_weight = Tensor({classes, channels});
  const double scale = 1.0 / std::sqrt(static_cast<double>(channels));
  for (auto& v : h.fc_weight.data) v = static_cast<float>(scale * rng.normal());
  h.fc_bias = Tensor({classes});
  for (auto& v : h.fc_bias.data) v = static_cast<float>(0.1 * rng.normal());
  return h;
}

Tensor resnet_head_forward(const ResNetHead& h, const Tensor& x) {
  if (x.rank() != 3 || x.dim(0) != h.b7_conv1.dim(1)) throw ShapeError("resnet head input must be CxHxW");
  Tensor a = conv2d_forward(x, h.b7_conv1, nullptr, 1, 1);
  bn_inplace(a, h.b7_bn1);
  relu_inplace(a);
  a = conv2d_forward(a, h.b7_conv2, nullptr, 1, 1);
  bn_inplace(a, h.b7_bn2);
  Tensor p = conv2d_forward(x, h.proj_conv, nullptr, 1, 0);
  bn_inplace(p, h.proj_bn);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += p[i];
  relu_inplace(a);
  const Tensor y7 = a;

  Tensor b = conv2d_forward(y7, h.b8_conv1, nullptr, 1, 1);
  bn_inplace(b, h.b8_bn1);
  relu_inplace(b);
  b = conv2d_forward(b, h.b8_conv2, nullptr, 1, 1);
  bn_inplace(b, h.b8_bn2);
  for (std::size_t i = 0; i < b.size(); ++i) b[i] += y7[i];
  relu_inplace(b);

  const std::size_t C = b.dim(0), HW = b.size() / C;
  std::vector<double> pooled(C, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < HW; ++i) pooled[c] += b[c * HW + i];
    pooled[c] /= static_cast<double>(HW);
  }
  const std::size_t N = h.fc_weight.dim(0);
  Tensor logits({N});
  for (std::size_t o = 0; o < N; ++o) {
    double acc = h.fc_bias[o];
    for (std::size_t c = 0; c < C; ++c) acc += h.fc_weight[o * C + c] * pooled[c];
    logits[o] = static_cast<float>(acc);
  }
  return logits;
}

ResNetHead permute_resnet_head(const ResNetHead& head, const Permutation& perm, ResNetPermuteSteps steps) {
  const std::size_t C = head.channels();
  if (perm.size() != C || head.fc_weight.dim(1) != C || head.b7_conv2.dim(0) != C || head.proj_conv.dim(0) != C ||
      head.b8_conv1.dim(1) != C) {
    throw ShapeError("resnet head structure does not match permutation of size " + std::to_string(perm.size()));
  }
  ResNetHead h = head;
  // Classifier columns.
  const std::size_t N = h.fc_weight.dim(0);
  Tensor fc(h.fc_weight.shape);
  for (std::size_t o = 0; o < N; ++o)
    for (std::size_t c = 0; c < C; ++c) fc[o * C + perm[c]] = head.fc_weight[o * C + c];
  h.fc_weight = std::move(fc);
  // Block 8.
  permute_bn(h.b8_bn2, perm);
  permute_conv_outputs(h.b8_conv2, perm);
  if (steps.block8_conv1_inputs) permute_conv_inputs(h.b8_conv1, perm);
  // Block 7 and its projection shortcut.
  permute_bn(h.b7_bn2, perm);
  permute_conv_outputs(h.b7_conv2, perm);
  permute_bn(h.proj_bn, perm);
  permute_conv_outputs(h.proj_conv, perm);
  return h;
}

}  // namespace shadowalign
