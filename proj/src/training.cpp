#include "shadowalign/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "shadowalign/error.hpp"

namespace shadowalign {

void TrainConfig::validate() const {
  if (batch_size == 0) throw InvalidArgument("batch_size must be positive");
  if (!(min_lr > 0.0f) || !(lr > min_lr)) throw InvalidArgument("need lr > min_lr > 0");
  if (patience < 1) throw InvalidArgument("patience must be at least 1");
  if (!(lr_divisor > 1.0f)) throw InvalidArgument("lr_divisor must exceed 1");
  if (max_epochs < 1) throw InvalidArgument("max_epochs must be at least 1");
}

void LabeledDataset::validate(std::size_t num_classes) const {
  if (labels.size() != records.size() || ids.size() != records.size()) {
    throw ShapeError("dataset records, labels and ids differ in length");
  }
  for (auto y : labels)
    if (y >= num_classes) throw InvalidArgument("label " + std::to_string(y) + " out of range");
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> indices) const {
  LabeledDataset out;
  out.records.reserve(indices.size());
  for (auto i : indices) {
    out.records.push_back(records.at(i));
    out.labels.push_back(labels.at(i));
    out.ids.push_back(ids.at(i));
  }
  return out;
}

std::size_t LabeledDataset::index_of(std::uint64_t id) const {
  auto it = std::find(ids.begin(), ids.end(), id);
  if (it == ids.end()) throw InvalidArgument("record id " + std::to_string(id) + " not in dataset");
  return static_cast<std::size_t>(it - ids.begin());
}

std::string TrainResult::log_csv() const {
  std::ostringstream os;
  os.precision(9);
  os << "epoch,train_acc,val_acc,lr\n";
  for (const auto& e : log) os << e.epoch << ',' << e.train_acc << ',' << e.val_acc << ',' << e.lr << '\n';
  return os.str();
}

Model init_weights(const Model& arch, std::uint64_t seed_wi) {
  arch.validate();
  Model model = arch;
  Rng rng(seed_wi);
  for (auto& layer : model.layers) {
    if (!layer.has_params()) continue;
    const double bound = 1.0 / std::sqrt(static_cast<double>(layer.fan_in()));
    for (auto& w : layer.weight.data) w = static_cast<float>(rng.uniform(-bound, bound));
    std::fill(layer.bias.data.begin(), layer.bias.data.end(), 0.0f);
  }
  return model;
}

double accuracy(const Model& model, const LabeledDataset& data) {
  if (data.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (predict_class(model, data.records[i]) == data.labels[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

DropoutMasks draw_dropout_masks(const Model& model, Rng& ds) {
  DropoutMasks masks;
  masks.per_op.resize(model.layers.size());
  const auto shapes = model.output_shapes();
  for (std::size_t k = 0; k < model.layers.size(); ++k) {
    const Layer& layer = model.layers[k];
    if (layer.kind != LayerKind::Dropout) continue;
    const std::size_t n = shape_size(shapes[k]);
    if (layer.dropout_p == 0.0f) {
      masks.per_op[k].assign(n, 1.0f);
      continue;
    }
    const float keep_scale = 1.0f / (1.0f - layer.dropout_p);
    masks.per_op[k].resize(n);
    for (std::size_t i = 0; i < n; ++i) masks.per_op[k][i] = ds.uniform() < layer.dropout_p ? 0.0f : keep_scale;
  }
  return masks;
}

namespace {

bool has_dropout(const Model& model) {
  return std::any_of(model.layers.begin(), model.layers.end(),
                     [](const Layer& l) { return l.kind == LayerKind::Dropout; });
}

struct AdamState {
  std::vector<Tensor> mw, vw, mb, vb;
  std::uint64_t step = 0;

  explicit AdamState(const Model& model) {
    for (auto k : model.param_ops()) {
      mw.emplace_back(model.layers[k].weight.shape);
      vw.emplace_back(model.layers[k].weight.shape);
      mb.emplace_back(model.layers[k].bias.shape);
      vb.emplace_back(model.layers[k].bias.shape);
    }
  }
};

void adam_update(std::vector<float>& param, const std::vector<float>& grad, std::vector<float>& m,
                 std::vector<float>& v, const TrainConfig& cfg, float lr, std::uint64_t step) {
  const double c1 = 1.0 - std::pow(static_cast<double>(cfg.beta1), static_cast<double>(step));
  const double c2 = 1.0 - std::pow(static_cast<double>(cfg.beta2), static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = cfg.beta1 * m[i] + (1.0f - cfg.beta1) * grad[i];
    v[i] = cfg.beta2 * v[i] + (1.0f - cfg.beta2) * grad[i] * grad[i];
    const double mhat = m[i] / c1, vhat = v[i] / c2;
    param[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + cfg.adam_eps));
  }
}

}  // namespace

TrainResult train_from(Model model, const LabeledDataset& data, const LabeledDataset& val, const SeedBundle& seeds,
                       const TrainConfig& cfg) {
  cfg.validate();
  model.validate();
  if (data.empty()) throw InvalidArgument("training set is empty");
  if (val.empty()) throw InvalidArgument("validation set is empty");
  data.validate(model.num_classes());
  val.validate(model.num_classes());

  Rng bo(seeds.bo);
  Rng ds(seeds.ds);
  const bool dropout = has_dropout(model);
  const auto ops = model.param_ops();
  AdamState adam(model);

  TrainResult result;
  float lr = cfg.lr;
  double best_val = -1.0;
  std::size_t stale = 0;
  std::vector<std::size_t> order(data.size());

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    bo.shuffle(order);

    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<std::vector<double>> gw(ops.size()), gb(ops.size());
      for (std::size_t p = 0; p < ops.size(); ++p) {
        gw[p].assign(model.layers[ops[p]].weight.size(), 0.0);
        gb[p].assign(model.layers[ops[p]].bias.size(), 0.0);
      }
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t idx = order[b];
        DropoutMasks masks;
        if (dropout) masks = draw_dropout_masks(model, ds);
        ForwardTrace trace = forward(model, data.records[idx], dropout ? &masks : nullptr);
        Tensor g = trace.output();
        if (!std::isfinite(cross_entropy(g, data.labels[idx]))) {
          throw NumericError("training diverged at epoch " + std::to_string(epoch));
        }
        g[data.labels[idx]] -= 1.0f;
        GradientSet grads = backward_from(model, data.records[idx], trace, g, dropout ? &masks : nullptr).grads;
        for (std::size_t p = 0; p < ops.size(); ++p) {
          for (std::size_t i = 0; i < gw[p].size(); ++i) gw[p][i] += grads.weight[p][i];
          for (std::size_t i = 0; i < gb[p].size(); ++i) gb[p][i] += grads.bias[p][i];
        }
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      ++adam.step;
      for (std::size_t p = 0; p < ops.size(); ++p) {
        Layer& layer = model.layers[ops[p]];
        std::vector<float> w(gw[p].size()), bgrad(gb[p].size());
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<float>(gw[p][i] * inv);
        for (std::size_t i = 0; i < bgrad.size(); ++i) bgrad[i] = static_cast<float>(gb[p][i] * inv);
        adam_update(layer.weight.data, w, adam.mw[p].data, adam.vw[p].data, cfg, lr, adam.step);
        adam_update(layer.bias.data, bgrad, adam.mb[p].data, adam.vb[p].data, cfg, lr, adam.step);
        if (!layer.weight.all_finite() || !layer.bias.all_finite()) {
          throw NumericError("training diverged at epoch " + std::to_string(epoch));
        }
      }
    }

    EpochLog entry;
    entry.epoch = epoch;
    entry.train_acc = accuracy(model, data);
    entry.val_acc = accuracy(model, val);
    entry.lr = lr;
    result.log.push_back(entry);

    if (entry.val_acc > best_val) {
      best_val = entry.val_acc;
      result.best_epoch = epoch;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      lr /= cfg.lr_divisor;
      stale = 0;
    }
    if (lr < cfg.min_lr) break;
  }
  result.model = std::move(model);
  return result;
}

TrainResult train(const Model& arch, const LabeledDataset& data, const LabeledDataset& val, const SeedBundle& seeds,
                  const TrainConfig& cfg) {
  return train_from(init_weights(arch, seeds.wi), data, val, seeds, cfg);
}

Splits make_splits(std::size_t dataset_size, const PartitionSpec& spec, Rng& rng) {
  const std::size_t n_rest = dataset_size >= 2 * spec.n_val ? dataset_size - 2 * spec.n_val : 0;
  if (2 * spec.n_val > dataset_size) throw InvalidArgument("validation sets larger than the dataset");
  const std::size_t target_size = spec.overlap == Overlap::Identical ? n_rest : spec.target_size;
  const std::size_t adversary_size = spec.overlap == Overlap::Identical ? n_rest : spec.adversary_size;
  if (spec.overlap == Overlap::Disjoint && spec.adversary_size + spec.target_size > n_rest) {
    throw InvalidArgument("D_A and D_target do not fit in the dataset once V1 and V2 are set aside");
  }
  if (spec.train_size > target_size || spec.train_size > adversary_size) {
    throw InvalidArgument("|D_T| exceeds the pool it is drawn from");
  }
  if (spec.train_size == 0) throw InvalidArgument("|D_T| must be positive");

  std::vector<std::size_t> perm(dataset_size);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  rng.shuffle(perm);

  Splits s;
  auto take = [&](std::size_t from, std::size_t n) {
    return std::vector<std::size_t>(perm.begin() + static_cast<long>(from), perm.begin() + static_cast<long>(from + n));
  };
  s.v1 = take(0, spec.n_val);
  s.v2 = take(spec.n_val, spec.n_val);
  if (spec.overlap == Overlap::Identical) {
    s.target_pool = take(2 * spec.n_val, n_rest);
    s.adversary = s.target_pool;
  } else {
    s.target_pool = take(2 * spec.n_val, target_size);
    s.adversary = take(2 * spec.n_val + target_size, adversary_size);
  }
  for (auto i : rng.sample_without_replacement(s.target_pool.size(), spec.train_size)) {
    s.target_train.push_back(s.target_pool[i]);
  }
  for (std::size_t k = 0; k < spec.num_shadows; ++k) {
    std::vector<std::size_t> dk;
    for (auto i : rng.sample_without_replacement(s.adversary.size(), spec.train_size)) dk.push_back(s.adversary[i]);
    s.shadow_train.push_back(std::move(dk));
  }
  return s;
}

}  // namespace shadowalign
