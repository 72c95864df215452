#include "shadowalign/attack.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "shadowalign/error.hpp"

namespace shadowalign {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t");
  return s.substr(a, b - a + 1);
}

Tensor flat(const Tensor& t) { return t.reshaped({t.size()}); }

bool has_dropout(const Model& m) {
  return std::any_of(m.layers.begin(), m.layers.end(), [](const Layer& l) { return l.kind == LayerKind::Dropout; });
}

std::string fmt_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

void FeatureSpec::validate(const Model& model) const {
  const std::size_t L = model.num_param_layers();
  for (const auto& l : layers) {
    if (l.layer >= L) throw InvalidArgument("feature layer " + std::to_string(l.layer + 1) + " does not exist");
    if (!l.oa && !l.grad) throw InvalidArgument("feature layer " + std::to_string(l.layer + 1) + " selects nothing");
  }
  if (layers.empty() && !include_ia && !set_based) throw InvalidArgument("feature spec selects no features");
  if ((include_ia || set_based) && L < 2) throw InvalidArgument("IA and set-based features need two layers");
}

FeatureSpec FeatureSpec::parse(const std::string& text, std::size_t num_layers) {
  FeatureSpec spec;
  spec.include_label = false;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    if (tok.empty()) continue;
    if (tok == "ia") {
      spec.include_ia = true;
    } else if (tok == "label") {
      spec.include_label = true;
    } else if (tok == "set") {
      spec.set_based = true;
    } else {
      const auto colon = tok.find(':');
      if (colon == std::string::npos) throw ConfigError("bad feature token '" + tok + "'");
      long n = 0;
      try {
        n = std::stol(tok.substr(0, colon));
      } catch (const std::exception&) {
        throw ConfigError("bad layer number in feature token '" + tok + "'");
      }
      const long L = static_cast<long>(num_layers);
      const long idx = n < 0 ? L + n : n - 1;
      if (n == 0 || idx < 0 || idx >= L) throw ConfigError("feature layer out of range in '" + tok + "'");
      LayerFeatureSpec* entry = nullptr;
      for (auto& e : spec.layers)
        if (e.layer == static_cast<std::size_t>(idx)) entry = &e;
      if (!entry) {
        spec.layers.push_back({static_cast<std::size_t>(idx), false, false});
        entry = &spec.layers.back();
      }
      std::stringstream kinds(tok.substr(colon + 1));
      std::string k;
      while (std::getline(kinds, k, '+')) {
        if (k == "oa") entry->oa = true;
        else if (k == "g") entry->grad = true;
        else throw ConfigError("unknown feature kind '" + k + "'");
      }
    }
  }
  if (spec.layers.empty() && !spec.include_ia && !spec.set_based) throw ConfigError("feature spec selects nothing");
  return spec;
}

std::string FeatureSpec::to_string() const {
  std::string out;
  auto add = [&](const std::string& s) { out += (out.empty() ? "" : ",") + s; };
  for (const auto& l : layers) {
    std::string kinds = l.oa ? "oa" : "";
    if (l.grad) kinds += kinds.empty() ? "g" : "+g";
    add(std::to_string(l.layer + 1) + ":" + kinds);
  }
  if (include_ia) add("ia");
  if (set_based) add("set");
  if (include_label) add("label");
  return out;
}

std::vector<Tensor> set_based_vectors(const Model& model, const Tensor& x, std::size_t label) {
  const std::size_t L = model.num_param_layers();
  if (L < 2) throw ShapeError("set-based features need at least two layers");
  ForwardTrace trace = forward(model, x);
  Tensor g = trace.output();
  g[label] -= 1.0f;
  const GradientSet grads = backward_from(model, x, trace, g).grads;
  const Layer& last = model.param(L - 1);
  const Tensor& xin = layer_input(model, x, trace, L - 1);
  const std::size_t D = xin.size();
  const std::size_t Nc = last.units();
  if (grads.bias[L - 2].size() != D) {
    throw ShapeError("set-based features need the penultimate layer to feed the output layer unit for unit");
  }
  std::vector<Tensor> out;
  out.reserve(D);
  for (std::size_t d = 0; d < D; ++d) {
    Tensor v({Nc + 3});
    v[0] = xin[d];
    v[1] = last.weight[label * D + d] * xin[d];
    for (std::size_t i = 0; i < Nc; ++i) v[2 + i] = grads.weight[L - 1][i * D + d];
    v[Nc + 2] = grads.bias[L - 2][d];
    out.push_back(std::move(v));
  }
  return out;
}

RecordFeatures extract_features(const Model& model, const Tensor& x, std::size_t label, const FeatureSpec& spec) {
  spec.validate(model);
  const std::size_t L = model.num_param_layers();
  if (label >= model.num_classes()) throw InvalidArgument("label out of range");
  ForwardTrace trace = forward(model, x);
  RecordFeatures f;
  f.label = label;

  bool need_grad = std::any_of(spec.layers.begin(), spec.layers.end(), [](const auto& l) { return l.grad; });
  GradientSet grads;
  if (need_grad) {
    Tensor g = trace.output();
    g[label] -= 1.0f;
    grads = backward_from(model, x, trace, g).grads;
  }
  for (const auto& l : spec.layers) {
    if (l.oa) f.oa.push_back(flat(layer_output(model, trace, l.layer)));
    if (l.grad) {
      Tensor t({grads.weight[l.layer].size() + grads.bias[l.layer].size()});
      std::copy(grads.weight[l.layer].data.begin(), grads.weight[l.layer].data.end(), t.data.begin());
      std::copy(grads.bias[l.layer].data.begin(), grads.bias[l.layer].data.end(),
                t.data.begin() + static_cast<long>(grads.weight[l.layer].size()));
      f.grad.push_back(std::move(t));
    }
  }
  if (spec.include_ia) {
    const Layer& last = model.param(L - 1);
    const Tensor& xin = layer_input(model, x, trace, L - 1);
    const std::size_t D = xin.size();
    f.ia = Tensor({D});
    for (std::size_t i = 0; i < D; ++i) f.ia[i] = last.weight[label * D + i] * xin[i];
  }
  if (spec.set_based) {
    f.set_vectors = set_based_vectors(model, x, label);
    f.output = flat(trace.output());
  }
  return f;
}

std::vector<FeatureGroup> build_attack_dataset(std::span<const AttackSource> sources, const LabeledDataset& pool,
                                               const FeatureSpec& spec) {
  std::vector<FeatureGroup> groups;
  groups.reserve(sources.size());
  for (std::size_t s = 0; s < sources.size(); ++s) {
    if (!sources[s].model) throw InvalidArgument("attack source without a model");
    const Model& m = *sources[s].model;
    const std::unordered_set<std::uint64_t> members(sources[s].members.begin(), sources[s].members.end());
    FeatureGroup g;
    g.source = s;
    g.records.reserve(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) {
      RecordFeatures f = extract_features(m, pool.records[i], pool.labels[i], spec);
      f.record_id = pool.ids[i];
      f.member = members.count(pool.ids[i]) > 0;
      g.records.push_back(std::move(f));
    }
    groups.push_back(std::move(g));
  }
  return groups;
}

// ---------------------------------------------------------------------------
// Meta-classifier

struct MetaClassifier::Pass {
  // Per branch: inputs, masks and traces (one per set vector for SetPhi).
  std::vector<std::vector<Tensor>> inputs;
  std::vector<std::vector<DropoutMasks>> masks;
  std::vector<std::vector<ForwardTrace>> traces;
  Tensor concat;
  ForwardTrace head;
};

MetaClassifier::MetaClassifier(const FeatureSpec& spec, const RecordFeatures& example, std::size_t num_classes,
                               const McConfig& cfg)
    : spec_(spec), cfg_(cfg), num_classes_(num_classes) {
  if (num_classes == 0) throw InvalidArgument("meta-classifier needs the number of classes");
  if (cfg.grad_kernel == 0 || cfg.grad_stride == 0) throw InvalidArgument("gradient kernel and stride must be positive");
  const std::string H = std::to_string(cfg.embed_hidden), E = std::to_string(cfg.embed_out);
  auto mlp = [&](std::size_t in) { return "in=" + std::to_string(in) + ";fc=" + H + ":relu;fc=" + E; };

  std::vector<std::pair<BranchKind, std::size_t>> kinds;
  if (spec.set_based) {
    if (example.set_vectors.empty() || example.output.empty()) throw InvalidArgument("example lacks set features");
    kinds = {{BranchKind::SetPhi, 0}, {BranchKind::Output, 0}};
  } else {
    for (std::size_t i = 0; i < example.grad.size(); ++i) kinds.emplace_back(BranchKind::Grad, i);
    for (std::size_t i = 0; i < example.oa.size(); ++i) kinds.emplace_back(BranchKind::Activation, i);
    if (spec.include_ia) kinds.emplace_back(BranchKind::Ia, 0);
  }

  std::size_t concat = 0;
  for (std::size_t b = 0; b < kinds.size(); ++b) {
    Branch br{kinds[b].first, kinds[b].second, {}, 0};
    std::string desc;
    switch (br.kind) {
      case BranchKind::Grad: {
        const std::size_t n = example.grad[br.index].size();
        const std::size_t k = cfg.grad_kernel;
        std::size_t padded = std::max(k, n);
        if ((padded - k) % cfg.grad_stride) padded += cfg.grad_stride - (padded - k) % cfg.grad_stride;
        br.input_size = n;
        desc = "in=1x1x" + std::to_string(padded) + ";conv=" + std::to_string(cfg.grad_channels) + ":k1x" +
               std::to_string(k) + ":s" + std::to_string(cfg.grad_stride) + ":relu;dropout=" +
               fmt_g(cfg.grad_dropout) + ";flatten;fc=" + H + ":relu;fc=" + E;
        break;
      }
      case BranchKind::Activation: br.input_size = example.oa[br.index].size(); desc = mlp(br.input_size); break;
      case BranchKind::Ia: br.input_size = example.ia.size(); desc = mlp(br.input_size); break;
      case BranchKind::SetPhi: br.input_size = example.set_vectors.front().size(); desc = mlp(br.input_size); break;
      case BranchKind::Output: br.input_size = example.output.size(); desc = mlp(br.input_size); break;
    }
    br.net = init_weights(build_model(desc), derive_seed(cfg.seed, "mc-branch-" + std::to_string(b)));
    concat += cfg.embed_out;
    branches_.push_back(std::move(br));
  }
  input_scales_.assign(branches_.size(), {1.0f});

  if (spec.include_label) {
    label_table_ = Tensor({num_classes, cfg.label_embed});
    Rng rng(derive_seed(cfg.seed, "mc-label"));
    for (auto& v : label_table_.data) v = static_cast<float>(0.05 * rng.normal());
    concat += cfg.label_embed;
  }
  head_ = init_weights(build_model("in=" + std::to_string(concat) + ";fc=" + std::to_string(cfg.head_hidden1) +
                                   ":relu;fc=" + std::to_string(cfg.head_hidden2) + ":relu;fc=2:softmax"),
                       derive_seed(cfg.seed, "mc-head"));
}

void MetaClassifier::set_input_scales(std::vector<std::vector<float>> scales) {
  if (scales.size() != branches_.size()) throw ShapeError("one input scale set per branch expected");
  for (std::size_t b = 0; b < scales.size(); ++b) {
    const std::size_t width = branches_[b].kind == BranchKind::SetPhi ? branches_[b].input_size : 1;
    if (scales[b].size() != 1 && scales[b].size() != width) throw ShapeError("input scale size mismatch");
  }
  input_scales_ = std::move(scales);
}

void MetaClassifier::zero_parameters() {
  for (Tensor* t : parameters()) std::fill(t->data.begin(), t->data.end(), 0.0f);
}

std::vector<Tensor> MetaClassifier::branch_inputs(std::size_t b, const RecordFeatures& f, bool scaled) const {
  const Branch& br = branches_[b];
  const std::vector<float>& sc = input_scales_[b];
  auto scale = [&](Tensor t) {
    if (!scaled) return t;
    for (std::size_t i = 0; i < t.size(); ++i) t[i] *= sc.size() == 1 ? sc[0] : sc[i];
    return t;
  };
  auto check = [&](const Tensor& t) {
    if (t.size() != br.input_size) throw ShapeError("record features do not match the meta-classifier");
    return t;
  };
  switch (br.kind) {
    case BranchKind::Grad: {
      Tensor g = scale(check(f.grad.at(br.index)));
      Tensor padded(br.net.input_shape);
      std::copy(g.data.begin(), g.data.end(), padded.data.begin());
      return {std::move(padded)};
    }
    case BranchKind::Activation: return {scale(check(f.oa.at(br.index)))};
    case BranchKind::Ia: return {scale(check(f.ia))};
    case BranchKind::Output: return {scale(check(f.output))};
    case BranchKind::SetPhi: {
      std::vector<Tensor> out;
      out.reserve(f.set_vectors.size());
      for (const auto& v : f.set_vectors) out.push_back(scale(check(v)));
      // Canonical order: lexicographic on the scaled vectors.
      std::sort(out.begin(), out.end(), [](const Tensor& a, const Tensor& c) {
        return std::lexicographical_compare(a.data.begin(), a.data.end(), c.data.begin(), c.data.end());
      });
      return out;
    }
  }
  return {};
}

std::vector<Tensor> MetaClassifier::raw_branch_inputs(const RecordFeatures& f) const {
  std::vector<Tensor> out;
  for (std::size_t b = 0; b < branches_.size(); ++b) {
    auto in = branch_inputs(b, f, false);
    if (branches_[b].kind == BranchKind::Grad) in.front() = f.grad.at(branches_[b].index);
    if (in.size() == 1) {
      out.push_back(std::move(in.front()));
    } else {
      // Stack set vectors row by row.
      const std::size_t w = branches_[b].input_size;
      Tensor t({in.size(), w});
      for (std::size_t d = 0; d < in.size(); ++d) std::copy(in[d].data.begin(), in[d].data.end(), t.data.begin() + static_cast<long>(d * w));
      out.push_back(std::move(t));
    }
  }
  return out;
}

MetaClassifier::Pass MetaClassifier::run(const RecordFeatures& f, Rng* dropout_rng) const {
  if (branches_.empty()) throw InvalidArgument("meta-classifier is not initialised");
  Pass p;
  p.inputs.resize(branches_.size());
  p.masks.resize(branches_.size());
  p.traces.resize(branches_.size());
  std::vector<float> concat;
  for (std::size_t b = 0; b < branches_.size(); ++b) {
    const Model& net = branches_[b].net;
    const bool drop = dropout_rng && has_dropout(net);
    p.inputs[b] = branch_inputs(b, f, true);
    std::vector<double> emb(cfg_.embed_out, 0.0);
    for (const auto& in : p.inputs[b]) {
      p.masks[b].push_back(drop ? draw_dropout_masks(net, *dropout_rng) : DropoutMasks{});
      p.traces[b].push_back(forward(net, in, drop ? &p.masks[b].back() : nullptr));
      const Tensor& out = p.traces[b].back().output();
      for (std::size_t i = 0; i < emb.size(); ++i) emb[i] += out[i];
    }
    for (double v : emb) concat.push_back(static_cast<float>(v));
  }
  if (spec_.include_label) {
    if (f.label >= num_classes_) throw InvalidArgument("record label out of range for the meta-classifier");
    for (std::size_t i = 0; i < cfg_.label_embed; ++i) concat.push_back(label_table_[f.label * cfg_.label_embed + i]);
  }
  const std::size_t width = concat.size();
  p.concat = Tensor({width}, std::move(concat));
  p.head = forward(head_, p.concat);
  return p;
}

std::array<double, 2> MetaClassifier::probabilities(const RecordFeatures& f) const {
  const Pass p = run(f, nullptr);
  return {p.head.output()[0], p.head.output()[1]};
}

double MetaClassifier::score(const RecordFeatures& f) const { return probabilities(f)[1]; }

Tensor MetaClassifier::set_representation(const RecordFeatures& f) const {
  for (std::size_t b = 0; b < branches_.size(); ++b) {
    if (branches_[b].kind != BranchKind::SetPhi) continue;
    std::vector<double> emb(cfg_.embed_out, 0.0);
    for (const auto& in : branch_inputs(b, f, true)) {
      const Tensor out = forward(branches_[b].net, in).output();
      for (std::size_t i = 0; i < emb.size(); ++i) emb[i] += out[i];
    }
    Tensor t({emb.size()});
    for (std::size_t i = 0; i < emb.size(); ++i) t[i] = static_cast<float>(emb[i]);
    return t;
  }
  throw InvalidArgument("meta-classifier is not set-based");
}

std::vector<Tensor*> MetaClassifier::parameters() {
  std::vector<Tensor*> out;
  for (auto& br : branches_)
    for (auto k : br.net.param_ops()) {
      out.push_back(&br.net.layers[k].weight);
      out.push_back(&br.net.layers[k].bias);
    }
  if (spec_.include_label) out.push_back(&label_table_);
  for (auto k : head_.param_ops()) {
    out.push_back(&head_.layers[k].weight);
    out.push_back(&head_.layers[k].bias);
  }
  return out;
}

double MetaClassifier::accumulate_gradients(const RecordFeatures& f, bool member, Rng& dropout_rng,
                                            std::vector<Tensor>& grads) const {
  const Pass p = run(f, &dropout_rng);
  const Tensor& probs = p.head.output();
  const std::size_t target = member ? 1 : 0;
  const double ce = cross_entropy(probs, target);
  Tensor g = probs;
  g[target] -= 1.0f;
  const Backprop hb = backward_from(head_, p.concat, p.head, g);

  std::size_t slot = 0;
  auto add = [&](const Tensor& src) {
    Tensor& dst = grads.at(slot++);
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  };

  std::size_t offset = 0;
  for (std::size_t b = 0; b < branches_.size(); ++b) {
    const Model& net = branches_[b].net;
    Tensor eg({cfg_.embed_out});
    std::copy_n(hb.input_grad.data.begin() + static_cast<long>(offset), cfg_.embed_out, eg.data.begin());
    offset += cfg_.embed_out;
    const std::size_t first = slot;
    for (std::size_t r = 0; r < p.inputs[b].size(); ++r) {
      const DropoutMasks* masks = p.masks[b][r].per_op.empty() ? nullptr : &p.masks[b][r];
      const GradientSet gs = backward_from(net, p.inputs[b][r], p.traces[b][r], eg, masks).grads;
      slot = first;
      for (std::size_t l = 0; l < gs.weight.size(); ++l) {
        add(gs.weight[l]);
        add(gs.bias[l]);
      }
    }
    if (p.inputs[b].empty()) slot = first + 2 * net.num_param_layers();
  }
  if (spec_.include_label) {
    Tensor& dst = grads.at(slot++);
    for (std::size_t i = 0; i < cfg_.label_embed; ++i) dst[f.label * cfg_.label_embed + i] += hb.input_grad[offset + i];
  }
  for (std::size_t l = 0; l < hb.grads.weight.size(); ++l) {
    add(hb.grads.weight[l]);
    add(hb.grads.bias[l]);
  }
  return ce;
}

double classifier_accuracy(const MetaClassifier& mc, std::span<const RecordFeatures> records) {
  if (records.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& r : records) {
    if (!r.member) throw InvalidArgument("record without a membership label");
    if ((mc.score(r) > 0.5) == *r.member) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(records.size());
}

namespace {

struct Adam {
  std::vector<Tensor> m, v;
  std::uint64_t step = 0;
};

void adam_step(std::vector<Tensor*>& params, const std::vector<Tensor>& grads, Adam& st, double lr, double inv) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ++st.step;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& w = params[p]->data;
    auto& m = st.m[p].data;
    auto& v = st.v[p].data;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = grads[p][i] * inv;
      m[i] = static_cast<float>(b1 * m[i] + (1.0 - b1) * g);
      v[i] = static_cast<float>(b2 * v[i] + (1.0 - b2) * g * g);
      w[i] -= static_cast<float>(lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps));
    }
  }
}

std::vector<std::vector<float>> estimate_scales(const MetaClassifier& mc, std::span<const FeatureGroup> train) {
  const std::size_t B = mc.num_branches();
  std::vector<std::vector<double>> sums(B);
  std::vector<std::vector<std::size_t>> counts(B);
  for (const auto& g : train)
    for (const auto& r : g.records) {
      const auto inputs = mc.raw_branch_inputs(r);
      for (std::size_t b = 0; b < B; ++b) {
        const Tensor& t = inputs[b];
        const bool per_component = t.rank() == 2;
        const std::size_t width = per_component ? t.dim(1) : 1;
        if (sums[b].empty()) {
          sums[b].assign(width, 0.0);
          counts[b].assign(width, 0);
        }
        for (std::size_t i = 0; i < t.size(); ++i) {
          sums[b][i % width] += static_cast<double>(t[i]) * t[i];
          ++counts[b][i % width];
        }
      }
    }
  std::vector<std::vector<float>> scales(B);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < sums[b].size(); ++i) {
      const double rms = counts[b][i] ? std::sqrt(sums[b][i] / static_cast<double>(counts[b][i])) : 0.0;
      scales[b].push_back(rms > 0.0 && std::isfinite(rms) ? static_cast<float>(1.0 / rms) : 1.0f);
    }
  return scales;
}

}  // namespace

McTrainResult train_meta_classifier(std::span<const FeatureGroup> train, const FeatureGroup& val,
                                    const FeatureSpec& spec, std::size_t num_classes, const McConfig& cfg) {
  if (train.empty() || train.front().records.empty()) throw InvalidArgument("meta-classifier training set is empty");
  if (val.records.empty()) throw InvalidArgument("meta-classifier validation set is empty");
  if (cfg.batch_size == 0 || cfg.lr <= 0.0f || cfg.lr_divisor <= 1.0f || cfg.max_epochs == 0) {
    throw ConfigError("invalid meta-classifier training configuration");
  }
  for (const auto& g : train)
    for (const auto& r : g.records)
      if (!r.member) throw InvalidArgument("training record without a membership label");

  MetaClassifier mc(spec, train.front().records.front(), num_classes, cfg);
  if (cfg.normalize_inputs) mc.set_input_scales(estimate_scales(mc, train));

  std::vector<Tensor*> params = mc.parameters();
  Adam adam;
  for (Tensor* t : params) {
    adam.m.emplace_back(t->shape);
    adam.v.emplace_back(t->shape);
  }
  std::vector<Tensor> grads;
  for (Tensor* t : params) grads.emplace_back(t->shape);

  Rng batch_rng(derive_seed(cfg.seed, "mc-batch"));
  Rng drop_rng(derive_seed(cfg.seed, "mc-dropout"));
  const std::size_t G = train.size();

  // Batches of (group, record index) for one epoch.
  auto epoch_batches = [&]() {
    std::vector<std::vector<std::pair<std::size_t, std::size_t>>> batches;
    if (cfg.regime == BatchRegime::SharedRecords) {
      const std::size_t N = train.front().records.size();
      for (const auto& g : train)
        if (g.records.size() != N) throw InvalidArgument("shared-record batching needs equally sized groups");
      std::vector<std::size_t> order(N), groups(G);
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::iota(groups.begin(), groups.end(), std::size_t{0});
      batch_rng.shuffle(order);
      std::size_t bi = 0;
      for (std::size_t s = 0; s < N; s += cfg.batch_size, ++bi) {
        if (bi % G == 0) batch_rng.shuffle(groups);
        const std::size_t g = groups[bi % G];
        auto& batch = batches.emplace_back();
        for (std::size_t i = s; i < std::min(N, s + cfg.batch_size); ++i) batch.emplace_back(g, order[i]);
      }
    } else {
      std::size_t per_epoch = cfg.epoch_records;
      if (per_epoch == 0)
        for (const auto& g : train) per_epoch = std::max(per_epoch, g.records.size());
      const std::size_t n_batches = (per_epoch + cfg.batch_size - 1) / cfg.batch_size;
      for (std::size_t bi = 0; bi < n_batches; ++bi) {
        const std::size_t g = static_cast<std::size_t>(batch_rng.below(G));
        std::vector<std::size_t> in, out;
        for (std::size_t i = 0; i < train[g].records.size(); ++i) (*train[g].records[i].member ? in : out).push_back(i);
        const std::size_t half = cfg.batch_size / 2;
        auto& batch = batches.emplace_back();
        for (auto i : batch_rng.sample_without_replacement(in.size(), std::min(half, in.size())))
          batch.emplace_back(g, in[i]);
        for (auto i : batch_rng.sample_without_replacement(out.size(), std::min(cfg.batch_size - half, out.size())))
          batch.emplace_back(g, out[i]);
        if (batch.empty()) batches.pop_back();
      }
    }
    return batches;
  };

  McTrainResult result;
  result.classifier = mc;
  result.best_val_acc = -1.0;
  double lr = cfg.lr;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::size_t seen = 0, correct = 0;
    for (const auto& batch : epoch_batches()) {
      for (auto& g : grads) std::fill(g.data.begin(), g.data.end(), 0.0f);
      for (const auto& [g, i] : batch) {
        const RecordFeatures& r = train[g].records[i];
        const double ce = mc.accumulate_gradients(r, *r.member, drop_rng, grads);
        if (!std::isfinite(ce)) throw NumericError("meta-classifier diverged at epoch " + std::to_string(epoch));
        // p_target > 1/2 exactly when the cross-entropy is below ln 2.
        if (ce < std::log(2.0)) ++correct;
        ++seen;
      }
      adam_step(params, grads, adam, lr, 1.0 / static_cast<double>(batch.size()));
    }
    EpochLog entry;
    entry.epoch = epoch;
    entry.train_acc = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
    entry.val_acc = classifier_accuracy(mc, val.records);
    entry.lr = static_cast<float>(lr);
    result.log.push_back(entry);
    if (entry.val_acc > result.best_val_acc) {
      result.best_val_acc = entry.val_acc;
      result.best_epoch = epoch;
      result.classifier = mc;
    } else {
      lr /= cfg.lr_divisor;
    }
    if (lr < cfg.min_lr) break;
  }
  return result;
}

// ---------------------------------------------------------------------------
// ROC

double RocCurve::tpr_at_fpr(double max_fpr) const {
  double best = 0.0;
  for (std::size_t i = 0; i < fpr.size(); ++i)
    if (fpr[i] <= max_fpr + 1e-12) best = std::max(best, tpr[i]);
  return best;
}

std::string RocCurve::to_csv() const {
  std::ostringstream os;
  os << "row,fpr,tpr,auc";
  for (const auto& [f, t] : tpr_at) os << ",tpr_at_" << fmt_g(f);
  os << '\n';
  const std::string blanks(tpr_at.size(), ',');
  for (std::size_t i = 0; i < fpr.size(); ++i) os << "point," << fmt_g(fpr[i]) << ',' << fmt_g(tpr[i]) << ',' << blanks << '\n';
  os << "summary,,," << fmt_g(auc);
  for (const auto& [f, t] : tpr_at) os << ',' << fmt_g(t);
  os << '\n';
  return os.str();
}

RocCurve roc_curve(std::span<const double> scores, std::span<const int> labels, std::span<const double> fpr_targets) {
  if (scores.size() != labels.size()) throw ShapeError("scores and labels differ in length");
  std::uint64_t P = 0, N = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i])) throw InvalidArgument("non-finite score");
    if (labels[i] != 0 && labels[i] != 1) throw InvalidArgument("labels must be 0 or 1");
    (labels[i] ? P : N) += 1;
  }
  if (P == 0 || N == 0) throw InvalidArgument("ROC needs both members and non-members");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RocCurve roc;
  roc.fpr.push_back(0.0);
  roc.tpr.push_back(0.0);
  std::uint64_t tp = 0, fp = 0, twice_area = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::uint64_t pos = 0, neg = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] ? pos : neg) += 1;
      ++j;
    }
    twice_area += neg * (2 * tp + pos);
    tp += pos;
    fp += neg;
    roc.fpr.push_back(static_cast<double>(fp) / static_cast<double>(N));
    roc.tpr.push_back(static_cast<double>(tp) / static_cast<double>(P));
    i = j;
  }
  roc.auc = static_cast<double>(twice_area) / (2.0 * static_cast<double>(P) * static_cast<double>(N));
  for (double f : fpr_targets) roc.tpr_at.emplace_back(f, roc.tpr_at_fpr(f));
  return roc;
}

RocCurve evaluate(const MetaClassifier& mc, std::span<const RecordFeatures> test, std::span<const double> fpr_targets) {
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& r : test) {
    if (!r.member) throw InvalidArgument("test record without a membership label");
    scores.push_back(mc.score(r));
    labels.push_back(*r.member ? 1 : 0);
  }
  return roc_curve(scores, labels, fpr_targets);
}

}  // namespace shadowalign
