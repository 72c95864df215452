#include "checks.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "shadowalign/attack.hpp"
#include "shadowalign/data.hpp"
#include "shadowalign/io.hpp"
#include "shadowalign/metrics.hpp"
#include "shadowalign/realign.hpp"
#include "shadowalign/symmetry.hpp"

namespace checks {

using namespace shadowalign;

namespace {

std::string num(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

double max_dev(const Tensor& a, const Tensor& b) { return max_abs_diff(a, b); }

const char* kSymmetryArchs[] = {
    "in=8;fc=16:relu;fc=12:relu;fc=3:softmax",
    "in=6;fc=10:tanh;fc=8:tanh;fc=3",
    "in=1x8x8;conv=4:k3:s1:p1:relu;pool=2;conv=6:k3:s1:p0:relu;flatten;fc=10:relu;fc=3:softmax",
    "in=2x7x7;conv=5:k3:s2:p1:tanh;flatten;fc=7:tanh;fc=2",
    "in=8;fc=16:relu;dropout=0.3;fc=9:relu;fc=4:softmax",
};

}  // namespace

Result symmetry_preservation(std::size_t models, std::size_t probes, std::uint64_t seed) {
  Rng rng(seed);
  double worst = 0.0, worst_resnet = 0.0;
  for (std::size_t i = 0; i < models; ++i) {
    const char* desc = kSymmetryArchs[i % std::size(kSymmetryArchs)];
    const Model m = oracle::random_model(desc, rng.next_u64());
    SymmetryOpLog log;
    for (std::size_t l = 0; l + 1 < m.num_param_layers(); ++l) {
      const Layer& layer = m.param(l);
      const std::size_t n = layer.units();
      log.add_permute(l, random_permutation(n, rng));
      if (layer.activation == Activation::ReLU) {
        std::vector<float> f(n);
        for (auto& v : f) v = static_cast<float>(std::exp(rng.uniform(-1.0, 1.0)));
        log.add_rescale(l, f);
      } else if (layer.activation == Activation::Tanh) {
        std::vector<int> s(n);
        for (auto& v : s) v = rng.below(2) ? 1 : -1;
        log.add_flip(l, s);
      }
    }
    const Model t = log.replay(m);
    for (std::size_t p = 0; p < probes; ++p) {
      const Tensor x = oracle::random_input(m, rng);
      worst = std::max(worst, double(max_dev(forward(m, x).logits, forward(t, x).logits)));
    }
  }
  for (std::size_t i = 0; i < std::max<std::size_t>(1, models / 5); ++i) {
    const std::size_t C = 4 + i % 4;
    const ResNetHead h = random_resnet_head(3, C, 5, rng);
    const ResNetHead ph = permute_resnet_head(h, random_permutation(C, rng));
    for (std::size_t p = 0; p < probes; ++p) {
      Tensor x({3, 6, 6});
      for (auto& v : x.data) v = static_cast<float>(rng.normal());
      worst_resnet = std::max(worst_resnet, double(max_dev(resnet_head_forward(h, x), resnet_head_forward(ph, x))));
    }
  }
  return {worst < 1e-5 && worst_resnet < 1e-4,
          "max deviation " + num(worst) + " (tol 1e-5), ResNet head " + num(worst_resnet) + " (tol 1e-4)"};
}

Result hungarian_optimality(std::size_t matrices, std::uint64_t seed) {
  Rng rng(seed);
  std::size_t mismatches = 0;
  for (std::size_t i = 0; i < matrices; ++i) {
    const std::size_t n = 1 + i % 6;
    const bool integer = i % 2 == 1;
    std::vector<double> v(n * n);
    for (auto& x : v) x = integer ? static_cast<double>(rng.below(4)) : rng.uniform(-1.0, 1.0);
    const CostMatrix c(n, v);
    const Assignment a = hungarian(c);
    const oracle::BruteAssignment b = oracle::brute_force_assignment(c);
    if (a.perm.mapping() != b.perm || std::fabs(a.cost - b.cost) > 1e-12) ++mismatches;
  }
  return {mismatches == 0, std::to_string(mismatches) + " mismatches in " + std::to_string(matrices) + " matrices"};
}

namespace {

struct PlantedCase {
  Model model;
  std::vector<Tensor> probe;
};

// Activation matching can only recover units whose series on the probe are
// non-constant and pairwise distinct; dead ReLU units tie with each other.
bool identifiable(const Model& m, const std::vector<Tensor>& probe) {
  std::vector<ForwardTrace> traces;
  for (const auto& x : probe) traces.push_back(forward(m, x));
  for (std::size_t l = 0; l + 1 < m.num_param_layers(); ++l) {
    const std::size_t units = m.param(l).units();
    std::vector<std::vector<float>> series(units);
    for (const auto& t : traces) {
      const Tensor& o = layer_output(m, t, l);
      const std::size_t per = o.size() / units;
      for (std::size_t d = 0; d < units; ++d) series[d].insert(series[d].end(), o.data.begin() + d * per, o.data.begin() + (d + 1) * per);
    }
    for (std::size_t d = 0; d < units; ++d) {
      if (std::all_of(series[d].begin(), series[d].end(), [&](float v) { return v == series[d][0]; })) return false;
      for (std::size_t e = 0; e < d; ++e)
        if (series[d] == series[e]) return false;
    }
  }
  return true;
}

std::vector<PlantedCase> planted_cases(std::size_t models, std::uint64_t seed, std::size_t* redrawn = nullptr) {
  std::vector<PlantedCase> out;
  TrainConfig tc;
  tc.batch_size = 32;
  tc.max_epochs = 15;
  for (std::size_t i = 0, attempt = 0; out.size() < models; ++attempt) {
    i = out.size();
    const std::uint64_t s = derive_seed(derive_seed(seed, i), attempt);
    Rng rng(s);
    PlantedCase c;
    if (i % 2 == 0) {
      const LabeledDataset d = oracle::blobs(4, 12, 100, 3.0, s);
      const Model arch = build_model("in=12;fc=20:relu;fc=14:relu;fc=4:softmax");
      c = {train(arch, d, d, SeedBundle::from_master(s), tc).model,
           std::vector<Tensor>(d.records.begin(), d.records.begin() + 100)};
    } else {
      SyntheticSpec spec;
      spec.kind = SyntheticKind::Images;
      spec.image_size = 8;
      spec.classes = 3;
      spec.per_class = 60;
      const LabeledDataset d = gen_synthetic(spec, rng);
      const Model arch = build_model("in=1x8x8;conv=5:k3:s1:p1:relu;pool=2;conv=6:k3:s1:p0:relu;flatten;fc=10:relu;fc=3:softmax");
      c = {train(arch, d, d, SeedBundle::from_master(s), tc).model,
           std::vector<Tensor>(d.records.begin(), d.records.begin() + 60)};
    }
    if (identifiable(c.model, c.probe)) {
      out.push_back(std::move(c));
    } else if (redrawn) {
      ++*redrawn;
    }
  }
  return out;
}

}  // namespace

Result planted_recovery(std::size_t models, std::uint64_t seed) {
  std::size_t redrawn = 0;
  const std::vector<PlantedCase> cases = planted_cases(models, seed, &redrawn);
  const std::pair<RealignMethod, RealignDirection> methods[] = {
      {RealignMethod::Weight, RealignDirection::BottomUp},
      {RealignMethod::Weight, RealignDirection::TopDown},
      {RealignMethod::Activation, RealignDirection::BottomUp},
      {RealignMethod::Correlation, RealignDirection::BottomUp},
  };
  Rng rng(derive_seed(seed, "plant"));
  double worst = 0.0;
  std::size_t wrong_plans = 0, runs = 0;
  for (const auto& c : cases) {
    const std::size_t L = c.model.num_param_layers();
    std::vector<Permutation> planted;
    SymmetryOpLog log;
    for (std::size_t l = 0; l + 1 < L; ++l) {
      planted.push_back(random_permutation(c.model.param(l).units(), rng));
      log.add_permute(l, planted.back());
    }
    const Model shuffled = log.replay(c.model);
    for (const auto& [method, dir] : methods) {
      const RealignResult r = realign(shuffled, c.model, method, dir, c.probe);
      for (std::size_t l = 0; l < L; ++l) worst = std::max(worst, wms(r.model, c.model, l));
      bool exact = r.plan.perms.size() == planted.size();
      for (std::size_t l = 0; exact && l < planted.size(); ++l) exact = r.plan.perms[l] == planted[l].inverse();
      if (!exact) ++wrong_plans;
      ++runs;
    }
  }
  return {worst < 1e-4 && wrong_plans == 0, "max WMS after re-alignment " + num(worst) + " (tol 1e-4), " +
                                                std::to_string(wrong_plans) + "/" + std::to_string(runs) +
                                                " plans differ from the planted inverse; " + std::to_string(redrawn) +
                                                " models redrawn for dead or duplicate units"};
}

namespace {

const char* kGradArchs[] = {
    "in=7;fc=9:relu;fc=6:tanh;fc=4:softmax",
    "in=5;fc=8:sigmoid;fc=3",
    "in=1x6x6;conv=3:k3:s1:p1:relu;pool=2;flatten;fc=5:relu;fc=3:softmax",
    "in=2x7x7;conv=4:k3:s2:p1:tanh;conv=3:k2:s1:p0:relu;flatten;fc=3:softmax",
    "in=1x8x8;conv=4:k3:s1:p0:relu;pool=3;flatten;fc=4:softmax",
    "in=6;fc=12:relu;dropout=0.4;fc=8:relu;dropout=0.2;fc=3:softmax",
    "in=1x6x6;conv=4:k3:s1:p1:relu;dropout=0.3;pool=2;flatten;fc=3:softmax",
};

// Central difference of f over one float parameter; returns nullopt when a
// step changes the ReLU/pool pattern (kinks make the derivative one-sided).
template <typename F>
std::optional<double> central(float& param, F&& f, double h) {
  const float orig = param;
  std::vector<long> p0, pp, pm;
  f(&p0);
  param = static_cast<float>(orig + h);
  const double hp = double(param) - orig;
  const double fp = f(&pp);
  param = static_cast<float>(orig - h);
  const double hm = orig - double(param);
  const double fm = f(&pm);
  param = orig;
  if (pp != p0 || pm != p0) return std::nullopt;
  return (fp - fm) / (hp + hm);
}

}  // namespace

Result gradient_correctness(std::size_t cases, std::uint64_t seed, double tol) {
  Rng rng(seed);
  double worst = 0.0;
  std::size_t checked = 0, skipped = 0;
  std::set<std::string> covered;
  for (std::size_t i = 0; i < cases; ++i) {
    const char* desc = kGradArchs[i % std::size(kGradArchs)];
    Model m = oracle::random_model(desc, rng.next_u64(), 0.2f);
    const Tensor x0 = oracle::random_input(m, rng);
    Tensor x = x0;
    Rng ds(rng.next_u64());
    const DropoutMasks masks = draw_dropout_masks(m, ds);
    const bool softmax = m.layers.back().activation == Activation::Softmax;
    const std::size_t label = rng.below(m.num_classes());
    Tensor g({m.num_classes()});
    for (auto& v : g.data) v = static_cast<float>(rng.normal());

    const ForwardTrace tr = forward(m, x, &masks);
    Backprop bp;
    if (softmax) {
      bp.grads = backward(m, x, label, &masks);
      Tensor lg = tr.output();
      lg[label] -= 1.0f;
      bp.input_grad = backward_from(m, x, tr, lg, &masks).input_grad;
    } else {
      bp = backward_from(m, x, tr, g, &masks);
    }
    auto objective = [&](std::vector<long>* pattern) {
      std::vector<double> z;
      oracle::forward(m, x, &masks, &z, pattern);
      if (!softmax) {
        double s = 0;
        for (std::size_t k = 0; k < z.size(); ++k) s += double(g[k]) * z[k];
        return s;
      }
      const double mx = *std::max_element(z.begin(), z.end());
      double s = 0;
      for (double v : z) s += std::exp(v - mx);
      return -(z[label] - mx - std::log(s));
    };
    auto compare = [&](float& param, float analytic) {
      const auto fd = central(param, objective, 1e-3);
      if (!fd) {
        ++skipped;
        return;
      }
      const double err = std::fabs(double(analytic) - *fd) / std::max(std::fabs(*fd), 1e-2);
      worst = std::max(worst, err);
      ++checked;
    };
    for (std::size_t l = 0; l < m.num_param_layers(); ++l) {
      Layer& layer = m.param(l);
      covered.insert(to_string(layer.kind));
      for (int t = 0; t < 6; ++t) {
        const std::size_t k = rng.below(layer.weight.size());
        compare(layer.weight[k], bp.grads.weight[l][k]);
      }
      const std::size_t k = rng.below(layer.bias.size());
      compare(layer.bias[k], bp.grads.bias[l][k]);
    }
    for (const auto& layer : m.layers) covered.insert(to_string(layer.kind));
    for (int t = 0; t < 4; ++t) {
      const std::size_t k = rng.below(x.size());
      compare(x[k], bp.input_grad[k]);
    }
  }
  std::string kinds;
  for (const auto& k : covered) kinds += (kinds.empty() ? "" : ",") + k;
  return {worst <= tol && checked > 0,
          std::to_string(cases) + " cases (" + kinds + "), " + std::to_string(checked) + " coordinates, max rel err " +
              num(worst) + " (tol " + num(tol) + "), " + std::to_string(skipped) + " skipped at kinks"};
}

ExperimentConfig reference_config(const std::filesystem::path& path, std::uint64_t seed, std::size_t repetitions) {
  KeyValueConfig kv = KeyValueConfig::load(path);
  kv.set("seed", std::to_string(seed));
  kv.set("repetitions", std::to_string(repetitions));
  return ExperimentConfig::from(kv);
}

Result cause_trend(const CauseStudyReport& report) {
  const double wi = report.row("wi", 0).wms.mean;
  const double bo = report.row("bo", 0).wms.mean;
  const double base = report.row("random_permutation", 0).wms.mean;
  const bool ratio = wi >= 1.5 * bo;
  const bool near = std::fabs(wi - base) <= 0.25 * base;
  return {ratio && near, "layer-1 WMS: !=WI " + num(wi) + ", !=BO " + num(bo) + " (ratio " + num(wi / bo) +
                             ", need >= 1.5), random permutation " + num(base) + " (!=WI off by " +
                             num(100.0 * (wi - base) / base) + "%, need within 25%)"};
}

AttackAucs attack_aucs(const ExperimentConfig& cfg_in, const LabeledDataset& data, ModelCache& cache) {
  ExperimentConfig cfg = cfg_in;
  cfg.scenarios = {Scenario::S1, Scenario::S3, Scenario::S6, Scenario::S7};
  AttackAucs a;
  a.report = run_scenarios(cfg, data, cache);
  a.s1 = a.report.summary(Scenario::S1).auc.mean;
  a.s3 = a.report.summary(Scenario::S3).auc.mean;
  a.s6 = a.report.summary(Scenario::S6).auc.mean;
  a.s7 = a.report.summary(Scenario::S7).auc.mean;
  a.s3_ci = a.report.summary(Scenario::S3).auc_ci95;
  return a;
}

Result misalignment_kills(const AttackAucs& a) {
  return {a.s1 >= 0.70 && a.s3 <= 0.58,
          "mean AUC S1 " + num(a.s1) + " (need >= 0.70), S3 " + num(a.s3) + " (need <= 0.58)"};
}

Result realignment_restores(const AttackAucs& a) {
  auto ok = [&](double s) { return s >= a.s3 + 0.08 && std::fabs(s - a.s1) <= 0.05; };
  const bool never_worse = a.s6 >= a.s3 - a.s3_ci && a.s7 >= a.s3 - a.s3_ci;
  return {ok(a.s6) && ok(a.s7) && never_worse,
          "mean AUC S6 " + num(a.s6) + ", S7 " + num(a.s7) + " vs S3 " + num(a.s3) + " + 0.08 and S1 " + num(a.s1) +
              " +- 0.05; S3 CI half width " + num(a.s3_ci)};
}

Result ia_identity(std::size_t pairs, std::uint64_t seed) {
  const char* archs[] = {"in=9;fc=12:relu;fc=7:tanh;fc=5:softmax", "in=4;fc=6:relu;fc=3",
                         "in=1x6x6;conv=3:k3:s1:p1:relu;pool=2;flatten;fc=6:relu;fc=4:softmax"};
  Rng rng(seed);
  double worst = 0.0;
  FeatureSpec spec;
  spec.include_ia = true;
  for (std::size_t i = 0; i < pairs; ++i) {
    const Model m = oracle::random_model(archs[i % 3], derive_seed(seed, i / 100), 0.5f);
    const Tensor x = oracle::random_input(m, rng, 2.0);
    const std::size_t y = rng.below(m.num_classes());
    const RecordFeatures f = extract_features(m, x, y, spec);
    double s = m.param(m.num_param_layers() - 1).bias[y];
    for (float v : f.ia.data) s += v;
    worst = std::max(worst, std::fabs(s - forward(m, x).logits[y]));
  }
  return {worst <= 1e-5, std::to_string(pairs) + " pairs, max |sum IA + b_y - logit_y| " + num(worst) + " (tol 1e-5)"};
}

Result ia_ablation(double with_ia, double without_ia) {
  return {with_ia >= without_ia,
          "mean AUC OA+IA+G " + num(with_ia) + " vs OA+G " + num(without_ia) + " (need >=)"};
}

Result metric_axioms(std::size_t auc_cases, std::uint64_t seed) {
  Rng rng(seed);
  bool ok = true;
  std::string why;
  auto fail = [&](const std::string& s) {
    ok = false;
    if (why.empty()) why = s;
  };
  const char* archs[] = {"in=6;fc=10:relu;fc=8:relu;fc=3:softmax",
                         "in=1x8x8;conv=4:k3:s1:p1:relu;pool=2;flatten;fc=6:relu;fc=3:softmax"};
  for (const char* desc : archs) {
    const Model a = oracle::random_model(desc, rng.next_u64());
    const Model b = oracle::random_model(desc, rng.next_u64());
    std::vector<Tensor> probe;
    for (int i = 0; i < 40; ++i) probe.push_back(oracle::random_input(a, rng));
    for (std::size_t l = 0; l + 1 < a.num_param_layers(); ++l) {
      if (wms(a, a, l) != 0.0) fail("wms(a, a) != 0");
      if (ams(a, a, l, probe) != 0.0) fail("ams(a, a) != 0");
      Rng r1(7), r2(7), r3(7);
      // Self-correlation is 1 except for series that never vary (dead ReLU
      // units or pixels), which count as 0.
      std::vector<std::size_t> pix;
      const double self = cba(a, a, l, probe, 20, r1, &pix);
      if (pix.empty()) pix = {0};
      std::vector<std::vector<float>> outs;
      for (const auto& x : probe) outs.push_back(layer_output(a, forward(a, x), l).data);
      const std::size_t units = a.param(l).units(), per_unit = outs[0].size() / units;
      std::size_t live = 0;
      for (std::size_t d = 0; d < units; ++d)
        for (auto p : pix) {
          const float first = outs[0][d * per_unit + p];
          live += std::any_of(outs.begin(), outs.end(), [&](const auto& o) { return o[d * per_unit + p] != first; });
        }
      const double want = static_cast<double>(live) / static_cast<double>(units * pix.size());
      if (std::fabs(self - want) > 1e-9) fail("cba(a, a) = " + num(self) + ", live fraction " + num(want));
      std::vector<float> f(b.param(l).units());
      for (auto& v : f) v = static_cast<float>(std::exp(rng.uniform(-1.5, 1.5)));
      const Model bs = rescale_neurons(b, l, f);
      const double c1 = cba(a, b, l, probe, 20, r2), c2 = cba(a, bs, l, probe, 20, r3);
      if (std::fabs(c1 - c2) > 1e-6) fail("cba changed under activation rescaling: " + num(c1) + " vs " + num(c2));
    }
  }
  std::size_t auc_mismatch = 0;
  for (std::size_t i = 0; i < auc_cases; ++i) {
    const std::size_t n = 2 + rng.below(999);
    std::vector<double> s(n);
    std::vector<int> y(n);
    const double levels = static_cast<double>(1 + rng.below(20));
    for (std::size_t k = 0; k < n; ++k) {
      y[k] = static_cast<int>(rng.below(2));
      s[k] = i % 2 ? std::floor(rng.uniform() * levels) / levels : rng.uniform();
    }
    y[0] = 0;
    y[1] = 1;
    const RocCurve roc = roc_curve(s, y, std::vector<double>{0.01, 0.1});
    if (roc.auc != oracle::pairwise_auc(s, y)) ++auc_mismatch;
    if (roc.tpr_at_fpr(0.01) != oracle::brute_tpr_at(s, y, 0.01)) ++auc_mismatch;
    if (roc.tpr_at_fpr(0.1) != oracle::brute_tpr_at(s, y, 0.1)) ++auc_mismatch;
  }
  if (auc_mismatch) fail(std::to_string(auc_mismatch) + " ROC mismatches against the pairwise oracle");
  return {ok, ok ? "identity axioms, rescaling invariance and " + std::to_string(auc_cases) + " exact AUC/TPR checks hold"
                 : why};
}

Result determinism_and_io(const ExperimentConfig& cfg, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::string why;
  auto run = [&](const fs::path& out, std::size_t jobs) {
    ExperimentConfig c = cfg;
    c.jobs = jobs;
    const LabeledDataset data = load_experiment_data(c);
    ModelCache cache;
    emit_scenario_report(run_scenarios(c, data, cache), out);
    emit_cause_report(run_cause_study(c, data, cache), out);
  };
  run(dir / "a", 1);
  run(dir / "b", 2);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir / "a")) {
    if (!e.is_regular_file() || e.path().extension() != ".csv") continue;
    const fs::path other = dir / "b" / fs::relative(e.path(), dir / "a");
    if (!fs::exists(other) || read_file(e.path()) != read_file(other)) {
      if (why.empty()) why = "differs: " + fs::relative(e.path(), dir / "a").string();
    }
    ++files;
  }

  // Checkpoint round trip.
  const Model m = oracle::random_model("in=1x6x6;conv=3:k3:s1:p1:relu;pool=2;flatten;fc=5:relu;fc=3:softmax", 11);
  const SeedBundle seeds{1, 2, 3};
  save_checkpoint(dir / "m.ckpt", m, seeds, "abc");
  const Checkpoint ck = load_checkpoint(dir / "m.ckpt");
  bool same = ck.seeds == seeds && ck.train_log_digest == "abc" && describe(ck.model) == describe(m);
  for (std::size_t l = 0; same && l < m.num_param_layers(); ++l)
    same = bit_equal(ck.model.param(l).weight, m.param(l).weight) && bit_equal(ck.model.param(l).bias, m.param(l).bias);
  if (!same && why.empty()) why = "checkpoint round trip is not bit exact";

  const std::string bytes = read_file(dir / "m.ckpt");
  std::vector<std::string> corrupt;
  corrupt.push_back(bytes.substr(0, bytes.size() / 2));
  corrupt.push_back(bytes + "x");
  std::string magic = bytes;
  magic[0] = 'X';
  corrupt.push_back(magic);
  std::string version = bytes;
  version[8] = 2;
  corrupt.push_back(version);
  corrupt.push_back("");
  std::size_t rejected = 0;
  for (const auto& c : corrupt) {
    try {
      checkpoint_from_container(decode_container(c));
    } catch (const FormatError&) {
      ++rejected;
    }
  }
  if (rejected != corrupt.size() && why.empty()) why = "a corrupted checkpoint was accepted";
  return {why.empty() && files > 0, why.empty() ? std::to_string(files) +
                                                      " CSVs byte-identical across runs (1 and 2 jobs); checkpoint "
                                                      "round trip bit-exact; " +
                                                      std::to_string(rejected) + "/" +
                                                      std::to_string(corrupt.size()) + " corruptions rejected"
                                                : why};
}

Result set_invariance(std::size_t models, std::uint64_t seed) {
  const char* archs[] = {"in=8;fc=12:relu;fc=10:relu;fc=10:softmax", "in=5;fc=7:tanh;fc=3:softmax",
                         "in=1x6x6;conv=3:k3:s1:p1:relu;pool=2;flatten;fc=9:relu;fc=4:softmax"};
  Rng rng(seed);
  FeatureSpec spec;
  spec.set_based = true;
  std::size_t broken = 0, bad_length = 0;
  for (std::size_t i = 0; i < models; ++i) {
    const Model m = oracle::random_model(archs[i % 3], rng.next_u64(), 0.3f);
    const std::size_t L = m.num_param_layers();
    const Tensor x = oracle::random_input(m, rng);
    const std::size_t y = rng.below(m.num_classes());
    const RecordFeatures f = extract_features(m, x, y, spec);
    for (const auto& v : f.set_vectors)
      if (v.size() != m.num_classes() + 3) ++bad_length;
    McConfig mc;
    mc.seed = rng.next_u64();
    const MetaClassifier clf(spec, f, m.num_classes(), mc);
    const Tensor rep = clf.set_representation(f);
    for (int t = 0; t < 5; ++t) {
      const Model p = permute_layer(m, L - 2, random_permutation(m.param(L - 2).units(), rng));
      if (!bit_equal(clf.set_representation(extract_features(p, x, y, spec)), rep)) ++broken;
    }
  }
  return {broken == 0 && bad_length == 0,
          std::to_string(models) + " models x 5 permutations: " + std::to_string(broken) +
              " representations changed, " + std::to_string(bad_length) + " vectors with length != N_c + 3"};
}

}  // namespace checks
