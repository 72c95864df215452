#include "shadowalign/harness.hpp"

#include <algorithm>
#include <atomic>
#include <boost/math/distributions/students_t.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_set>

#include "shadowalign/error.hpp"

namespace shadowalign {

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string quoted(const std::string& v) {
  std::string out = "\"";
  for (char c : v) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

std::uint64_t rep_master(const ExperimentConfig& cfg, std::size_t rep) {
  return derive_seed(cfg.seed, "repetition-" + std::to_string(rep));
}

std::vector<Tensor> records_of(const LabeledDataset& d, std::span<const std::size_t> idx) {
  std::vector<Tensor> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(d.records[i]);
  return out;
}

std::string data_digest(const LabeledDataset& d) {
  std::string bytes;
  for (std::size_t i = 0; i < d.size(); ++i) {
    bytes.append(reinterpret_cast<const char*>(&d.ids[i]), sizeof(std::uint64_t));
    bytes.append(reinterpret_cast<const char*>(&d.labels[i]), sizeof(std::size_t));
    bytes.append(reinterpret_cast<const char*>(d.records[i].data.data()), d.records[i].size() * sizeof(float));
  }
  return fnv1a_hex(bytes) + "/" + std::to_string(d.size());
}

}  // namespace

void run_jobs(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& task) {
  if (n == 0) return;
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  std::vector<std::exception_ptr> errors(n);
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        task(i);
      } catch (...) {
        errors[i] = std::current_exception();
        break;
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::vector<std::thread> threads;
    for (std::size_t t = 0; t < jobs; ++t) {
      threads.emplace_back([&] {
        for (std::size_t i; !failed && (i = next++) < n;) {
          try {
            task(i);
          } catch (...) {
            errors[i] = std::current_exception();
            failed = true;
          }
        }
      });
    }
    for (auto& th : threads) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

LabeledDataset load_experiment_data(const ExperimentConfig& cfg) {
  return with_stage("data", [&] {
    switch (cfg.data_source) {
      case DataSource::Synthetic: {
        Rng rng(derive_seed(cfg.seed, "data"));
        return gen_synthetic(cfg.synthetic, rng);
      }
      case DataSource::Csv: return load_csv_dataset(cfg.data_path, build_model(cfg.arch).input_shape);
      case DataSource::Tensor: return load_dataset(cfg.data_path);
    }
    return LabeledDataset{};
  });
}

std::string train_key(const Model& arch, const LabeledDataset& data, const LabeledDataset& val, const SeedBundle& seeds,
                      const TrainConfig& cfg) {
  std::ostringstream os;
  os << describe(arch) << '|' << data_digest(data) << '|' << data_digest(val) << '|' << seeds.wi << ',' << seeds.bo << ','
     << seeds.ds << '|' << cfg.batch_size << ',' << cfg.lr << ',' << cfg.lr_divisor << ',' << cfg.patience << ','
     << cfg.min_lr << ',' << cfg.max_epochs << ',' << cfg.beta1 << ',' << cfg.beta2 << ',' << cfg.adam_eps;
  return os.str();
}

TrainedModel ModelCache::get(const std::string& key, const std::function<TrainedModel()>& train) {
  const std::filesystem::path file = dir_.empty() ? std::filesystem::path{} : dir_ / (fnv1a_hex(key) + ".ckpt");
  {
    std::lock_guard<std::mutex> lock(mu_);
    if (auto it = memory_.find(key); it != memory_.end()) return it->second;
  }
  if (!file.empty() && std::filesystem::exists(file)) {
    const Container c = read_container(file);
    if (c.meta("cache_key") == key) {
      Checkpoint ck = checkpoint_from_container(c);
      TrainedModel t{std::move(ck.model), std::stoull(c.meta("best_epoch").value_or("0")), ck.seeds};
      std::lock_guard<std::mutex> lock(mu_);
      memory_.emplace(key, t);
      return t;
    }
  }
  TrainedModel t = train();
  if (!file.empty()) {
    Container c = checkpoint_container(t.model, t.seeds);
    c.set_meta("cache_key", key);
    c.set_meta("best_epoch", std::to_string(t.best_epoch));
    write_container(file, c);
  }
  std::lock_guard<std::mutex> lock(mu_);
  ++trained_;
  memory_.emplace(key, t);
  return t;
}

namespace {

TrainedModel train_cached(ModelCache& cache, const Model& arch, const LabeledDataset& data, const LabeledDataset& val,
                          const SeedBundle& seeds, const TrainConfig& cfg, const std::string& stage) {
  return cache.get(train_key(arch, data, val, seeds, cfg), [&] {
    return with_stage(stage, [&] {
      TrainResult r = train(arch, data, val, seeds, cfg);
      return TrainedModel{std::move(r.model), r.best_epoch, seeds};
    });
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// Cause study

const std::vector<std::string>& cause_conditions() {
  static const std::vector<std::string> names{"same",     "wi",       "bo",       "ds", "overlap",
                                              "disjoint", "bo_ds_dd", "wi_bo_ds", "all"};
  return names;
}

std::string cause_condition_label(const std::string& name) {
  if (name == "random_permutation") return "Random permutation";
  if (name == "same") return "Same seeds and data";
  if (name == "wi") return "!= weight initialisation (WI)";
  if (name == "bo") return "!= batch ordering (BO)";
  if (name == "ds") return "!= dropout selection (DS)";
  if (name == "overlap") return "Overlapping datasets";
  if (name == "disjoint") return "Disjoint datasets (DD)";
  if (name == "bo_ds_dd") return "!= BO, != DS and DD";
  if (name == "wi_bo_ds") return "!= WI, != BO and != DS";
  if (name == "all") return "All != (WI, BO, DS and DD)";
  throw ConfigError("unknown cause-study condition '" + name + "'");
}

const CauseStudyRow& CauseStudyReport::row(const std::string& condition, std::size_t layer) const {
  for (const auto& r : rows)
    if (r.condition == condition && r.layer == layer) return r;
  throw InvalidArgument("no cause-study row for " + condition + " layer " + std::to_string(layer + 1));
}

std::string CauseStudyReport::to_csv() const {
  std::ostringstream os;
  os << "condition,label,layer,wms_mean,wms_sd,ams_mean,ams_sd,cba_mean,cba_sd,repetitions\n";
  for (const auto& r : rows) {
    os << r.condition << ',' << quoted(cause_condition_label(r.condition)) << ',' << r.layer + 1 << ',' << fmt(r.wms.mean) << ','
       << fmt(r.wms.sd) << ',';
    if (r.has_activation_metrics) {
      os << fmt(r.ams.mean) << ',' << fmt(r.ams.sd) << ',' << fmt(r.cba.mean) << ',' << fmt(r.cba.sd);
    } else {
      os << ",,,";
    }
    os << ',' << repetitions << '\n';
  }
  return os.str();
}

CauseStudyReport run_cause_study(const ExperimentConfig& cfg, const LabeledDataset& data, ModelCache& cache) {
  const Model arch = build_model(cfg.arch);
  const std::size_t L = arch.num_param_layers();
  const std::size_t n = cfg.partition.train_size;
  const std::size_t nv = cfg.partition.n_val;
  if (2 * nv + 2 * n > data.size()) {
    throw InvalidArgument("cause study needs 2*n_val + 2*train_size records, dataset has " + std::to_string(data.size()));
  }
  std::vector<std::string> conds = cfg.cause_conditions.empty() ? cause_conditions() : cfg.cause_conditions;
  for (const auto& c : conds) cause_condition_label(c);

  struct Rep {
    std::uint64_t master = 0;
    LabeledDataset val, target_data, overlap_data, disjoint_data;
    std::vector<Tensor> probe;
    SeedBundle t_seeds, alt;
    TrainedModel target;
  };
  const std::size_t R = cfg.repetitions;
  std::vector<Rep> reps(R);
  for (std::size_t r = 0; r < R; ++r) {
    Rep& rep = reps[r];
    rep.master = rep_master(cfg, r);
    Rng rng(derive_seed(rep.master, "cause-split"));
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    auto slice = [&](std::size_t a, std::size_t len) {
      return std::vector<std::size_t>(order.begin() + static_cast<long>(a), order.begin() + static_cast<long>(a + len));
    };
    rep.val = data.subset(slice(0, nv));
    rep.probe = records_of(data, slice(nv, std::min(nv, cfg.probe_records)));
    rep.target_data = data.subset(slice(2 * nv, n));
    rep.overlap_data = data.subset(slice(2 * nv + n / 2, n));
    rep.disjoint_data = data.subset(slice(2 * nv + n, n));
    rep.t_seeds = SeedBundle::from_master(derive_seed(rep.master, "cause-target"));
    rep.alt = SeedBundle::from_master(derive_seed(rep.master, "cause-other"));
  }
  run_jobs(R, cfg.jobs, [&](std::size_t r) {
    reps[r].target = train_cached(cache, arch, reps[r].target_data, reps[r].val, reps[r].t_seeds, cfg.train, "cause-study target");
  });

  // results[r][c][l] = (wms, ams, cba)
  std::vector<std::vector<std::vector<std::array<double, 3>>>> results(
      R, std::vector<std::vector<std::array<double, 3>>>(conds.size()));
  run_jobs(R * conds.size(), cfg.jobs, [&](std::size_t job) {
    const std::size_t r = job / conds.size(), c = job % conds.size();
    const Rep& rep = reps[r];
    const std::string& name = conds[c];
    SeedBundle s = rep.t_seeds;
    const LabeledDataset* d = &rep.target_data;
    if (name == "wi") s.wi = rep.alt.wi;
    if (name == "bo") s.bo = rep.alt.bo;
    if (name == "ds") s.ds = rep.alt.ds;
    if (name == "overlap") d = &rep.overlap_data;
    if (name == "disjoint") d = &rep.disjoint_data;
    if (name == "bo_ds_dd") {
      s.bo = rep.alt.bo;
      s.ds = rep.alt.ds;
      d = &rep.disjoint_data;
    }
    if (name == "wi_bo_ds") s = rep.alt;
    if (name == "all") {
      s = rep.alt;
      d = &rep.disjoint_data;
    }
    const TrainedModel m = train_cached(cache, arch, *d, rep.val, s, cfg.train, "cause-study " + name);
    Rng rng(derive_seed(rep.master, "cause-cba-" + name));
    for (std::size_t l = 0; l < L; ++l) {
      results[r][c].push_back({wms(rep.target.model, m.model, l), ams(rep.target.model, m.model, l, rep.probe),
                               cba(rep.target.model, m.model, l, rep.probe, cfg.pixels, rng)});
    }
  });

  CauseStudyReport report;
  report.repetitions = R;
  for (std::size_t l = 0; l < L; ++l) {
    std::vector<double> base;
    MeanSd single;
    for (std::size_t r = 0; r < R; ++r) {
      Rng rng(derive_seed(reps[r].master, "cause-baseline-" + std::to_string(l)));
      single = random_perm_baseline(reps[r].target.model, l, cfg.baseline_trials, rng);
      base.push_back(single.mean);
    }
    CauseStudyRow row;
    row.condition = "random_permutation";
    row.layer = l;
    row.wms = R == 1 ? single : mean_sd(base);
    row.has_activation_metrics = false;
    report.rows.push_back(row);
  }
  for (std::size_t c = 0; c < conds.size(); ++c)
    for (std::size_t l = 0; l < L; ++l) {
      std::vector<double> w, a, k;
      for (std::size_t r = 0; r < R; ++r) {
        w.push_back(results[r][c][l][0]);
        a.push_back(results[r][c][l][1]);
        k.push_back(results[r][c][l][2]);
      }
      report.rows.push_back({conds[c], l, mean_sd(w), mean_sd(a), mean_sd(k), true});
    }
  return report;
}

// ---------------------------------------------------------------------------
// Scenarios

double ci95_half_width(const MeanSd& s, std::size_t n) {
  if (n < 2) return 0.0;
  boost::math::students_t dist(static_cast<double>(n - 1));
  return boost::math::quantile(boost::math::complement(dist, 0.025)) * s.sd / std::sqrt(static_cast<double>(n));
}

namespace {

struct Labeled {
  std::vector<std::size_t> idx;
  std::vector<bool> member;
};

std::vector<std::size_t> take(std::vector<std::size_t>& from, std::size_t k, Rng& rng, const std::string& what) {
  if (k > from.size()) {
    throw InvalidArgument("not enough records for " + what + ": need " + std::to_string(k) + ", have " +
                          std::to_string(from.size()));
  }
  rng.shuffle(from);
  std::vector<std::size_t> out(from.end() - static_cast<long>(k), from.end());
  from.resize(from.size() - k);
  return out;
}

Labeled balanced(std::vector<std::size_t>& in, std::vector<std::size_t>& out, std::size_t n, Rng& rng,
                 const std::string& what) {
  Labeled l;
  for (auto i : take(in, n / 2, rng, what + " members")) {
    l.idx.push_back(i);
    l.member.push_back(true);
  }
  for (auto i : take(out, n - n / 2, rng, what + " non-members")) {
    l.idx.push_back(i);
    l.member.push_back(false);
  }
  return l;
}

FeatureGroup featurise(const Model& m, const LabeledDataset& data, const Labeled& recs, const FeatureSpec& spec,
                       std::size_t source) {
  FeatureGroup g;
  g.source = source;
  for (std::size_t i = 0; i < recs.idx.size(); ++i) {
    const std::size_t k = recs.idx[i];
    RecordFeatures f = extract_features(m, data.records[k], data.labels[k], spec);
    f.record_id = data.ids[k];
    f.member = recs.member[i];
    g.records.push_back(std::move(f));
  }
  return g;
}

std::vector<std::size_t> minus(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  const std::unordered_set<std::size_t> drop(b.begin(), b.end());
  std::vector<std::size_t> out;
  for (auto x : a)
    if (!drop.count(x)) out.push_back(x);
  return out;
}

struct ScenarioRep {
  std::uint64_t master = 0;
  Splits splits;
  LabeledDataset v1;
  std::vector<Tensor> probe;
  TrainedModel target;
  std::string target_key;
  std::vector<TrainedModel> shadows, shadows_wi;
  std::vector<SeedBundle> shadow_seeds;
  Labeled test, s1_train, s1_val;
  double target_train_acc = 0.0, target_val_acc = 0.0;
};

}  // namespace

std::vector<ScenarioSummary> ScenarioReport::summaries() const {
  std::vector<ScenarioSummary> out;
  std::vector<Scenario> order;
  for (const auto& r : runs)
    if (std::find(order.begin(), order.end(), r.scenario) == order.end()) order.push_back(r.scenario);
  for (auto s : order) out.push_back(summary(s));
  return out;
}

const ScenarioSummary ScenarioReport::summary(Scenario s) const {
  std::vector<double> aucs, tprs;
  for (const auto& r : runs)
    if (r.scenario == s) {
      aucs.push_back(r.roc.auc);
      tprs.push_back(r.roc.tpr_at_fpr(fpr_target));
    }
  if (aucs.empty()) throw InvalidArgument("no runs for scenario " + to_string(s));
  ScenarioSummary sum;
  sum.scenario = s;
  sum.runs = aucs.size();
  sum.auc = mean_sd(aucs);
  sum.tpr = mean_sd(tprs);
  sum.has_ci = sum.runs >= 2;
  sum.auc_ci95 = ci95_half_width(sum.auc, sum.runs);
  sum.tpr_ci95 = ci95_half_width(sum.tpr, sum.runs);
  return sum;
}

std::string ScenarioReport::summary_csv() const {
  std::ostringstream os;
  char f[32];
  std::snprintf(f, sizeof f, "%g", fpr_target);
  os << "scenario,description,features,runs,auc_mean,auc_ci95,tpr_at_" << f << "_mean,tpr_at_" << f << "_ci95\n";
  for (const auto& s : summaries()) {
    os << to_string(s.scenario) << ',' << quoted(scenario_description(s.scenario)) << ',' << quoted(features) << ','
       << s.runs << ',' << fmt(s.auc.mean) << ',' << (s.has_ci ? fmt(s.auc_ci95) : "") << ',' << fmt(s.tpr.mean) << ','
       << (s.has_ci ? fmt(s.tpr_ci95) : "") << '\n';
  }
  return os.str();
}

std::string ScenarioReport::runs_csv() const {
  std::ostringstream os;
  std::size_t layers = 0;
  for (const auto& r : runs) layers = std::max(layers, r.shadow_wms.size());
  char f[32];
  std::snprintf(f, sizeof f, "%g", fpr_target);
  os << "scenario,repetition,auc,tpr_at_" << f << ",mc_val_acc,mc_best_epoch,target_train_acc,target_val_acc";
  for (std::size_t l = 0; l < layers; ++l) os << ",shadow_wms_layer" << l + 1;
  os << '\n';
  for (const auto& r : runs) {
    os << to_string(r.scenario) << ',' << r.repetition << ',' << fmt(r.roc.auc) << ',' << fmt(r.roc.tpr_at_fpr(fpr_target))
       << ',' << fmt(r.mc_val_acc) << ',' << r.mc_best_epoch << ',' << fmt(r.target_train_acc) << ','
       << fmt(r.target_val_acc);
    for (std::size_t l = 0; l < layers; ++l) os << ',' << (l < r.shadow_wms.size() ? fmt(r.shadow_wms[l]) : "");
    os << '\n';
  }
  return os.str();
}

std::string ScenarioReport::timing_text() const {
  std::ostringstream os;
  double total = 0.0;
  for (const auto& r : runs) {
    os << to_string(r.scenario) << " rep " << r.repetition << ": " << r.seconds << " s\n";
    total += r.seconds;
  }
  os << "total job time: " << total << " s\n";
  return os.str();
}

ScenarioReport run_scenarios(const ExperimentConfig& cfg, const LabeledDataset& data, ModelCache& cache,
                             const ScenarioOptions& options) {
  cfg.validate();
  const Model arch = build_model(cfg.arch);
  const std::size_t L = arch.num_param_layers();
  const std::string feature_text = options.features.empty() ? cfg.features : options.features;
  const FeatureSpec spec = with_stage("features", [&] {
    FeatureSpec s = FeatureSpec::parse(feature_text, L);
    s.validate(arch);
    return s;
  });
  data.validate(arch.num_classes());
  const bool want_s2 = std::count(cfg.scenarios.begin(), cfg.scenarios.end(), Scenario::S2) > 0;
  const bool want_shadows = std::any_of(cfg.scenarios.begin(), cfg.scenarios.end(),
                                        [](Scenario s) { return s != Scenario::S1 && s != Scenario::S2; });
  const std::size_t K = cfg.partition.num_shadows;
  const std::size_t R = cfg.repetitions;

  std::vector<ScenarioRep> reps(R);
  for (std::size_t r = 0; r < R; ++r) {
    ScenarioRep& rep = reps[r];
    rep.master = rep_master(cfg, r);
    with_stage("partition", [&] {
      Rng split_rng(derive_seed(rep.master, "splits"));
      rep.splits = make_splits(data.size(), cfg.partition, split_rng);
      rep.v1 = data.subset(rep.splits.v1);
      const std::size_t np = std::min(cfg.probe_records, rep.splits.v2.size());
      rep.probe = records_of(data, std::span(rep.splits.v2).first(np));

      Rng rng(derive_seed(rep.master, "attack-sets"));
      std::vector<std::size_t> in = rep.splits.target_train;
      std::vector<std::size_t> out = minus(rep.splits.target_pool, rep.splits.target_train);
      rep.test = balanced(in, out, cfg.attack_test, rng, "the attack test set");
      if (std::count(cfg.scenarios.begin(), cfg.scenarios.end(), Scenario::S1)) {
        rep.s1_train = balanced(in, out, cfg.attack_train, rng, "the S1 training set");
        rep.s1_val = balanced(in, out, cfg.attack_val, rng, "the S1 validation set");
      }
      return 0;
    });
    for (std::size_t k = 0; k < K; ++k)
      rep.shadow_seeds.push_back(SeedBundle::from_master(derive_seed(rep.master, "shadow-" + std::to_string(k))));
  }

  // Target and shadow training, one job per model.
  struct TrainJob {
    std::size_t rep;
    int kind;  // 0 target, 1 shadow, 2 shadow sharing the target's WI
    std::size_t k;
  };
  std::vector<TrainJob> train_jobs;
  for (std::size_t r = 0; r < R; ++r) train_jobs.push_back({r, 0, 0});
  run_jobs(train_jobs.size(), cfg.jobs, [&](std::size_t j) {
    ScenarioRep& rep = reps[train_jobs[j].rep];
    const SeedBundle seeds = SeedBundle::from_master(derive_seed(rep.master, "target"));
    const LabeledDataset d = data.subset(rep.splits.target_train);
    rep.target_key = train_key(arch, d, rep.v1, seeds, cfg.train);
    rep.target = train_cached(cache, arch, d, rep.v1, seeds, cfg.train, "target training");
    rep.target_train_acc = accuracy(rep.target.model, d);
    rep.target_val_acc = accuracy(rep.target.model, data.subset(rep.splits.v2));
  });
  train_jobs.clear();
  for (std::size_t r = 0; r < R; ++r) {
    reps[r].shadows.resize(want_shadows ? K : 0);
    reps[r].shadows_wi.resize(want_s2 ? K : 0);
    for (std::size_t k = 0; k < K; ++k) {
      if (want_shadows) train_jobs.push_back({r, 1, k});
      if (want_s2) train_jobs.push_back({r, 2, k});
    }
  }
  run_jobs(train_jobs.size(), cfg.jobs, [&](std::size_t j) {
    const TrainJob& job = train_jobs[j];
    ScenarioRep& rep = reps[job.rep];
    SeedBundle seeds = rep.shadow_seeds[job.k];
    if (job.kind == 2) seeds.wi = rep.target.seeds.wi;
    const TrainedModel m = train_cached(cache, arch, data.subset(rep.splits.shadow_train[job.k]), rep.v1, seeds,
                                        cfg.train, "shadow " + std::to_string(job.k + 1) + " training");
    (job.kind == 1 ? rep.shadows : rep.shadows_wi)[job.k] = m;
  });

  ScenarioReport report;
  report.features = spec.to_string();
  report.runs.resize(cfg.scenarios.size() * R);
  const double fpr_target = report.fpr_target;

  run_jobs(report.runs.size(), cfg.jobs, [&](std::size_t j) {
    const auto start = std::chrono::steady_clock::now();
    const Scenario sc = cfg.scenarios[j / R];
    const std::size_t r = j % R;
    const ScenarioRep& rep = reps[r];
    const std::string tag = to_string(sc) + " rep " + std::to_string(r);
    ScenarioRun run;
    run.scenario = sc;
    run.repetition = r;
    run.target_train_acc = rep.target_train_acc;
    run.target_val_acc = rep.target_val_acc;

    const Model target = sc == Scenario::S4 ? weight_sort_canonical(rep.target.model) : rep.target.model;
    const FeatureGroup test = with_stage(tag + " test features", [&] { return featurise(target, data, rep.test, spec, 0); });

    std::vector<FeatureGroup> train_groups;
    FeatureGroup val_group;
    McConfig mc = cfg.mc;
    mc.seed = derive_seed(rep.master, "meta-classifier");

    if (sc == Scenario::S1) {
      train_groups.push_back(featurise(target, data, rep.s1_train, spec, 0));
      val_group = featurise(target, data, rep.s1_val, spec, 0);
      mc.regime = BatchRegime::SharedRecords;
    } else {
      std::vector<TrainedModel> shadows;
      if (sc == Scenario::S2) {
        shadows = rep.shadows_wi;
      } else if (sc == Scenario::S9) {
        for (std::size_t k = 0; k < K; ++k) {
          const LabeledDataset d = data.subset(rep.splits.shadow_train[k]);
          const SeedBundle& seeds = rep.shadow_seeds[k];
          const std::string key = "realigned-after-init|" + rep.target_key + "|" + train_key(arch, d, rep.v1, seeds, cfg.train);
          shadows.push_back(cache.get(key, [&] {
            return with_stage(tag + " shadow " + std::to_string(k + 1) + " training", [&] {
              RealignAfterInitResult res = realign_after_init(arch, rep.target.model, d, rep.v1, seeds, cfg.train);
              return TrainedModel{std::move(res.trained.model), res.trained.best_epoch, seeds};
            });
          }));
        }
      } else {
        shadows = rep.shadows;
      }

      with_stage(tag + " re-alignment", [&] {
        for (auto& s : shadows) {
          switch (sc) {
            case Scenario::S4: s.model = weight_sort_canonical(s.model); break;
            case Scenario::S5: s.model = realign(s.model, target, RealignMethod::Weight, RealignDirection::BottomUp).model; break;
            case Scenario::S6: s.model = realign(s.model, target, RealignMethod::Weight, RealignDirection::TopDown).model; break;
            case Scenario::S7:
              s.model = realign(s.model, target, RealignMethod::Activation, RealignDirection::BottomUp, rep.probe).model;
              break;
            case Scenario::S8:
              s.model = realign(s.model, target, RealignMethod::Correlation, RealignDirection::BottomUp, rep.probe).model;
              break;
            default: break;
          }
        }
        return 0;
      });

      std::size_t val_k = 0;
      if (cfg.validation_shadow == ValidationShadow::Median) {
        std::vector<std::size_t> order(K);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return shadows[a].best_epoch < shadows[b].best_epoch; });
        val_k = order[(K - 1) / 2];
      }

      with_stage(tag + " attack features", [&] {
        Rng rng(derive_seed(rep.master, "shadow-attack-sets"));
        const std::vector<std::size_t> pool = minus(rep.splits.adversary, rep.test.idx);
        auto membership = [&](std::size_t k, const std::vector<std::size_t>& idx) {
          const std::unordered_set<std::size_t> in(rep.splits.shadow_train[k].begin(), rep.splits.shadow_train[k].end());
          Labeled l;
          l.idx = idx;
          for (auto i : idx) l.member.push_back(in.count(i) > 0);
          return l;
        };
        auto split_in_out = [&](std::size_t k, std::vector<std::size_t>& in, std::vector<std::size_t>& out) {
          const std::unordered_set<std::size_t> mem(rep.splits.shadow_train[k].begin(), rep.splits.shadow_train[k].end());
          for (auto i : pool) (mem.count(i) ? in : out).push_back(i);
        };
        {
          std::vector<std::size_t> in, out;
          split_in_out(val_k, in, out);
          val_group = featurise(shadows[val_k].model, data, balanced(in, out, cfg.attack_val, rng, "the MC validation set"),
                                spec, val_k);
        }
        if (cfg.partition.overlap == Overlap::Disjoint) {
          mc.regime = BatchRegime::SharedRecords;
          std::vector<std::size_t> p = pool;
          const std::vector<std::size_t> shared = take(p, std::min(cfg.attack_train, p.size()), rng, "the MC training pool");
          for (std::size_t k = 0; k < K; ++k)
            if (k != val_k) train_groups.push_back(featurise(shadows[k].model, data, membership(k, shared), spec, k));
        } else {
          mc.regime = BatchRegime::Balanced;
          for (std::size_t k = 0; k < K; ++k) {
            if (k == val_k) continue;
            std::vector<std::size_t> in, out;
            split_in_out(k, in, out);
            train_groups.push_back(
                featurise(shadows[k].model, data, balanced(in, out, cfg.attack_train, rng, "the MC training set"), spec, k));
          }
        }
        return 0;
      });

      run.shadow_wms.assign(L, 0.0);
      std::size_t counted = 0;
      for (std::size_t k = 0; k < K; ++k) {
        if (k == val_k) continue;
        for (std::size_t l = 0; l < L; ++l) run.shadow_wms[l] += wms(target, shadows[k].model, l);
        ++counted;
      }
      for (auto& v : run.shadow_wms) v /= static_cast<double>(std::max<std::size_t>(1, counted));
    }

    const McTrainResult mcr = with_stage(tag + " meta-classifier training", [&] {
      return train_meta_classifier(train_groups, val_group, spec, arch.num_classes(), mc);
    });
    run.mc_val_acc = mcr.best_val_acc;
    run.mc_best_epoch = mcr.best_epoch;
    const std::vector<double> targets{fpr_target};
    run.roc = with_stage(tag + " evaluation", [&] { return evaluate(mcr.classifier, test.records, targets); });
    run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    report.runs[j] = std::move(run);
  });
  return report;
}

// ---------------------------------------------------------------------------
// Reports

void emit_cause_report(const CauseStudyReport& report, const std::filesystem::path& dir) {
  write_file(dir / "cause_study.csv", report.to_csv());
}

void emit_scenario_report(const ScenarioReport& report, const std::filesystem::path& dir) {
  write_file(dir / "scenario_summary.csv", report.summary_csv());
  write_file(dir / "scenario_runs.csv", report.runs_csv());
  for (const auto& r : report.runs) {
    write_file(dir / "roc" / (to_string(r.scenario) + "_rep" + std::to_string(r.repetition) + ".csv"), r.roc.to_csv());
  }
  write_file(dir / "timing.txt", report.timing_text());
}

std::vector<std::uint8_t> normalise_map_u8(std::span<const float> values) {
  std::vector<std::uint8_t> out(values.size(), 0);
  if (values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double a = *lo, b = *hi;
  if (!(b > a)) return out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    out[i] = static_cast<std::uint8_t>(std::lround(255.0 * (values[i] - a) / (b - a)));
  }
  return out;
}

std::string encode_pgm(std::size_t width, std::size_t height, std::span<const std::uint8_t> pixels) {
  if (pixels.size() != width * height) throw ShapeError("PGM pixel count does not match width x height");
  std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(pixels.data()), pixels.size());
  return out;
}

std::vector<std::filesystem::path> write_activation_maps(const Model& model, const Tensor& x, std::size_t l,
                                                         const std::filesystem::path& dir, const std::string& prefix) {
  if (model.param(l).kind != LayerKind::Conv2D) throw InvalidArgument("activation maps need a convolutional layer");
  const ForwardTrace trace = forward(model, x);
  const Tensor& out = layer_output(model, trace, l);
  const std::size_t C = out.dim(0), H = out.dim(1), W = out.dim(2);
  std::vector<std::filesystem::path> files;
  for (std::size_t c = 0; c < C; ++c) {
    const auto map = normalise_map_u8(std::span<const float>(out.data).subspan(c * H * W, H * W));
    files.push_back(dir / (prefix + "_f" + std::to_string(c) + ".pgm"));
    write_file(files.back(), encode_pgm(W, H, map));
  }
  return files;
}

}  // namespace shadowalign
