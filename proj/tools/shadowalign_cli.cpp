// Command-line front end: gen-data, train, permute, realign, metrics,
// cause-study, attack, report. Exit codes: 0 ok, 1 config error, 2 runtime.

#include <CLI11.hpp>
#include <chrono>
#include <iostream>
#include <sstream>

#include "shadowalign/config.hpp"
#include "shadowalign/data.hpp"
#include "shadowalign/error.hpp"
#include "shadowalign/harness.hpp"
#include "shadowalign/io.hpp"
#include "shadowalign/metrics.hpp"
#include "shadowalign/realign.hpp"
#include "shadowalign/symmetry.hpp"

namespace sa = shadowalign;
namespace fs = std::filesystem;

namespace {

struct Globals {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::optional<std::size_t> jobs;
};

sa::KeyValueConfig load_kv(const Globals& g) {
  sa::KeyValueConfig kv = g.config.empty() ? sa::KeyValueConfig{} : sa::KeyValueConfig::load(g.config);
  for (const auto& s : g.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw sa::ConfigError("--set expects key=value, got '" + s + "'");
    kv.set(s.substr(0, eq), s.substr(eq + 1));
  }
  if (g.seed) kv.set("seed", std::to_string(*g.seed));
  if (g.jobs) kv.set("jobs", std::to_string(*g.jobs));
  return kv;
}

sa::ExperimentConfig load_config(const Globals& g) { return sa::ExperimentConfig::from(load_kv(g)); }

std::vector<sa::Tensor> probe_records(const sa::ExperimentConfig& cfg, const sa::LabeledDataset& data) {
  const std::size_t n = std::min(cfg.probe_records, data.size());
  return std::vector<sa::Tensor>(data.records.begin(), data.records.begin() + static_cast<long>(n));
}

std::vector<std::size_t> parse_index_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoull(item));
    } catch (const std::exception&) {
      throw sa::ConfigError("bad index '" + item + "' in list");
    }
  }
  return out;
}

std::size_t layer_index(std::size_t one_based, const sa::Model& m) {
  if (one_based == 0 || one_based > m.num_param_layers()) {
    throw sa::ConfigError("--layer must lie in 1.." + std::to_string(m.num_param_layers()));
  }
  return one_based - 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"shadowalign: neuron misalignment and re-alignment for white-box membership inference"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "key = value configuration file");
  app.add_option("--set", g.sets, "override a config key (key=value), repeatable");
  app.add_option("--seed", g.seed, "master seed");
  app.add_option("--out", g.out, "output directory (or file for gen-data)");
  app.add_option("--jobs", g.jobs, "parallel jobs");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate the configured synthetic dataset");
  std::string gen_format = "tensor";
  gen->add_option("--format", gen_format, "tensor or csv")->check(CLI::IsMember({"tensor", "csv"}));

  // train
  auto* tr = app.add_subcommand("train", "train one model on a split of the configured data");
  std::string tr_name = "model";
  tr->add_option("--name", tr_name, "checkpoint base name");

  // permute
  auto* pm = app.add_subcommand("permute", "apply a neuron permutation to a checkpoint");
  std::string pm_model, pm_perm;
  std::size_t pm_layer = 1;
  pm->add_option("--model", pm_model, "checkpoint")->required();
  pm->add_option("--layer", pm_layer, "1-based layer")->required();
  pm->add_option("--perm", pm_perm, "comma list of destinations; random when omitted");

  // realign
  auto* ra = app.add_subcommand("realign", "re-align a model to a reference");
  std::string ra_model, ra_ref, ra_method, ra_dir;
  bool ra_sort = false;
  ra->add_option("--model", ra_model, "checkpoint to re-align")->required();
  ra->add_option("--reference", ra_ref, "reference checkpoint")->required();
  ra->add_option("--method", ra_method, "weight, activation or correlation");
  ra->add_option("--direction", ra_dir, "bottom-up or top-down");
  ra->add_flag("--sort", ra_sort, "weight-sorting canonical form instead of matching");

  // metrics
  auto* me = app.add_subcommand("metrics", "misalignment scores between two models");
  std::string me_model, me_ref;
  me->add_option("--model", me_model, "checkpoint")->required();
  me->add_option("--reference", me_ref, "reference checkpoint")->required();

  auto* cs = app.add_subcommand("cause-study", "misalignment per randomness factor");
  auto* at = app.add_subcommand("attack", "run the configured attack scenarios");

  // report
  auto* rp = app.add_subcommand("report", "activation maps of a conv layer as PGM files");
  std::string rp_model;
  std::size_t rp_layer = 1, rp_record = 0;
  rp->add_option("--model", rp_model, "checkpoint")->required();
  rp->add_option("--layer", rp_layer, "1-based conv layer");
  rp->add_option("--record", rp_record, "record index in the configured data");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    const fs::path out = g.out;
    if (gen->parsed()) {
      const auto cfg = load_config(g);
      const auto data = sa::load_experiment_data(cfg);
      if (gen_format == "csv") sa::save_csv_dataset(out, data);
      else sa::save_dataset(out, data);
      std::cout << "wrote " << data.size() << " records to " << out << '\n';
    } else if (tr->parsed()) {
      const auto cfg = load_config(g);
      const auto data = sa::load_experiment_data(cfg);
      sa::Rng rng(sa::derive_seed(cfg.seed, "train-split"));
      auto idx = rng.sample_without_replacement(data.size(), std::min(data.size(), cfg.partition.n_val + cfg.partition.train_size));
      if (idx.size() < cfg.partition.n_val + 1) throw sa::ConfigError("dataset too small for the requested split");
      const std::vector<std::size_t> v(idx.begin(), idx.begin() + static_cast<long>(cfg.partition.n_val));
      const std::vector<std::size_t> t(idx.begin() + static_cast<long>(cfg.partition.n_val), idx.end());
      const auto seeds = sa::SeedBundle::from_master(cfg.seed);
      const auto res = sa::train(sa::build_model(cfg.arch), data.subset(t), data.subset(v), seeds, cfg.train);
      const std::string log = res.log_csv();
      sa::save_checkpoint(out / (tr_name + ".ckpt"), res.model, seeds, sa::fnv1a_hex(log));
      sa::write_file(out / (tr_name + "_log.csv"), log);
      std::cout << "trained " << res.log.size() << " epochs, best epoch " << res.best_epoch << ", final val acc "
                << res.log.back().val_acc << '\n';
    } else if (pm->parsed()) {
      auto ck = sa::load_checkpoint(pm_model);
      const std::size_t l = layer_index(pm_layer, ck.model);
      const std::size_t n = ck.model.param(l).units();
      sa::Permutation perm = pm_perm.empty() ? [&] {
        sa::Rng rng(sa::derive_seed(g.seed.value_or(0), "permute"));
        return sa::random_permutation(n, rng);
      }()
                                             : sa::Permutation(parse_index_list(pm_perm));
      sa::SymmetryOpLog log;
      log.add_permute(l, perm);
      const sa::Model m = log.replay(ck.model);
      sa::save_checkpoint(out / "permuted.ckpt", m, ck.seeds, ck.train_log_digest);
      sa::write_file(out / "permuted_ops.txt", log.to_text());
      std::cout << "permuted layer " << pm_layer << "; wrote " << (out / "permuted.ckpt") << '\n';
    } else if (ra->parsed()) {
      auto kv = load_kv(g);
      if (!ra_method.empty()) kv.set("realign.method", ra_method);
      if (!ra_dir.empty()) kv.set("realign.direction", ra_dir);
      const auto cfg = sa::ExperimentConfig::from(kv);
      const auto model = sa::load_checkpoint(ra_model);
      const auto ref = sa::load_checkpoint(ra_ref);
      if (ra_sort) {
        sa::save_checkpoint(out / "realigned.ckpt", sa::weight_sort_canonical(model.model), model.seeds);
      } else {
        std::vector<sa::Tensor> probe;
        if (cfg.realign_method != sa::RealignMethod::Weight) probe = probe_records(cfg, sa::load_experiment_data(cfg));
        const auto res = sa::realign(model.model, ref.model, cfg.realign_method, cfg.realign_direction, probe);
        sa::save_checkpoint(out / "realigned.ckpt", res.model, model.seeds);
        sa::write_file(out / "realign_plan.txt", res.plan.to_log().to_text());
      }
      std::cout << "wrote " << (out / "realigned.ckpt") << '\n';
    } else if (me->parsed()) {
      const auto cfg = load_config(g);
      const auto model = sa::load_checkpoint(me_model);
      const auto ref = sa::load_checkpoint(me_ref);
      const auto data = sa::load_experiment_data(cfg);
      const auto probe = probe_records(cfg, data);
      const std::vector<std::uint64_t> ids(data.ids.begin(), data.ids.begin() + static_cast<long>(probe.size()));
      sa::Rng rng(sa::derive_seed(cfg.seed, "metrics"));
      const auto report = sa::misalignment_report(ref.model, model.model, probe, ids,
                                                  {cfg.pixels, cfg.baseline_trials}, rng);
      sa::write_file(out / "misalignment.csv", report.to_csv());
      std::cout << report.to_csv();
    } else if (cs->parsed()) {
      const auto cfg = load_config(g);
      const auto data = sa::load_experiment_data(cfg);
      sa::ModelCache cache(cfg.cache_dir);
      const auto report = sa::run_cause_study(cfg, data, cache);
      sa::emit_cause_report(report, out);
      std::cout << report.to_csv();
    } else if (at->parsed()) {
      const auto cfg = load_config(g);
      const auto data = sa::load_experiment_data(cfg);
      sa::ModelCache cache(cfg.cache_dir);
      const auto report = sa::run_scenarios(cfg, data, cache);
      sa::emit_scenario_report(report, out);
      sa::write_file(out / "config.txt", cfg.to_text());
      std::cout << report.summary_csv();
    } else if (rp->parsed()) {
      const auto cfg = load_config(g);
      const auto model = sa::load_checkpoint(rp_model);
      const auto data = sa::load_experiment_data(cfg);
      if (rp_record >= data.size()) throw sa::ConfigError("--record out of range");
      const auto files = sa::write_activation_maps(model.model, data.records[rp_record], layer_index(rp_layer, model.model),
                                                   out, "layer" + std::to_string(rp_layer) + "_record" + std::to_string(rp_record));
      std::cout << "wrote " << files.size() << " activation maps to " << out << '\n';
    }
  } catch (const sa::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
