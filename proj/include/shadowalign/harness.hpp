#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "shadowalign/attack.hpp"
#include "shadowalign/config.hpp"
#include "shadowalign/error.hpp"
#include "shadowalign/io.hpp"
#include "shadowalign/metrics.hpp"
#include "shadowalign/realign.hpp"
#include "shadowalign/training.hpp"

namespace shadowalign {

// Runs task(0..n-1) on up to `jobs` threads. Tasks must write only to their
// own output slots. The first exception (by task index) is rethrown.
void run_jobs(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& task);

// Runs fn, prefixing any library error message with the stage name. Config
// errors stay config errors.
template <typename F>
auto with_stage(const std::string& stage, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    throw ConfigError(stage + ": " + e.what());
  } catch (const Error& e) {
    throw Error(stage + ": " + e.what());
  }
}

LabeledDataset load_experiment_data(const ExperimentConfig& cfg);

struct TrainedModel {
  Model model;
  std::size_t best_epoch = 0;
  SeedBundle seeds;
};

// Trained models keyed by a description of everything that determines them
// (architecture, data ids, seeds, training config). Kept in memory and, when
// a directory is given, as checkpoint files named by the key digest.
class ModelCache {
 public:
  explicit ModelCache(std::filesystem::path dir = {}) : dir_(std::move(dir)) {}
  TrainedModel get(const std::string& key, const std::function<TrainedModel()>& train);
  std::size_t trained_count() const { return trained_; }

 private:
  std::filesystem::path dir_;
  std::mutex mu_;
  std::map<std::string, TrainedModel> memory_;
  std::size_t trained_ = 0;
};

std::string train_key(const Model& arch, const LabeledDataset& data, const LabeledDataset& val, const SeedBundle& seeds,
                      const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Cause study

// Condition names: same, wi, bo, ds, overlap, disjoint, bo_ds_dd, wi_bo_ds, all.
const std::vector<std::string>& cause_conditions();
std::string cause_condition_label(const std::string& name);

struct CauseStudyRow {
  std::string condition;  // "random_permutation" for the baseline
  std::size_t layer = 0;  // 0-based
  MeanSd wms, ams, cba;
  bool has_activation_metrics = true;
};

struct CauseStudyReport {
  std::vector<CauseStudyRow> rows;
  std::size_t repetitions = 0;
  // condition,label,layer,wms_mean,wms_sd,ams_mean,ams_sd,cba_mean,cba_sd
  std::string to_csv() const;
  const CauseStudyRow& row(const std::string& condition, std::size_t layer) const;
};

// Target trained on the first |D_T| records of a per-repetition pool; each
// condition changes seeds and/or data as named. Overlapping data shares half
// of the target's records, disjoint data none.
CauseStudyReport run_cause_study(const ExperimentConfig& cfg, const LabeledDataset& data, ModelCache& cache);

// ---------------------------------------------------------------------------
// Scenarios

struct ScenarioRun {
  Scenario scenario = Scenario::S3;
  std::size_t repetition = 0;
  RocCurve roc;
  double mc_val_acc = 0.0;
  std::size_t mc_best_epoch = 0;
  double target_train_acc = 0.0;
  double target_val_acc = 0.0;
  // Mean WMS per layer between the MC-training shadows and the target, after
  // the scenario's transform. Empty for S1.
  std::vector<double> shadow_wms;
  double seconds = 0.0;
};

struct ScenarioSummary {
  Scenario scenario = Scenario::S3;
  std::size_t runs = 0;
  MeanSd auc;
  double auc_ci95 = 0.0;  // half width; only when runs >= 2
  MeanSd tpr;             // at the first requested FPR
  double tpr_ci95 = 0.0;
  bool has_ci = false;
};

// Half width of the two-sided 95% Student-t interval for the mean.
double ci95_half_width(const MeanSd& s, std::size_t n);

struct ScenarioReport {
  std::vector<ScenarioRun> runs;  // ordered by scenario, then repetition
  std::string features;
  double fpr_target = 0.01;

  std::vector<ScenarioSummary> summaries() const;
  const ScenarioSummary summary(Scenario s) const;
  std::string summary_csv() const;
  std::string runs_csv() const;
  std::string timing_text() const;
};

struct ScenarioOptions {
  // Override the feature spec for this call (empty = cfg.features).
  std::string features;
};

ScenarioReport run_scenarios(const ExperimentConfig& cfg, const LabeledDataset& data, ModelCache& cache,
                             const ScenarioOptions& options = {});

// ---------------------------------------------------------------------------
// Reports

void emit_cause_report(const CauseStudyReport& report, const std::filesystem::path& dir);
// scenario_summary.csv, scenario_runs.csv, roc/<scenario>_rep<r>.csv, and
// timing.txt (wall-clock only lives there, so the CSVs stay reproducible).
void emit_scenario_report(const ScenarioReport& report, const std::filesystem::path& dir);

// Min -> 0, max -> 255 per map; a constant map is all 0.
std::vector<std::uint8_t> normalise_map_u8(std::span<const float> values);
std::string encode_pgm(std::size_t width, std::size_t height, std::span<const std::uint8_t> pixels);
// One PGM per filter of conv layer l for record x: <prefix>_f<k>.pgm.
std::vector<std::filesystem::path> write_activation_maps(const Model& model, const Tensor& x, std::size_t l,
                                                         const std::filesystem::path& dir, const std::string& prefix);

}  // namespace shadowalign
