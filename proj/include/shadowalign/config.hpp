#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "shadowalign/attack.hpp"
#include "shadowalign/data.hpp"
#include "shadowalign/realign.hpp"
#include "shadowalign/training.hpp"

namespace shadowalign {

// Flat "key = value" text. '#' starts a comment, blank lines are ignored,
// lists are comma separated. Later keys override earlier ones.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text, const std::string& origin = "<config>");
  static KeyValueConfig load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;
  std::optional<std::string> get(const std::string& key) const;

  std::string str(const std::string& key, const std::string& fallback) const;
  std::size_t size(const std::string& key, std::size_t fallback) const;
  std::uint64_t u64(const std::string& key, std::uint64_t fallback) const;
  double real(const std::string& key, double fallback) const;
  bool flag(const std::string& key, bool fallback) const;
  std::vector<std::string> list(const std::string& key, const std::vector<std::string>& fallback) const;

  // Keys that were set but never read; used to reject typos.
  std::vector<std::string> unused_keys() const;
  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
  std::string origin_;
  mutable std::set<std::string> read_;
};

enum class Scenario { S1, S2, S3, S4, S5, S6, S7, S8, S9 };

std::string to_string(Scenario s);
Scenario parse_scenario(const std::string& s);
std::string scenario_description(Scenario s);

enum class DataSource { Synthetic, Csv, Tensor };
enum class ValidationShadow { First, Median };

struct ExperimentConfig {
  std::string arch = "in=32;fc=64:relu;fc=32:relu;fc=4:softmax";

  DataSource data_source = DataSource::Synthetic;
  std::filesystem::path data_path;
  SyntheticSpec synthetic;

  PartitionSpec partition{100, 1000, 1000, Overlap::Disjoint, 500, 4};
  std::size_t attack_train = 500;  // N_train, per shadow
  std::size_t attack_val = 100;    // N_val
  std::size_t attack_test = 400;   // N_test, balanced
  ValidationShadow validation_shadow = ValidationShadow::First;

  TrainConfig train;
  std::string features = "-2:oa,label";
  McConfig mc;

  std::vector<Scenario> scenarios{Scenario::S3};
  RealignMethod realign_method = RealignMethod::Weight;
  RealignDirection realign_direction = RealignDirection::TopDown;

  std::size_t probe_records = 100;  // R, at most partition.n_val
  std::size_t pixels = 50;          // P
  std::size_t baseline_trials = 10;
  std::vector<std::string> cause_conditions;  // empty = all

  std::uint64_t seed = 0;
  std::size_t repetitions = 1;
  std::size_t jobs = 1;
  std::filesystem::path cache_dir;

  static ExperimentConfig from(const KeyValueConfig& kv);
  void validate() const;
  // Canonical key = value dump, every key listed.
  std::string to_text() const;
};

}  // namespace shadowalign
