#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "shadowalign/nn.hpp"
#include "shadowalign/rng.hpp"

namespace shadowalign {

// Weight misalignment score: sqrt(|W_a - W_b|^2 + |b_a - b_b|^2) over layer l.
double wms(const Model& a, const Model& b, std::size_t l);

// Activation misalignment score: mean over probe records of the Euclidean
// distance between the two models' layer-l outputs (conv maps flattened).
double ams(const Model& a, const Model& b, std::size_t l, std::span<const Tensor> probe);

// Correlation between activations: mean Pearson correlation between units in
// the same position. Dense layers average over units; conv layers over
// `pixels` coordinates sampled without replacement times all filters.
// Constant series contribute 0. The sampled pixel coordinates (flat h*W+w)
// are written to sampled_pixels when given.
double cba(const Model& a, const Model& b, std::size_t l, std::span<const Tensor> probe, std::size_t pixels, Rng& rng,
           std::vector<std::size_t>* sampled_pixels = nullptr);

double pearson_correlation(std::span<const double> x, std::span<const double> y);

struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation, 0 for one value
};

MeanSd mean_sd(std::span<const double> values);

// WMS between the reference and itself with layer l randomly permuted.
MeanSd random_perm_baseline(const Model& reference, std::size_t l, std::size_t trials, Rng& rng);

struct LayerMisalignment {
  std::size_t layer = 0;
  double wms = 0.0;
  double ams = 0.0;
  double cba = 0.0;
  MeanSd baseline;
};

struct MisalignmentReport {
  std::string reference_id;
  std::string model_id;
  std::vector<LayerMisalignment> layers;
  std::size_t probe_records = 0;
  std::size_t pixels = 0;
  std::vector<std::uint64_t> probe_ids;
  std::vector<std::vector<std::size_t>> sampled_pixels;  // per layer (empty for dense)

  // model_id,layer,metric,value,baseline; layer numbers are 1-based.
  std::string to_csv(bool header = true) const;
};

struct ReportOptions {
  std::size_t pixels = 50;
  std::size_t baseline_trials = 10;
};

MisalignmentReport misalignment_report(const Model& reference, const Model& model, std::span<const Tensor> probe,
                                       std::span<const std::uint64_t> probe_ids, const ReportOptions& options,
                                       Rng& rng);

}  // namespace shadowalign
