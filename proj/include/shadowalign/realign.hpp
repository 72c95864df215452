#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "shadowalign/nn.hpp"
#include "shadowalign/symmetry.hpp"
#include "shadowalign/training.hpp"

namespace shadowalign {

enum class SimKind { WeightIn, WeightOut, Activation, Correlation };

// Square assignment cost matrix, lower is more similar. Row i is unit i of
// the model being re-aligned, column j is unit j of the reference model.
struct CostMatrix {
  std::size_t n = 0;
  std::vector<double> values;
  SimKind kind = SimKind::WeightIn;

  CostMatrix() = default;
  CostMatrix(std::size_t size, std::vector<double> v, SimKind k = SimKind::WeightIn);

  double operator()(std::size_t i, std::size_t j) const { return values[i * n + j]; }
  double& operator()(std::size_t i, std::size_t j) { return values[i * n + j]; }
};

struct Assignment {
  // perm[i] = column assigned to row i.
  Permutation perm;
  double cost = 0.0;
};

// Minimum-cost perfect assignment (Kuhn-Munkres with potentials, O(n^3)).
// Among optimal assignments the lexicographically smallest mapping is
// returned. Throws InvalidArgument on non-finite entries.
Assignment hungarian(const CostMatrix& cost);

double assignment_cost(const CostMatrix& cost, const Permutation& perm);

enum class WeightDirection { Input, Output };

// Euclidean distances between incoming weight vectors (bias included) or
// outgoing weight vectors of layer l.
CostMatrix sim_weight(const Model& model, const Model& reference, std::size_t l, WeightDirection direction);
// Euclidean distances between per-unit activation series over the probe
// records (conv units contribute their whole activation map per record).
CostMatrix sim_activation(const Model& model, const Model& reference, std::size_t l, std::span<const Tensor> probe);
// Negated Pearson correlation between the same series; a constant series
// correlates 0 with everything.
CostMatrix sim_correlation(const Model& model, const Model& reference, std::size_t l,
                           std::span<const Tensor> probe);

enum class RealignMethod { Weight, Activation, Correlation };
enum class RealignDirection { BottomUp, TopDown };

std::string to_string(RealignMethod m);
std::string to_string(RealignDirection d);
RealignMethod parse_realign_method(const std::string& s);
RealignDirection parse_realign_direction(const std::string& s);

// One permutation per hidden layer (the output layer is never permuted).
struct RealignPlan {
  std::vector<Permutation> perms;
  RealignMethod method = RealignMethod::Weight;
  RealignDirection direction = RealignDirection::BottomUp;

  // Permutations in the order the sweep applied them.
  SymmetryOpLog to_log() const;
  Model apply(const Model& model) const;
};

struct RealignResult {
  Model model;
  RealignPlan plan;
};

// Bottom-up: layers 0..L-2, weight matching on incoming weights.
RealignResult realign_bottom_up(const Model& model, const Model& reference, RealignMethod method,
                                std::span<const Tensor> probe = {});
// Top-down: layers L-2..0, weight matching on outgoing weights.
RealignResult realign_top_down(const Model& model, const Model& reference, RealignMethod method,
                               std::span<const Tensor> probe = {});
RealignResult realign(const Model& model, const Model& reference, RealignMethod method, RealignDirection direction,
                      std::span<const Tensor> probe = {});

// Canonical form: bottom-up, hidden units sorted ascending by the sum of
// their incoming weights (plus bias when include_bias), ties kept in
// original order.
Model weight_sort_canonical(const Model& model, bool include_bias = true);

struct RealignAfterInitResult {
  TrainResult trained;
  RealignPlan plan;
};

// Initialises from seeds.wi, re-aligns the fresh weights top-down (weight
// matching) to the reference, then trains with the remaining streams.
RealignAfterInitResult realign_after_init(const Model& arch, const Model& reference, const LabeledDataset& data,
                                          const LabeledDataset& val, const SeedBundle& seeds, const TrainConfig& cfg);

}  // namespace shadowalign
