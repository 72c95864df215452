#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "shadowalign/nn.hpp"
#include "shadowalign/rng.hpp"
#include "shadowalign/training.hpp"

namespace shadowalign {

struct LayerFeatureSpec {
  std::size_t layer = 0;
  bool oa = false;    // output activations x^l
  bool grad = false;  // dL/dW^l followed by dL/db^l
};

struct FeatureSpec {
  std::vector<LayerFeatureSpec> layers;
  bool include_ia = false;
  bool include_label = true;
  // Per-neuron vectors of the penultimate layer for the set-based classifier.
  bool set_based = false;

  void validate(const Model& model) const;

  // Text form used by configs and the CLI, e.g. "-2:oa,-1:g,ia,label".
  // Layer numbers are 1-based; negative numbers count from the output layer
  // (-1 is the output layer).
  static FeatureSpec parse(const std::string& text, std::size_t num_layers);
  std::string to_string() const;
};

struct RecordFeatures {
  std::vector<Tensor> oa;    // spec layers with oa, in spec order
  std::vector<Tensor> grad;  // spec layers with grad, in spec order
  Tensor ia;                 // (W^L_{y,i} x^{L-1}_i)_i
  std::vector<Tensor> set_vectors;  // v_d, one per penultimate unit
  Tensor output;             // x^L, filled when set_based
  std::size_t label = 0;
  std::optional<bool> member;
  std::uint64_t record_id = 0;
};

// Features of one record in evaluation mode.
RecordFeatures extract_features(const Model& model, const Tensor& x, std::size_t label, const FeatureSpec& spec);

// v_d = (x^{L-1}_d, W^L_{y,d} x^{L-1}_d, dL/dW^L_{1..D^L,d}, dL/db^{L-1}_d).
std::vector<Tensor> set_based_vectors(const Model& model, const Tensor& x, std::size_t label);

struct AttackSource {
  const Model* model = nullptr;
  std::vector<std::uint64_t> members;
};

// Features of one model over a record list; all records share the source.
struct FeatureGroup {
  std::size_t source = 0;
  std::vector<RecordFeatures> records;
};

// Every pool record featurised against every source, labelled member iff its
// id is in that source's member set.
std::vector<FeatureGroup> build_attack_dataset(std::span<const AttackSource> sources, const LabeledDataset& pool,
                                               const FeatureSpec& spec);

enum class BatchRegime {
  // Records shuffled each epoch; each mini-batch drawn from one source, the
  // source order reshuffled every (number of sources) batches. Sources must
  // hold the same number of records.
  SharedRecords,
  // Each mini-batch: a random source, then a balanced member/non-member
  // sample from its records.
  Balanced,
};

struct McConfig {
  std::size_t batch_size = 64;
  float lr = 1e-3f;
  float lr_divisor = 2.0f;
  float min_lr = 1e-4f;
  std::size_t max_epochs = 100;
  // Records per epoch for the Balanced regime; 0 means the largest group.
  std::size_t epoch_records = 0;
  BatchRegime regime = BatchRegime::SharedRecords;

  std::size_t grad_kernel = 100;
  std::size_t grad_stride = 100;
  std::size_t grad_channels = 4;
  float grad_dropout = 0.2f;
  std::size_t embed_hidden = 128;
  std::size_t embed_out = 64;
  std::size_t label_embed = 16;
  std::size_t head_hidden1 = 128;
  std::size_t head_hidden2 = 64;
  // Scale every branch input by 1/RMS measured on the training features.
  bool normalize_inputs = true;
  std::uint64_t seed = 0;
};

class MetaClassifier {
 public:
  MetaClassifier() = default;
  // Shapes are taken from `example`. Set-based when spec.set_based.
  MetaClassifier(const FeatureSpec& spec, const RecordFeatures& example, std::size_t num_classes,
                 const McConfig& cfg);

  // (non-member, member) probabilities.
  std::array<double, 2> probabilities(const RecordFeatures& f) const;
  // Member-class probability.
  double score(const RecordFeatures& f) const;

  const FeatureSpec& spec() const { return spec_; }
  bool set_based() const { return spec_.set_based; }

  // Permutation-invariant sum of phi(v_d); summation follows a canonical
  // order of the vectors so the result does not depend on unit order.
  Tensor set_representation(const RecordFeatures& f) const;

  void zero_parameters();
  // One scale per branch input component, or a single value for the whole
  // input. Set-based branches get per-component scales shared by every v_d.
  void set_input_scales(std::vector<std::vector<float>> scales);
  const std::vector<std::vector<float>>& input_scales() const { return input_scales_; }
  std::size_t num_branches() const { return branches_.size(); }

  // Branch inputs before scaling, for RMS estimation.
  std::vector<Tensor> raw_branch_inputs(const RecordFeatures& f) const;

  // Training internals. Gradients are added into `grads`, laid out like
  // parameters(); returns the record's cross-entropy.
  std::vector<Tensor*> parameters();
  double accumulate_gradients(const RecordFeatures& f, bool member, Rng& dropout_rng, std::vector<Tensor>& grads) const;

  struct Pass;

 private:
  enum class BranchKind { Grad, Activation, Ia, SetPhi, Output };
  struct Branch {
    BranchKind kind;
    std::size_t index;  // into RecordFeatures::grad / oa
    Model net;
    std::size_t input_size = 0;
  };

  std::vector<Tensor> branch_inputs(std::size_t b, const RecordFeatures& f, bool scaled) const;
  Pass run(const RecordFeatures& f, Rng* dropout_rng) const;

  FeatureSpec spec_;
  McConfig cfg_;
  std::size_t num_classes_ = 0;
  std::vector<Branch> branches_;
  std::vector<std::vector<float>> input_scales_;
  Tensor label_table_;
  Model head_;
};

struct McTrainResult {
  MetaClassifier classifier;
  std::vector<EpochLog> log;  // train_acc is the mean batch accuracy
  std::size_t best_epoch = 0;
  double best_val_acc = 0.0;
};

// Binary cross-entropy over softmax(2), Adam, lr divided at the end of every
// epoch without validation improvement, stop below min_lr. Returns the
// best-validation snapshot.
McTrainResult train_meta_classifier(std::span<const FeatureGroup> train, const FeatureGroup& val,
                                    const FeatureSpec& spec, std::size_t num_classes, const McConfig& cfg);

double classifier_accuracy(const MetaClassifier& mc, std::span<const RecordFeatures> records);

struct RocCurve {
  // Vertices from (0,0) to (1,1), one per distinct score threshold.
  std::vector<double> fpr, tpr;
  double auc = 0.0;
  std::vector<std::pair<double, double>> tpr_at;  // (max fpr, tpr)

  double tpr_at_fpr(double max_fpr) const;
  // row,fpr,tpr,auc,tpr_at_<f>... with point rows then one summary row.
  std::string to_csv() const;
};

inline const std::vector<double> kDefaultFprTargets{0.01};

// Threshold sweep over scores (higher = more likely member). Ties form one
// step, so AUC equals P(s+ > s-) + P(s+ == s-)/2 exactly. Throws
// InvalidArgument for a single-class set.
RocCurve roc_curve(std::span<const double> scores, std::span<const int> labels,
                   std::span<const double> fpr_targets = kDefaultFprTargets);

RocCurve evaluate(const MetaClassifier& mc, std::span<const RecordFeatures> test,
                  std::span<const double> fpr_targets = kDefaultFprTargets);

}  // namespace shadowalign
