#include <doctest.h>

#include <cmath>

#include "checks.hpp"
#include "oracles.hpp"
#include "shadowalign/attack.hpp"
#include "shadowalign/error.hpp"
#include "shadowalign/symmetry.hpp"

using namespace shadowalign;

namespace {

// Activation features with the membership bit copied into coordinate `pos`;
// every other coordinate is noise.
FeatureGroup planted_group(std::size_t n, std::size_t pos, std::uint64_t seed, std::size_t source = 0) {
  Rng rng(seed);
  FeatureGroup g;
  g.source = source;
  for (std::size_t i = 0; i < n; ++i) {
    RecordFeatures f;
    const bool member = i % 2 == 0;
    Tensor x({8});
    for (auto& v : x.data) v = static_cast<float>(rng.normal());
    x[pos] = member ? 1.0f : -1.0f;
    f.oa.push_back(x);
    f.label = rng.below(3);
    f.member = member;
    f.record_id = i;
    g.records.push_back(std::move(f));
  }
  return g;
}

FeatureSpec planted_spec() {
  FeatureSpec s;
  s.layers.push_back({0, true, false});
  return s;
}

McConfig fast_mc(std::uint64_t seed) {
  McConfig c;
  c.batch_size = 16;
  c.max_epochs = 20;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("feature spec text form") {
  const FeatureSpec s = FeatureSpec::parse("-2:oa, 3:oa+g, ia, label", 3);
  REQUIRE(s.layers.size() == 2);
  CHECK(s.layers[0].layer == 1);
  CHECK(s.layers[0].oa);
  CHECK(!s.layers[0].grad);
  CHECK(s.layers[1].layer == 2);
  CHECK(s.layers[1].grad);
  CHECK(s.include_ia);
  CHECK(s.include_label);
  CHECK(s.to_string() == "2:oa,3:oa+g,ia,label");
  CHECK(!FeatureSpec::parse("-1:g", 3).include_label);
  CHECK(FeatureSpec::parse("set,label", 2).set_based);
  CHECK_THROWS_AS(FeatureSpec::parse("0:oa", 3), ConfigError);
  CHECK_THROWS_AS(FeatureSpec::parse("4:oa", 3), ConfigError);
  CHECK_THROWS_AS(FeatureSpec::parse("1:xx", 3), ConfigError);
  CHECK_THROWS_AS(FeatureSpec::parse("label", 3), ConfigError);
}

TEST_CASE("extracted features have the feature spec's shapes and match forward/backward") {
  const Model m = oracle::random_model("in=1x6x6;conv=3:k3:s1:p1:relu;pool=2;flatten;fc=5:relu;fc=4:softmax", 2);
  Rng rng(1);
  const Tensor x = oracle::random_input(m, rng);
  const FeatureSpec spec = FeatureSpec::parse("1:oa+g,-1:g,-2:oa,ia,label", 3);
  const RecordFeatures f = extract_features(m, x, 2, spec);
  REQUIRE(f.oa.size() == 2);
  REQUIRE(f.grad.size() == 2);
  CHECK(f.oa[0].size() == 3 * 36);
  CHECK(f.oa[1].size() == 5);
  CHECK(f.grad[0].size() == 3 * 9 + 3);
  CHECK(f.grad[1].size() == 4 * 5 + 4);
  CHECK(f.ia.size() == 5);
  const GradientSet g = backward(m, x, 2);
  for (std::size_t i = 0; i < 20; ++i) CHECK(f.grad[1][i] == g.weight[2][i]);
  for (std::size_t i = 0; i < 4; ++i) CHECK(f.grad[1][20 + i] == g.bias[2][i]);
  CHECK_THROWS_AS(extract_features(m, x, 4, spec), InvalidArgument);
}

TEST_CASE("IA terms sum to the class logit") {
  const auto r = checks::ia_identity(500, 3);
  INFO(r.detail);
  CHECK(r.pass);
}

TEST_CASE("permuting a layer permutes its OA and gradient rows") {
  const Model m = oracle::random_model("in=4;fc=5:relu;fc=3:softmax", 4);
  const Permutation p({3, 0, 4, 1, 2});
  const Model t = permute_layer(m, 0, p);
  const Tensor x = Tensor({4}, {0.5f, -1, 2, 0.1f});
  const FeatureSpec spec = FeatureSpec::parse("1:oa+g,2:oa", 2);
  const RecordFeatures a = extract_features(m, x, 1, spec), b = extract_features(t, x, 1, spec);
  for (std::size_t d = 0; d < 5; ++d) {
    CHECK(b.oa[0][p[d]] == a.oa[0][d]);
    for (std::size_t j = 0; j < 4; ++j) CHECK(b.grad[0][p[d] * 4 + j] == doctest::Approx(a.grad[0][d * 4 + j]));
    CHECK(b.grad[0][20 + p[d]] == doctest::Approx(a.grad[0][20 + d]));
  }
  CHECK(max_abs_diff(a.oa[1], b.oa[1]) < 1e-6);
}

TEST_CASE("set-based vectors") {
  const Model m = oracle::random_model("in=6;fc=7:relu;fc=10:softmax", 5);
  Rng rng(2);
  const Tensor x = oracle::random_input(m, rng);
  const auto v = set_based_vectors(m, x, 3);
  REQUIRE(v.size() == 7);
  CHECK(v[0].size() == 13);
  const RecordFeatures f = extract_features(m, x, 3, FeatureSpec::parse("1:oa+g,2:g,ia", 2));
  for (std::size_t d = 0; d < 7; ++d) {
    CHECK(v[d][0] == f.oa[0][d]);
    CHECK(v[d][1] == f.ia[d]);
    for (std::size_t i = 0; i < 10; ++i) CHECK(v[d][2 + i] == f.grad[1][i * 7 + d]);
    CHECK(v[d][12] == f.grad[0][7 * 6 + d]);
  }
  const auto r = checks::set_invariance(6, 7);
  INFO(r.detail);
  CHECK(r.pass);
}

TEST_CASE("attack dataset labels follow the member sets") {
  const Model a = oracle::random_model("in=3;fc=4:relu;fc=2:softmax", 1);
  const Model b = oracle::random_model("in=3;fc=4:relu;fc=2:softmax", 2);
  const LabeledDataset pool = oracle::blobs(2, 3, 4, 1.0, 3);
  const std::vector<AttackSource> sources{{&a, {0, 1, 2, 3}}, {&b, {4, 5, 6, 7}}};
  const auto groups = build_attack_dataset(sources, pool, FeatureSpec::parse("2:oa,label", 2));
  REQUIRE(groups.size() == 2);
  for (std::size_t g = 0; g < 2; ++g) {
    std::size_t members = 0;
    for (const auto& r : groups[g].records) {
      const bool want = std::count(sources[g].members.begin(), sources[g].members.end(), r.record_id) > 0;
      CHECK(*r.member == want);
      members += *r.member;
    }
    CHECK(members == 4);
  }
}

TEST_CASE("meta-classifier basics") {
  const FeatureGroup g = planted_group(20, 3, 1);
  MetaClassifier mc(planted_spec(), g.records[0], 3, fast_mc(1));
  const auto p = mc.probabilities(g.records[0]);
  CHECK(p[0] + p[1] == doctest::Approx(1.0));
  mc.zero_parameters();
  CHECK(mc.score(g.records[1]) == doctest::Approx(0.5));
  RecordFeatures bad = g.records[0];
  bad.oa[0] = Tensor({5});
  CHECK_THROWS_AS(mc.score(bad), ShapeError);
}

TEST_CASE("meta-classifier learns a planted membership bit") {
  const std::vector<FeatureGroup> train{planted_group(200, 3, 1, 0), planted_group(200, 3, 2, 1)};
  const FeatureGroup val = planted_group(100, 3, 3);
  McConfig cfg = fast_mc(4);
  const McTrainResult r = train_meta_classifier(train, val, planted_spec(), 3, cfg);
  CHECK(r.best_val_acc >= 0.99);
  CHECK(classifier_accuracy(r.classifier, val.records) == r.best_val_acc);

  // Scores rise with the planted coordinate.
  RecordFeatures probe = val.records[0];
  double prev = -1;
  for (float v : {-1.0f, -0.5f, 0.0f, 0.5f, 1.0f}) {
    probe.oa[0][3] = v;
    const double s = r.classifier.score(probe);
    CHECK(s >= prev);
    prev = s;
  }

  SUBCASE("signal moved to another position looks like chance") {
    const FeatureGroup moved = planted_group(400, 5, 5);
    const double acc = classifier_accuracy(r.classifier, moved.records);
    CHECK(acc > 0.4);
    CHECK(acc < 0.6);
  }
  SUBCASE("deterministic per seed, both batch regimes") {
    const McTrainResult again = train_meta_classifier(train, val, planted_spec(), 3, cfg);
    CHECK(again.best_epoch == r.best_epoch);
    CHECK(again.classifier.score(val.records[7]) == r.classifier.score(val.records[7]));
    cfg.regime = BatchRegime::Balanced;
    CHECK(train_meta_classifier(train, val, planted_spec(), 3, cfg).best_val_acc >= 0.99);
  }
}

TEST_CASE("meta-classifier with gradient and set branches trains end to end") {
  const Model m = oracle::random_model("in=4;fc=6:relu;fc=3:softmax", 8);
  const LabeledDataset pool = oracle::blobs(3, 4, 20, 2.0, 9);
  std::vector<std::uint64_t> members;
  for (std::size_t i = 0; i < pool.size(); i += 2) members.push_back(pool.ids[i]);
  const std::vector<AttackSource> src{{&m, members}};
  McConfig cfg = fast_mc(2);
  cfg.grad_kernel = 5;
  cfg.grad_stride = 5;
  cfg.max_epochs = 3;
  for (const char* text : {"-1:oa+g,1:g,ia,label", "set,label"}) {
    const FeatureSpec spec = FeatureSpec::parse(text, 2);
    const auto groups = build_attack_dataset(src, pool, spec);
    const McTrainResult r = train_meta_classifier(groups, groups[0], spec, 3, cfg);
    CHECK(r.log.size() >= 1);
    const RocCurve roc = evaluate(r.classifier, groups[0].records);
    CHECK((roc.auc >= 0.0 && roc.auc <= 1.0));
  }
}

TEST_CASE("meta-classifier training rejects bad inputs") {
  const FeatureGroup g = planted_group(10, 3, 1);
  FeatureGroup empty;
  CHECK_THROWS_AS(train_meta_classifier(std::vector<FeatureGroup>{g}, empty, planted_spec(), 3, fast_mc(1)),
                  InvalidArgument);
  FeatureGroup unlabeled = g;
  unlabeled.records[0].member.reset();
  CHECK_THROWS_AS(train_meta_classifier(std::vector<FeatureGroup>{unlabeled}, g, planted_spec(), 3, fast_mc(1)),
                  InvalidArgument);
  const std::vector<FeatureGroup> uneven{planted_group(10, 3, 1), planted_group(12, 3, 2)};
  CHECK_THROWS_AS(train_meta_classifier(uneven, g, planted_spec(), 3, fast_mc(1)), InvalidArgument);
}

TEST_CASE("ROC hand cases") {
  const std::vector<double> s{0.9, 0.8, 0.3, 0.1};
  const std::vector<int> y{1, 1, 0, 0};
  const std::vector<double> targets{0.0};
  const RocCurve roc = roc_curve(s, y, targets);
  CHECK(roc.auc == 1.0);
  CHECK(roc.tpr_at_fpr(0.0) == 1.0);
  const std::vector<double> flat{0.5, 0.5, 0.5, 0.5};
  CHECK(roc_curve(flat, y).auc == 0.5);
  const std::vector<double> reversed{0.1, 0.3, 0.8, 0.9};
  CHECK(roc_curve(reversed, y).auc == 0.0);
  CHECK_THROWS_AS(roc_curve(s, std::vector<int>{1, 1, 1, 1}), InvalidArgument);
  CHECK_THROWS_AS(roc_curve(std::vector<double>{NAN, 1, 2, 3}, y), InvalidArgument);
  const std::string csv = roc.to_csv();
  CHECK(csv.rfind("row,fpr,tpr,auc,tpr_at_0\n", 0) == 0);
  CHECK(csv.find("summary,,,1,1\n") != std::string::npos);
}

TEST_CASE("ROC of random scores is near 0.5 (10 000 balanced records)") {
  Rng rng(12);
  std::vector<double> s(10000);
  std::vector<int> y(10000);
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = rng.uniform();
    y[i] = i % 2;
  }
  const RocCurve roc = roc_curve(s, y);
  CHECK(std::fabs(roc.auc - 0.5) < 0.02);
  for (std::size_t i = 1; i < roc.fpr.size(); ++i) {
    CHECK(roc.fpr[i] >= roc.fpr[i - 1]);
    CHECK(roc.tpr[i] >= roc.tpr[i - 1]);
  }
}
