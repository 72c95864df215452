#include <doctest.h>

#include <cmath>
#include <set>

#include "oracles.hpp"
#include "shadowalign/error.hpp"
#include "shadowalign/metrics.hpp"
#include "shadowalign/training.hpp"

using namespace shadowalign;

namespace {

TrainConfig quick(std::size_t epochs = 6) {
  TrainConfig c;
  c.batch_size = 16;
  c.max_epochs = epochs;
  return c;
}

bool same_weights(const Model& a, const Model& b) {
  for (std::size_t l = 0; l < a.num_param_layers(); ++l)
    if (!bit_equal(a.param(l).weight, b.param(l).weight) || !bit_equal(a.param(l).bias, b.param(l).bias)) return false;
  return true;
}

}  // namespace

TEST_CASE("init is uniform within 1/sqrt(fan_in) and depends only on seed_wi") {
  const Model arch = build_model("in=1x6x6;conv=4:k3:s1:p0:relu;flatten;fc=5:softmax");
  const Model a = init_weights(arch, 42), b = init_weights(arch, 42), c = init_weights(arch, 43);
  CHECK(same_weights(a, b));
  CHECK(!same_weights(a, c));
  for (std::size_t l = 0; l < a.num_param_layers(); ++l) {
    const double bound = 1.0 / std::sqrt(double(a.param(l).fan_in()));
    for (float v : a.param(l).weight.data) CHECK(std::fabs(v) <= bound);
    for (float v : a.param(l).bias.data) CHECK(v == 0.0f);
  }
}

TEST_CASE("training learns a separable task and is deterministic") {
  const LabeledDataset d = oracle::blobs(3, 6, 60, 4.0, 1);
  const Model arch = build_model("in=6;fc=16:relu;fc=3:softmax");
  const SeedBundle s{1, 2, 3};
  const TrainResult r1 = train(arch, d, d, s, quick());
  const TrainResult r2 = train(arch, d, d, s, quick());
  CHECK(same_weights(r1.model, r2.model));
  CHECK(r1.log_csv() == r2.log_csv());
  CHECK(accuracy(r1.model, d) > 0.9);
  CHECK(r1.best_epoch >= 1);
}

TEST_CASE("randomness factors are separated") {
  const LabeledDataset d = oracle::blobs(3, 6, 40, 3.0, 2);
  const SeedBundle s{1, 2, 3};
  SUBCASE("dropout seed is unused without dropout") {
    const Model arch = build_model("in=6;fc=12:relu;fc=3:softmax");
    SeedBundle t = s;
    t.ds = 99;
    CHECK(same_weights(train(arch, d, d, s, quick(3)).model, train(arch, d, d, t, quick(3)).model));
  }
  SUBCASE("each seed changes the result when it is used") {
    const Model arch = build_model("in=6;fc=12:relu;dropout=0.3;fc=3:softmax");
    const Model base = train(arch, d, d, s, quick(3)).model;
    for (int f = 0; f < 3; ++f) {
      SeedBundle t = s;
      (f == 0 ? t.wi : f == 1 ? t.bo : t.ds) = 1000 + f;
      CHECK(!same_weights(base, train(arch, d, d, t, quick(3)).model));
    }
  }
  SUBCASE("different batch order changes weights less than different init") {
    const Model arch = build_model("in=6;fc=32:relu;fc=3:softmax");
    const Model base = train(arch, d, d, s, quick(4)).model;
    SeedBundle bo = s, wi = s;
    bo.bo = 77;
    wi.wi = 77;
    CHECK(wms(base, train(arch, d, d, bo, quick(4)).model, 0) < wms(base, train(arch, d, d, wi, quick(4)).model, 0));
  }
}

TEST_CASE("learning rate is divided after `patience` stale epochs and training stops below min_lr") {
  const LabeledDataset d = oracle::blobs(2, 4, 30, 6.0, 3);
  TrainConfig c = quick(100);
  c.patience = 2;
  c.min_lr = 1e-3f;
  const TrainResult r = train(build_model("in=4;fc=2:softmax"), d, d, {5, 6, 7}, c);
  REQUIRE(r.log.size() < 100);
  double best = -1;
  std::size_t stale = 0;
  float lr = c.lr;
  for (const auto& e : r.log) {
    CHECK(e.lr == lr);
    if (e.val_acc > best) {
      best = e.val_acc;
      stale = 0;
    } else if (++stale >= c.patience) {
      lr /= c.lr_divisor;
      stale = 0;
    }
  }
  CHECK(lr < c.min_lr);
}

TEST_CASE("invalid training inputs raise") {
  const Model arch = build_model("in=4;fc=2:softmax");
  LabeledDataset empty;
  const LabeledDataset d = oracle::blobs(2, 4, 5, 1.0, 1);
  CHECK_THROWS_AS(train(arch, empty, d, {}, quick()), InvalidArgument);
  LabeledDataset bad = d;
  bad.labels[0] = 7;
  CHECK_THROWS(train(arch, bad, d, {}, quick()));
  TrainConfig c = quick();
  c.batch_size = 0;
  CHECK_THROWS(train(arch, d, d, {}, c));
}

TEST_CASE("divergence is reported as a numeric error") {
  const LabeledDataset d = oracle::blobs(2, 4, 20, 1.0, 1);
  TrainConfig c = quick(20);
  c.lr = 1e30f;
  CHECK_THROWS_AS(train(build_model("in=4;fc=8:relu;fc=2:softmax"), d, d, {1, 2, 3}, c), NumericError);
}

TEST_CASE("splits respect sizes, disjointness and containment") {
  Rng rng(4);
  const PartitionSpec disjoint{50, 300, 200, Overlap::Disjoint, 100, 3};
  const Splits s = make_splits(700, disjoint, rng);
  auto as_set = [](const std::vector<std::size_t>& v) { return std::set<std::size_t>(v.begin(), v.end()); };
  CHECK(s.v1.size() == 50);
  CHECK(s.v2.size() == 50);
  CHECK(s.adversary.size() == 300);
  CHECK(s.target_pool.size() == 200);
  std::set<std::size_t> all;
  for (const auto* v : {&s.v1, &s.v2, &s.adversary, &s.target_pool}) all.merge(as_set(*v));
  CHECK(all.size() == 600);
  const auto pool = as_set(s.target_pool), adv = as_set(s.adversary);
  CHECK(as_set(s.target_train).size() == 100);
  for (auto i : s.target_train) CHECK(pool.count(i));
  REQUIRE(s.shadow_train.size() == 3);
  for (const auto& dk : s.shadow_train) {
    CHECK(as_set(dk).size() == 100);
    for (auto i : dk) CHECK(adv.count(i));
  }

  const PartitionSpec identical{50, 0, 0, Overlap::Identical, 100, 2};
  const Splits t = make_splits(700, identical, rng);
  CHECK(t.adversary == t.target_pool);
  CHECK(t.target_pool.size() == 600);

  CHECK_THROWS_AS(make_splits(500, disjoint, rng), InvalidArgument);
  CHECK_THROWS_AS(make_splits(700, PartitionSpec{50, 300, 200, Overlap::Disjoint, 250, 1}, rng), InvalidArgument);
}

TEST_CASE("dataset subset and id lookup") {
  const LabeledDataset d = oracle::blobs(2, 3, 5, 1.0, 9);
  const std::vector<std::size_t> idx{7, 2};
  const LabeledDataset s = d.subset(idx);
  CHECK(s.size() == 2);
  CHECK(s.ids[0] == 7);
  CHECK(s.labels[1] == d.labels[2]);
  CHECK(d.index_of(7) == 7);
}
