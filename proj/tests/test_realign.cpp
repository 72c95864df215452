#include <doctest.h>

#include <cmath>

#include "checks.hpp"
#include "oracles.hpp"
#include "shadowalign/error.hpp"
#include "shadowalign/metrics.hpp"
#include "shadowalign/realign.hpp"

using namespace shadowalign;

TEST_CASE("hungarian on hand cases") {
  const CostMatrix c(3, {4, 1, 3, 2, 0, 5, 3, 2, 2});
  const Assignment a = hungarian(c);
  CHECK(a.perm.mapping() == std::vector<std::size_t>{1, 0, 2});
  CHECK(a.cost == 5.0);
  // All-equal costs: the identity is the lexicographically smallest optimum.
  CHECK(hungarian(CostMatrix(4, std::vector<double>(16, 1.0))).perm.is_identity());
  CHECK(hungarian(CostMatrix(0, {})).perm.size() == 0);
  CHECK_THROWS_AS(hungarian(CostMatrix(2, {0, NAN, 1, 1})), InvalidArgument);
}

TEST_CASE("hungarian matches brute force with lexicographic ties") {
  const auto r = checks::hungarian_optimality(300, 21);
  INFO(r.detail);
  CHECK(r.pass);
}

TEST_CASE("hungarian never costs more than the identity on random 30x30 matrices") {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> v(900);
    for (auto& x : v) x = rng.uniform();
    const CostMatrix c(30, v);
    CHECK(hungarian(c).cost <= assignment_cost(c, Permutation::identity(30)) + 1e-12);
  }
}

TEST_CASE("similarity matrices on a hand case") {
  Model a = build_model("in=1;fc=2:relu;fc=1");
  a.param(0).weight = Tensor({2, 1}, {1, -1});
  Model b = a;
  b.param(0).weight = Tensor({2, 1}, {-1, 1});
  const CostMatrix w = sim_weight(a, b, 0, WeightDirection::Input);
  CHECK(w(0, 0) == doctest::Approx(2.0));
  CHECK(w(0, 1) == doctest::Approx(0.0));
  const std::vector<Tensor> probe{Tensor({1}, {1}), Tensor({1}, {2}), Tensor({1}, {-1})};
  const CostMatrix act = sim_activation(a, b, 0, probe);
  CHECK(act(0, 1) == doctest::Approx(0.0));
  CHECK(act(0, 0) == doctest::Approx(std::sqrt(1.0 + 4.0 + 1.0)));
  const CostMatrix cor = sim_correlation(a, b, 0, probe);
  CHECK(cor(0, 1) == doctest::Approx(-1.0));
  CHECK_THROWS_AS(sim_activation(a, b, 0, {}), InvalidArgument);
}

TEST_CASE("constant activation series correlate 0 with everything") {
  Model a = build_model("in=1;fc=2:relu;fc=1");
  a.param(0).weight = Tensor({2, 1}, {0, 1});
  const std::vector<Tensor> probe{Tensor({1}, {1}), Tensor({1}, {2})};
  const CostMatrix cor = sim_correlation(a, a, 0, probe);
  CHECK(cor(0, 0) == 0.0);
  CHECK(cor(0, 1) == 0.0);
  CHECK(cor(1, 1) == doctest::Approx(-1.0));
}

TEST_CASE("planted permutations are recovered exactly") {
  const auto r = checks::planted_recovery(2, 31);
  INFO(r.detail);
  CHECK(r.pass);
}

TEST_CASE("re-alignment reduces misalignment of independently trained models") {
  const LabeledDataset d = oracle::blobs(4, 10, 80, 3.0, 5);
  const Model arch = build_model("in=10;fc=24:relu;fc=16:relu;fc=4:softmax");
  TrainConfig c;
  c.batch_size = 32;
  c.max_epochs = 10;
  const Model ref = train(arch, d, d, {1, 2, 3}, c).model;
  const Model other = train(arch, d, d, {4, 5, 6}, c).model;
  const Model bu = realign(other, ref, RealignMethod::Weight, RealignDirection::BottomUp).model;
  const Model td = realign(other, ref, RealignMethod::Weight, RealignDirection::TopDown).model;
  CHECK(wms(bu, ref, 0) < wms(other, ref, 0));
  CHECK(wms(td, ref, 1) < wms(other, ref, 1));
  // Re-alignment is a symmetry: the function is unchanged.
  Rng rng(1);
  for (int t = 0; t < 10; ++t) {
    const Tensor x = oracle::random_input(other, rng);
    CHECK(max_abs_diff(predict(other, x), predict(bu, x)) < 1e-5);
  }
}

TEST_CASE("plan replays to the re-aligned model") {
  const Model ref = oracle::random_model("in=4;fc=6:relu;fc=5:relu;fc=2", 1);
  const Model other = oracle::random_model("in=4;fc=6:relu;fc=5:relu;fc=2", 2);
  for (auto dir : {RealignDirection::BottomUp, RealignDirection::TopDown}) {
    const RealignResult r = realign(other, ref, RealignMethod::Weight, dir);
    const Model replayed = r.plan.apply(other);
    for (std::size_t l = 0; l < 3; ++l) CHECK(bit_equal(replayed.param(l).weight, r.model.param(l).weight));
  }
  CHECK_THROWS_AS(realign(other, oracle::random_model("in=4;fc=7:relu;fc=5:relu;fc=2", 3), RealignMethod::Weight,
                          RealignDirection::BottomUp),
                  ShapeError);
}

TEST_CASE("weight sorting yields a canonical form") {
  Rng rng(4);
  const Model m = oracle::random_model("in=5;fc=8:relu;fc=6:relu;fc=3", 9);
  const Model a = weight_sort_canonical(m);
  SymmetryOpLog log;
  log.add_permute(0, random_permutation(8, rng));
  log.add_permute(1, random_permutation(6, rng));
  const Model b = weight_sort_canonical(log.replay(m));
  for (std::size_t l = 0; l < 3; ++l) CHECK(bit_equal(a.param(l).weight, b.param(l).weight));
  for (std::size_t l = 0; l < 2; ++l) {
    double prev = -INFINITY;
    for (std::size_t d = 0; d < a.param(l).units(); ++d) {
      double s = 0;
      for (float w : input_weights(a, l, d)) s += w;
      CHECK(s >= prev);
      prev = s;
    }
  }
}

TEST_CASE("re-alignment after init starts from the re-aligned initial weights") {
  const LabeledDataset d = oracle::blobs(3, 6, 30, 3.0, 2);
  const Model arch = build_model("in=6;fc=10:relu;fc=3:softmax");
  TrainConfig c;
  c.batch_size = 16;
  c.max_epochs = 2;
  const Model ref = train(arch, d, d, {1, 2, 3}, c).model;
  const SeedBundle s{7, 8, 9};
  const RealignAfterInitResult r = realign_after_init(arch, ref, d, d, s, c);
  const Model start = r.plan.apply(init_weights(arch, s.wi));
  const TrainResult direct = train_from(start, d, d, s, c);
  CHECK(bit_equal(direct.model.param(0).weight, r.trained.model.param(0).weight));
  CHECK(r.plan.perms.size() == 1);
}
