#include <doctest.h>

#include <cmath>

#include "checks.hpp"
#include "oracles.hpp"
#include "shadowalign/error.hpp"
#include "shadowalign/metrics.hpp"
#include "shadowalign/symmetry.hpp"

using namespace shadowalign;

TEST_CASE("metric axioms, rescaling invariance and exact ROC") {
  const auto r = checks::metric_axioms(60, 41);
  INFO(r.detail);
  CHECK(r.pass);
}

TEST_CASE("wms by hand") {
  Model a = build_model("in=2;fc=2;fc=1");
  Model b = a;
  b.param(0).weight[0] = 3.0f;
  b.param(0).bias[1] = 4.0f;
  CHECK(wms(a, b, 0) == doctest::Approx(5.0));
  CHECK(wms(a, b, 1) == 0.0);
}

TEST_CASE("ams is the mean Euclidean distance of layer outputs") {
  Model a = build_model("in=1;fc=2;fc=1");
  a.param(0).weight = Tensor({2, 1}, {1, 0});
  Model b = a;
  b.param(0).weight = Tensor({2, 1}, {0, 1});
  const std::vector<Tensor> probe{Tensor({1}, {1}), Tensor({1}, {3})};
  CHECK(ams(a, b, 0, probe) == doctest::Approx((std::sqrt(2.0) + std::sqrt(18.0)) / 2));
}

TEST_CASE("cba of a permuted copy is low, of the re-permuted copy is 1") {
  Rng rng(1);
  const Model m = oracle::random_model("in=6;fc=12:tanh;fc=2", 3);
  const Permutation p({1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 0});
  const Model t = permute_layer(m, 0, p);
  std::vector<Tensor> probe;
  for (int i = 0; i < 50; ++i) probe.push_back(oracle::random_input(m, rng));
  CHECK(cba(m, t, 0, probe, 10, rng) < 0.5);
  CHECK(cba(m, permute_layer(t, 0, p.inverse()), 0, probe, 10, rng) == doctest::Approx(1.0));
}

TEST_CASE("cba samples distinct pixels for conv layers") {
  Rng rng(2);
  const Model m = oracle::random_model("in=1x6x6;conv=2:k3:s1:p1:relu;flatten;fc=2", 4);
  std::vector<Tensor> probe;
  for (int i = 0; i < 5; ++i) probe.push_back(oracle::random_input(m, rng));
  std::vector<std::size_t> pix;
  cba(m, m, 0, probe, 10, rng, &pix);
  CHECK(pix.size() == 10);
  CHECK(std::adjacent_find(pix.begin(), pix.end()) == pix.end());
  CHECK(pix.back() < 36);
  CHECK_THROWS_AS(cba(m, m, 0, std::span(probe).first(1), 10, rng), InvalidArgument);
}

TEST_CASE("pearson correlation and mean/sd") {
  const std::vector<double> x{1, 2, 3, 4}, y{2, 4, 6, 8}, z{4, 3, 2, 1}, c{5, 5, 5, 5};
  CHECK(pearson_correlation(x, y) == doctest::Approx(1.0));
  CHECK(pearson_correlation(x, z) == doctest::Approx(-1.0));
  CHECK(pearson_correlation(x, c) == 0.0);
  const MeanSd s = mean_sd(x);
  CHECK(s.mean == doctest::Approx(2.5));
  CHECK(s.sd == doctest::Approx(std::sqrt(5.0 / 3.0)));
  CHECK(mean_sd(std::vector<double>{3}).sd == 0.0);
}

TEST_CASE("random permutation baseline matches the expected distance") {
  // Same permutation draws applied through permute_layer.
  const Model m = oracle::random_model("in=4;fc=10:relu;fc=3", 5);
  Rng a(7), b(7);
  const MeanSd base = random_perm_baseline(m, 0, 200, a);
  std::vector<double> direct;
  for (int t = 0; t < 200; ++t) {
    const Permutation p = random_permutation(10, b);
    direct.push_back(wms(m, permute_layer(m, 0, p), 0));
  }
  CHECK(base.mean == doctest::Approx(mean_sd(direct).mean).epsilon(1e-9));
  Rng c(1);
  CHECK(random_perm_baseline(m, 1, 5, c).mean > 0.0);
}

TEST_CASE("misalignment report lists every layer") {
  Rng rng(3);
  const Model a = oracle::random_model("in=1x6x6;conv=3:k3:s1:p1:relu;pool=2;flatten;fc=5:relu;fc=3", 1);
  const Model b = oracle::random_model("in=1x6x6;conv=3:k3:s1:p1:relu;pool=2;flatten;fc=5:relu;fc=3", 2);
  std::vector<Tensor> probe;
  std::vector<std::uint64_t> ids;
  for (int i = 0; i < 8; ++i) {
    probe.push_back(oracle::random_input(a, rng));
    ids.push_back(100 + i);
  }
  const MisalignmentReport r = misalignment_report(a, b, probe, ids, {5, 3}, rng);
  CHECK(r.layers.size() == 3);
  CHECK(r.sampled_pixels[0].size() == 5);
  CHECK(r.sampled_pixels[1].empty());
  CHECK(r.probe_ids == ids);
  const std::string csv = r.to_csv();
  CHECK(csv.rfind("model_id,layer,metric,value,baseline\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 10);
}
