#include "shadowalign/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "shadowalign/error.hpp"
#include "shadowalign/symmetry.hpp"

namespace shadowalign {

namespace {

void check_layer_shapes(const Model& a, const Model& b, std::size_t l) {
  const Layer& x = a.param(l);
  const Layer& y = b.param(l);
  if (x.weight.shape != y.weight.shape || x.bias.shape != y.bias.shape) {
    throw ShapeError("layer " + std::to_string(l) + " differs in shape between the two models");
  }
}

}  // namespace

double wms(const Model& a, const Model& b, std::size_t l) {
  check_layer_shapes(a, b, l);
  const Layer& x = a.param(l);
  const Layer& y = b.param(l);
  return std::sqrt(squared_distance(x.weight.data, y.weight.data) + squared_distance(x.bias.data, y.bias.data));
}

double ams(const Model& a, const Model& b, std::size_t l, std::span<const Tensor> probe) {
  check_layer_shapes(a, b, l);
  if (probe.empty()) throw InvalidArgument("AMS needs probe records");
  double total = 0.0;
  for (const auto& x : probe) {
    ForwardTrace ta = forward(a, x), tb = forward(b, x);
    total += std::sqrt(squared_distance(layer_output(a, ta, l).data, layer_output(b, tb, l).data));
  }
  return total / static_cast<double>(probe.size());
}

double pearson_correlation(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.empty()) throw ShapeError("pearson: series lengths differ");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0) return 0.0;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double cba(const Model& a, const Model& b, std::size_t l, std::span<const Tensor> probe, std::size_t pixels, Rng& rng,
           std::vector<std::size_t>* sampled_pixels) {
  check_layer_shapes(a, b, l);
  if (probe.size() < 2) throw InvalidArgument("CBA needs at least 2 probe records");
  const std::size_t units = a.param(l).units();
  const std::size_t R = probe.size();

  std::size_t per_unit = 0;
  std::vector<std::vector<float>> outs_a, outs_b;
  outs_a.reserve(R);
  outs_b.reserve(R);
  for (const auto& x : probe) {
    ForwardTrace ta = forward(a, x), tb = forward(b, x);
    outs_a.push_back(layer_output(a, ta, l).data);
    outs_b.push_back(layer_output(b, tb, l).data);
    per_unit = outs_a.back().size() / units;
  }

  std::vector<std::size_t> positions;
  if (a.param(l).kind == LayerKind::Conv2D) {
    positions = rng.sample_without_replacement(per_unit, std::min(pixels, per_unit));
    std::sort(positions.begin(), positions.end());
  } else {
    positions = {0};
  }
  if (sampled_pixels) *sampled_pixels = a.param(l).kind == LayerKind::Conv2D ? positions : std::vector<std::size_t>{};

  std::vector<double> sa(R), sb(R);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t d = 0; d < units; ++d)
    for (auto p : positions) {
      for (std::size_t r = 0; r < R; ++r) {
        sa[r] = outs_a[r][d * per_unit + p];
        sb[r] = outs_b[r][d * per_unit + p];
      }
      total += pearson_correlation(sa, sb);
      ++count;
    }
  return total / static_cast<double>(count);
}

MeanSd mean_sd(std::span<const double> values) {
  MeanSd s;
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

MeanSd random_perm_baseline(const Model& reference, std::size_t l, std::size_t trials, Rng& rng) {
  if (trials < 1) throw InvalidArgument("baseline needs at least one trial");
  const std::size_t units = reference.param(l).units();
  std::vector<double> scores;
  for (std::size_t t = 0; t < trials; ++t) {
    const Permutation perm = random_permutation(units, rng);
    Model m = reference;
    // The output layer cannot be permuted as a symmetry; for the baseline
    // only its own rows matter, so shuffle them directly.
    Layer& layer = m.param(l);
    const Layer& src = reference.param(l);
    const std::size_t block = layer.weight.size() / units;
    for (std::size_t d = 0; d < units; ++d) {
      std::copy_n(src.weight.data.begin() + static_cast<long>(d * block), block,
                  layer.weight.data.begin() + static_cast<long>(perm[d] * block));
      layer.bias[perm[d]] = src.bias[d];
    }
    scores.push_back(wms(reference, m, l));
  }
  return mean_sd(scores);
}

std::string MisalignmentReport::to_csv(bool header) const {
  std::ostringstream os;
  os.precision(9);
  if (header) os << "model_id,layer,metric,value,baseline\n";
  for (const auto& m : layers) {
    os << model_id << ',' << m.layer + 1 << ",wms," << m.wms << ',' << m.baseline.mean << '\n';
    os << model_id << ',' << m.layer + 1 << ",ams," << m.ams << ",\n";
    os << model_id << ',' << m.layer + 1 << ",cba," << m.cba << ",\n";
  }
  return os.str();
}

MisalignmentReport misalignment_report(const Model& reference, const Model& model, std::span<const Tensor> probe,
                                       std::span<const std::uint64_t> probe_ids, const ReportOptions& options,
                                       Rng& rng) {
  MisalignmentReport report;
  report.reference_id = reference.arch_id;
  report.model_id = model.arch_id;
  report.probe_records = probe.size();
  report.pixels = options.pixels;
  report.probe_ids.assign(probe_ids.begin(), probe_ids.end());
  for (std::size_t l = 0; l < reference.num_param_layers(); ++l) {
    LayerMisalignment m;
    m.layer = l;
    m.wms = wms(reference, model, l);
    m.ams = ams(reference, model, l, probe);
    std::vector<std::size_t> pix;
    m.cba = cba(reference, model, l, probe, options.pixels, rng, &pix);
    m.baseline = random_perm_baseline(reference, l, options.baseline_trials, rng);
    report.sampled_pixels.push_back(std::move(pix));
    report.layers.push_back(m);
  }
  return report;
}

}  // namespace shadowalign
