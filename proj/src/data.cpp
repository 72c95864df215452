#include "shadowalign/data.hpp"

#include <cmath>
#include <numeric>

#include "shadowalign/error.hpp"

namespace shadowalign {

std::string to_string(SyntheticKind k) { return k == SyntheticKind::Blobs ? "blobs" : "images"; }

SyntheticKind parse_synthetic_kind(const std::string& s) {
  if (s == "blobs") return SyntheticKind::Blobs;
  if (s == "images") return SyntheticKind::Images;
  throw ConfigError("unknown synthetic data kind '" + s + "' (blobs|images)");
}

void SyntheticSpec::validate() const {
  if (classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
  if (per_class == 0) throw ConfigError("synthetic data needs per_class > 0");
  if (kind == SyntheticKind::Blobs && dim == 0) throw ConfigError("blob dimension must be positive");
  if (kind == SyntheticKind::Images && image_size < 4) throw ConfigError("image_size must be at least 4");
  if (!(separation >= 0.0) || !std::isfinite(separation)) throw ConfigError("separation must be finite and >= 0");
  if (!(label_noise >= 0.0 && label_noise <= 1.0)) throw ConfigError("label_noise must lie in [0, 1]");
}

LabeledDataset gen_synthetic(const SyntheticSpec& spec, Rng& rng) {
  spec.validate();
  LabeledDataset d;
  const std::size_t n = spec.classes * spec.per_class;

  if (spec.kind == SyntheticKind::Blobs) {
    std::vector<std::vector<double>> centres(spec.classes, std::vector<double>(spec.dim));
    for (auto& c : centres) {
      double norm = 0.0;
      for (auto& v : c) {
        v = rng.normal();
        norm += v * v;
      }
      norm = std::sqrt(norm);
      for (auto& v : c) v = norm > 0.0 ? spec.separation * v / norm : 0.0;
    }
    for (std::size_t c = 0; c < spec.classes; ++c)
      for (std::size_t i = 0; i < spec.per_class; ++i) {
        Tensor x({spec.dim});
        for (std::size_t j = 0; j < spec.dim; ++j) x[j] = static_cast<float>(centres[c][j] + rng.normal());
        d.records.push_back(std::move(x));
        d.labels.push_back(c);
      }
  } else {
    const std::size_t S = spec.image_size;
    const double pi = std::acos(-1.0);
    for (std::size_t c = 0; c < spec.classes; ++c) {
      const double theta = pi * static_cast<double>(c) / static_cast<double>(spec.classes);
      const double freq = 2.0 * pi * (1.5 + static_cast<double>(c % 3)) / static_cast<double>(S);
      for (std::size_t i = 0; i < spec.per_class; ++i) {
        const double phase = rng.uniform(0.0, 2.0 * pi);
        Tensor x({1, S, S});
        for (std::size_t r = 0; r < S; ++r)
          for (std::size_t q = 0; q < S; ++q) {
            const double u = std::cos(theta) * static_cast<double>(q) + std::sin(theta) * static_cast<double>(r);
            x[r * S + q] = static_cast<float>(spec.separation * std::sin(freq * u + phase) + rng.normal());
          }
        d.records.push_back(std::move(x));
        d.labels.push_back(c);
      }
    }
  }

  if (spec.label_noise > 0.0)
    for (auto& y : d.labels)
      if (rng.uniform() < spec.label_noise) y = static_cast<std::size_t>(rng.below(spec.classes));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  LabeledDataset out;
  for (std::size_t i = 0; i < n; ++i) {
    out.records.push_back(std::move(d.records[order[i]]));
    out.labels.push_back(d.labels[order[i]]);
    out.ids.push_back(i);
  }
  return out;
}

}  // namespace shadowalign
