#pragma once

#include <cstddef>
#include <string>

#include "shadowalign/rng.hpp"
#include "shadowalign/training.hpp"

namespace shadowalign {

enum class SyntheticKind { Blobs, Images };

std::string to_string(SyntheticKind k);
SyntheticKind parse_synthetic_kind(const std::string& s);

struct SyntheticSpec {
  SyntheticKind kind = SyntheticKind::Blobs;
  std::size_t classes = 4;
  std::size_t dim = 32;         // blobs: feature count
  std::size_t image_size = 16;  // images: side length, one channel
  std::size_t per_class = 500;
  // Blobs: distance of each class centre from the origin, in units of the
  // per-feature noise sd. Images: pattern amplitude relative to pixel noise.
  double separation = 3.0;
  // Fraction of records whose label is replaced by a uniformly drawn class.
  double label_noise = 0.0;

  void validate() const;
};

// Records ordered class by class, then shuffled; ids are 0..n-1 in the final
// order. Blobs: centre_c = separation * u_c with u_c a random unit vector,
// record = centre + N(0, I). Images: class c is an oriented sinusoidal
// grating (orientation pi*c/classes, random phase) plus N(0, 1) pixel noise.
LabeledDataset gen_synthetic(const SyntheticSpec& spec, Rng& rng);

}  // namespace shadowalign
