#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "shadowalign/attack.hpp"
#include "shadowalign/nn.hpp"
#include "shadowalign/rng.hpp"
#include "shadowalign/training.hpp"

namespace shadowalign {

// Binary container shared by checkpoints, dataset files and attack-feature
// caches. All integers little-endian.
//
//   magic    8 bytes "SHDRALN1"
//   version  u16 (1)
//   descriptor  u32 length + bytes
//   tensor count u32, then per tensor:
//     name u16 length + bytes, dtype u8 (0 = f32, 1 = u64), ndim u8,
//     dims u32 x ndim, payload byte length u64, payload
//   metadata count u32, then per entry: key u16 length + bytes,
//     value u32 length + bytes
inline constexpr char kContainerMagic[8] = {'S', 'H', 'D', 'R', 'A', 'L', 'N', '1'};
inline constexpr std::uint16_t kContainerVersion = 1;

struct ContainerEntry {
  std::string name;
  Tensor f32;                        // dtype 0
  std::vector<std::uint64_t> u64;    // dtype 1 (shape is {u64.size()})
  bool is_u64 = false;
};

struct Container {
  std::string descriptor;
  std::vector<ContainerEntry> entries;
  std::vector<std::pair<std::string, std::string>> metadata;

  void add(std::string name, Tensor t);
  void add(std::string name, std::vector<std::uint64_t> values);
  void set_meta(std::string key, std::string value);

  const ContainerEntry* find(std::string_view name) const;
  const Tensor& tensor(std::string_view name) const;
  const std::vector<std::uint64_t>& u64(std::string_view name) const;
  std::optional<std::string> meta(std::string_view key) const;
};

std::string encode_container(const Container& c);
// Throws FormatError on bad magic, unknown version, truncation, payload
// lengths that disagree with shapes, or trailing bytes.
Container decode_container(std::string_view bytes);

void write_file(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

// FNV-1a 64-bit digest as 16 hex digits.
std::string fnv1a_hex(std::string_view bytes);

struct Checkpoint {
  Model model;
  SeedBundle seeds;
  std::string train_log_digest;
};

Container checkpoint_container(const Model& model, const SeedBundle& seeds, const std::string& train_log_digest = "");
Checkpoint checkpoint_from_container(const Container& c);
void save_checkpoint(const std::filesystem::path& path, const Model& model, const SeedBundle& seeds,
                     const std::string& train_log_digest = "");
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Datasets as containers: "records" (n x record shape), "labels", "ids".
void save_dataset(const std::filesystem::path& path, const LabeledDataset& data);
LabeledDataset load_dataset(const std::filesystem::path& path);

// CSV rows "label,f1,...,fn" with an optional header line; ids are row
// numbers. Records are reshaped to record_shape when it is non-empty.
LabeledDataset load_csv_dataset(const std::filesystem::path& path, const Shape& record_shape = {});
void save_csv_dataset(const std::filesystem::path& path, const LabeledDataset& data);

// Attack feature caches.
Container feature_groups_container(const std::vector<FeatureGroup>& groups, const FeatureSpec& spec);
std::vector<FeatureGroup> feature_groups_from_container(const Container& c);

}  // namespace shadowalign
