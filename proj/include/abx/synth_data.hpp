#pragma once

// Synthetic whole-slide stand-ins with ground-truth instance roles.
//
// Noisy instances come from a shared background Gaussian mixture. The
// discriminative instances of a class-c slide (c >= 1) are background draws
// shifted by `separation * noise_sigma` along a class direction orthogonal to
// the span of the mixture centres, so separation 0 makes them noise. Class 0
// has no discriminative instances. Every instance has one view per scale: view_j = latent * T_j + eta, T_0 = I and
// T_j (j > 0) a fixed near-identity orthogonal map.

#include "abx/random.hpp"
#include "abx/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace abx {

enum class Role : std::uint8_t { Noisy = 0, Discriminative = 1 };

struct Slide {
  int id = 0;
  int label = 0;
  Matrix latent;                       // s x d_raw
  std::vector<Matrix> views;           // one s x d_raw matrix per scale
  std::vector<std::uint32_t> regions;  // region id per instance
  std::vector<Role> roles;

  Index size() const { return latent.rows(); }
  Index raw_dim() const { return latent.cols(); }
  Index scales() const { return static_cast<Index>(views.size()); }
  std::vector<Index> discriminative() const;
  std::vector<Index> noisy() const;
};

struct DatasetConfig {
  Index slides = 200;
  Index min_instances = 128;
  Index max_instances = 256;
  double witness_rate = 0.05;
  Index raw_dim = 16;
  Index classes = 2;
  double separation = 2.5;   // in units of noise_sigma
  double noise_sigma = 1.0;
  Index region_grid = 2;     // region_grid^2 spatial regions
  Index scales = 2;
  Index background_components = 4;
  double view_noise = 0.1;
  std::uint64_t seed = 0;

  Index regions() const { return region_grid * region_grid; }
  void validate() const;
};

// Frozen per-dataset geometry: mixture centres, class means and scale maps.
struct SyntheticWorld {
  Matrix background_centers;          // K x d_raw
  Matrix class_offsets;               // C x d_raw; row 0 is zero
  std::vector<Matrix> scale_maps;     // d_raw x d_raw per scale
};

SyntheticWorld make_world(const DatasetConfig& config);

Slide make_slide(const DatasetConfig& config, const SyntheticWorld& world, int id, int label,
                 Rng& rng);

struct Manifest {
  std::uint64_t config_hash = 0;
  std::vector<int> train_ids;
  std::vector<int> test_ids;
  std::vector<Index> train_class_counts;
  std::vector<Index> test_class_counts;
  Index discriminative_instances = 0;
  Index noisy_instances = 0;
};

struct Dataset {
  DatasetConfig config;
  std::vector<Slide> train;
  std::vector<Slide> test;
  Manifest manifest;
};

// Balanced labels, 7:3 train/test split by seeded shuffle.
Dataset make_dataset(const DatasetConfig& config);

std::uint64_t config_hash(const DatasetConfig& config);

// Slide files: "ABXD" | u32 version | u32 s | u32 d_raw | u32 t | u32 label |
// role bitmap (ceil(s/8) bytes, LSB first) | u32 region[s] | f64 latent[s*d_raw] |
// f64 view_j[s*d_raw] for each scale. All little-endian, matrices row-major.
inline constexpr std::uint32_t kSlideFormatVersion = 1;

void write_slide(const std::filesystem::path& path, const Slide& slide);
Slide read_slide(const std::filesystem::path& path, int id);

// Writes manifest.json plus train/ and test/ slide directories. Refuses a
// non-empty directory unless `force`.
void save_dataset(const std::filesystem::path& dir, const Dataset& dataset, bool force);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace abx
