#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "invnet3d/seismic.hpp"

namespace invnet3d {

/// Everything needed to regenerate a synthetic dataset from a seed.
struct DatasetConfig {
  VelocityConfig velocity;
  std::size_t sources = 4;     // simulated sources on a square surface grid
  std::size_t receivers = 12;  // per horizontal axis
  std::size_t nt = 512;
  double f0 = 15.0;
  double cfl_safety = 0.8;  // dt = cfl_safety * spacing / (v_max * sqrt(3))
  std::size_t sponge_width = 8;
  std::size_t time_samples = 96;   // frames kept by temporal subsampling
  std::vector<std::size_t> selected;  // source subset; empty keeps all

  void validate() const;
  AcquisitionGeometry geometry() const;
  std::vector<std::size_t> selection() const;
};

void to_json(nlohmann::json& j, const DatasetConfig& c);
void from_json(const nlohmann::json& j, DatasetConfig& c);

/// One manifest.jsonl line.
struct SampleRecord {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  std::string input;   // RVT1 file, C x T x H_r x W_r, normalized to [-1, 1]
  std::string target;  // RVT1 file, 1 x D x H x W, normalized to [-1, 1]
  Shape input_shape;
  Shape target_shape;
  double dt = 0;  // frame spacing after subsampling
  double spacing = 0;
  MinMax seismic;   // per-sample range used for the input
  MinMax velocity;  // global range used for the target
  std::vector<std::size_t> sources;
  bool lens = false;
};

void to_json(nlohmann::json& j, const SampleRecord& r);
void from_json(const nlohmann::json& j, SampleRecord& r);

struct Sample {
  SampleRecord record;
  Tensor input;
  Tensor target;
};

/// Builds sample `index` from its own stream Rng::derive(master_seed, index):
/// velocity, simulation, subsampling, source selection, normalization.
Sample generate_sample(const DatasetConfig& cfg, std::uint64_t master_seed, std::size_t index);

/// Writes config.json, manifest.jsonl and x_/y_ RVT1 pairs into `dir`,
/// replacing any previous manifest. Samples are independent, so `workers`
/// threads produce the same bytes as one.
void generate_dataset(const std::filesystem::path& dir, const DatasetConfig& cfg, std::size_t samples,
                      std::uint64_t master_seed, std::size_t workers = 1);

struct Dataset {
  std::filesystem::path dir;
  DatasetConfig config;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  Shape input_shape() const;
  Shape target_shape() const;
};

Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace invnet3d
