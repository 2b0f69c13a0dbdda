#pragma once

// Datasets on disk, chronological splits, the synthetic traffic generator
// and binary checkpoints.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "strada/features.hpp"
#include "strada/graph.hpp"
#include "strada/tensor.hpp"

namespace strada {

struct Range {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool contains(std::size_t t) const { return t >= begin && t < end; }
  friend bool operator==(const Range&, const Range&) = default;
};

struct Splits {
  Range train, val, test;
  friend bool operator==(const Splits&, const Splits&) = default;
};

struct DatasetBundle {
  std::string name;
  RoadGraph graph{1};
  Series series;
  std::vector<Timestamp> timestamps;
  std::chrono::seconds frequency{300};
  Splits splits;

  std::size_t steps() const { return series.steps(); }
  std::size_t nodes() const { return series.nodes(); }
  // Timestamp of step t, extrapolated past the end of the series.
  Timestamp time_at(std::size_t t) const;
  // Timestamps of [0, steps) followed by `extra` future steps.
  std::vector<Timestamp> extended_timestamps(std::size_t extra) const;
};

// CSV "timestamp,node_0,...,node_{N-1}" plus an edge list. When `frequency`
// is given the spacing must match it; otherwise it is taken from the file.
// Splits are left empty; see apply_split.
DatasetBundle load_dataset(const std::filesystem::path& series_path,
                           const std::filesystem::path& edges_path,
                           std::optional<std::chrono::seconds> frequency = std::nullopt);
void save_series_csv(const DatasetBundle& bundle, const std::filesystem::path& path);

// Directory layout: series.csv, edges.csv and manifest.json (name,
// frequency, split bounds, generator settings). Without recorded bounds the
// default 70/20/10 split is applied.
void save_dataset_dir(const DatasetBundle& bundle, const std::filesystem::path& dir,
                      const std::string& manifest_extra_json = "{}");
DatasetBundle load_dataset_dir(const std::filesystem::path& dir);

// Boundaries at ⌊r_train·T⌋ and ⌊(r_train + r_val)·T⌋. Each split must hold
// at least `min_points` steps.
Splits chronological_split(std::size_t steps, double train = 0.70, double val = 0.20,
                           double test = 0.10, std::size_t min_points = 0);
void apply_split(DatasetBundle& bundle, double train = 0.70, double val = 0.20, double test = 0.10,
                 std::size_t min_points = 0);

struct SynthParams {
  double alpha = 0.75;         // self persistence
  double beta = 0.2;           // neighbor coupling through the row-normalized adjacency
  double amplitude = 1.0;      // daily forcing amplitude
  std::size_t period = 288;    // steps per day
  double noise_nu = 5.0;       // Student-t noise degrees of freedom
  double noise_sigma = 0.1;    // noise scale
  double radius = 0.0;         // geometric-graph radius; 0 picks one from N
  double level = 5.0;          // minimum value after the positive offset
  std::size_t burn_in = 576;
  std::size_t max_graph_draws = 200;
  std::string start = "2024-01-01T00:00:00Z";
  std::int64_t step_seconds = 300;

  void validate() const;
  friend bool operator==(const SynthParams&, const SynthParams&) = default;
};

// x_{t+1} = α·x_t + β·Â·x_t + A·sin(2πt/P + φ_v) + σ·ε_t with ε_t ~ t(ν), on a
// random connected geometric graph; the whole series is then shifted so its
// minimum equals `level`. Deterministic in (seed, N, T, params).
DatasetBundle synth_generate(std::uint64_t seed, std::size_t nodes, std::size_t steps,
                             const SynthParams& params = {});

// ---- Checkpoints ----------------------------------------------------------

struct NamedTensor {
  std::string name;
  Tensor<float> tensor;
  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

struct CheckpointData {
  std::string config;                // canonical JSON text
  std::vector<NamedTensor> tensors;  // base weights
  std::vector<NamedTensor> adapters;
  friend bool operator==(const CheckpointData&, const CheckpointData&) = default;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// "STR1", u32 version, then records (u32 tag, u64 length, body, u32 crc32 of
// tag+length+body), closed by an end record holding the record count. All
// integers and floats are little-endian. Written to a temporary file and
// renamed into place.
void save_checkpoint(const CheckpointData& data, const std::filesystem::path& path);
// Throws IntegrityError (with byte offset) on corruption or truncation.
CheckpointData load_checkpoint(const std::filesystem::path& path);

// Hex FNV-1a digest of a config text.
std::string config_digest(const std::string& text);

}  // namespace strada
