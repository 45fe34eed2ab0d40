#pragma once

#include <string>
#include <vector>

#include "sapool/backbone.hpp"
#include "sapool/data.hpp"
#include "sapool/pruning.hpp"
#include "sapool/train.hpp"

namespace sapool {

enum class DataKind { mnist, cifar, synthetic };
std::string_view to_string(DataKind k);
DataKind parse_data_kind(std::string_view s);

struct DataConfig {
  DataKind kind = DataKind::mnist;
  std::string train_images = "data/mnist-train-images-idx3-ubyte";
  std::string train_labels = "data/mnist-train-labels-idx1-ubyte";
  std::string test_images = "data/mnist-t10k-images-idx3-ubyte";
  std::string test_labels = "data/mnist-t10k-labels-idx1-ubyte";
  std::vector<std::string> cifar_train;  // data_batch_*.bin
  std::string cifar_test;                // test_batch.bin
  std::size_t train_limit = 0;           // 0 keeps every sample
  std::size_t test_limit = 0;
  std::size_t pad = 2;                   // IDX images are zero-padded 28 -> 32
  std::size_t synth_train = 10000;
  std::size_t synth_test = 2000;
  std::uint64_t synth_seed = 7;
  bool flip = false;
  std::size_t crop_pad = 0;
  // Empty picks the per-kind default.
  std::vector<double> mean;
  std::vector<double> stddev;
};

struct PruneSection {
  PruneConfig prune{};
  std::size_t epochs = 5;
  double lr = 0.01;
};

struct RunSection {
  std::uint64_t seed = 1;
  std::string precision = "f32";
  std::string out = "out";
  bool wall_clock = false;
  bool debug = false;
  std::size_t eval_batch = 250;
};

struct RunConfig {
  BackboneConfig model{};
  bool placement_explicit = false;  // otherwise the arch default applies
  DataConfig data{};
  OptimConfig optim{};
  PruneSection prune{};
  RunSection run{};
};

// Flat `key = value` lines under [model] [ablation] [data] [optim] [prune]
// [run] headers; '#' starts a comment. Unknown keys are errors.
RunConfig parse_config(const std::string& text, const std::string& source = "<config>");
RunConfig load_config(const std::string& path);
// Every key, in canonical order; parse_config(to_text(c)) reproduces c.
std::string to_text(const RunConfig& c);

// Input geometry implied by the data section: {channels, height, width, classes}.
struct InputGeometry {
  std::size_t channels, height, width, classes;
};
InputGeometry data_geometry(const DataConfig& d);

// Fills the derived model fields (input geometry, arch default placement)
// and checks every field. Throws ConfigError naming the violated constraint.
RunConfig resolve(RunConfig c);

// Per-channel (mean, stddev) applied to batches.
std::pair<std::vector<float>, std::vector<float>> data_normalization(const DataConfig& d);

Dataset load_train_set(const DataConfig& d);
Dataset load_test_set(const DataConfig& d);

TrainOptions train_options(const RunConfig& c);

}  // namespace sapool
