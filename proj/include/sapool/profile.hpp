#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sapool/tensor.hpp"

namespace sapool {

// One analytic record per primitive op of a forward pass.
struct LayerRecord {
  std::string name;
  std::string kind;
  int stage = 0;  // 0 = stem, 1..S = stages, S+1 = head
  Shape in;
  Shape out;
  std::uint64_t flops = 0;
  std::uint64_t effective_flops = 0;
  std::uint64_t out_bytes = 0;
  // Bytes alive while this op runs: its inputs, its output and any tensor
  // held for later use (residual inputs, pooling inputs awaiting π).
  std::uint64_t live_bytes = 0;
};

// Fraction of a conv's input channels still active, keyed by weight name.
using KeepFraction = std::function<double(const std::string& weight_name)>;

class Profiler {
 public:
  explicit Profiler(std::size_t scalar_bytes, KeepFraction keep = {})
      : scalar_bytes_(scalar_bytes), keep_(std::move(keep)) {}

  std::uint64_t bytes(const Shape& s) const { return shape_numel(s) * scalar_bytes_; }

  // `extra_inputs` are additional operands beyond `in` (e.g. π, skip input).
  void record(const std::string& name, const std::string& kind, const Shape& in, const Shape& out,
              std::uint64_t flops, const std::vector<Shape>& extra_inputs = {},
              const std::string& weight_name = "");

  // Residual inputs and similar tensors that stay alive across several ops.
  void hold(const Shape& s) { held_.push_back(bytes(s)); }
  void release() { held_.pop_back(); }

  void set_stage(int stage) { stage_ = stage; }
  int stage() const { return stage_; }

  const std::vector<LayerRecord>& records() const { return records_; }
  std::vector<LayerRecord> take() { return std::move(records_); }

 private:
  std::size_t scalar_bytes_;
  KeepFraction keep_;
  std::vector<std::uint64_t> held_;
  int stage_ = 0;
  std::vector<LayerRecord> records_;
};

struct NetworkProfile {
  std::vector<LayerRecord> layers;

  std::uint64_t total_flops() const;
  std::uint64_t total_effective_flops() const;
  std::uint64_t peak_live_bytes() const;
  // Sum of output bytes of every op tagged with `stage`.
  std::uint64_t stage_bytes(int stage) const;
  std::uint64_t stage_peak_bytes(int stage) const;
  // Sum over records whose name starts with `prefix`.
  std::uint64_t flops_with_prefix(const std::string& prefix) const;

  std::string to_csv() const;
};

}  // namespace sapool
