#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sapool/backbone.hpp"

namespace sapool {

struct GradCheckOptions {
  double step = 1e-3;       // finite-difference step h
  double tolerance = 1e-5;  // pass threshold on the relative error
  // Relative error is |a - n| / max(|a|, |n|, floor); the floor keeps
  // near-zero entries from dividing by rounding noise.
  double floor = 1e-5;
};

struct GradCheckRow {
  std::string name;
  std::size_t entries = 0;
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::string worst;  // "<tensor>[index]" with the largest relative error
  bool pass = false;
};

// Compares reverse-mode gradients of `loss` w.r.t. every entry of every
// target against the 4-point central difference
//   (f(x-2h) - 8 f(x-h) + 8 f(x+h) - f(x+2h)) / 12h.
// `loss` must read the targets' current values on each call.
GradCheckRow check_gradients(const std::string& name,
                             const std::function<Var<double>(Tape<double>&)>& loss,
                             const std::vector<Param<double>>& targets,
                             const GradCheckOptions& options = {});

// One row per differentiable primitive.
std::vector<GradCheckRow> gradcheck_ops(std::uint64_t seed, const GradCheckOptions& options = {});

// One row per layer type. The SAP row uses a [1,C,8,8] input with ε_p=2,
// ε_r=1, s=2 and the heads, ablation and LN placement from `cfg`.
std::vector<GradCheckRow> gradcheck_layers(const BackboneConfig& cfg, std::uint64_t seed,
                                           const GradCheckOptions& options = {});

std::string format_gradcheck(const std::vector<GradCheckRow>& rows);

}  // namespace sapool
