#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "miam/model.hpp"

namespace miam {

struct GradcheckOptions {
  std::uint64_t seed = 0;
  double step = 1e-5;        // central-difference half width
  double tolerance = 1e-4;   // on the max relative error
  double floor = 1e-4;       // relative error denominator floor
  bool inject_bug = false;   // negate the leaky-ReLU backward pass
};

struct GroupError {
  std::string name;  // parameter tensor
  std::size_t size = 0;
  double max_rel_error = 0;
  double max_abs_grad = 0;
};

struct GradcheckReport {
  std::vector<GroupError> groups;
  double max_rel_error = 0;
  bool passed = false;
  ModelConfig model;

  std::string to_text() const;
};

/// The model used by gradcheck: D=3, d_model=8, 2 heads, 2 layers, decoder
/// on, no dropout.
ModelConfig gradcheck_model();

/// Compares the tape gradient of the composite loss on two random samples
/// (T=4 and T=3) with central differences, per parameter tensor.
/// |a - n| / max(|a|, |n|, floor).
GradcheckReport gradcheck(const GradcheckOptions& options);

}  // namespace miam
