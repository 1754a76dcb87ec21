#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "asl/graph.hpp"

namespace asl::grad {

/// Names of the primitives exercised by the finite-difference suite, plus
/// "mlp" (a small two-layer network with a cross-entropy head).
std::vector<std::string> suite_primitives();

struct SuiteOptions {
  std::vector<std::string> primitives = suite_primitives();
  std::size_t graphs_per_primitive = 5;
  double epsilon = 1e-5;
  std::uint64_t seed = 7;
  const FaultInjection* fault = nullptr;
};

struct PrimitiveResult {
  std::string name;
  std::size_t graphs = 0;
  double max_error = 0.0;
};

struct SuiteResult {
  std::vector<PrimitiveResult> primitives;
  std::size_t graphs = 0;
  double max_error = 0.0;
};

/// Builds random graphs around each primitive, with bound values drawn from
/// [-2, 2] (positive sub-range where the primitive needs it), and compares
/// autodiff against central differences.
SuiteResult run_gradcheck_suite(const SuiteOptions& options);

}  // namespace asl::grad
