#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <vector>

#include "chexopt/tensor.hpp"

namespace chexopt {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  bool pass = false;
};

// Compares the tape gradient of the scalar program `f` at `x` against
// central differences (f(x+h e_i) - f(x-h e_i)) / 2h. The relative error
// of a component is |a-b| / max(|a|, |b|, 1e-8). `coords` restricts the
// comparison to a subset of components (all when empty). Throws when two
// evaluations of f at the same point disagree.
GradCheckReport finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                                  double h = 1e-5, double tol = 1e-4,
                                  const std::vector<std::size_t>& coords = {});

}  // namespace chexopt
