#pragma once

#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

#include "ldp/rng.hpp"
#include "ldp/tensor.hpp"

namespace ldp::ad {

struct GradCheckReport {
    double max_rel_err = 0.0;
    double max_abs_diff = 0.0;
    size_t worst_coord = 0;       // flat coordinate of the worst entry
    size_t worst_param = 0;       // parameter index (param-space variant only)
    size_t coords_checked = 0;

    bool within(double tol) const { return coords_checked > 0 && max_rel_err < tol; }
};

// Compares the analytic gradient of scalar-valued f at x0 against central
// finite differences with step h, coordinate by coordinate. Relative error is
// |analytic - central| / max(1, |analytic|).
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x0,
                           double h);

// Param-space variant: loss_fn recomputes the forward pass from `params`,
// which must not already belong to another live tape. Checks only the listed
// (param, flat coordinate) pairs; probes mutate param data in place and
// restore it.
GradCheckReport grad_check_params(const std::function<Tensor()>& loss_fn,
                                  std::vector<Tensor>& params,
                                  const std::vector<std::pair<size_t, size_t>>& coords, double h);

// Uniformly samples n distinct (param, coordinate) pairs across all entries.
std::vector<std::pair<size_t, size_t>> sample_param_coords(const std::vector<Tensor>& params,
                                                           size_t n, Rng& rng);

}  // namespace ldp::ad
