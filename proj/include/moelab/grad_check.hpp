#pragma once

#include <functional>

#include "moelab/tensor.hpp"

namespace moelab::num {

// Central-difference verification of reverse-mode gradients. f must be a
// deterministic scalar-valued function of x, evaluable both under a tape (for
// the analytic gradient) and without one (for the probes). Returns the
// maximum over coordinates of
//     |analytic - central| / (|analytic| + |central| + eps).
//
// The caller is responsible for keeping x away from non-smooth points
// (top-k ties, rectifier kinks) by a margin larger than eps; this function
// does not mask them.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double eps = 1e-5);

}  // namespace moelab::num
