#pragma once

#include <functional>

#include "nsd/tensor.hpp"

namespace nsd {

// Central-difference check of dL/dtheta. f() must rebuild the scalar loss
// from the current contents of theta. Returns the max over entries of
// |analytic - numeric| / (|analytic| + delta).
double grad_check(const std::function<Tensor()>& f, Tensor theta, double delta = 1e-4);

}  // namespace nsd
