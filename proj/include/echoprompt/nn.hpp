#pragma once

#include "echoprompt/autograd.hpp"
#include "echoprompt/rng.hpp"

#include <string>
#include <vector>

namespace echoprompt {

struct NamedParam {
    std::string name;
    ag::Var var;
};

/// Gaussian tensor with the given standard deviation.
Tensor gaussian_tensor(Shape shape, double stddev, CounterRng& rng);

/// He-normal initialised trainable weight (std = sqrt(2 / fan_in)).
ag::Var he_weight(Shape shape, std::size_t fan_in, CounterRng& rng);

ag::Var zero_param(Shape shape);

} // namespace echoprompt
