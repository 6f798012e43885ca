#include "echoprompt/nn.hpp"

#include <cmath>

namespace echoprompt {

Tensor gaussian_tensor(Shape shape, double stddev, CounterRng& rng)
{
    Tensor t(std::move(shape));
    for (double& v : t.storage()) {
        v = rng.normal() * stddev;
    }
    return t;
}

ag::Var he_weight(Shape shape, std::size_t fan_in, CounterRng& rng)
{
    return ag::Var::parameter(gaussian_tensor(std::move(shape), std::sqrt(2.0 / static_cast<double>(fan_in)), rng));
}

ag::Var zero_param(Shape shape) { return ag::Var::parameter(Tensor(std::move(shape), 0.0)); }

} // namespace echoprompt
