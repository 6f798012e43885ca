#include "doctest.h"

#include "echoprompt/error.hpp"
#include "echoprompt/rng.hpp"
#include "echoprompt/tensor.hpp"

#include <cmath>
#include <set>

using namespace echoprompt;

TEST_CASE("counter rng is a pure function of key and counter")
{
    CounterRng a(42), b(42);
    for (int i = 0; i < 100; ++i) {
        CHECK(a.next_u64() == b.next_u64());
    }
    CHECK(CounterRng(42).split("x").key() == CounterRng(42).split("x").key());
    CHECK(CounterRng(42).split("x").key() != CounterRng(42).split("y").key());
    CHECK(CounterRng(42).split(0).key() != CounterRng(42).split(1).key());
    CHECK(CounterRng(1).key() != CounterRng(2).key());
}

TEST_CASE("uniform and normal draws have the expected range and moments")
{
    CounterRng rng(7);
    double sum = 0.0, sq = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        const double z = rng.normal();
        sum += z;
        sq += z * z;
    }
    CHECK(std::abs(sum / n) < 0.05);
    CHECK(std::abs(sq / n - 1.0) < 0.05);

    std::set<std::uint64_t> seen;
    for (int i = 0; i < 200; ++i) {
        const auto v = rng.below(5);
        CHECK(v < 5);
        seen.insert(v);
    }
    CHECK(seen.size() == 5);
}

TEST_CASE("tensor shape bookkeeping")
{
    Tensor t({2, 3, 4}, 1.5);
    CHECK(t.size() == 24);
    CHECK(t.channels() == 4);
    CHECK(t.rows() == 6);
    CHECK(shape_string(t.shape()) == "[2,3,4]");
    Tensor s({}, 3.0);
    CHECK(s.item() == 3.0);
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>(3)), InvalidArgument);
    CHECK_THROWS_AS(t.reshaped({5, 5}), InvalidArgument);
    CHECK(t.reshaped({24}).storage() == t.storage());
    t[0] = std::nan("");
    CHECK_FALSE(t.all_finite());
}
