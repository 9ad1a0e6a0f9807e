#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>
#include <vector>

#include "nb/rng.hpp"

using nb::RngStream;

TEST_CASE("identical (seed, counter) replays the same sequence") {
    RngStream a(123), b(123);
    for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());

    RngStream c(123, 500);
    RngStream d(123);
    for (int i = 0; i < 500; ++i) d.next_u64();
    CHECK(c.next_u64() == d.next_u64());
}

TEST_CASE("different seeds diverge") {
    RngStream a(1), b(2);
    int same = 0;
    for (int i = 0; i < 100; ++i) same += a.next_u64() == b.next_u64() ? 1 : 0;
    CHECK(same == 0);
}

TEST_CASE("child streams are deterministic and label-distinct") {
    RngStream root(9);
    RngStream c1 = root.child("perturb");
    RngStream c2 = root.child("perturb");
    RngStream c3 = root.child("batch");
    CHECK(c1.next_u64() == c2.next_u64());
    CHECK(c1.next_u64() != c3.next_u64());

    // child derivation does not depend on the parent's counter position
    RngStream advanced(9);
    advanced.next_u64();
    CHECK(advanced.child("perturb").next_u64() == root.child("perturb").next_u64());

    std::set<uint64_t> firsts;
    for (uint64_t i = 0; i < 1000; ++i) firsts.insert(root.child(i).next_u64());
    CHECK(firsts.size() == 1000);
}

TEST_CASE("uniform draws live in [0,1) and look uniform") {
    RngStream rng(7);
    const int n = 100000;
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        const double u = rng.next_uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        sum += u;
    }
    CHECK(sum / n == doctest::Approx(0.5).epsilon(0.01));
}

TEST_CASE("next_below is in range and covers all values") {
    RngStream rng(11);
    std::set<uint64_t> seen;
    for (int i = 0; i < 1000; ++i) {
        const uint64_t v = rng.next_below(7);
        REQUIRE(v < 7);
        seen.insert(v);
    }
    CHECK(seen.size() == 7);
    CHECK(rng.next_below(1) == 0);
}

TEST_CASE("normal draws have roughly unit variance") {
    RngStream rng(13);
    const int n = 200000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double z = rng.next_normal();
        sum += z;
        sq += z * z;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    CHECK(mean == doctest::Approx(0.0).epsilon(0.02));
    CHECK(std::abs(mean) < 0.01);
    CHECK(var == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("truncated normal stays inside [-1, 1]") {
    RngStream rng(17);
    for (int i = 0; i < 100000; ++i) {
        const float z = rng.next_trunc_normal();
        REQUIRE(z >= -1.0f);
        REQUIRE(z <= 1.0f);
    }
}
