#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "nb/kernels.hpp"
#include "nb/rng.hpp"

namespace k = nb::kernels;

namespace {

std::vector<float> random_buf(size_t n, nb::RngStream& rng, float lo = -1.0f, float hi = 1.0f) {
    std::vector<float> v(n);
    for (auto& x : v) x = lo + (hi - lo) * static_cast<float>(rng.next_uniform());
    return v;
}

bool bit_equal(const std::vector<float>& a, const std::vector<float>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("serial and openmp matmul family agree bit for bit") {
    nb::RngStream rng(101);
    for (int trial = 0; trial < 20; ++trial) {
        const int m = 1 + static_cast<int>(rng.next_below(90));
        const int kk = 1 + static_cast<int>(rng.next_below(70));
        const int n = 1 + static_cast<int>(rng.next_below(90));
        const auto a = random_buf(static_cast<size_t>(m) * kk, rng);
        const auto b = random_buf(static_cast<size_t>(kk) * n, rng);
        std::vector<float> cs(static_cast<size_t>(m) * n), cp(cs.size());
        k::serial::matmul(a.data(), b.data(), cs.data(), m, kk, n);
        k::openmp::matmul(a.data(), b.data(), cp.data(), m, kk, n);
        REQUIRE(bit_equal(cs, cp));

        const auto bt = random_buf(static_cast<size_t>(n) * kk, rng);
        k::serial::matmul_bt(a.data(), bt.data(), cs.data(), m, kk, n);
        k::openmp::matmul_bt(a.data(), bt.data(), cp.data(), m, kk, n);
        REQUIRE(bit_equal(cs, cp));

        const auto at = random_buf(static_cast<size_t>(kk) * m, rng);
        k::serial::matmul_at(at.data(), b.data(), cs.data(), m, kk, n);
        k::openmp::matmul_at(at.data(), b.data(), cp.data(), m, kk, n);
        REQUIRE(bit_equal(cs, cp));
    }
}

TEST_CASE("serial and openmp rowwise kernels agree bit for bit") {
    nb::RngStream rng(102);
    for (int trial = 0; trial < 10; ++trial) {
        const int r = 1 + static_cast<int>(rng.next_below(60));
        const int c = 2 + static_cast<int>(rng.next_below(60));
        const size_t n = static_cast<size_t>(r) * c;
        const auto x = random_buf(n, rng, -4.0f, 4.0f);
        const auto y = random_buf(n, rng);
        const auto gain = random_buf(static_cast<size_t>(c), rng, 0.5f, 1.5f);
        const auto bias = random_buf(static_cast<size_t>(c), rng);
        std::vector<float> os(n), op(n);

        k::serial::softmax_rows(x.data(), os.data(), r, c);
        k::openmp::softmax_rows(x.data(), op.data(), r, c);
        REQUIRE(bit_equal(os, op));

        k::serial::log_softmax_rows(x.data(), os.data(), r, c);
        k::openmp::log_softmax_rows(x.data(), op.data(), r, c);
        REQUIRE(bit_equal(os, op));

        std::vector<float> ms(static_cast<size_t>(r)), rs(static_cast<size_t>(r)), mp(ms), rp(rs);
        k::serial::layer_norm_rows(x.data(), gain.data(), bias.data(), os.data(), ms.data(), rs.data(), r, c, 1e-5f);
        k::openmp::layer_norm_rows(x.data(), gain.data(), bias.data(), op.data(), mp.data(), rp.data(), r, c, 1e-5f);
        REQUIRE(bit_equal(os, op));
        REQUIRE(bit_equal(ms, mp));
        REQUIRE(bit_equal(rs, rp));

        k::serial::gelu(x.data(), os.data(), n);
        k::openmp::gelu(x.data(), op.data(), n);
        REQUIRE(bit_equal(os, op));

        k::serial::ew_add(x.data(), y.data(), os.data(), n);
        k::openmp::ew_add(x.data(), y.data(), op.data(), n);
        REQUIRE(bit_equal(os, op));

        CHECK(k::serial::sum(x.data(), n) == k::openmp::sum(x.data(), n));
        CHECK(k::serial::sum_squares(x.data(), n) == k::openmp::sum_squares(x.data(), n));
    }
}

TEST_CASE("reduction chunking is deterministic across sizes spanning chunk boundaries") {
    nb::RngStream rng(103);
    for (size_t n : {size_t(1), size_t(4095), size_t(4096), size_t(4097), size_t(20000)}) {
        const auto x = random_buf(n, rng);
        CHECK(k::serial::sum(x.data(), n) == k::openmp::sum(x.data(), n));
    }
}

TEST_CASE("softmax rows are nonnegative and sum to one") {
    nb::RngStream rng(104);
    const int r = 17, c = 33;
    const auto x = random_buf(static_cast<size_t>(r) * c, rng, -8.0f, 8.0f);
    std::vector<float> out(x.size());
    k::softmax_rows(x.data(), out.data(), r, c);
    for (int i = 0; i < r; ++i) {
        double s = 0.0;
        for (int j = 0; j < c; ++j) {
            REQUIRE(out[static_cast<size_t>(i) * c + j] >= 0.0f);
            s += out[static_cast<size_t>(i) * c + j];
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
    }
}

TEST_CASE("matmul against a plain reference") {
    nb::RngStream rng(105);
    const int m = 13, kk = 9, n = 11;
    const auto a = random_buf(static_cast<size_t>(m) * kk, rng);
    const auto b = random_buf(static_cast<size_t>(kk) * n, rng);
    std::vector<float> c(static_cast<size_t>(m) * n);
    k::matmul(a.data(), b.data(), c.data(), m, kk, n);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int t = 0; t < kk; ++t) acc += static_cast<double>(a[static_cast<size_t>(i) * kk + t]) *
                                                static_cast<double>(b[static_cast<size_t>(t) * n + j]);
            CHECK(c[static_cast<size_t>(i) * n + j] == doctest::Approx(acc).epsilon(1e-6));
        }
    }
}

TEST_CASE("all_finite flags NaN and Inf anywhere in the buffer") {
    std::vector<float> x(10000, 1.0f);
    CHECK(k::all_finite(x.data(), x.size()));
    x[9999] = std::numeric_limits<float>::quiet_NaN();
    CHECK_FALSE(k::serial::all_finite(x.data(), x.size()));
    CHECK_FALSE(k::openmp::all_finite(x.data(), x.size()));
    x[9999] = std::numeric_limits<float>::infinity();
    CHECK_FALSE(k::all_finite(x.data(), x.size()));
}

TEST_CASE("backend dispatch honours set_backend") {
    const auto original = k::backend();
    k::set_backend(k::Backend::serial);
    CHECK(k::backend() == k::Backend::serial);
    k::set_backend(k::Backend::openmp);
    CHECK(k::backend() == k::Backend::openmp);
    k::set_backend(original);
}
