// Times the serial and OpenMP kernel backends against each other on the
// shapes the model actually uses, plus one full training step.
#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <vector>

#include "nb/kernels.hpp"
#include "nb/model.hpp"
#include "nb/shapeworld.hpp"
#include "nb/train.hpp"

namespace {

using Clock = std::chrono::steady_clock;

double time_iters(const std::function<void()>& fn, int iters) {
    fn();  // warm up
    const auto t0 = Clock::now();
    for (int i = 0; i < iters; ++i) fn();
    return std::chrono::duration<double>(Clock::now() - t0).count() / iters;
}

std::vector<float> random_buf(size_t n, nb::RngStream& rng) {
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(2.0 * rng.next_uniform() - 1.0);
    return v;
}

void bench_matmul(int m, int k, int n, nb::RngStream& rng) {
    const auto a = random_buf(static_cast<size_t>(m) * k, rng);
    const auto b = random_buf(static_cast<size_t>(k) * n, rng);
    std::vector<float> c_serial(static_cast<size_t>(m) * n), c_omp(c_serial.size());
    const int iters = 2000000 / (m * n) + 10;
    const double ts = time_iters([&] { nb::kernels::serial::matmul(a.data(), b.data(), c_serial.data(), m, k, n); }, iters);
    const double tp = time_iters([&] { nb::kernels::openmp::matmul(a.data(), b.data(), c_omp.data(), m, k, n); }, iters);
    const bool match = std::memcmp(c_serial.data(), c_omp.data(), c_serial.size() * sizeof(float)) == 0;
    const double flops = 2.0 * m * k * n;
    std::printf("matmul %4dx%4dx%4d   serial %7.2f GF/s   openmp %7.2f GF/s   speedup %5.2fx   bitmatch %s\n", m, k, n,
                flops / ts / 1e9, flops / tp / 1e9, ts / tp, match ? "yes" : "NO");
}

void bench_rows(const char* name, int rows, int cols, nb::RngStream& rng,
                void (*serial_fn)(const float*, float*, int, int),
                void (*omp_fn)(const float*, float*, int, int)) {
    const auto x = random_buf(static_cast<size_t>(rows) * cols, rng);
    std::vector<float> out_s(x.size()), out_p(x.size());
    const int iters = 4000;
    const double ts = time_iters([&] { serial_fn(x.data(), out_s.data(), rows, cols); }, iters);
    const double tp = time_iters([&] { omp_fn(x.data(), out_p.data(), rows, cols); }, iters);
    const bool match = std::memcmp(out_s.data(), out_p.data(), out_s.size() * sizeof(float)) == 0;
    std::printf("%-10s %4dx%-4d      serial %7.3f us     openmp %7.3f us     speedup %5.2fx   bitmatch %s\n", name,
                rows, cols, ts * 1e6, tp * 1e6, ts / tp, match ? "yes" : "NO");
}

double bench_train_step(nb::kernels::Backend backend) {
    nb::kernels::set_backend(backend);
    nb::RngStream rng(42);
    auto corpus = nb::generate_corpus(16, rng.child("data"));
    nb::ModelConfig config;
    nb::MultimodalLM model(config, rng.child("init"));
    std::vector<const nb::Example*> batch;
    for (size_t i = 0; i < 8; ++i) batch.push_back(&corpus[i]);
    nb::PerturbSpec noise{nb::PerturbKind::gaussian_feature, 0.5f, 0.5f, 0.1f};
    nb::AdamOptimizer opt(model.parameters(), 3e-4f);
    return time_iters(
        [&] {
            nb::Tape tape;
            nb::RngStream step_rng = rng.child("perturb");
            nb::Tensor loss = nb::sft_loss(model, batch, noise, step_rng);
            tape.backward(loss);
            opt.step();
        },
        10);
}

}  // namespace

int main() {
    std::printf("kernel backends: openmp_compiled=%s threads=%d\n\n", nb::kernels::openmp_compiled() ? "yes" : "no",
                nb::kernels::thread_count());
    nb::RngStream rng(7);

    bench_matmul(80, 64, 64, rng);     // qkv projections
    bench_matmul(80, 64, 256, rng);    // ffn up
    bench_matmul(80, 256, 64, rng);    // ffn down
    bench_matmul(80, 16, 80, rng);     // attention scores per head
    bench_matmul(64, 48, 32, rng);     // patch embedding
    bench_matmul(80, 64, 26, rng);     // lm head
    std::printf("\n");
    bench_rows("softmax", 80, 80, rng, nb::kernels::serial::softmax_rows, nb::kernels::openmp::softmax_rows);
    bench_rows("logsoftmax", 16, 26, rng, nb::kernels::serial::log_softmax_rows, nb::kernels::openmp::log_softmax_rows);
    std::printf("\n");

    const double serial_step = bench_train_step(nb::kernels::Backend::serial);
    const double omp_step = bench_train_step(nb::kernels::Backend::openmp);
    std::printf("sft step (batch 8)      serial %7.1f ms     openmp %7.1f ms     speedup %5.2fx\n", serial_step * 1e3,
                omp_step * 1e3, serial_step / omp_step);
    return 0;
}
