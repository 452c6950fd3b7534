#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "qpa/generator.hpp"
#include "qpa/mapping.hpp"
#include "qpa/statevector.hpp"
#include "qpa/util.hpp"

using namespace qpa::gen;
using qpa::Rng;
namespace sim = qpa::sim;

namespace {

// Independent matrix-product evaluation of the mapping model, reading the
// flat parameter buffer through the documented [W0|b0|W1|b1|...] layout.
std::vector<double> mlp_oracle(const MappingModel& model,
                               std::vector<double> x) {
    const auto& dims = model.dims();
    std::span<const double> p = model.params();
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        std::vector<double> next(dims[l + 1], 0.0);
        for (std::size_t i = 0; i < dims[l]; ++i) {
            for (std::size_t o = 0; o < dims[l + 1]; ++o) {
                next[o] += x[i] * p[off + i * dims[l + 1] + o];
            }
        }
        off += dims[l] * dims[l + 1];
        for (std::size_t o = 0; o < dims[l + 1]; ++o) next[o] += p[off + o];
        off += dims[l + 1];
        if (l + 2 < dims.size()) {
            for (double& v : next) v = qpa::silu(v);
        }
        x = std::move(next);
    }
    return x;
}

double half_sq_norm(std::span<const double> v) {
    double acc = 0.0;
    for (double x : v) acc += x * x;
    return 0.5 * acc;
}

}  // namespace

TEST_CASE("plan_chunks reproduces the published qubit counts") {
    auto giga = plan_chunks(1'000'000'000ull, 1024);
    CHECK(giga.n_qubits == 20);

    auto gpt2 = plan_chunks(204100, 2048);
    CHECK(gpt2.n_ch == 100);
    CHECK(gpt2.n_qubits == 7);

    auto unit = plan_chunks(7, 1);
    CHECK(unit.n_ch == 7);
    CHECK(unit.n_qubits == 3);

    auto degenerate = plan_chunks(5, 8);
    CHECK(degenerate.n_ch == 1);
    CHECK(degenerate.n_qubits == 1);

    CHECK_THROWS_AS(plan_chunks(0, 4), std::invalid_argument);
    CHECK_THROWS_AS(plan_chunks(4, 0), std::invalid_argument);
}

TEST_CASE("plan tightness: n_ch <= 2^N < 2 n_ch") {
    Rng rng(31);
    for (int i = 0; i < 300; ++i) {
        const std::uint64_t m = 1 + rng.index(2'000'000);
        const std::uint64_t n_mlp = 1 + rng.index(9000);
        const auto plan = plan_chunks(m, n_mlp);
        const std::uint64_t cells = std::uint64_t{1} << plan.n_qubits;
        CHECK(plan.n_ch == (m + n_mlp - 1) / n_mlp);
        CHECK(plan.n_ch <= cells);
        if (plan.n_ch > 1) CHECK(cells < 2 * plan.n_ch);
    }
}

TEST_CASE("plan_for_qubits hits the requested width") {
    for (int n = 4; n <= 10; ++n) {
        auto plan = plan_for_qubits(644, n);
        CHECK(plan.n_qubits == n);
        CHECK(plan.m == 644);
    }
    CHECK_THROWS_AS(plan_for_qubits(10, 9), std::invalid_argument);
}

TEST_CASE("basis_encoding is MSB-first 0/1 features") {
    CHECK(basis_encoding(0, 4) == std::vector<double>{0, 0, 0, 0});
    CHECK(basis_encoding(5, 3) == std::vector<double>{1, 0, 1});
    CHECK(basis_encoding(15, 4) == std::vector<double>{1, 1, 1, 1});
    CHECK_THROWS_AS(basis_encoding(8, 3), std::out_of_range);
}

TEST_CASE("mapping model forward matches the independent oracle") {
    SECTION("zero parameters give zero output") {
        MappingModel model(3, 5, {4, 4}, 1);
        std::fill(model.params().begin(), model.params().end(), 0.0);
        auto out = model.forward(std::vector<double>{1, 0, 1, 0.7});
        for (double v : out) CHECK(v == 0.0);
    }

    SECTION("fresh model starts near (not at) zero output") {
        MappingModel model(2, 3, {8}, 7);
        auto out = model.forward(std::vector<double>{1, 1, 2.5});
        double max_abs = 0.0;
        for (double v : out) max_abs = std::max(max_abs, std::abs(v));
        CHECK(max_abs < 0.1);
        CHECK(max_abs > 0.0);
    }

    SECTION("randomized model agrees with the oracle") {
        MappingModel model(3, 6, {5, 7}, 11);
        Rng rng(23);
        for (double& p : model.params()) p = rng.uniform(-1.0, 1.0);
        std::vector<double> x{1, 0, 1, 1.3};
        auto got = model.forward(x);
        auto want = mlp_oracle(model, x);
        REQUIRE(got.size() == want.size());
        for (std::size_t i = 0; i < got.size(); ++i) {
            CHECK(got[i] == Catch::Approx(want[i]).margin(1e-12));
        }
    }

    SECTION("probability input is live") {
        MappingModel model(3, 4, {6}, 3);
        Rng rng(5);
        for (double& p : model.params()) p = rng.uniform(-1.0, 1.0);
        auto a = model.forward(std::vector<double>{1, 0, 1, 0.2});
        auto b = model.forward(std::vector<double>{1, 0, 1, 0.9});
        double diff = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) diff += std::abs(a[i] - b[i]);
        CHECK(diff > 1e-6);
    }

    SECTION("dimension mismatch rejected") {
        MappingModel model(3, 4, {6}, 3);
        std::vector<double> bad{1, 0, 1};
        CHECK_THROWS_AS(model.forward(bad), std::invalid_argument);
    }
}

TEST_CASE("mapping_param_count matches the reference table") {
    // dims [8, 32, 64, 128, 128, 64, 32, 2048]
    CHECK(mapping_param_count(7, kDefaultHiddenDims, 2048) == 105152);
    // strict growth with chunk size
    std::uint64_t prev = 0;
    for (std::uint64_t n_mlp : {256, 512, 1024, 2048}) {
        const auto c = mapping_param_count(7, kDefaultHiddenDims, n_mlp);
        CHECK(c > prev);
        prev = c;
    }
    // allocated model agrees with the arithmetic
    MappingModel model(4, 17, {5, 9}, 3);
    CHECK(model.param_count() == mapping_param_count(4, std::vector<int>{5, 9}, 17));
}

TEST_CASE("generate covers all m values chunk by chunk") {
    auto plan = plan_chunks(10, 4);
    REQUIRE(plan.n_ch == 3);
    REQUIRE(plan.n_qubits == 2);
    auto circuit = sim::build_ansatz(sim::AnsatzKind::RY, plan.n_qubits, 2);
    auto theta = sim::random_theta(circuit, 19);
    MappingModel model(plan.n_qubits, plan.n_mlp, {6, 6}, 4);
    Rng rng(77);
    for (double& p : model.params()) p = rng.uniform(-0.5, 0.5);

    auto out = generate(theta, model, plan, circuit);
    REQUIRE(out.values.size() == 10);

    // Element (chunk 2, offset 1) equals a direct mapping evaluation on
    // basis state 2.
    const auto probs =
        sim::basis_probabilities(sim::apply_circuit(circuit, theta));
    std::vector<double> x = basis_encoding(2, plan.n_qubits);
    x.push_back(4.0 * probs[2]);  // 2^N = 4
    auto chunk2 = model.forward(x);
    CHECK(out.values[2 * 4 + 1] == chunk2[1]);

    // Provenance covers 0..m-1 exactly once, chunk sizes 4,4,2.
    std::vector<int> per_chunk(plan.n_ch, 0);
    for (std::uint64_t i = 0; i < plan.m; ++i) {
        const auto c = out.chunk_of(i);
        const auto o = out.offset_of(i);
        CHECK(c * plan.n_mlp + o == i);
        ++per_chunk[c];
    }
    CHECK(per_chunk == std::vector<int>{4, 4, 2});
}

TEST_CASE("generate degenerate single-chunk plan") {
    auto plan = plan_chunks(6, 6);
    REQUIRE(plan.n_ch == 1);
    auto circuit = sim::build_ansatz(sim::AnsatzKind::RY, plan.n_qubits, 1);
    auto theta = sim::random_theta(circuit, 2);
    MappingModel model(plan.n_qubits, plan.n_mlp, {4}, 5);
    Rng rng(6);
    for (double& p : model.params()) p = rng.uniform(-0.5, 0.5);

    auto out = generate(theta, model, plan, circuit);
    const auto probs =
        sim::basis_probabilities(sim::apply_circuit(circuit, theta));
    std::vector<double> x = basis_encoding(0, plan.n_qubits);
    x.push_back(2.0 * probs[0]);
    CHECK(out.values == model.forward(x));
}

TEST_CASE("generate validates plan/circuit/model consistency") {
    auto plan = plan_chunks(10, 4);
    auto wrong_circuit = sim::build_ansatz(sim::AnsatzKind::RY, 3, 1);
    MappingModel model(plan.n_qubits, plan.n_mlp, {4}, 1);
    auto theta = sim::random_theta(wrong_circuit, 3);
    CHECK_THROWS_AS(generate(theta, model, plan, wrong_circuit),
                    std::invalid_argument);

    auto circuit = sim::build_ansatz(sim::AnsatzKind::RY, plan.n_qubits, 1);
    MappingModel wrong_model(plan.n_qubits, 5, {4}, 1);
    auto theta2 = sim::random_theta(circuit, 3);
    CHECK_THROWS_AS(generate(theta2, wrong_model, plan, circuit),
                    std::invalid_argument);
}

TEST_CASE("generator_backward zero cotangent and linearity") {
    auto plan = plan_chunks(10, 2);  // n_ch = 5, N = 3
    REQUIRE(plan.n_qubits == 3);
    auto circuit = sim::build_ansatz(sim::AnsatzKind::RY, plan.n_qubits, 2);
    auto theta = sim::random_theta(circuit, 13);
    MappingModel model(plan.n_qubits, plan.n_mlp, {5}, 21);
    Rng rng(9);
    for (double& p : model.params()) p = rng.uniform(-0.6, 0.6);

    std::vector<double> zero(plan.m, 0.0);
    auto g0 = generator_backward(theta, model, plan, circuit, zero);
    for (double v : g0.d_theta) CHECK(v == 0.0);
    for (double v : g0.d_b) CHECK(v == 0.0);

    std::vector<double> dl(plan.m);
    for (double& v : dl) v = rng.uniform(-1.0, 1.0);
    auto g1 = generator_backward(theta, model, plan, circuit, dl);
    std::vector<double> dl2(dl);
    for (double& v : dl2) v *= 2.0;
    auto g2 = generator_backward(theta, model, plan, circuit, dl2);
    for (std::size_t i = 0; i < g1.d_theta.size(); ++i) {
        CHECK(g2.d_theta[i] == 2.0 * g1.d_theta[i]);
    }
    for (std::size_t i = 0; i < g1.d_b.size(); ++i) {
        CHECK(g2.d_b[i] == 2.0 * g1.d_b[i]);
    }
}

TEST_CASE("generator_backward matches finite differences of 0.5*|a|^2") {
    for (auto [m, n_mlp] : {std::pair<std::uint64_t, std::uint64_t>{5, 2},
                            std::pair<std::uint64_t, std::uint64_t>{10, 2}}) {
        auto plan = plan_chunks(m, n_mlp);
        auto circuit = sim::build_ansatz(sim::AnsatzKind::RY, plan.n_qubits, 2);
        auto theta = sim::random_theta(circuit, 101 + m);
        MappingModel model(plan.n_qubits, plan.n_mlp, {4}, 33 + m);
        Rng rng(55 + m);
        for (double& p : model.params()) p = rng.uniform(-0.7, 0.7);

        auto a = generate(theta, model, plan, circuit);
        auto grads = generator_backward(theta, model, plan, circuit, a.values);

        const double h = 1e-5;
        auto loss_at = [&] {
            return half_sq_norm(generate(theta, model, plan, circuit).values);
        };
        for (std::size_t j = 0; j < theta.size(); ++j) {
            const double keep = theta[j];
            theta[j] = keep + h;
            const double plus = loss_at();
            theta[j] = keep - h;
            const double minus = loss_at();
            theta[j] = keep;
            CHECK(grads.d_theta[j] ==
                  Catch::Approx((plus - minus) / (2 * h)).margin(1e-5));
        }
        auto params = model.params();
        for (std::size_t j = 0; j < params.size(); ++j) {
            const double keep = params[j];
            params[j] = keep + h;
            const double plus = loss_at();
            params[j] = keep - h;
            const double minus = loss_at();
            params[j] = keep;
            CHECK(grads.d_b[j] ==
                  Catch::Approx((plus - minus) / (2 * h)).margin(1e-5));
        }
    }
}

TEST_CASE("perturbing the shared model moves every chunk") {
    auto plan = plan_chunks(12, 3);  // 4 chunks
    auto circuit = sim::build_ansatz(sim::AnsatzKind::RY, plan.n_qubits, 1);
    auto theta = sim::random_theta(circuit, 3);
    MappingModel model(plan.n_qubits, plan.n_mlp, {5}, 8);
    Rng rng(4);
    for (double& p : model.params()) p = rng.uniform(-0.5, 0.5);

    auto before = generate(theta, model, plan, circuit);
    model.params()[model.input_dim() * 5] += 0.25;  // first-layer bias[0]
    auto after = generate(theta, model, plan, circuit);
    for (std::uint64_t c = 0; c < plan.n_ch; ++c) {
        double diff = 0.0;
        for (std::uint64_t j = 0; j < plan.n_mlp; ++j) {
            const std::uint64_t idx = c * plan.n_mlp + j;
            if (idx < plan.m) {
                diff += std::abs(before.values[idx] - after.values[idx]);
            }
        }
        CHECK(diff > 0.0);
    }
}

TEST_CASE("count_trainable reference configuration") {
    auto plan = plan_chunks(204100, 2048);
    auto circuit = sim::build_ansatz(sim::AnsatzKind::RY, plan.n_qubits, 8);
    MappingModel model(plan.n_qubits, plan.n_mlp, kDefaultHiddenDims, 1);
    auto counts = count_trainable(plan, circuit, model);
    CHECK(counts.theta_count == 56);
    CHECK(counts.b_count == 105152);
    CHECK(counts.total == 105208);

    auto arith = count_trainable(plan, sim::AnsatzKind::RY, 8, kDefaultHiddenDims);
    CHECK(arith.theta_count == counts.theta_count);
    CHECK(arith.b_count == counts.b_count);

    auto empty = sim::build_ansatz(sim::AnsatzKind::RY, 3, 0);
    auto plan3 = plan_chunks(8, 1);
    MappingModel m3(3, 1, {4}, 1);
    CHECK(count_trainable(plan3, empty, m3).theta_count == 0);
}
