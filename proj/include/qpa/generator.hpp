// Chunked parameter generation: splits the m target parameters into
// ceil(m / n_mlp) chunks, feeds each chunk's basis index and measurement
// probability through the shared mapping model, and provides the exact
// reverse-mode pass from dL/da back to the circuit and mapping parameters.
#pragma once

#include <bit>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "qpa/mapping.hpp"
#include "qpa/statevector.hpp"

namespace qpa::gen {

struct ChunkPlan {
    std::uint64_t m = 0;      // target parameter count
    std::uint64_t n_mlp = 0;  // chunk size
    std::uint64_t n_ch = 0;   // ceil(m / n_mlp)
    int n_qubits = 0;         // ceil(log2 n_ch), floored at 1
};

inline ChunkPlan plan_chunks(std::uint64_t m, std::uint64_t n_mlp) {
    if (m < 1) throw std::invalid_argument("m must be >= 1");
    if (n_mlp < 1) throw std::invalid_argument("n_mlp must be >= 1");
    ChunkPlan plan;
    plan.m = m;
    plan.n_mlp = n_mlp;
    plan.n_ch = (m + n_mlp - 1) / n_mlp;
    plan.n_qubits =
        plan.n_ch <= 1 ? 1 : static_cast<int>(std::bit_width(plan.n_ch - 1));
    return plan;
}

// Smallest chunk size whose plan lands on exactly `n_qubits`; used by the
// gradient-variance probe to sweep qubit counts at a fixed target size.
// Requires m > 2^(n_qubits-1), otherwise the requested width is unreachable.
inline ChunkPlan plan_for_qubits(std::uint64_t m, int n_qubits) {
    if (n_qubits < 1) throw std::invalid_argument("n_qubits must be >= 1");
    const std::uint64_t cells = std::uint64_t{1} << n_qubits;
    ChunkPlan plan = plan_chunks(m, (m + cells - 1) / cells);
    if (plan.n_qubits != n_qubits) {
        throw std::invalid_argument(
            "no chunk size yields " + std::to_string(n_qubits) +
            " qubits for m=" + std::to_string(m));
    }
    return plan;
}

// MSB-first bits of `index` as 0.0/1.0 input features.
inline std::vector<double> basis_encoding(std::uint64_t index, int n_qubits) {
    if (n_qubits < 1 || n_qubits >= 64) {
        throw std::invalid_argument("n_qubits out of range");
    }
    if (index >= (std::uint64_t{1} << n_qubits)) {
        throw std::out_of_range("basis index out of range");
    }
    std::vector<double> bits(static_cast<std::size_t>(n_qubits));
    for (int b = 0; b < n_qubits; ++b) {
        bits[static_cast<std::size_t>(b)] =
            ((index >> (n_qubits - 1 - b)) & 1ull) ? 1.0 : 0.0;
    }
    return bits;
}

struct GeneratedParams {
    std::vector<double> values;  // length m
    ChunkPlan plan;

    std::uint64_t chunk_of(std::uint64_t index) const {
        return index / plan.n_mlp;
    }
    std::uint64_t offset_of(std::uint64_t index) const {
        return index % plan.n_mlp;
    }
};

namespace detail {

inline void check_consistency(const ChunkPlan& plan,
                              const sim::CircuitSpec& circuit,
                              const MappingModel& model) {
    if (plan.n_qubits != circuit.n_qubits) {
        throw std::invalid_argument("plan and circuit disagree on qubit count");
    }
    if (model.n_qubits() != plan.n_qubits) {
        throw std::invalid_argument("plan and mapping model disagree on qubit count");
    }
    if (model.output_dim() != plan.n_mlp) {
        throw std::invalid_argument("mapping output does not match chunk size");
    }
    if (plan.n_ch > circuit.dim()) {
        throw std::invalid_argument("chunk count exceeds basis-state count");
    }
}

}  // namespace detail

// Runs the circuit once, then evaluates the mapping model on the first n_ch
// basis states. When `rescale_probs` is set (the default), the probability
// input is 2^N * p_i so its scale stays O(1) regardless of qubit count.
inline GeneratedParams generate(std::span<const double> theta,
                                const MappingModel& model,
                                const ChunkPlan& plan,
                                const sim::CircuitSpec& circuit,
                                bool rescale_probs = true) {
    detail::check_consistency(plan, circuit, model);
    const auto probs = sim::basis_probabilities(sim::apply_circuit(circuit, theta));
    const double scale =
        rescale_probs ? static_cast<double>(circuit.dim()) : 1.0;

    GeneratedParams out;
    out.plan = plan;
    out.values.resize(plan.m);
    std::vector<double> x(model.input_dim());
    for (std::uint64_t i = 0; i < plan.n_ch; ++i) {
        const auto bits = basis_encoding(i, plan.n_qubits);
        std::copy(bits.begin(), bits.end(), x.begin());
        x.back() = scale * probs[i];
        const auto chunk = model.forward(x);
        const std::uint64_t base = i * plan.n_mlp;
        const std::uint64_t take = std::min(plan.n_mlp, plan.m - base);
        std::copy(chunk.begin(), chunk.begin() + static_cast<std::ptrdiff_t>(take),
                  out.values.begin() + static_cast<std::ptrdiff_t>(base));
    }
    return out;
}

struct GeneratorGradients {
    std::vector<double> d_theta;
    std::vector<double> d_b;
};

// Exact reverse-mode chain for dL/da -> (dL/dtheta, dL/db). The mapping
// model's weight gradients accumulate across chunks in ascending chunk order
// (bit-stable); the probability-input gradients feed one adjoint sweep
// through the circuit.
inline GeneratorGradients generator_backward(std::span<const double> theta,
                                             MappingModel& model,
                                             const ChunkPlan& plan,
                                             const sim::CircuitSpec& circuit,
                                             std::span<const double> dL_da,
                                             bool rescale_probs = true) {
    detail::check_consistency(plan, circuit, model);
    if (dL_da.size() != plan.m) {
        throw std::invalid_argument("dL_da length must equal m");
    }
    const auto probs = sim::basis_probabilities(sim::apply_circuit(circuit, theta));
    const double scale =
        rescale_probs ? static_cast<double>(circuit.dim()) : 1.0;

    model.zero_grads();
    std::vector<double> d_prob(circuit.dim(), 0.0);
    std::vector<double> x(model.input_dim());
    std::vector<double> d_out(plan.n_mlp);
    MappingModel::Cache cache;
    for (std::uint64_t i = 0; i < plan.n_ch; ++i) {
        const auto bits = basis_encoding(i, plan.n_qubits);
        std::copy(bits.begin(), bits.end(), x.begin());
        x.back() = scale * probs[i];
        model.forward(x, &cache);

        std::fill(d_out.begin(), d_out.end(), 0.0);
        const std::uint64_t base = i * plan.n_mlp;
        const std::uint64_t take = std::min(plan.n_mlp, plan.m - base);
        for (std::uint64_t j = 0; j < take; ++j) {
            d_out[j] = dL_da[base + j];
        }
        const double d_feature = model.backward(cache, d_out);
        d_prob[i] = scale * d_feature;
    }

    GeneratorGradients grads;
    grads.d_theta = sim::probability_vjp(circuit, theta, d_prob);
    grads.d_b.assign(model.grads().begin(), model.grads().end());
    return grads;
}

struct TrainableCounts {
    std::uint64_t theta_count = 0;
    std::uint64_t b_count = 0;
    std::uint64_t total = 0;
};

inline TrainableCounts count_trainable(const ChunkPlan& plan,
                                       const sim::CircuitSpec& circuit,
                                       const MappingModel& model) {
    detail::check_consistency(plan, circuit, model);
    TrainableCounts c;
    c.theta_count = static_cast<std::uint64_t>(circuit.param_count());
    c.b_count = model.param_count();
    c.total = c.theta_count + c.b_count;
    return c;
}

// Count-only variant: pure arithmetic, safe at paper scale.
inline TrainableCounts count_trainable(const ChunkPlan& plan,
                                       sim::AnsatzKind kind, int depth,
                                       std::span<const int> hidden) {
    TrainableCounts c;
    const int per_layer =
        (kind == sim::AnsatzKind::RXRZ || kind == sim::AnsatzKind::RYRZ)
            ? 2 * plan.n_qubits
            : plan.n_qubits;
    c.theta_count = static_cast<std::uint64_t>(depth) *
                    static_cast<std::uint64_t>(per_layer);
    c.b_count = mapping_param_count(plan.n_qubits, hidden, plan.n_mlp);
    c.total = c.theta_count + c.b_count;
    return c;
}

}  // namespace qpa::gen
