// Exact statevector simulation of the hardware-efficient rotation + CNOT
// ansatz families, with adjoint-mode probability gradients, finite-shot
// sampling and trajectory-sampled noise.
//
// Conventions (fixed project-wide):
//   - Wires are 1-based; wire 1 is the most significant bit of a basis index.
//   - A layer applies one rotation per wire in ascending wire order, then the
//     CNOT chain control i -> target i+1 for i = 1..N-1, ascending. Two-
//     rotation kinds insert a second rotation sweep and a second CNOT chain.
//   - Rotation parameters are laid out layer-major: layer 0 rotations first,
//     and inside a two-rotation layer the first sweep's angles precede the
//     RZ sweep's angles.
#pragma once

#include <bit>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qpa/util.hpp"

namespace qpa::sim {

using cdouble = std::complex<double>;

enum class AnsatzKind { RY, RX, RXRZ, RYRZ };

inline const char* to_string(AnsatzKind k) {
    switch (k) {
        case AnsatzKind::RY: return "ry";
        case AnsatzKind::RX: return "rx";
        case AnsatzKind::RXRZ: return "rxrz";
        case AnsatzKind::RYRZ: return "ryrz";
    }
    return "?";
}

inline AnsatzKind ansatz_from_string(const std::string& s) {
    if (s == "ry") return AnsatzKind::RY;
    if (s == "rx") return AnsatzKind::RX;
    if (s == "rxrz") return AnsatzKind::RXRZ;
    if (s == "ryrz") return AnsatzKind::RYRZ;
    throw std::invalid_argument("unknown ansatz kind: " + s);
}

struct Gate {
    enum class Op : std::uint8_t { RY, RX, RZ, CNOT };
    Op op;
    int wire;    // rotation target, or CNOT control (1-based)
    int wire2;   // CNOT target; 0 for rotations
    int param;   // index into theta; -1 for CNOT
};

struct CircuitSpec {
    AnsatzKind kind = AnsatzKind::RY;
    int n_qubits = 0;
    int depth = 0;
    std::vector<Gate> gates;

    int params_per_layer() const {
        return (kind == AnsatzKind::RXRZ || kind == AnsatzKind::RYRZ)
                   ? 2 * n_qubits
                   : n_qubits;
    }
    int param_count() const { return depth * params_per_layer(); }
    std::size_t dim() const { return std::size_t{1} << n_qubits; }
};

inline constexpr int kDefaultMaxQubits = 24;

struct StateVector {
    int n_qubits = 0;
    std::vector<cdouble> amplitudes;

    static StateVector zero_state(int n_qubits) {
        StateVector s;
        s.n_qubits = n_qubits;
        s.amplitudes.assign(std::size_t{1} << n_qubits, cdouble{0.0, 0.0});
        s.amplitudes[0] = cdouble{1.0, 0.0};
        return s;
    }
    std::size_t dim() const { return amplitudes.size(); }
    double norm_sq() const {
        double n = 0.0;
        for (const auto& a : amplitudes) n += std::norm(a);
        return n;
    }
};

struct NoiseModel {
    double single_qubit_depolarizing_p = 0.0;
    double two_qubit_depolarizing_p = 0.0;
    double readout_flip_p = 0.0;

    void validate() const {
        auto in01 = [](double p) { return p >= 0.0 && p <= 1.0; };
        if (!in01(single_qubit_depolarizing_p) ||
            !in01(two_qubit_depolarizing_p) || !in01(readout_flip_p)) {
            throw std::invalid_argument(
                "noise probabilities must lie in [0, 1]");
        }
    }
};

namespace detail {

// Bit position (0 = LSB) of a 1-based wire under the MSB-first convention.
inline int bit_of_wire(int wire, int n_qubits) { return n_qubits - wire; }

inline void apply_single_qubit(std::vector<cdouble>& a, int bit, cdouble m00,
                               cdouble m01, cdouble m10, cdouble m11) {
    const std::size_t step = std::size_t{1} << bit;
    const std::size_t dim = a.size();
    for (std::size_t base = 0; base < dim; base += 2 * step) {
        for (std::size_t i = base; i < base + step; ++i) {
            const cdouble a0 = a[i];
            const cdouble a1 = a[i + step];
            a[i] = m00 * a0 + m01 * a1;
            a[i + step] = m10 * a0 + m11 * a1;
        }
    }
}

inline void apply_cnot(std::vector<cdouble>& a, int control_bit,
                       int target_bit) {
    const std::size_t cmask = std::size_t{1} << control_bit;
    const std::size_t tmask = std::size_t{1} << target_bit;
    const std::size_t dim = a.size();
    for (std::size_t i = 0; i < dim; ++i) {
        if ((i & cmask) != 0 && (i & tmask) == 0) {
            std::swap(a[i], a[i | tmask]);
        }
    }
}

enum class Pauli : std::uint8_t { X, Y, Z };

inline void apply_pauli(std::vector<cdouble>& a, int bit, Pauli p) {
    const std::size_t step = std::size_t{1} << bit;
    const std::size_t dim = a.size();
    switch (p) {
        case Pauli::X:
            for (std::size_t base = 0; base < dim; base += 2 * step)
                for (std::size_t i = base; i < base + step; ++i)
                    std::swap(a[i], a[i + step]);
            break;
        case Pauli::Y:
            for (std::size_t base = 0; base < dim; base += 2 * step)
                for (std::size_t i = base; i < base + step; ++i) {
                    const cdouble a0 = a[i];
                    const cdouble a1 = a[i + step];
                    a[i] = cdouble{0.0, -1.0} * a1;
                    a[i + step] = cdouble{0.0, 1.0} * a0;
                }
            break;
        case Pauli::Z:
            for (std::size_t base = 0; base < dim; base += 2 * step)
                for (std::size_t i = base; i < base + step; ++i)
                    a[i + step] = -a[i + step];
            break;
    }
}

inline void apply_rotation(std::vector<cdouble>& a, int bit, Gate::Op op,
                           double angle) {
    const double c = std::cos(angle / 2.0);
    const double s = std::sin(angle / 2.0);
    switch (op) {
        case Gate::Op::RY:
            apply_single_qubit(a, bit, {c, 0}, {-s, 0}, {s, 0}, {c, 0});
            break;
        case Gate::Op::RX:
            apply_single_qubit(a, bit, {c, 0}, {0, -s}, {0, -s}, {c, 0});
            break;
        case Gate::Op::RZ:
            apply_single_qubit(a, bit, {c, -s}, {0, 0}, {0, 0}, {c, s});
            break;
        case Gate::Op::CNOT:
            throw std::logic_error("apply_rotation called with CNOT");
    }
}

inline Pauli generator_of(Gate::Op op) {
    switch (op) {
        case Gate::Op::RX: return Pauli::X;
        case Gate::Op::RY: return Pauli::Y;
        case Gate::Op::RZ: return Pauli::Z;
        default: throw std::logic_error("CNOT has no rotation generator");
    }
}

// Applies gate `g` (or its inverse) in place.
inline void apply_gate(std::vector<cdouble>& a, const Gate& g,
                       std::span<const double> theta, int n_qubits,
                       bool inverse = false) {
    if (g.op == Gate::Op::CNOT) {
        apply_cnot(a, bit_of_wire(g.wire, n_qubits),
                   bit_of_wire(g.wire2, n_qubits));
    } else {
        const double angle = inverse ? -theta[static_cast<std::size_t>(g.param)]
                                     : theta[static_cast<std::size_t>(g.param)];
        apply_rotation(a, bit_of_wire(g.wire, n_qubits), g.op, angle);
    }
}

// Draws one basis index from a cumulative distribution.
inline std::size_t sample_index(const std::vector<double>& cum, double u) {
    std::size_t lo = 0, hi = cum.size() - 1;
    while (lo < hi) {
        const std::size_t mid = (lo + hi) / 2;
        if (u < cum[mid]) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    return lo;
}

inline std::vector<double> cumulative(std::span<const double> probs) {
    std::vector<double> cum(probs.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        cum[i] = acc;
    }
    cum.back() = std::max(cum.back(), 1.0);  // absorb rounding dust
    return cum;
}

}  // namespace detail

inline CircuitSpec build_ansatz(AnsatzKind kind, int n_qubits, int depth,
                                int max_qubits = kDefaultMaxQubits) {
    if (n_qubits < 1) throw std::invalid_argument("n_qubits must be >= 1");
    if (depth < 0) throw std::invalid_argument("depth must be >= 0");
    if (n_qubits > max_qubits) {
        throw std::invalid_argument(
            "n_qubits " + std::to_string(n_qubits) +
            " exceeds the simulator cap of " + std::to_string(max_qubits));
    }

    CircuitSpec spec;
    spec.kind = kind;
    spec.n_qubits = n_qubits;
    spec.depth = depth;

    const Gate::Op first_op =
        (kind == AnsatzKind::RX || kind == AnsatzKind::RXRZ) ? Gate::Op::RX
                                                             : Gate::Op::RY;
    const bool two_rotations =
        (kind == AnsatzKind::RXRZ || kind == AnsatzKind::RYRZ);

    int param = 0;
    auto rotation_sweep = [&](Gate::Op op) {
        for (int w = 1; w <= n_qubits; ++w) {
            spec.gates.push_back(Gate{op, w, 0, param++});
        }
    };
    auto cnot_chain = [&] {
        for (int w = 1; w <= n_qubits - 1; ++w) {
            spec.gates.push_back(Gate{Gate::Op::CNOT, w, w + 1, -1});
        }
    };

    for (int layer = 0; layer < depth; ++layer) {
        rotation_sweep(first_op);
        cnot_chain();
        if (two_rotations) {
            rotation_sweep(Gate::Op::RZ);
            cnot_chain();
        }
    }
    return spec;
}

inline StateVector apply_circuit(const CircuitSpec& circuit,
                                 std::span<const double> theta) {
    if (static_cast<int>(theta.size()) != circuit.param_count()) {
        throw std::invalid_argument(
            "theta has " + std::to_string(theta.size()) + " entries, circuit needs " +
            std::to_string(circuit.param_count()));
    }
    StateVector state = StateVector::zero_state(circuit.n_qubits);
    for (const Gate& g : circuit.gates) {
        detail::apply_gate(state.amplitudes, g, theta, circuit.n_qubits);
    }
    const double drift = std::abs(state.norm_sq() - 1.0);
    if (drift > 1e-12) {
        throw std::runtime_error("statevector norm drifted by " +
                                 std::to_string(drift));
    }
    return state;
}

inline std::vector<double> basis_probabilities(const StateVector& state) {
    std::vector<double> p(state.dim());
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = std::norm(state.amplitudes[i]);
    }
    return p;
}

// Empirical frequencies from n_shots multinomial draws; one uniform per shot.
inline std::vector<double> sample_shots(std::span<const double> probs,
                                        std::uint64_t n_shots,
                                        std::uint64_t seed) {
    if (n_shots < 1) throw std::invalid_argument("n_shots must be >= 1");
    const std::vector<double> cum = detail::cumulative(probs);
    std::vector<std::uint64_t> counts(probs.size(), 0);
    Rng rng(seed);
    for (std::uint64_t s = 0; s < n_shots; ++s) {
        ++counts[detail::sample_index(cum, rng.uniform())];
    }
    std::vector<double> freq(probs.size());
    for (std::size_t i = 0; i < counts.size(); ++i) {
        freq[i] = static_cast<double>(counts[i]) / static_cast<double>(n_shots);
    }
    return freq;
}

// Trajectory-sampled noisy execution. After every gate the matching
// depolarizing channel fires with its probability and applies a uniformly
// random non-identity Pauli on the touched wire(s); measured bits flip
// independently with readout_flip_p. Draws are consumed in gate order, and
// only for channels with strictly positive probability, so the zero-noise
// limit replays sample_shots' stream exactly.
inline std::vector<double> apply_noise(const CircuitSpec& circuit,
                                       std::span<const double> theta,
                                       const NoiseModel& noise,
                                       std::uint64_t n_shots,
                                       std::uint64_t seed) {
    noise.validate();
    if (n_shots < 1) throw std::invalid_argument("n_shots must be >= 1");
    if (static_cast<int>(theta.size()) != circuit.param_count()) {
        throw std::invalid_argument("theta length mismatch");
    }
    const int n = circuit.n_qubits;
    const StateVector clean = apply_circuit(circuit, theta);
    const std::vector<double> clean_cum =
        detail::cumulative(basis_probabilities(clean));

    // A fired channel. For two-qubit channels the pair (first, second) is
    // drawn uniformly from the 15 non-identity Pauli pairs; identity halves
    // are marked via has_first / has_second.
    struct Event {
        std::size_t gate_index;
        bool has_first;
        bool has_second;
        detail::Pauli first;
        detail::Pauli second;
    };

    Rng rng(seed);
    std::vector<std::uint64_t> counts(circuit.dim(), 0);
    std::vector<Event> events;
    std::vector<cdouble> work;
    std::vector<double> probs(circuit.dim());

    const double p1 = noise.single_qubit_depolarizing_p;
    const double p2 = noise.two_qubit_depolarizing_p;
    for (std::uint64_t shot = 0; shot < n_shots; ++shot) {
        events.clear();
        for (std::size_t gi = 0; gi < circuit.gates.size(); ++gi) {
            const Gate& g = circuit.gates[gi];
            if (g.op == Gate::Op::CNOT) {
                if (p2 > 0.0 && rng.uniform() < p2) {
                    const std::size_t pick = rng.index(15) + 1;  // skip I(x)I
                    const std::size_t f = pick / 4, s = pick % 4;
                    events.push_back(Event{
                        gi, f != 0, s != 0,
                        static_cast<detail::Pauli>(f == 0 ? 0 : f - 1),
                        static_cast<detail::Pauli>(s == 0 ? 0 : s - 1)});
                }
            } else if (p1 > 0.0 && rng.uniform() < p1) {
                events.push_back(Event{
                    gi, true, false,
                    static_cast<detail::Pauli>(rng.index(3)),
                    detail::Pauli::X});
            }
        }

        std::size_t idx;
        if (events.empty()) {
            // Error-free trajectory: identical to the noiseless circuit.
            idx = detail::sample_index(clean_cum, rng.uniform());
        } else {
            work.assign(circuit.dim(), cdouble{0.0, 0.0});
            work[0] = cdouble{1.0, 0.0};
            std::size_t next_event = 0;
            for (std::size_t gi = 0; gi < circuit.gates.size(); ++gi) {
                const Gate& g = circuit.gates[gi];
                detail::apply_gate(work, g, theta, n);
                while (next_event < events.size() &&
                       events[next_event].gate_index == gi) {
                    const Event& ev = events[next_event];
                    if (ev.has_first) {
                        detail::apply_pauli(work, detail::bit_of_wire(g.wire, n),
                                            ev.first);
                    }
                    if (ev.has_second) {
                        detail::apply_pauli(work,
                                            detail::bit_of_wire(g.wire2, n),
                                            ev.second);
                    }
                    ++next_event;
                }
            }
            for (std::size_t i = 0; i < work.size(); ++i) {
                probs[i] = std::norm(work[i]);
            }
            idx = detail::sample_index(detail::cumulative(probs), rng.uniform());
        }

        if (noise.readout_flip_p > 0.0) {
            for (int bit = n - 1; bit >= 0; --bit) {
                if (rng.uniform() < noise.readout_flip_p) {
                    idx ^= std::size_t{1} << bit;
                }
            }
        }
        ++counts[idx];
    }

    std::vector<double> freq(circuit.dim());
    for (std::size_t i = 0; i < counts.size(); ++i) {
        freq[i] = static_cast<double>(counts[i]) / static_cast<double>(n_shots);
    }
    return freq;
}

// dL/dtheta for a loss with known dL/dprob, via one adjoint (reverse) sweep
// through the statevector. Exact-simulation path only.
inline std::vector<double> probability_vjp(const CircuitSpec& circuit,
                                           std::span<const double> theta,
                                           std::span<const double> d_prob) {
    if (d_prob.size() != circuit.dim()) {
        throw std::invalid_argument("d_prob length must be 2^N");
    }
    StateVector psi = apply_circuit(circuit, theta);
    const int n = circuit.n_qubits;

    // lambda_i = (dL/dp_i) * psi_i is the conjugated cotangent of the state.
    std::vector<cdouble> lambda(psi.dim());
    for (std::size_t i = 0; i < lambda.size(); ++i) {
        lambda[i] = d_prob[i] * psi.amplitudes[i];
    }

    std::vector<double> grad(static_cast<std::size_t>(circuit.param_count()),
                             0.0);
    std::vector<cdouble>& cur = psi.amplitudes;
    std::vector<cdouble> tmp(cur.size());
    for (auto it = circuit.gates.rbegin(); it != circuit.gates.rend(); ++it) {
        const Gate& g = *it;
        if (g.op == Gate::Op::CNOT) {
            const int cb = detail::bit_of_wire(g.wire, n);
            const int tb = detail::bit_of_wire(g.wire2, n);
            detail::apply_cnot(cur, cb, tb);
            detail::apply_cnot(lambda, cb, tb);
            continue;
        }
        const int bit = detail::bit_of_wire(g.wire, n);
        // d/dtheta exp(-i theta G / 2) = -(i/2) G U, hence
        // dL/dtheta = 2 Re <lambda| -(i/2) G |psi_after> = Im <lambda| G |psi_after>.
        tmp = cur;
        detail::apply_pauli(tmp, bit, detail::generator_of(g.op));
        cdouble acc{0.0, 0.0};
        for (std::size_t i = 0; i < tmp.size(); ++i) {
            acc += std::conj(lambda[i]) * tmp[i];
        }
        grad[static_cast<std::size_t>(g.param)] += acc.imag();
        detail::apply_rotation(cur, bit, g.op,
                               -theta[static_cast<std::size_t>(g.param)]);
        detail::apply_rotation(lambda, bit, g.op,
                               -theta[static_cast<std::size_t>(g.param)]);
    }
    return grad;
}

// Full Jacobian d p_i / d theta_j (2^N rows, |theta| columns); one adjoint
// sweep per basis state. Test- and probe-scale only.
inline std::vector<std::vector<double>> prob_gradients(
    const CircuitSpec& circuit, std::span<const double> theta) {
    std::vector<std::vector<double>> jac(circuit.dim());
    std::vector<double> d_prob(circuit.dim(), 0.0);
    for (std::size_t i = 0; i < circuit.dim(); ++i) {
        d_prob[i] = 1.0;
        jac[i] = probability_vjp(circuit, theta, d_prob);
        d_prob[i] = 0.0;
    }
    return jac;
}

// Parameter-shift evaluation of d p(basis) / d theta_j. Exact for the
// rotation generators used here; retained as an independent route for
// cross-checking the adjoint sweep.
inline double parameter_shift_grad(const CircuitSpec& circuit,
                                   std::span<const double> theta,
                                   std::size_t basis_index, int param_index) {
    if (param_index < 0 || param_index >= circuit.param_count()) {
        throw std::invalid_argument("param_index out of range");
    }
    std::vector<double> shifted(theta.begin(), theta.end());
    const double half_pi = std::numbers::pi / 2.0;
    shifted[static_cast<std::size_t>(param_index)] += half_pi;
    const double plus =
        basis_probabilities(apply_circuit(circuit, shifted))[basis_index];
    shifted[static_cast<std::size_t>(param_index)] -= std::numbers::pi;
    const double minus =
        basis_probabilities(apply_circuit(circuit, shifted))[basis_index];
    return (plus - minus) / 2.0;
}

// Theta initialization used across the project: uniform on [-pi, pi).
inline std::vector<double> random_theta(const CircuitSpec& circuit,
                                        std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> theta(static_cast<std::size_t>(circuit.param_count()));
    for (double& t : theta) {
        t = rng.uniform(-std::numbers::pi, std::numbers::pi);
    }
    return theta;
}

}  // namespace qpa::sim
