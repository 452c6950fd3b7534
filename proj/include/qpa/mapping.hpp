// The shared MLP mapping model: (basis bits, scaled probability) -> one chunk
// of generated parameters. Hidden layers use SiLU, the output layer is
// strictly linear so generated values span all of R. Weights live in one flat
// buffer so optimizers can treat the whole model as a single parameter block.
#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "qpa/util.hpp"

namespace qpa::gen {

// Layer widths between input (N+1) and output (n_mlp); from the reference
// architecture used throughout.
inline const std::vector<int> kDefaultHiddenDims = {32, 64, 128, 128, 64, 32};

// Parameter count for the dims [n_qubits+1, hidden..., n_mlp]; pure
// arithmetic so paper-scale configurations can be counted without allocating.
inline std::uint64_t mapping_param_count(int n_qubits,
                                         std::span<const int> hidden,
                                         std::uint64_t n_mlp) {
    std::uint64_t total = 0;
    std::uint64_t in = static_cast<std::uint64_t>(n_qubits) + 1;
    for (int h : hidden) {
        const auto out = static_cast<std::uint64_t>(h);
        total += in * out + out;
        in = out;
    }
    total += in * n_mlp + n_mlp;
    return total;
}

class MappingModel {
  public:
    // Hidden layers get fan-in-scaled uniform init. The output layer starts
    // two orders of magnitude smaller, so the generated parameter vector is
    // near zero at step 0 (the adapted model starts next to the frozen base)
    // while both low-rank factors keep a nonzero gradient path. An exactly
    // zero output layer would park LoRA-style adapters on the B = A = 0
    // saddle, where dL/da vanishes identically and training never starts.
    MappingModel(int n_qubits, std::size_t n_mlp, std::vector<int> hidden,
                 std::uint64_t seed)
        : n_qubits_(n_qubits) {
        if (n_qubits < 1) throw std::invalid_argument("n_qubits must be >= 1");
        if (n_mlp < 1) throw std::invalid_argument("n_mlp must be >= 1");
        dims_.push_back(static_cast<std::size_t>(n_qubits) + 1);
        for (int h : hidden) {
            if (h < 1) throw std::invalid_argument("hidden dims must be >= 1");
            dims_.push_back(static_cast<std::size_t>(h));
        }
        dims_.push_back(n_mlp);

        std::size_t total = 0;
        for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
            w_off_.push_back(total);
            total += dims_[l] * dims_[l + 1];
            b_off_.push_back(total);
            total += dims_[l + 1];
        }
        params_.assign(total, 0.0);
        grads_.assign(total, 0.0);

        Rng rng(seed);
        for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
            const bool last = (l + 2 == dims_.size());
            const double bound = (last ? 0.01 : 1.0) /
                                 std::sqrt(static_cast<double>(dims_[l]));
            for (std::size_t i = 0; i < dims_[l] * dims_[l + 1]; ++i) {
                params_[w_off_[l] + i] = rng.uniform(-bound, bound);
            }
            for (std::size_t i = 0; i < dims_[l + 1]; ++i) {
                params_[b_off_[l] + i] = rng.uniform(-bound, bound);
            }
        }
    }

    int n_qubits() const { return n_qubits_; }
    std::size_t input_dim() const { return dims_.front(); }
    std::size_t output_dim() const { return dims_.back(); }
    const std::vector<std::size_t>& dims() const { return dims_; }
    std::size_t param_count() const { return params_.size(); }

    std::span<double> params() { return params_; }
    std::span<const double> params() const { return params_; }
    std::span<double> grads() { return grads_; }
    std::span<const double> grads() const { return grads_; }
    void zero_grads() { std::fill(grads_.begin(), grads_.end(), 0.0); }

    // Activations cached by forward() for the matching backward().
    struct Cache {
        std::vector<std::vector<double>> inputs;  // input to each layer
        std::vector<std::vector<double>> pre;     // pre-activation per layer
    };

    // x = [bits(0/1)..., scaled probability], |x| = n_qubits + 1.
    std::vector<double> forward(std::span<const double> x,
                                Cache* cache = nullptr) const {
        if (x.size() != input_dim()) {
            throw std::invalid_argument("mapping input dimension mismatch");
        }
        std::vector<double> cur(x.begin(), x.end());
        const std::size_t n_layers = dims_.size() - 1;
        if (cache) {
            cache->inputs.assign(n_layers, {});
            cache->pre.assign(n_layers, {});
        }
        for (std::size_t l = 0; l < n_layers; ++l) {
            if (cache) cache->inputs[l] = cur;
            std::vector<double> next(dims_[l + 1]);
            const double* w = params_.data() + w_off_[l];
            const double* b = params_.data() + b_off_[l];
            for (std::size_t o = 0; o < dims_[l + 1]; ++o) next[o] = b[o];
            for (std::size_t i = 0; i < dims_[l]; ++i) {
                const double xi = cur[i];
                const double* row = w + i * dims_[l + 1];
                for (std::size_t o = 0; o < dims_[l + 1]; ++o) {
                    next[o] += xi * row[o];
                }
            }
            if (cache) cache->pre[l] = next;
            if (l + 1 < n_layers) {
                for (double& v : next) v = silu(v);
            }
            cur = std::move(next);
        }
        return cur;
    }

    // Accumulates weight/bias gradients into grads() and returns the gradient
    // with respect to the scaled-probability input (the last input feature).
    // Basis bits are constants of the generation scheme and carry no
    // trainable gradient.
    double backward(const Cache& cache, std::span<const double> d_out) {
        if (d_out.size() != output_dim()) {
            throw std::invalid_argument("mapping output gradient mismatch");
        }
        const std::size_t n_layers = dims_.size() - 1;
        std::vector<double> delta(d_out.begin(), d_out.end());
        for (std::size_t l = n_layers; l-- > 0;) {
            if (l + 1 < n_layers) {
                for (std::size_t o = 0; o < dims_[l + 1]; ++o) {
                    delta[o] *= silu_grad(cache.pre[l][o]);
                }
            }
            double* dw = grads_.data() + w_off_[l];
            double* db = grads_.data() + b_off_[l];
            const std::vector<double>& in = cache.inputs[l];
            for (std::size_t o = 0; o < dims_[l + 1]; ++o) db[o] += delta[o];
            for (std::size_t i = 0; i < dims_[l]; ++i) {
                double* row = dw + i * dims_[l + 1];
                for (std::size_t o = 0; o < dims_[l + 1]; ++o) {
                    row[o] += in[i] * delta[o];
                }
            }
            std::vector<double> d_in(dims_[l], 0.0);
            const double* w = params_.data() + w_off_[l];
            for (std::size_t i = 0; i < dims_[l]; ++i) {
                const double* row = w + i * dims_[l + 1];
                double acc = 0.0;
                for (std::size_t o = 0; o < dims_[l + 1]; ++o) {
                    acc += row[o] * delta[o];
                }
                d_in[i] = acc;
            }
            delta = std::move(d_in);
        }
        return delta.back();
    }

  private:
    int n_qubits_;
    std::vector<std::size_t> dims_;
    std::vector<std::size_t> w_off_, b_off_;
    std::vector<double> params_;
    std::vector<double> grads_;
};

}  // namespace qpa::gen
