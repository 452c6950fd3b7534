// AdamW with decoupled weight decay and the linear learning-rate schedule
// used by every training loop in this project.
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace qpa::train {

struct AdamWConfig {
    double lr = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

class AdamW {
  public:
    AdamW(std::size_t n, AdamWConfig cfg)
        : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {
        if (cfg.lr < 0.0) throw std::invalid_argument("lr must be >= 0");
    }

    std::size_t size() const { return m_.size(); }
    int steps_taken() const { return t_; }

    // One update; lr_override < 0 uses the configured rate.
    void step(std::span<double> params, std::span<const double> grads,
              double lr_override = -1.0) {
        if (params.size() != m_.size() || grads.size() != m_.size()) {
            throw std::invalid_argument("AdamW buffer size mismatch");
        }
        ++t_;
        const double lr = lr_override < 0.0 ? cfg_.lr : lr_override;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grads[i];
            v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grads[i] * grads[i];
            const double mhat = m_[i] / bc1;
            const double vhat = v_[i] / bc2;
            params[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                               cfg_.weight_decay * params[i]);
        }
    }

  private:
    AdamWConfig cfg_;
    int t_ = 0;
    std::vector<double> m_, v_;
};

// Linear warmup to `base`, then linear decay to zero at total_steps.
inline double linear_lr(double base, int step, int total_steps, int warmup) {
    if (total_steps <= 0) return base;
    if (warmup > 0 && step < warmup) {
        return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
    }
    if (total_steps <= warmup) return base;
    const double remaining = static_cast<double>(total_steps - step);
    const double window = static_cast<double>(total_steps - warmup);
    return base * std::max(0.0, remaining / window);
}

// Scales grads in place so the global L2 norm is at most max_norm
// (no-op when max_norm <= 0). Returns the pre-clip norm.
inline double clip_global_norm(std::span<double> grads, double max_norm) {
    double sq = 0.0;
    for (double g : grads) sq += g * g;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double scale = max_norm / norm;
        for (double& g : grads) g *= scale;
    }
    return norm;
}

}  // namespace qpa::train
