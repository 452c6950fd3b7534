// PEFT adapter families applied to one frozen linear layer W0 (d x k):
// LoRA, DoRA, prefix rows, and a residual feed-forward adapter. Each family
// reads its parameters from one flat vector in a fixed, documented order and
// provides the exact gradient of the loss with respect to that vector.
//
// Flat layouts (row-major throughout):
//   LoRA   [B (d x r)][A (r x k)]
//   DoRA   [B (d x r)][A (r x k)][magnitude (k)]
//   Prefix [prefix (n_prefix x d)]
//   FFA    [W_down (d x bottleneck)][b_down][W_up (bottleneck x d)][b_up]
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qpa/generator.hpp"
#include "qpa/util.hpp"

namespace qpa::peft {

enum class Family { LoRA, DoRA, Prefix, FFA };

inline const char* to_string(Family f) {
    switch (f) {
        case Family::LoRA: return "lora";
        case Family::DoRA: return "dora";
        case Family::Prefix: return "prefix";
        case Family::FFA: return "ffa";
    }
    return "?";
}

inline Family family_from_string(const std::string& s) {
    if (s == "lora") return Family::LoRA;
    if (s == "dora") return Family::DoRA;
    if (s == "prefix") return Family::Prefix;
    if (s == "ffa") return Family::FFA;
    throw std::invalid_argument("unknown adapter family: " + s);
}

struct AdapterSpec {
    Family family = Family::LoRA;
    std::uint64_t d = 0;  // input dim of the target layer
    std::uint64_t k = 0;  // output dim of the target layer
    std::uint64_t rank = 0;
    double alpha = 0.0;  // LoRA/DoRA scaling; default 2r
    std::uint64_t n_prefix = 0;
    std::uint64_t bottleneck = 0;

    std::uint64_t param_count() const {
        switch (family) {
            case Family::LoRA: return rank * (d + k);
            case Family::DoRA: return rank * (d + k) + k;
            case Family::Prefix: return n_prefix * d;
            case Family::FFA: return 2 * d * bottleneck + bottleneck + d;
        }
        return 0;
    }

    double scaling() const { return alpha / static_cast<double>(rank); }

    void validate() const {
        if (d < 1 || k < 1) throw std::invalid_argument("d and k must be >= 1");
        switch (family) {
            case Family::LoRA:
            case Family::DoRA:
                if (rank < 1) throw std::invalid_argument("rank must be >= 1");
                if (alpha <= 0.0) throw std::invalid_argument("alpha must be > 0");
                break;
            case Family::Prefix:
                break;  // n_prefix = 0 degenerates to the plain layer
            case Family::FFA:
                if (bottleneck < 1) {
                    throw std::invalid_argument("bottleneck must be >= 1");
                }
                break;
        }
    }

    // Advisory only: large ranks defeat the low-rank premise.
    std::vector<std::string> warnings() const {
        std::vector<std::string> out;
        if ((family == Family::LoRA || family == Family::DoRA) &&
            2 * rank > std::min(d, k)) {
            out.push_back("rank " + std::to_string(rank) +
                          " exceeds min(d,k)/2 = " +
                          std::to_string(std::min(d, k) / 2));
        }
        return out;
    }
};

inline AdapterSpec lora_spec(std::uint64_t d, std::uint64_t k,
                             std::uint64_t rank, double alpha = -1.0) {
    AdapterSpec s;
    s.family = Family::LoRA;
    s.d = d;
    s.k = k;
    s.rank = rank;
    s.alpha = alpha < 0.0 ? 2.0 * static_cast<double>(rank) : alpha;
    s.validate();
    return s;
}

inline AdapterSpec dora_spec(std::uint64_t d, std::uint64_t k,
                             std::uint64_t rank, double alpha = -1.0) {
    AdapterSpec s = lora_spec(d, k, rank, alpha);
    s.family = Family::DoRA;
    return s;
}

inline AdapterSpec prefix_spec(std::uint64_t d, std::uint64_t k,
                               std::uint64_t n_prefix) {
    AdapterSpec s;
    s.family = Family::Prefix;
    s.d = d;
    s.k = k;
    s.n_prefix = n_prefix;
    s.validate();
    return s;
}

inline AdapterSpec ffa_spec(std::uint64_t d, std::uint64_t k,
                            std::uint64_t bottleneck) {
    AdapterSpec s;
    s.family = Family::FFA;
    s.d = d;
    s.k = k;
    s.bottleneck = bottleneck;
    s.validate();
    return s;
}

struct Segment {
    std::string name;
    std::uint64_t offset;
    std::uint64_t count;
};

inline std::vector<Segment> flat_layout(const AdapterSpec& spec) {
    spec.validate();
    std::vector<Segment> segs;
    std::uint64_t off = 0;
    auto push = [&](const char* name, std::uint64_t count) {
        segs.push_back(Segment{name, off, count});
        off += count;
    };
    switch (spec.family) {
        case Family::LoRA:
            push("B", spec.d * spec.rank);
            push("A", spec.rank * spec.k);
            break;
        case Family::DoRA:
            push("B", spec.d * spec.rank);
            push("A", spec.rank * spec.k);
            push("magnitude", spec.k);
            break;
        case Family::Prefix:
            push("prefix", spec.n_prefix * spec.d);
            break;
        case Family::FFA:
            push("w_down", spec.d * spec.bottleneck);
            push("b_down", spec.bottleneck);
            push("w_up", spec.bottleneck * spec.d);
            push("b_up", spec.d);
            break;
    }
    return segs;
}

inline int qubit_count(const AdapterSpec& spec, std::uint64_t n_mlp) {
    return gen::plan_chunks(spec.param_count(), n_mlp).n_qubits;
}

inline std::size_t output_rows(const AdapterSpec& spec, std::size_t rows) {
    return spec.family == Family::Prefix
               ? rows + static_cast<std::size_t>(spec.n_prefix)
               : rows;
}

// ---------------------------------------------------------------------------
// Forward passes. x is rows x d, w0 is d x k, y is output_rows(...) x k.
// ---------------------------------------------------------------------------

namespace detail {

inline void check_flat(const AdapterSpec& spec, std::span<const double> a) {
    if (a.size() != spec.param_count()) {
        throw std::invalid_argument("flat adapter vector has wrong length");
    }
}

inline void matmul_into(std::span<const double> x, std::size_t rows,
                        std::size_t inner, std::span<const double> w,
                        std::size_t cols, double* y) {
    for (std::size_t r = 0; r < rows; ++r) {
        double* yr = y + r * cols;
        for (std::size_t c = 0; c < cols; ++c) yr[c] = 0.0;
        const double* xr = x.data() + r * inner;
        for (std::size_t i = 0; i < inner; ++i) {
            const double xi = xr[i];
            const double* wrow = w.data() + i * cols;
            for (std::size_t c = 0; c < cols; ++c) yr[c] += xi * wrow[c];
        }
    }
}

}  // namespace detail

inline std::vector<double> lora_forward(std::span<const double> x,
                                        std::size_t rows,
                                        std::span<const double> w0,
                                        const AdapterSpec& spec,
                                        std::span<const double> a) {
    detail::check_flat(spec, a);
    const std::size_t d = spec.d, k = spec.k, r = spec.rank;
    if (x.size() != rows * d || w0.size() != d * k) {
        throw std::invalid_argument("lora_forward shape mismatch");
    }
    std::vector<double> y(rows * k);
    detail::matmul_into(x, rows, d, w0, k, y.data());

    const std::span<const double> B = a.subspan(0, d * r);
    const std::span<const double> A = a.subspan(d * r, r * k);
    std::vector<double> xb(rows * r);
    detail::matmul_into(x, rows, d, B, r, xb.data());
    const double s = spec.scaling();
    for (std::size_t row = 0; row < rows; ++row) {
        for (std::size_t p = 0; p < r; ++p) {
            const double v = s * xb[row * r + p];
            if (v == 0.0) continue;  // keeps the zero-adapter path bit-exact
            const double* arow = A.data() + p * k;
            double* yr = y.data() + row * k;
            for (std::size_t c = 0; c < k; ++c) yr[c] += v * arow[c];
        }
    }
    return y;
}

// dL/da for LoRA given dL/dy.
inline std::vector<double> lora_backward(std::span<const double> x,
                                         std::size_t rows,
                                         const AdapterSpec& spec,
                                         std::span<const double> a,
                                         std::span<const double> dy) {
    detail::check_flat(spec, a);
    const std::size_t d = spec.d, k = spec.k, r = spec.rank;
    const double s = spec.scaling();
    const std::span<const double> B = a.subspan(0, d * r);
    const std::span<const double> A = a.subspan(d * r, r * k);

    std::vector<double> da(spec.param_count(), 0.0);
    std::span<double> dB(da.data(), d * r);
    std::span<double> dA(da.data() + d * r, r * k);

    std::vector<double> xb(rows * r);
    detail::matmul_into(x, rows, d, B, r, xb.data());
    // dA = s * (xB)^T dy
    for (std::size_t row = 0; row < rows; ++row) {
        for (std::size_t p = 0; p < r; ++p) {
            const double v = s * xb[row * r + p];
            const double* dyr = dy.data() + row * k;
            double* darow = dA.data() + p * k;
            for (std::size_t c = 0; c < k; ++c) darow[c] += v * dyr[c];
        }
    }
    // dB = s * x^T (dy A^T)
    std::vector<double> dyat(rows * r, 0.0);
    for (std::size_t row = 0; row < rows; ++row) {
        for (std::size_t p = 0; p < r; ++p) {
            const double* dyr = dy.data() + row * k;
            const double* arow = A.data() + p * k;
            double acc = 0.0;
            for (std::size_t c = 0; c < k; ++c) acc += dyr[c] * arow[c];
            dyat[row * r + p] = acc;
        }
    }
    for (std::size_t row = 0; row < rows; ++row) {
        const double* xr = x.data() + row * d;
        for (std::size_t i = 0; i < d; ++i) {
            double* dbrow = dB.data() + i * r;
            const double xi = s * xr[i];
            for (std::size_t p = 0; p < r; ++p) {
                dbrow[p] += xi * dyat[row * r + p];
            }
        }
    }
    return da;
}

// Identity magnitude for DoRA: the column norms of W0.
inline std::vector<double> dora_identity_magnitude(std::span<const double> w0,
                                                   std::size_t d,
                                                   std::size_t k) {
    std::vector<double> mag(k, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
        const double* row = w0.data() + i * k;
        for (std::size_t c = 0; c < k; ++c) mag[c] += row[c] * row[c];
    }
    for (double& v : mag) v = std::sqrt(v);
    return mag;
}

namespace detail {

// Builds C = W0 + s*B*A together with column norms; throws on a zero-norm
// column (the direction is undefined there).
inline void dora_direction(const AdapterSpec& spec, std::span<const double> w0,
                           std::span<const double> a, std::vector<double>& c,
                           std::vector<double>& norms) {
    const std::size_t d = spec.d, k = spec.k, r = spec.rank;
    const double s = spec.scaling();
    const std::span<const double> B = a.subspan(0, d * r);
    const std::span<const double> A = a.subspan(d * r, r * k);
    c.assign(w0.begin(), w0.end());
    for (std::size_t i = 0; i < d; ++i) {
        const double* brow = B.data() + i * r;
        double* crow = c.data() + i * k;
        for (std::size_t p = 0; p < r; ++p) {
            const double v = s * brow[p];
            if (v == 0.0) continue;  // keeps the zero-adapter path bit-exact
            const double* arow = A.data() + p * k;
            for (std::size_t col = 0; col < k; ++col) crow[col] += v * arow[col];
        }
    }
    norms.assign(k, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
        const double* crow = c.data() + i * k;
        for (std::size_t col = 0; col < k; ++col) {
            norms[col] += crow[col] * crow[col];
        }
    }
    for (std::size_t col = 0; col < k; ++col) {
        norms[col] = std::sqrt(norms[col]);
        if (norms[col] == 0.0) {
            throw std::domain_error(
                "DoRA direction column " + std::to_string(col) +
                " has zero norm");
        }
    }
}

}  // namespace detail

// W' = magnitude (.) column-normalized(W0 + s*B*A); y = x W'.
inline std::vector<double> dora_forward(std::span<const double> x,
                                        std::size_t rows,
                                        std::span<const double> w0,
                                        const AdapterSpec& spec,
                                        std::span<const double> a) {
    detail::check_flat(spec, a);
    const std::size_t d = spec.d, k = spec.k;
    if (x.size() != rows * d || w0.size() != d * k) {
        throw std::invalid_argument("dora_forward shape mismatch");
    }
    const std::span<const double> mag = a.subspan(spec.rank * (d + k), k);

    std::vector<double> c, norms;
    detail::dora_direction(spec, w0, a, c, norms);
    std::vector<double> scale(k);
    for (std::size_t col = 0; col < k; ++col) scale[col] = mag[col] / norms[col];

    std::vector<double> wp(d * k);
    for (std::size_t i = 0; i < d; ++i) {
        const double* crow = c.data() + i * k;
        double* wrow = wp.data() + i * k;
        for (std::size_t col = 0; col < k; ++col) wrow[col] = scale[col] * crow[col];
    }
    std::vector<double> y(rows * k);
    detail::matmul_into(x, rows, d, wp, k, y.data());
    return y;
}

// Full gradient, including the dependence of the column norms on B and A.
inline std::vector<double> dora_backward(std::span<const double> x,
                                         std::size_t rows,
                                         std::span<const double> w0,
                                         const AdapterSpec& spec,
                                         std::span<const double> a,
                                         std::span<const double> dy) {
    detail::check_flat(spec, a);
    const std::size_t d = spec.d, k = spec.k, r = spec.rank;
    const double s = spec.scaling();
    const std::span<const double> B = a.subspan(0, d * r);
    const std::span<const double> A = a.subspan(d * r, r * k);
    const std::span<const double> mag = a.subspan(r * (d + k), k);

    std::vector<double> c, norms;
    detail::dora_direction(spec, w0, a, c, norms);

    // dW' = x^T dy
    std::vector<double> dwp(d * k, 0.0);
    for (std::size_t row = 0; row < rows; ++row) {
        const double* xr = x.data() + row * d;
        const double* dyr = dy.data() + row * k;
        for (std::size_t i = 0; i < d; ++i) {
            const double xi = xr[i];
            double* drow = dwp.data() + i * k;
            for (std::size_t col = 0; col < k; ++col) drow[col] += xi * dyr[col];
        }
    }

    std::vector<double> da(spec.param_count(), 0.0);
    std::span<double> dB(da.data(), d * r);
    std::span<double> dA(da.data() + d * r, r * k);
    std::span<double> dmag(da.data() + r * (d + k), k);

    // Per column: dmag_j = (c_j / n_j) . dW'_j and
    // dC_j = (mag_j / n_j) (dW'_j - (chat_j . dW'_j) chat_j).
    std::vector<double> col_dot(k, 0.0);  // c_j . dW'_j
    for (std::size_t i = 0; i < d; ++i) {
        const double* crow = c.data() + i * k;
        const double* drow = dwp.data() + i * k;
        for (std::size_t col = 0; col < k; ++col) {
            col_dot[col] += crow[col] * drow[col];
        }
    }
    for (std::size_t col = 0; col < k; ++col) {
        dmag[col] = col_dot[col] / norms[col];
    }
    std::vector<double> dc(d * k);
    for (std::size_t i = 0; i < d; ++i) {
        const double* crow = c.data() + i * k;
        const double* drow = dwp.data() + i * k;
        double* dcrow = dc.data() + i * k;
        for (std::size_t col = 0; col < k; ++col) {
            const double n = norms[col];
            dcrow[col] = mag[col] / n *
                         (drow[col] - crow[col] * col_dot[col] / (n * n));
        }
    }
    // dB = s * dC A^T ; dA = s * B^T dC
    for (std::size_t i = 0; i < d; ++i) {
        const double* dcrow = dc.data() + i * k;
        double* dbrow = dB.data() + i * r;
        for (std::size_t p = 0; p < r; ++p) {
            const double* arow = A.data() + p * k;
            double acc = 0.0;
            for (std::size_t col = 0; col < k; ++col) acc += dcrow[col] * arow[col];
            dbrow[p] += s * acc;
        }
    }
    for (std::size_t p = 0; p < r; ++p) {
        double* darow = dA.data() + p * k;
        for (std::size_t i = 0; i < d; ++i) {
            const double b = s * B[i * r + p];
            const double* dcrow = dc.data() + i * k;
            for (std::size_t col = 0; col < k; ++col) darow[col] += b * dcrow[col];
        }
    }
    return da;
}

// Prepends the prefix rows, then applies the frozen layer to every row.
// Callers are expected to compute the loss over the original rows only.
inline std::vector<double> prefix_forward(std::span<const double> x_seq,
                                          std::size_t rows,
                                          std::span<const double> w0,
                                          const AdapterSpec& spec,
                                          std::span<const double> a) {
    detail::check_flat(spec, a);
    const std::size_t d = spec.d, k = spec.k;
    const std::size_t np = spec.n_prefix;
    if (x_seq.size() != rows * d || w0.size() != d * k) {
        throw std::invalid_argument("prefix_forward shape mismatch");
    }
    std::vector<double> y((np + rows) * k);
    detail::matmul_into(a, np, d, w0, k, y.data());
    detail::matmul_into(x_seq, rows, d, w0, k, y.data() + np * k);
    return y;
}

// dL/d(prefix rows); dy covers all n_prefix + rows output rows.
inline std::vector<double> prefix_backward(std::span<const double> /*x_seq*/,
                                           std::size_t /*rows*/,
                                           std::span<const double> w0,
                                           const AdapterSpec& spec,
                                           std::span<const double> /*a*/,
                                           std::span<const double> dy) {
    const std::size_t d = spec.d, k = spec.k, np = spec.n_prefix;
    std::vector<double> da(spec.param_count(), 0.0);
    for (std::size_t p = 0; p < np; ++p) {
        const double* dyr = dy.data() + p * k;
        double* dar = da.data() + p * d;
        for (std::size_t i = 0; i < d; ++i) {
            const double* wrow = w0.data() + i * k;
            double acc = 0.0;
            for (std::size_t col = 0; col < k; ++col) acc += dyr[col] * wrow[col];
            dar[i] = acc;
        }
    }
    return da;
}

// y = (x + up(silu(down(x)))) W0, a residual bottleneck ahead of the layer.
inline std::vector<double> ffa_forward(std::span<const double> x,
                                       std::size_t rows,
                                       std::span<const double> w0,
                                       const AdapterSpec& spec,
                                       std::span<const double> a) {
    detail::check_flat(spec, a);
    const std::size_t d = spec.d, k = spec.k, bt = spec.bottleneck;
    if (x.size() != rows * d || w0.size() != d * k) {
        throw std::invalid_argument("ffa_forward shape mismatch");
    }
    const std::span<const double> wd = a.subspan(0, d * bt);
    const std::span<const double> bd = a.subspan(d * bt, bt);
    const std::span<const double> wu = a.subspan(d * bt + bt, bt * d);
    const std::span<const double> bu = a.subspan(d * bt + bt + bt * d, d);

    std::vector<double> hidden(rows * bt);
    detail::matmul_into(x, rows, d, wd, bt, hidden.data());
    for (std::size_t row = 0; row < rows; ++row) {
        for (std::size_t b = 0; b < bt; ++b) {
            hidden[row * bt + b] = silu(hidden[row * bt + b] + bd[b]);
        }
    }
    std::vector<double> xr(x.begin(), x.end());
    for (std::size_t row = 0; row < rows; ++row) {
        double* xrr = xr.data() + row * d;
        const double* hr = hidden.data() + row * bt;
        for (std::size_t b = 0; b < bt; ++b) {
            const double h = hr[b];
            if (h == 0.0) continue;  // keeps the zero-adapter path bit-exact
            const double* wrow = wu.data() + b * d;
            for (std::size_t i = 0; i < d; ++i) xrr[i] += h * wrow[i];
        }
        for (std::size_t i = 0; i < d; ++i) {
            if (bu[i] != 0.0) xrr[i] += bu[i];
        }
    }
    std::vector<double> y(rows * k);
    detail::matmul_into(xr, rows, d, w0, k, y.data());
    return y;
}

inline std::vector<double> ffa_backward(std::span<const double> x,
                                        std::size_t rows,
                                        std::span<const double> w0,
                                        const AdapterSpec& spec,
                                        std::span<const double> a,
                                        std::span<const double> dy) {
    detail::check_flat(spec, a);
    const std::size_t d = spec.d, k = spec.k, bt = spec.bottleneck;
    const std::span<const double> wd = a.subspan(0, d * bt);
    const std::span<const double> bd = a.subspan(d * bt, bt);
    const std::span<const double> wu = a.subspan(d * bt + bt, bt * d);

    std::vector<double> pre(rows * bt);
    detail::matmul_into(x, rows, d, wd, bt, pre.data());
    std::vector<double> hidden(rows * bt);
    for (std::size_t row = 0; row < rows; ++row) {
        for (std::size_t b = 0; b < bt; ++b) {
            pre[row * bt + b] += bd[b];
            hidden[row * bt + b] = silu(pre[row * bt + b]);
        }
    }

    // dXr = dy W0^T
    std::vector<double> dxr(rows * d, 0.0);
    for (std::size_t row = 0; row < rows; ++row) {
        const double* dyr = dy.data() + row * k;
        double* dxrr = dxr.data() + row * d;
        for (std::size_t i = 0; i < d; ++i) {
            const double* wrow = w0.data() + i * k;
            double acc = 0.0;
            for (std::size_t col = 0; col < k; ++col) acc += dyr[col] * wrow[col];
            dxrr[i] = acc;
        }
    }

    std::vector<double> da(spec.param_count(), 0.0);
    std::span<double> dwd(da.data(), d * bt);
    std::span<double> dbd(da.data() + d * bt, bt);
    std::span<double> dwu(da.data() + d * bt + bt, bt * d);
    std::span<double> dbu(da.data() + d * bt + bt + bt * d, d);

    std::vector<double> dpre(rows * bt, 0.0);
    for (std::size_t row = 0; row < rows; ++row) {
        const double* dxrr = dxr.data() + row * d;
        const double* hr = hidden.data() + row * bt;
        for (std::size_t b = 0; b < bt; ++b) {
            const double* wrow = wu.data() + b * d;
            double dh = 0.0;
            for (std::size_t i = 0; i < d; ++i) {
                dwu[b * d + i] += hr[b] * dxrr[i];
                dh += wrow[i] * dxrr[i];
            }
            dpre[row * bt + b] = dh * silu_grad(pre[row * bt + b]);
        }
        for (std::size_t i = 0; i < d; ++i) dbu[i] += dxrr[i];
    }
    for (std::size_t row = 0; row < rows; ++row) {
        const double* xr = x.data() + row * d;
        const double* dpr = dpre.data() + row * bt;
        for (std::size_t i = 0; i < d; ++i) {
            double* drow = dwd.data() + i * bt;
            for (std::size_t b = 0; b < bt; ++b) drow[b] += xr[i] * dpr[b];
        }
        for (std::size_t b = 0; b < bt; ++b) dbd[b] += dpr[b];
    }
    return da;
}

// Family dispatch used by the language-model head.
inline std::vector<double> adapter_forward(const AdapterSpec& spec,
                                           std::span<const double> x,
                                           std::size_t rows,
                                           std::span<const double> w0,
                                           std::span<const double> a) {
    switch (spec.family) {
        case Family::LoRA: return lora_forward(x, rows, w0, spec, a);
        case Family::DoRA: return dora_forward(x, rows, w0, spec, a);
        case Family::Prefix: return prefix_forward(x, rows, w0, spec, a);
        case Family::FFA: return ffa_forward(x, rows, w0, spec, a);
    }
    throw std::logic_error("unreachable");
}

inline std::vector<double> adapter_backward(const AdapterSpec& spec,
                                            std::span<const double> x,
                                            std::size_t rows,
                                            std::span<const double> w0,
                                            std::span<const double> a,
                                            std::span<const double> dy) {
    switch (spec.family) {
        case Family::LoRA: return lora_backward(x, rows, spec, a, dy);
        case Family::DoRA: return dora_backward(x, rows, w0, spec, a, dy);
        case Family::Prefix: return prefix_backward(x, rows, w0, spec, a, dy);
        case Family::FFA: return ffa_backward(x, rows, w0, spec, a, dy);
    }
    throw std::logic_error("unreachable");
}

// ---------------------------------------------------------------------------
// Flat-array adapter file: magic, version, family tag, dims, then the values
// in layout order as little-endian 64-bit floats.
// ---------------------------------------------------------------------------

inline constexpr char kAdapterMagic[8] = {'Q', 'P', 'A', 'A', 'D', 'P', 'T', '1'};

inline void save_adapter(const std::string& path, const AdapterSpec& spec,
                         std::span<const double> a) {
    detail::check_flat(spec, a);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    auto put_u64 = [&](std::uint64_t v) {
        out.write(reinterpret_cast<const char*>(&v), sizeof v);
    };
    auto put_f64 = [&](double v) {
        out.write(reinterpret_cast<const char*>(&v), sizeof v);
    };
    out.write(kAdapterMagic, sizeof kAdapterMagic);
    put_u64(1);  // version
    put_u64(static_cast<std::uint64_t>(spec.family));
    put_u64(spec.d);
    put_u64(spec.k);
    put_u64(spec.rank);
    put_u64(spec.n_prefix);
    put_u64(spec.bottleneck);
    put_f64(spec.alpha);
    put_u64(spec.param_count());
    out.write(reinterpret_cast<const char*>(a.data()),
              static_cast<std::streamsize>(a.size() * sizeof(double)));
    if (!out) throw std::runtime_error("short write to " + path);
}

struct LoadedAdapter {
    AdapterSpec spec;
    std::vector<double> values;
};

inline LoadedAdapter load_adapter(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kAdapterMagic, sizeof magic) != 0) {
        throw std::runtime_error(path + " is not an adapter file");
    }
    auto get_u64 = [&] {
        std::uint64_t v = 0;
        in.read(reinterpret_cast<char*>(&v), sizeof v);
        return v;
    };
    auto get_f64 = [&] {
        double v = 0;
        in.read(reinterpret_cast<char*>(&v), sizeof v);
        return v;
    };
    if (get_u64() != 1) throw std::runtime_error("unsupported adapter version");
    LoadedAdapter out;
    out.spec.family = static_cast<Family>(get_u64());
    out.spec.d = get_u64();
    out.spec.k = get_u64();
    out.spec.rank = get_u64();
    out.spec.n_prefix = get_u64();
    out.spec.bottleneck = get_u64();
    out.spec.alpha = get_f64();
    const std::uint64_t m = get_u64();
    if (!in || m != out.spec.param_count()) {
        throw std::runtime_error("adapter header is inconsistent");
    }
    out.values.resize(m);
    in.read(reinterpret_cast<char*>(out.values.data()),
            static_cast<std::streamsize>(m * sizeof(double)));
    if (!in) throw std::runtime_error("adapter file truncated");
    return out;
}

}  // namespace qpa::peft
