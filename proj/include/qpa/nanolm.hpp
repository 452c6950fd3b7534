// Desk-scale character-level decoder-only language model: pre-LN blocks,
// learned positional embeddings, causal self-attention, SiLU MLP, and an
// untied final linear layer ("lmhead") that adapters hook into. Forward and
// backward passes are written out explicitly in double precision; the loops
// are sequential, so identical seeds give bit-identical trajectories.
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "qpa/adapters.hpp"
#include "qpa/optim.hpp"
#include "qpa/util.hpp"

namespace qpa::lm {

// ---------------------------------------------------------------------------
// Tokenizer: printable ASCII plus newline, with a single UNK id.
// ---------------------------------------------------------------------------

class Tokenizer {
  public:
    static constexpr int kUnk = 0;
    static constexpr int kNewline = 1;
    static constexpr char kReplacement = '?';

    int vocab_size() const { return 2 + 95; }  // UNK, '\n', ASCII 32..126

    int encode_char(char c) const {
        if (c == '\n') return kNewline;
        const auto u = static_cast<unsigned char>(c);
        if (u >= 32 && u <= 126) return 2 + (u - 32);
        return kUnk;
    }

    char decode_id(int id) const {
        if (id == kNewline) return '\n';
        if (id >= 2 && id < vocab_size()) return static_cast<char>(32 + id - 2);
        return kReplacement;
    }

    std::vector<int> tokenize(std::string_view text) const {
        std::vector<int> ids;
        ids.reserve(text.size());
        for (char c : text) ids.push_back(encode_char(c));
        return ids;
    }

    std::string detokenize(std::span<const int> ids) const {
        std::string out;
        out.reserve(ids.size());
        for (int id : ids) out.push_back(decode_id(id));
        return out;
    }
};

// ---------------------------------------------------------------------------
// Corpus with deterministic contiguous splits.
// ---------------------------------------------------------------------------

struct Corpus {
    std::vector<int> train, val, test;
    std::string path;

    static Corpus load(const std::string& path, const Tokenizer& tok,
                       double train_frac = 0.9, double val_frac = 0.05) {
        if (train_frac <= 0.0 || val_frac < 0.0 || train_frac + val_frac >= 1.0) {
            throw config_error("corpus split fractions are inconsistent");
        }
        std::ifstream in(path, std::ios::binary);
        if (!in) throw config_error("cannot open corpus file: " + path);
        std::string text((std::istreambuf_iterator<char>(in)),
                         std::istreambuf_iterator<char>());
        if (text.empty()) throw config_error("corpus file is empty: " + path);
        auto ids = tok.tokenize(text);
        const auto n = ids.size();
        const auto n_train = static_cast<std::size_t>(train_frac * static_cast<double>(n));
        const auto n_val = static_cast<std::size_t>(val_frac * static_cast<double>(n));
        Corpus c;
        c.path = path;
        c.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
        c.val.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train),
                     ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
        c.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val),
                      ids.end());
        return c;
    }
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct NanoConfig {
    int vocab = 97;
    int dim = 64;
    int n_layers = 2;
    int n_heads = 2;
    int context = 128;

    void validate() const {
        if (vocab < 2 || dim < 1 || n_layers < 1 || n_heads < 1 || context < 1) {
            throw config_error("nanolm config has non-positive fields");
        }
        if (dim % n_heads != 0) {
            throw config_error("dim must be divisible by n_heads");
        }
    }
};

struct Tensor {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<double> value;
    std::vector<double> grad;

    std::size_t size() const { return value.size(); }
};

class NanoLM {
  public:
    static NanoLM init(const NanoConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        NanoLM m;
        m.cfg_ = cfg;
        Rng rng(seed);
        const auto d = static_cast<std::size_t>(cfg.dim);
        const auto k = static_cast<std::size_t>(cfg.vocab);
        const double w_std = 0.02;
        const double proj_std = w_std / std::sqrt(2.0 * cfg.n_layers);

        auto add = [&](const std::string& name, std::vector<std::size_t> shape,
                       double stddev) {
            Tensor t;
            t.name = name;
            t.shape = std::move(shape);
            std::size_t n = 1;
            for (auto s : t.shape) n *= s;
            t.value.resize(n);
            t.grad.assign(n, 0.0);
            for (double& v : t.value) v = stddev > 0.0 ? rng.normal(0.0, stddev) : 0.0;
            m.index_[name] = m.tensors_.size();
            m.tensors_.push_back(std::move(t));
        };
        auto add_ones = [&](const std::string& name, std::size_t n) {
            add(name, {n}, 0.0);
            for (double& v : m.tensors_.back().value) v = 1.0;
        };

        add("wte", {k, d}, w_std);
        add("wpe", {static_cast<std::size_t>(cfg.context), d}, w_std);
        for (int l = 0; l < cfg.n_layers; ++l) {
            const std::string p = "blk" + std::to_string(l) + ".";
            add_ones(p + "ln1.g", d);
            add(p + "ln1.b", {d}, 0.0);
            add(p + "attn.wqkv", {d, 3 * d}, w_std);
            add(p + "attn.bqkv", {3 * d}, 0.0);
            add(p + "attn.wproj", {d, d}, proj_std);
            add(p + "attn.bproj", {d}, 0.0);
            add_ones(p + "ln2.g", d);
            add(p + "ln2.b", {d}, 0.0);
            add(p + "mlp.wfc", {d, 4 * d}, w_std);
            add(p + "mlp.bfc", {4 * d}, 0.0);
            add(p + "mlp.wproj", {4 * d, d}, proj_std);
            add(p + "mlp.bproj", {d}, 0.0);
        }
        add_ones("lnf.g", d);
        add("lnf.b", {d}, 0.0);
        add("lmhead", {d, k}, w_std);
        return m;
    }

    const NanoConfig& config() const { return cfg_; }
    bool frozen() const { return frozen_; }
    void freeze() { frozen_ = true; }

    std::vector<Tensor>& tensors() { return tensors_; }
    const std::vector<Tensor>& tensors() const { return tensors_; }

    Tensor& tensor(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::invalid_argument("no tensor " + name);
        return tensors_[it->second];
    }
    const Tensor& tensor(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::invalid_argument("no tensor " + name);
        return tensors_[it->second];
    }

    void zero_grads() {
        for (auto& t : tensors_) std::fill(t.grad.begin(), t.grad.end(), 0.0);
    }

    // Activations kept for the backward pass.
    struct Cache {
        int B = 0, T = 0;
        std::vector<int> tokens;
        struct Layer {
            std::vector<double> x_in;       // residual stream entering ln1
            std::vector<double> ln1_mean, ln1_rstd, ln1_out;
            std::vector<double> qkv;        // B*T x 3d
            std::vector<double> att;        // B*H*T*T softmax probabilities
            std::vector<double> att_out;    // B*T x d (pre-projection)
            std::vector<double> res1;       // residual stream entering ln2
            std::vector<double> ln2_mean, ln2_rstd, ln2_out;
            std::vector<double> fc_pre;     // B*T x 4d
            std::vector<double> fc_act;
        };
        std::vector<Layer> layers;
        std::vector<double> res_final;      // input to lnf
        std::vector<double> lnf_mean, lnf_rstd;
    };

    // Final-layer-norm hidden states, (B*T) x dim. Token ids must be < vocab
    // and T must fit the context window.
    std::vector<double> hidden_forward(std::span<const int> tokens, int B,
                                       int T, Cache* cache = nullptr) const {
        if (T < 1 || T > cfg_.context) {
            throw std::invalid_argument("sequence length exceeds context");
        }
        if (tokens.size() != static_cast<std::size_t>(B) * static_cast<std::size_t>(T)) {
            throw std::invalid_argument("token buffer size mismatch");
        }
        for (int id : tokens) {
            if (id < 0 || id >= cfg_.vocab) {
                throw std::invalid_argument("token id out of vocabulary");
            }
        }
        const std::size_t d = static_cast<std::size_t>(cfg_.dim);
        const std::size_t rows = static_cast<std::size_t>(B) * static_cast<std::size_t>(T);
        const int H = cfg_.n_heads;
        const std::size_t hd = d / static_cast<std::size_t>(H);
        const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));

        if (cache) {
            cache->B = B;
            cache->T = T;
            cache->tokens.assign(tokens.begin(), tokens.end());
            cache->layers.assign(static_cast<std::size_t>(cfg_.n_layers), {});
        }

        const auto& wte = tensor("wte").value;
        const auto& wpe = tensor("wpe").value;
        std::vector<double> x(rows * d);
        for (int b = 0; b < B; ++b) {
            for (int t = 0; t < T; ++t) {
                const std::size_t row = static_cast<std::size_t>(b) *
                                            static_cast<std::size_t>(T) +
                                        static_cast<std::size_t>(t);
                const auto tok = static_cast<std::size_t>(
                    tokens[row]);
                for (std::size_t i = 0; i < d; ++i) {
                    x[row * d + i] = wte[tok * d + i] +
                                     wpe[static_cast<std::size_t>(t) * d + i];
                }
            }
        }

        std::vector<double> buf_ln(rows * d), qkv(rows * 3 * d);
        std::vector<double> att(static_cast<std::size_t>(B) * H * T * T);
        std::vector<double> att_out(rows * d), proj(rows * d);
        std::vector<double> fc_pre(rows * 4 * d), fc_act(rows * 4 * d);

        for (int l = 0; l < cfg_.n_layers; ++l) {
            const std::string p = "blk" + std::to_string(l) + ".";
            Cache::Layer* cl = cache ? &cache->layers[static_cast<std::size_t>(l)] : nullptr;
            if (cl) cl->x_in = x;

            layernorm(x, rows, d, tensor(p + "ln1.g").value,
                      tensor(p + "ln1.b").value, buf_ln,
                      cl ? &cl->ln1_mean : nullptr, cl ? &cl->ln1_rstd : nullptr);
            if (cl) cl->ln1_out = buf_ln;

            matmul_bias(buf_ln, rows, d, tensor(p + "attn.wqkv").value, 3 * d,
                        tensor(p + "attn.bqkv").value, qkv);
            if (cl) cl->qkv = qkv;

            attention_forward(qkv, B, T, d, H, att_scale, att, att_out);
            if (cl) {
                cl->att = att;
                cl->att_out = att_out;
            }

            matmul_bias(att_out, rows, d, tensor(p + "attn.wproj").value, d,
                        tensor(p + "attn.bproj").value, proj);
            for (std::size_t i = 0; i < rows * d; ++i) x[i] += proj[i];
            if (cl) cl->res1 = x;

            layernorm(x, rows, d, tensor(p + "ln2.g").value,
                      tensor(p + "ln2.b").value, buf_ln,
                      cl ? &cl->ln2_mean : nullptr, cl ? &cl->ln2_rstd : nullptr);
            if (cl) cl->ln2_out = buf_ln;

            matmul_bias(buf_ln, rows, d, tensor(p + "mlp.wfc").value, 4 * d,
                        tensor(p + "mlp.bfc").value, fc_pre);
            if (cl) cl->fc_pre = fc_pre;
            for (std::size_t i = 0; i < rows * 4 * d; ++i) {
                fc_act[i] = silu(fc_pre[i]);
            }
            if (cl) cl->fc_act = fc_act;

            matmul_bias(fc_act, rows, 4 * d, tensor(p + "mlp.wproj").value, d,
                        tensor(p + "mlp.bproj").value, proj);
            for (std::size_t i = 0; i < rows * d; ++i) x[i] += proj[i];
        }

        if (cache) cache->res_final = x;
        std::vector<double> h(rows * d);
        layernorm(x, rows, d, tensor("lnf.g").value, tensor("lnf.b").value, h,
                  cache ? &cache->lnf_mean : nullptr,
                  cache ? &cache->lnf_rstd : nullptr);
        return h;
    }

    // Plain (unadapted) head: logits = h @ lmhead.
    std::vector<double> head_forward(std::span<const double> h,
                                     std::size_t rows) const {
        const auto d = static_cast<std::size_t>(cfg_.dim);
        const auto k = static_cast<std::size_t>(cfg_.vocab);
        std::vector<double> logits(rows * k);
        matmul(h, rows, d, tensor("lmhead").value, k, logits);
        return logits;
    }

    // Accumulates the lmhead gradient and returns dL/dh.
    std::vector<double> head_backward(std::span<const double> h,
                                      std::span<const double> d_logits,
                                      std::size_t rows) {
        const auto d = static_cast<std::size_t>(cfg_.dim);
        const auto k = static_cast<std::size_t>(cfg_.vocab);
        auto& head = tensor("lmhead");
        for (std::size_t r = 0; r < rows; ++r) {
            const double* hr = h.data() + r * d;
            const double* dlr = d_logits.data() + r * k;
            for (std::size_t i = 0; i < d; ++i) {
                double* grow = head.grad.data() + i * k;
                const double hv = hr[i];
                for (std::size_t c = 0; c < k; ++c) grow[c] += hv * dlr[c];
            }
        }
        std::vector<double> dh(rows * d, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* dlr = d_logits.data() + r * k;
            double* dhr = dh.data() + r * d;
            for (std::size_t i = 0; i < d; ++i) {
                const double* wrow = head.value.data() + i * k;
                double acc = 0.0;
                for (std::size_t c = 0; c < k; ++c) acc += wrow[c] * dlr[c];
                dhr[i] = acc;
            }
        }
        return dh;
    }

    // Backpropagates dL/dh through the transformer, accumulating gradients
    // for every tensor except lmhead (handled by head_backward).
    void backbone_backward(const Cache& cache, std::span<const double> d_hidden) {
        const std::size_t d = static_cast<std::size_t>(cfg_.dim);
        const int B = cache.B, T = cache.T;
        const std::size_t rows = static_cast<std::size_t>(B) * static_cast<std::size_t>(T);
        const int H = cfg_.n_heads;
        const std::size_t hd = d / static_cast<std::size_t>(H);
        const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));

        std::vector<double> d_res(rows * d);
        layernorm_backward(cache.res_final, rows, d, tensor("lnf.g").value,
                           cache.lnf_mean, cache.lnf_rstd, d_hidden,
                           tensor("lnf.g").grad, tensor("lnf.b").grad, d_res);

        std::vector<double> d_buf(rows * d), d_fc_act(rows * 4 * d);
        std::vector<double> d_fc_pre(rows * 4 * d), d_qkv(rows * 3 * d);
        std::vector<double> d_attout(rows * d), d_ln(rows * d);
        for (int l = cfg_.n_layers - 1; l >= 0; --l) {
            const std::string p = "blk" + std::to_string(l) + ".";
            const Cache::Layer& cl = cache.layers[static_cast<std::size_t>(l)];

            // x = res1 + mlp(ln2(res1))
            matmul_backward(cl.fc_act, rows, 4 * d,
                            tensor(p + "mlp.wproj").value, d, d_res,
                            tensor(p + "mlp.wproj").grad,
                            tensor(p + "mlp.bproj").grad, d_fc_act);
            for (std::size_t i = 0; i < rows * 4 * d; ++i) {
                d_fc_pre[i] = d_fc_act[i] * silu_grad(cl.fc_pre[i]);
            }
            matmul_backward(cl.ln2_out, rows, d, tensor(p + "mlp.wfc").value,
                            4 * d, d_fc_pre, tensor(p + "mlp.wfc").grad,
                            tensor(p + "mlp.bfc").grad, d_ln);
            layernorm_backward(cl.res1, rows, d, tensor(p + "ln2.g").value,
                               cl.ln2_mean, cl.ln2_rstd, d_ln,
                               tensor(p + "ln2.g").grad,
                               tensor(p + "ln2.b").grad, d_buf);
            for (std::size_t i = 0; i < rows * d; ++i) d_res[i] += d_buf[i];

            // res1 = x_in + proj(attention(ln1(x_in)))
            matmul_backward(cl.att_out, rows, d, tensor(p + "attn.wproj").value,
                            d, d_res, tensor(p + "attn.wproj").grad,
                            tensor(p + "attn.bproj").grad, d_attout);
            attention_backward(cl.qkv, cl.att, B, T, d, H, att_scale, d_attout,
                               d_qkv);
            matmul_backward(cl.ln1_out, rows, d, tensor(p + "attn.wqkv").value,
                            3 * d, d_qkv, tensor(p + "attn.wqkv").grad,
                            tensor(p + "attn.bqkv").grad, d_ln);
            layernorm_backward(cl.x_in, rows, d, tensor(p + "ln1.g").value,
                               cl.ln1_mean, cl.ln1_rstd, d_ln,
                               tensor(p + "ln1.g").grad,
                               tensor(p + "ln1.b").grad, d_buf);
            for (std::size_t i = 0; i < rows * d; ++i) d_res[i] += d_buf[i];
        }

        auto& wte = tensor("wte");
        auto& wpe = tensor("wpe");
        for (int b = 0; b < B; ++b) {
            for (int t = 0; t < T; ++t) {
                const std::size_t row = static_cast<std::size_t>(b) *
                                            static_cast<std::size_t>(T) +
                                        static_cast<std::size_t>(t);
                const auto tok = static_cast<std::size_t>(cache.tokens[row]);
                for (std::size_t i = 0; i < d; ++i) {
                    wte.grad[tok * d + i] += d_res[row * d + i];
                    wpe.grad[static_cast<std::size_t>(t) * d + i] +=
                        d_res[row * d + i];
                }
            }
        }
    }

  private:
    static void matmul(std::span<const double> x, std::size_t rows,
                       std::size_t in, std::span<const double> w,
                       std::size_t out, std::vector<double>& y) {
        y.assign(rows * out, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* xr = x.data() + r * in;
            double* yr = y.data() + r * out;
            for (std::size_t i = 0; i < in; ++i) {
                const double xv = xr[i];
                const double* wrow = w.data() + i * out;
                for (std::size_t c = 0; c < out; ++c) yr[c] += xv * wrow[c];
            }
        }
    }

    static void matmul_bias(std::span<const double> x, std::size_t rows,
                            std::size_t in, std::span<const double> w,
                            std::size_t out, std::span<const double> bias,
                            std::vector<double>& y) {
        y.resize(rows * out);
        for (std::size_t r = 0; r < rows; ++r) {
            double* yr = y.data() + r * out;
            for (std::size_t c = 0; c < out; ++c) yr[c] = bias[c];
            const double* xr = x.data() + r * in;
            for (std::size_t i = 0; i < in; ++i) {
                const double xv = xr[i];
                const double* wrow = w.data() + i * out;
                for (std::size_t c = 0; c < out; ++c) yr[c] += xv * wrow[c];
            }
        }
    }

    // Accumulates dW and db, writes dX.
    static void matmul_backward(std::span<const double> x, std::size_t rows,
                                std::size_t in, std::span<const double> w,
                                std::size_t out, std::span<const double> dy,
                                std::vector<double>& dw, std::vector<double>& db,
                                std::vector<double>& dx) {
        dx.assign(rows * in, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* xr = x.data() + r * in;
            const double* dyr = dy.data() + r * out;
            double* dxr = dx.data() + r * in;
            for (std::size_t i = 0; i < in; ++i) {
                const double* wrow = w.data() + i * out;
                double* dwrow = dw.data() + i * out;
                const double xv = xr[i];
                double acc = 0.0;
                for (std::size_t c = 0; c < out; ++c) {
                    dwrow[c] += xv * dyr[c];
                    acc += wrow[c] * dyr[c];
                }
                dxr[i] = acc;
            }
            for (std::size_t c = 0; c < out; ++c) db[c] += dyr[c];
        }
    }

    static void layernorm(std::span<const double> x, std::size_t rows,
                          std::size_t d, std::span<const double> g,
                          std::span<const double> b, std::vector<double>& y,
                          std::vector<double>* means,
                          std::vector<double>* rstds) {
        constexpr double eps = 1e-5;
        y.resize(rows * d);
        if (means) means->resize(rows);
        if (rstds) rstds->resize(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* xr = x.data() + r * d;
            double mean = 0.0;
            for (std::size_t i = 0; i < d; ++i) mean += xr[i];
            mean /= static_cast<double>(d);
            double var = 0.0;
            for (std::size_t i = 0; i < d; ++i) {
                const double c = xr[i] - mean;
                var += c * c;
            }
            var /= static_cast<double>(d);
            const double rstd = 1.0 / std::sqrt(var + eps);
            if (means) (*means)[r] = mean;
            if (rstds) (*rstds)[r] = rstd;
            double* yr = y.data() + r * d;
            for (std::size_t i = 0; i < d; ++i) {
                yr[i] = g[i] * ((xr[i] - mean) * rstd) + b[i];
            }
        }
    }

    static void layernorm_backward(std::span<const double> x, std::size_t rows,
                                   std::size_t d, std::span<const double> g,
                                   std::span<const double> means,
                                   std::span<const double> rstds,
                                   std::span<const double> dy,
                                   std::vector<double>& dg,
                                   std::vector<double>& db,
                                   std::vector<double>& dx) {
        dx.assign(rows * d, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* xr = x.data() + r * d;
            const double* dyr = dy.data() + r * d;
            double* dxr = dx.data() + r * d;
            const double mean = means[r], rstd = rstds[r];
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t i = 0; i < d; ++i) {
                const double xhat = (xr[i] - mean) * rstd;
                const double dxhat = dyr[i] * g[i];
                m1 += dxhat;
                m2 += dxhat * xhat;
                dg[i] += dyr[i] * xhat;
                db[i] += dyr[i];
            }
            m1 /= static_cast<double>(d);
            m2 /= static_cast<double>(d);
            for (std::size_t i = 0; i < d; ++i) {
                const double xhat = (xr[i] - mean) * rstd;
                const double dxhat = dyr[i] * g[i];
                dxr[i] = rstd * (dxhat - m1 - xhat * m2);
            }
        }
    }

    static void attention_forward(std::span<const double> qkv, int B, int T,
                                  std::size_t d, int H, double scale,
                                  std::vector<double>& att,
                                  std::vector<double>& out) {
        const std::size_t hd = d / static_cast<std::size_t>(H);
        out.assign(static_cast<std::size_t>(B) * static_cast<std::size_t>(T) * d, 0.0);
        att.assign(static_cast<std::size_t>(B) * H * T * T, 0.0);
        for (int b = 0; b < B; ++b) {
            for (int h = 0; h < H; ++h) {
                const std::size_t head_off = static_cast<std::size_t>(h) * hd;
                for (int t = 0; t < T; ++t) {
                    const std::size_t row =
                        (static_cast<std::size_t>(b) * T + t) * 3 * d;
                    const double* q = qkv.data() + row + head_off;
                    double* arow =
                        att.data() +
                        ((static_cast<std::size_t>(b) * H + h) * T + t) *
                            static_cast<std::size_t>(T);
                    double maxv = -1e30;
                    for (int t2 = 0; t2 <= t; ++t2) {
                        const double* kv =
                            qkv.data() +
                            (static_cast<std::size_t>(b) * T + t2) * 3 * d + d +
                            head_off;
                        double acc = 0.0;
                        for (std::size_t i = 0; i < hd; ++i) acc += q[i] * kv[i];
                        acc *= scale;
                        arow[t2] = acc;
                        if (acc > maxv) maxv = acc;
                    }
                    double denom = 0.0;
                    for (int t2 = 0; t2 <= t; ++t2) {
                        arow[t2] = std::exp(arow[t2] - maxv);
                        denom += arow[t2];
                    }
                    for (int t2 = 0; t2 <= t; ++t2) arow[t2] /= denom;
                    double* orow = out.data() +
                                   (static_cast<std::size_t>(b) * T + t) * d +
                                   head_off;
                    for (int t2 = 0; t2 <= t; ++t2) {
                        const double* vv =
                            qkv.data() +
                            (static_cast<std::size_t>(b) * T + t2) * 3 * d +
                            2 * d + head_off;
                        const double p = arow[t2];
                        for (std::size_t i = 0; i < hd; ++i) orow[i] += p * vv[i];
                    }
                }
            }
        }
    }

    static void attention_backward(std::span<const double> qkv,
                                   std::span<const double> att, int B, int T,
                                   std::size_t d, int H, double scale,
                                   std::span<const double> d_out,
                                   std::vector<double>& d_qkv) {
        const std::size_t hd = d / static_cast<std::size_t>(H);
        d_qkv.assign(qkv.size(), 0.0);
        std::vector<double> datt(static_cast<std::size_t>(T), 0.0);
        for (int b = 0; b < B; ++b) {
            for (int h = 0; h < H; ++h) {
                const std::size_t head_off = static_cast<std::size_t>(h) * hd;
                for (int t = 0; t < T; ++t) {
                    const double* arow =
                        att.data() +
                        ((static_cast<std::size_t>(b) * H + h) * T + t) *
                            static_cast<std::size_t>(T);
                    const double* dorow =
                        d_out.data() +
                        (static_cast<std::size_t>(b) * T + t) * d + head_off;
                    // d att and d v
                    double dot = 0.0;
                    for (int t2 = 0; t2 <= t; ++t2) {
                        const double* vv =
                            qkv.data() +
                            (static_cast<std::size_t>(b) * T + t2) * 3 * d +
                            2 * d + head_off;
                        double acc = 0.0;
                        for (std::size_t i = 0; i < hd; ++i) acc += dorow[i] * vv[i];
                        datt[static_cast<std::size_t>(t2)] = acc;
                        dot += acc * arow[t2];
                        double* dv =
                            d_qkv.data() +
                            (static_cast<std::size_t>(b) * T + t2) * 3 * d +
                            2 * d + head_off;
                        const double p = arow[t2];
                        for (std::size_t i = 0; i < hd; ++i) dv[i] += p * dorow[i];
                    }
                    // softmax backward, then into q and k
                    const double* q =
                        qkv.data() +
                        (static_cast<std::size_t>(b) * T + t) * 3 * d + head_off;
                    double* dq =
                        d_qkv.data() +
                        (static_cast<std::size_t>(b) * T + t) * 3 * d + head_off;
                    for (int t2 = 0; t2 <= t; ++t2) {
                        const double dscore =
                            arow[t2] * (datt[static_cast<std::size_t>(t2)] - dot) *
                            scale;
                        const double* kv =
                            qkv.data() +
                            (static_cast<std::size_t>(b) * T + t2) * 3 * d + d +
                            head_off;
                        double* dk =
                            d_qkv.data() +
                            (static_cast<std::size_t>(b) * T + t2) * 3 * d + d +
                            head_off;
                        for (std::size_t i = 0; i < hd; ++i) {
                            dq[i] += dscore * kv[i];
                            dk[i] += dscore * q[i];
                        }
                    }
                }
            }
        }
    }

    NanoConfig cfg_;
    bool frozen_ = false;
    std::vector<Tensor> tensors_;
    std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Loss and evaluation
// ---------------------------------------------------------------------------

struct CeResult {
    double loss = 0.0;
    std::vector<double> d_logits;  // same rows as logits, zero on skipped rows
};

// Mean token-level cross entropy over the last (rows - row_offset) rows.
// Rows before row_offset (prefix positions) carry no loss and no gradient.
inline CeResult cross_entropy_and_grad(std::span<const double> logits,
                                       std::size_t rows, int vocab,
                                       std::span<const int> targets,
                                       std::size_t row_offset = 0) {
    const auto k = static_cast<std::size_t>(vocab);
    if (logits.size() != rows * k) {
        throw std::invalid_argument("logits buffer size mismatch");
    }
    if (targets.size() + row_offset != rows) {
        throw std::invalid_argument("targets do not cover the loss rows");
    }
    CeResult res;
    res.d_logits.assign(rows * k, 0.0);
    const double inv_count = 1.0 / static_cast<double>(targets.size());
    for (std::size_t r = row_offset; r < rows; ++r) {
        const double* lr = logits.data() + r * k;
        double maxv = lr[0];
        for (std::size_t c = 1; c < k; ++c) maxv = std::max(maxv, lr[c]);
        double denom = 0.0;
        for (std::size_t c = 0; c < k; ++c) denom += std::exp(lr[c] - maxv);
        const double log_denom = std::log(denom);
        const auto target = static_cast<std::size_t>(targets[r - row_offset]);
        res.loss += -(lr[target] - maxv - log_denom) * inv_count;
        double* dlr = res.d_logits.data() + r * k;
        for (std::size_t c = 0; c < k; ++c) {
            const double softmax = std::exp(lr[c] - maxv) / denom;
            dlr[c] = (softmax - (c == target ? 1.0 : 0.0)) * inv_count;
        }
    }
    return res;
}

// Optional adapter hook for the head. family == nullopt means the plain head.
struct AdaptedHead {
    const peft::AdapterSpec* spec = nullptr;  // nullptr: plain lmhead
    std::span<const double> a;
};

// Logits for one sequence (B = 1 internally; callers loop over batch items so
// prefix rows stay per-sequence). Returns the head output which has
// n_prefix extra leading rows for prefix adapters.
inline std::vector<double> sequence_logits(const NanoLM& model,
                                           std::span<const int> tokens, int T,
                                           const AdaptedHead& head,
                                           std::vector<double>* hidden_out =
                                               nullptr) {
    auto h = model.hidden_forward(tokens, 1, T, nullptr);
    if (hidden_out) *hidden_out = h;
    const auto rows = static_cast<std::size_t>(T);
    if (!head.spec) return model.head_forward(h, rows);
    return peft::adapter_forward(*head.spec, h, rows,
                                 model.tensor("lmhead").value, head.a);
}

// exp(mean token cross entropy) over a split, evaluated on consecutive
// context-sized windows (a trailing partial window is included).
inline double perplexity(const NanoLM& model, std::span<const int> split,
                         const AdaptedHead& head = {}) {
    const int T = model.config().context;
    if (split.size() < 2) throw config_error("split too small for evaluation");
    double total_loss = 0.0;
    std::size_t total_tokens = 0;
    std::size_t pos = 0;
    while (pos + 1 < split.size()) {
        const auto len = std::min<std::size_t>(static_cast<std::size_t>(T),
                                               split.size() - 1 - pos);
        std::vector<int> input(split.begin() + static_cast<std::ptrdiff_t>(pos),
                               split.begin() + static_cast<std::ptrdiff_t>(pos + len));
        std::vector<int> target(
            split.begin() + static_cast<std::ptrdiff_t>(pos + 1),
            split.begin() + static_cast<std::ptrdiff_t>(pos + 1 + len));
        auto logits = sequence_logits(model, input, static_cast<int>(len), head);
        const std::size_t rows = logits.size() / static_cast<std::size_t>(model.config().vocab);
        const std::size_t offset = rows - len;
        auto ce = cross_entropy_and_grad(logits, rows, model.config().vocab,
                                         target, offset);
        total_loss += ce.loss * static_cast<double>(len);
        total_tokens += len;
        pos += len;
    }
    return std::exp(total_loss / static_cast<double>(total_tokens));
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

struct PretrainConfig {
    int max_steps = 2000;
    int batch_size = 1;
    double lr = 1e-3;
    int warmup_steps = 20;
    double weight_decay = 0.0;
    double grad_clip = 0.0;  // 0 disables
    int val_every = 100;
    double val_margin = 0.5;  // stop once val loss < ln(vocab) - margin
    int min_steps = 200;
    std::uint64_t seed = 1;
};

struct PretrainResult {
    std::vector<double> losses;
    double final_val_loss = 0.0;
    int steps_run = 0;
    bool reached_target = false;
};

inline double split_loss(const NanoLM& model, std::span<const int> split) {
    return std::log(perplexity(model, split));
}

// Samples one training window per batch item, runs full backprop, AdamW with
// linear decay. The model is frozen when training finishes.
inline PretrainResult pretrain(NanoLM& model, const Corpus& corpus,
                               const PretrainConfig& cfg) {
    if (model.frozen()) throw config_error("model is already frozen");
    const int T = model.config().context;
    if (corpus.train.size() < static_cast<std::size_t>(T) + 1) {
        throw config_error("train split shorter than one context window");
    }
    const double target =
        std::log(static_cast<double>(model.config().vocab)) - cfg.val_margin;

    std::vector<train::AdamW> opts;
    train::AdamWConfig ocfg;
    ocfg.lr = cfg.lr;
    ocfg.weight_decay = cfg.weight_decay;
    for (auto& t : model.tensors()) opts.emplace_back(t.size(), ocfg);

    Rng rng(cfg.seed);
    PretrainResult res;
    NanoLM::Cache cache;
    for (int step = 0; step < cfg.max_steps; ++step) {
        model.zero_grads();
        double loss = 0.0;
        for (int item = 0; item < cfg.batch_size; ++item) {
            const std::size_t start =
                rng.index(corpus.train.size() - static_cast<std::size_t>(T) - 1);
            std::vector<int> input(
                corpus.train.begin() + static_cast<std::ptrdiff_t>(start),
                corpus.train.begin() + static_cast<std::ptrdiff_t>(start + static_cast<std::size_t>(T)));
            std::span<const int> target_span(
                corpus.train.data() + start + 1, static_cast<std::size_t>(T));

            auto h = model.hidden_forward(input, 1, T, &cache);
            const auto rows = static_cast<std::size_t>(T);
            auto logits = model.head_forward(h, rows);
            auto ce = cross_entropy_and_grad(logits, rows, model.config().vocab,
                                             target_span);
            if (!std::isfinite(ce.loss)) {
                throw numerical_error("pretraining loss diverged at step " +
                                      std::to_string(step));
            }
            loss += ce.loss / cfg.batch_size;
            const double inv_bs = 1.0 / cfg.batch_size;
            for (double& g : ce.d_logits) g *= inv_bs;
            auto dh = model.head_backward(h, ce.d_logits, rows);
            model.backbone_backward(cache, dh);
        }
        res.losses.push_back(loss);

        const double lr =
            train::linear_lr(cfg.lr, step, cfg.max_steps, cfg.warmup_steps);
        for (std::size_t i = 0; i < model.tensors().size(); ++i) {
            auto& t = model.tensors()[i];
            if (cfg.grad_clip > 0.0) {
                train::clip_global_norm(t.grad, cfg.grad_clip);
            }
            opts[i].step(t.value, t.grad, lr);
        }
        res.steps_run = step + 1;

        if ((step + 1) % cfg.val_every == 0 && !corpus.val.empty()) {
            res.final_val_loss = split_loss(model, corpus.val);
            if (res.final_val_loss < target && step + 1 >= cfg.min_steps) {
                res.reached_target = true;
                break;
            }
        }
    }
    if (!corpus.val.empty()) {
        res.final_val_loss = split_loss(model, corpus.val);
        res.reached_target = res.final_val_loss < target;
    }
    model.freeze();
    return res;
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic, version, config, frozen flag, then a tensor
// table (name, shape, little-endian float64 data).
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'Q', 'P', 'A', 'C', 'K', 'P', 'T', '1'};

inline void save_checkpoint(const std::string& path, const NanoLM& model) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    auto put_u32 = [&](std::uint32_t v) {
        out.write(reinterpret_cast<const char*>(&v), sizeof v);
    };
    auto put_u64 = [&](std::uint64_t v) {
        out.write(reinterpret_cast<const char*>(&v), sizeof v);
    };
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    put_u32(1);
    const auto& c = model.config();
    put_u32(static_cast<std::uint32_t>(c.vocab));
    put_u32(static_cast<std::uint32_t>(c.dim));
    put_u32(static_cast<std::uint32_t>(c.n_layers));
    put_u32(static_cast<std::uint32_t>(c.n_heads));
    put_u32(static_cast<std::uint32_t>(c.context));
    put_u32(model.frozen() ? 1 : 0);
    put_u64(model.tensors().size());
    for (const auto& t : model.tensors()) {
        put_u32(static_cast<std::uint32_t>(t.name.size()));
        out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        put_u32(static_cast<std::uint32_t>(t.shape.size()));
        for (auto s : t.shape) put_u64(s);
        out.write(reinterpret_cast<const char*>(t.value.data()),
                  static_cast<std::streamsize>(t.value.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("short write to " + path);
}

inline NanoLM load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw config_error("cannot open checkpoint: " + path);
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
        throw config_error(path + " is not a checkpoint file");
    }
    auto get_u32 = [&] {
        std::uint32_t v = 0;
        in.read(reinterpret_cast<char*>(&v), sizeof v);
        return v;
    };
    auto get_u64 = [&] {
        std::uint64_t v = 0;
        in.read(reinterpret_cast<char*>(&v), sizeof v);
        return v;
    };
    if (get_u32() != 1) throw config_error("unsupported checkpoint version");
    NanoConfig cfg;
    cfg.vocab = static_cast<int>(get_u32());
    cfg.dim = static_cast<int>(get_u32());
    cfg.n_layers = static_cast<int>(get_u32());
    cfg.n_heads = static_cast<int>(get_u32());
    cfg.context = static_cast<int>(get_u32());
    const bool frozen = get_u32() != 0;
    if (!in) throw config_error("checkpoint header truncated");
    cfg.validate();

    NanoLM model = NanoLM::init(cfg, 0);
    const std::uint64_t count = get_u64();
    if (count != model.tensors().size()) {
        throw config_error("checkpoint tensor count mismatch");
    }
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = get_u32();
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const std::uint32_t ndim = get_u32();
        std::vector<std::size_t> shape(ndim);
        for (auto& s : shape) s = get_u64();
        if (!in) throw config_error("checkpoint tensor table truncated");
        Tensor& t = model.tensor(name);
        if (t.shape != shape) throw config_error("checkpoint shape mismatch for " + name);
        in.read(reinterpret_cast<char*>(t.value.data()),
                static_cast<std::streamsize>(t.value.size() * sizeof(double)));
    }
    if (!in) throw config_error("checkpoint data truncated");
    if (frozen) model.freeze();
    return model;
}

}  // namespace qpa::lm
