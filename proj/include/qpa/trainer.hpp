// Fine-tuning engines: classical PEFT baselines train the flat adapter
// vector directly; QPA trains the circuit angles and mapping-model weights
// that generate it. Both share one AdamW configuration, the linear schedule,
// and the batch plumbing, so per-step costs are directly comparable.
#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qpa/adapters.hpp"
#include "qpa/generator.hpp"
#include "qpa/nanolm.hpp"
#include "qpa/optim.hpp"
#include "qpa/statevector.hpp"
#include "qpa/util.hpp"

namespace qpa::train {

struct Batch {
    std::vector<std::vector<int>> inputs;
    std::vector<std::vector<int>> targets;
};

// Samples batch windows from a token split; one uniform draw per item.
inline Batch sample_batch(std::span<const int> split, int context,
                          int batch_size, Rng& rng) {
    if (split.size() < static_cast<std::size_t>(context) + 1) {
        throw config_error("split shorter than one context window");
    }
    Batch b;
    for (int i = 0; i < batch_size; ++i) {
        const std::size_t start =
            rng.index(split.size() - static_cast<std::size_t>(context) - 1);
        b.inputs.emplace_back(
            split.begin() + static_cast<std::ptrdiff_t>(start),
            split.begin() + static_cast<std::ptrdiff_t>(start + static_cast<std::size_t>(context)));
        b.targets.emplace_back(
            split.begin() + static_cast<std::ptrdiff_t>(start + 1),
            split.begin() + static_cast<std::ptrdiff_t>(start + 1 + static_cast<std::size_t>(context)));
    }
    return b;
}

struct AdapterLossResult {
    double loss = 0.0;
    std::vector<double> d_a;
};

// Mean loss over the batch and its gradient with respect to the flat adapter
// vector. Sequences run one at a time so prefix rows stay per-sequence.
inline AdapterLossResult adapter_loss_and_grad(const lm::NanoLM& model,
                                               const peft::AdapterSpec& spec,
                                               std::span<const double> a,
                                               const Batch& batch) {
    AdapterLossResult res;
    res.d_a.assign(spec.param_count(), 0.0);
    const auto& w0 = model.tensor("lmhead").value;
    const int vocab = model.config().vocab;
    const double inv_bs = 1.0 / static_cast<double>(batch.inputs.size());
    for (std::size_t item = 0; item < batch.inputs.size(); ++item) {
        const auto& input = batch.inputs[item];
        const auto& target = batch.targets[item];
        const auto T = static_cast<std::size_t>(input.size());
        auto h = model.hidden_forward(input, 1, static_cast<int>(T), nullptr);
        auto logits = peft::adapter_forward(spec, h, T, w0, a);
        const std::size_t rows = logits.size() / static_cast<std::size_t>(vocab);
        auto ce = lm::cross_entropy_and_grad(logits, rows, vocab, target,
                                             rows - T);
        res.loss += ce.loss * inv_bs;
        for (double& g : ce.d_logits) g *= inv_bs;
        auto da = peft::adapter_backward(spec, h, T, w0, a, ce.d_logits);
        for (std::size_t j = 0; j < da.size(); ++j) res.d_a[j] += da[j];
    }
    return res;
}

inline double loss_with_adapter(const lm::NanoLM& model,
                                std::span<const int> split,
                                const peft::AdapterSpec& spec,
                                std::span<const double> a) {
    lm::AdaptedHead head{&spec, a};
    return std::log(lm::perplexity(model, split, head));
}

namespace detail {

inline void check_finite(std::span<const double> v, const char* stage,
                         int step) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw numerical_error(std::string(stage) +
                                  " produced a non-finite value at step " +
                                  std::to_string(step));
        }
    }
}

inline double variance(std::span<const double> v) {
    if (v.empty()) return 0.0;
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double acc = 0.0;
    for (double x : v) acc += (x - mean) * (x - mean);
    return acc / static_cast<double>(v.size());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Baseline: direct AdamW on the flat adapter vector.
// ---------------------------------------------------------------------------

// Conventional zero-update starting point that still admits gradient flow:
// the first map of LoRA/DoRA/FFA is random, the second is zero; DoRA
// magnitudes start at the frozen layer's column norms.
inline std::vector<double> baseline_adapter_init(const peft::AdapterSpec& spec,
                                                 std::span<const double> w0,
                                                 std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> a(spec.param_count(), 0.0);
    const double bound = 1.0 / std::sqrt(static_cast<double>(spec.d));
    switch (spec.family) {
        case peft::Family::LoRA:
        case peft::Family::DoRA:
            for (std::size_t i = 0; i < spec.d * spec.rank; ++i) {
                a[i] = rng.uniform(-bound, bound);
            }
            if (spec.family == peft::Family::DoRA) {
                auto mag = peft::dora_identity_magnitude(w0, spec.d, spec.k);
                std::copy(mag.begin(), mag.end(),
                          a.begin() + static_cast<std::ptrdiff_t>(
                                          spec.rank * (spec.d + spec.k)));
            }
            break;
        case peft::Family::Prefix:
            for (double& v : a) v = rng.normal(0.0, 0.02);
            break;
        case peft::Family::FFA:
            for (std::size_t i = 0; i < spec.d * spec.bottleneck; ++i) {
                a[i] = rng.uniform(-bound, bound);
            }
            break;
    }
    return a;
}

class BaselineTrainer {
  public:
    BaselineTrainer(const peft::AdapterSpec& spec, const lm::NanoLM& model,
                    AdamWConfig opt, double grad_clip, std::uint64_t seed)
        : spec_(spec),
          grad_clip_(grad_clip),
          a_(baseline_adapter_init(spec, model.tensor("lmhead").value, seed)),
          adam_(a_.size(), opt) {}

    const peft::AdapterSpec& spec() const { return spec_; }
    std::span<double> params() { return a_; }
    std::span<const double> params() const { return a_; }
    std::uint64_t trainable_count() const { return spec_.param_count(); }

    double last_grad_norm() const { return last_grad_norm_; }
    double last_grad_variance() const { return last_grad_var_; }

    double step(const lm::NanoLM& model, const Batch& batch, double lr,
                int step_index) {
        auto r = adapter_loss_and_grad(model, spec_, a_, batch);
        if (!std::isfinite(r.loss)) {
            throw numerical_error("baseline loss diverged at step " +
                                  std::to_string(step_index));
        }
        detail::check_finite(r.d_a, "baseline adapter gradient", step_index);
        last_grad_norm_ = clip_global_norm(r.d_a, grad_clip_);
        last_grad_var_ = detail::variance(r.d_a);
        adam_.step(a_, r.d_a, lr);
        return r.loss;
    }

  private:
    peft::AdapterSpec spec_;
    double grad_clip_;
    std::vector<double> a_;
    AdamW adam_;
    double last_grad_norm_ = 0.0;
    double last_grad_var_ = 0.0;
};

// ---------------------------------------------------------------------------
// QPA: AdamW on (theta, b) jointly; the adapter vector is generated.
// ---------------------------------------------------------------------------

struct QpaSettings {
    sim::AnsatzKind kind = sim::AnsatzKind::RY;
    int depth = 8;
    std::uint64_t n_mlp = 32;
    std::vector<int> hidden_dims = gen::kDefaultHiddenDims;
    bool prob_rescale = true;
    bool dora_identity_offset = false;
    int max_qubits = sim::kDefaultMaxQubits;
};

class QpaTrainer {
  public:
    QpaTrainer(const peft::AdapterSpec& spec, const lm::NanoLM& model,
               const QpaSettings& qpa, AdamWConfig opt, double grad_clip,
               std::uint64_t seed)
        : spec_(spec),
          settings_(qpa),
          plan_(gen::plan_chunks(spec.param_count(), qpa.n_mlp)),
          circuit_(sim::build_ansatz(qpa.kind, plan_.n_qubits, qpa.depth,
                                     qpa.max_qubits)),
          theta_(sim::random_theta(circuit_, seed)),
          mapping_(plan_.n_qubits, plan_.n_mlp, qpa.hidden_dims, seed + 1),
          grad_clip_(grad_clip),
          adam_(theta_.size() + mapping_.param_count(), opt) {
        if (qpa.dora_identity_offset && spec.family == peft::Family::DoRA) {
            magnitude_offset_ = peft::dora_identity_magnitude(
                model.tensor("lmhead").value, spec.d, spec.k);
        }
    }

    const peft::AdapterSpec& spec() const { return spec_; }
    const gen::ChunkPlan& plan() const { return plan_; }
    const sim::CircuitSpec& circuit() const { return circuit_; }
    std::span<double> theta() { return theta_; }
    gen::MappingModel& mapping() { return mapping_; }

    gen::TrainableCounts counts() const {
        gen::TrainableCounts c;
        c.theta_count = theta_.size();
        c.b_count = mapping_.param_count();
        c.total = c.theta_count + c.b_count;
        return c;
    }

    double last_grad_norm() const { return last_grad_norm_; }
    double last_theta_grad_variance() const { return last_theta_var_; }
    double last_b_grad_variance() const { return last_b_var_; }

    // The adapter vector the current (theta, b) generate.
    std::vector<double> generated() const {
        auto a = gen::generate(theta_, mapping_, plan_, circuit_,
                               settings_.prob_rescale);
        apply_offset(a.values);
        return a.values;
    }

    // dL/dtheta and dL/db on a batch without updating; exposed for the
    // gradient-variance probe.
    gen::GeneratorGradients gradients(const lm::NanoLM& model,
                                      const Batch& batch, double* loss_out,
                                      int step_index) {
        auto a = generated();
        detail::check_finite(a, "generated adapter", step_index);
        auto r = adapter_loss_and_grad(model, spec_, a, batch);
        if (!std::isfinite(r.loss)) {
            throw numerical_error("qpa loss diverged at step " +
                                  std::to_string(step_index));
        }
        auto grads = gen::generator_backward(theta_, mapping_, plan_, circuit_,
                                             r.d_a, settings_.prob_rescale);
        detail::check_finite(grads.d_theta, "qpa theta gradient", step_index);
        detail::check_finite(grads.d_b, "qpa mapping gradient", step_index);
        if (loss_out) *loss_out = r.loss;
        return grads;
    }

    double step(const lm::NanoLM& model, const Batch& batch, double lr,
                int step_index) {
        double loss = 0.0;
        auto grads = gradients(model, batch, &loss, step_index);

        std::vector<double> flat_p(theta_.begin(), theta_.end());
        flat_p.insert(flat_p.end(), mapping_.params().begin(),
                      mapping_.params().end());
        std::vector<double> flat_g(grads.d_theta.begin(), grads.d_theta.end());
        flat_g.insert(flat_g.end(), grads.d_b.begin(), grads.d_b.end());

        last_grad_norm_ = clip_global_norm(flat_g, grad_clip_);
        last_theta_var_ = detail::variance(
            std::span<const double>(flat_g.data(), theta_.size()));
        last_b_var_ = detail::variance(std::span<const double>(
            flat_g.data() + theta_.size(), mapping_.param_count()));

        adam_.step(flat_p, flat_g, lr);
        std::copy(flat_p.begin(),
                  flat_p.begin() + static_cast<std::ptrdiff_t>(theta_.size()),
                  theta_.begin());
        std::copy(flat_p.begin() + static_cast<std::ptrdiff_t>(theta_.size()),
                  flat_p.end(), mapping_.params().begin());
        return loss;
    }

  private:
    void apply_offset(std::vector<double>& a) const {
        if (magnitude_offset_.empty()) return;
        const std::size_t base = spec_.rank * (spec_.d + spec_.k);
        for (std::size_t c = 0; c < spec_.k; ++c) {
            a[base + c] += magnitude_offset_[c];
        }
    }

    peft::AdapterSpec spec_;
    QpaSettings settings_;
    gen::ChunkPlan plan_;
    sim::CircuitSpec circuit_;
    std::vector<double> theta_;
    gen::MappingModel mapping_;
    std::vector<double> magnitude_offset_;
    double grad_clip_;
    AdamW adam_;
    double last_grad_norm_ = 0.0;
    double last_theta_var_ = 0.0;
    double last_b_var_ = 0.0;
};

// ---------------------------------------------------------------------------
// Full training run
// ---------------------------------------------------------------------------

struct MetricsRecord {
    int step = 0;
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = std::numeric_limits<double>::quiet_NaN();
    double test_ppl = std::numeric_limits<double>::quiet_NaN();
    std::uint64_t trainable = 0;
    int qubits = 0;  // 0 in baseline mode
    double step_seconds = 0.0;
    double grad_norm = 0.0;
    double grad_var_theta = 0.0;  // adapter-vector variance in baseline mode
    double grad_var_b = 0.0;
};

struct RunOptions {
    AdamWConfig opt;
    int epochs = 3;
    int batch_size = 1;
    int warmup_steps = 0;
    int steps_per_epoch = 0;  // 0: floor(train_tokens / context)
    double grad_clip = 0.0;
    int log_every = 10;
    std::uint64_t seed = 42;
};

struct RunResult {
    std::vector<MetricsRecord> records;
    std::vector<double> step_losses;
    double best_val_loss = std::numeric_limits<double>::infinity();
    double final_val_loss = 0.0;
    double test_perplexity = 0.0;
    std::vector<double> best_adapter;      // baseline: a; qpa: generated a
    std::vector<double> best_theta;        // qpa only
    std::vector<double> best_mapping;      // qpa only
    double mean_step_seconds = 0.0;
    std::uint64_t trainable = 0;
    int qubits = 0;
};

template <typename Trainer>
RunResult run_training(Trainer& trainer, const lm::NanoLM& model,
                       const lm::Corpus& corpus, const RunOptions& run) {
    if (!model.frozen()) {
        throw config_error("fine-tuning requires a frozen pretrained base");
    }
    if (run.epochs < 1) throw config_error("epochs must be >= 1");
    const int T = model.config().context;
    int spe = run.steps_per_epoch;
    if (spe <= 0) {
        spe = static_cast<int>(corpus.train.size() / static_cast<std::size_t>(T));
        spe = std::max(spe, 1);
    }
    const int total_steps = run.epochs * spe;

    Rng rng(run.seed);
    RunResult res;
    constexpr bool is_qpa = std::is_same_v<Trainer, QpaTrainer>;
    if constexpr (is_qpa) {
        res.trainable = trainer.counts().total;
        res.qubits = trainer.plan().n_qubits;
    } else {
        res.trainable = trainer.trainable_count();
    }

    auto snapshot_best = [&] {
        if constexpr (is_qpa) {
            res.best_adapter = trainer.generated();
            res.best_theta.assign(trainer.theta().begin(), trainer.theta().end());
            res.best_mapping.assign(trainer.mapping().params().begin(),
                                    trainer.mapping().params().end());
        } else {
            res.best_adapter.assign(trainer.params().begin(),
                                    trainer.params().end());
        }
    };

    double sum_seconds = 0.0;
    int global_step = 0;
    for (int epoch = 0; epoch < run.epochs; ++epoch) {
        for (int s = 0; s < spe; ++s, ++global_step) {
            auto batch = sample_batch(corpus.train, T, run.batch_size, rng);
            const double lr = linear_lr(run.opt.lr, global_step, total_steps,
                                        run.warmup_steps);
            Stopwatch watch;
            const double loss = trainer.step(model, batch, lr, global_step);
            const double secs = watch.seconds();
            sum_seconds += secs;
            res.step_losses.push_back(loss);

            if (run.log_every > 0 && (global_step % run.log_every == 0)) {
                MetricsRecord rec;
                rec.step = global_step;
                rec.epoch = epoch;
                rec.train_loss = loss;
                rec.trainable = res.trainable;
                rec.qubits = res.qubits;
                rec.step_seconds = secs;
                rec.grad_norm = trainer.last_grad_norm();
                if constexpr (is_qpa) {
                    rec.grad_var_theta = trainer.last_theta_grad_variance();
                    rec.grad_var_b = trainer.last_b_grad_variance();
                } else {
                    rec.grad_var_theta = trainer.last_grad_variance();
                }
                res.records.push_back(rec);
            }
        }

        double val = std::numeric_limits<double>::quiet_NaN();
        if (!corpus.val.empty()) {
            if constexpr (is_qpa) {
                auto a = trainer.generated();
                val = loss_with_adapter(model, corpus.val, trainer.spec(), a);
            } else {
                val = loss_with_adapter(model, corpus.val, trainer.spec(),
                                        trainer.params());
            }
            if (val < res.best_val_loss) {
                res.best_val_loss = val;
                snapshot_best();
            }
            res.final_val_loss = val;
        }
        MetricsRecord rec;
        rec.step = global_step - 1;
        rec.epoch = epoch;
        rec.train_loss = res.step_losses.back();
        rec.val_loss = val;
        rec.trainable = res.trainable;
        rec.qubits = res.qubits;
        rec.grad_norm = trainer.last_grad_norm();
        res.records.push_back(rec);
    }
    if (res.best_adapter.empty()) snapshot_best();

    if (!corpus.test.empty()) {
        lm::AdaptedHead head{&trainer.spec(), res.best_adapter};
        res.test_perplexity = lm::perplexity(model, corpus.test, head);
        res.records.back().test_ppl = res.test_perplexity;
    }
    res.mean_step_seconds = sum_seconds / std::max(1, total_steps);
    return res;
}

// ---------------------------------------------------------------------------
// Gradient-variance probe (barren-plateau check)
// ---------------------------------------------------------------------------

struct VarianceRow {
    int n_qubits = 0;
    int depth = 0;
    std::size_t n_samples = 0;
    double variance = 0.0;
    double mean_abs = 0.0;
};

// For each (N, L) cell: draw fresh theta/mapping seeds and batches, collect
// every d(loss)/d(theta) entry, and report their pooled variance.
inline std::vector<VarianceRow> gradient_variance_probe(
    const lm::NanoLM& model, const lm::Corpus& corpus,
    const peft::AdapterSpec& spec, const QpaSettings& base,
    std::span<const int> qubit_grid, std::span<const int> depth_grid,
    int n_seeds, int n_batches, std::uint64_t seed) {
    std::vector<VarianceRow> rows;
    const int T = model.config().context;
    for (int n : qubit_grid) {
        for (int depth : depth_grid) {
            const auto plan = gen::plan_for_qubits(spec.param_count(), n);
            QpaSettings qpa = base;
            qpa.n_mlp = plan.n_mlp;
            qpa.depth = depth;
            std::vector<double> entries;
            Rng rng(seed + static_cast<std::uint64_t>(n) * 1000 +
                    static_cast<std::uint64_t>(depth));
            for (int s = 0; s < n_seeds; ++s) {
                QpaTrainer trainer(spec, model, qpa, AdamWConfig{}, 0.0,
                                   rng.bits());
                for (int b = 0; b < n_batches; ++b) {
                    auto batch = sample_batch(corpus.train, T, 1, rng);
                    auto grads = trainer.gradients(model, batch, nullptr, 0);
                    entries.insert(entries.end(), grads.d_theta.begin(),
                                   grads.d_theta.end());
                }
            }
            VarianceRow row;
            row.n_qubits = n;
            row.depth = depth;
            row.n_samples = entries.size();
            row.variance = detail::variance(entries);
            double acc = 0.0;
            for (double e : entries) acc += std::abs(e);
            row.mean_abs = acc / static_cast<double>(entries.size());
            rows.push_back(row);
        }
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Generator checkpoint: theta, mapping tensors, plan and adapter dims.
// ---------------------------------------------------------------------------

inline constexpr char kGeneratorMagic[8] = {'Q', 'P', 'A', 'G', 'E', 'N', 'R', '1'};

struct GeneratorState {
    peft::AdapterSpec spec;
    QpaSettings settings;
    gen::ChunkPlan plan;
    std::vector<double> theta;
    std::vector<double> mapping_params;
};

inline void save_generator(const std::string& path, const GeneratorState& st) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    auto put_u64 = [&](std::uint64_t v) {
        out.write(reinterpret_cast<const char*>(&v), sizeof v);
    };
    auto put_f64 = [&](double v) {
        out.write(reinterpret_cast<const char*>(&v), sizeof v);
    };
    out.write(kGeneratorMagic, sizeof kGeneratorMagic);
    put_u64(1);
    put_u64(static_cast<std::uint64_t>(st.spec.family));
    put_u64(st.spec.d);
    put_u64(st.spec.k);
    put_u64(st.spec.rank);
    put_u64(st.spec.n_prefix);
    put_u64(st.spec.bottleneck);
    put_f64(st.spec.alpha);
    put_u64(static_cast<std::uint64_t>(st.settings.kind));
    put_u64(static_cast<std::uint64_t>(st.settings.depth));
    put_u64(st.settings.n_mlp);
    put_u64(st.settings.prob_rescale ? 1 : 0);
    put_u64(st.settings.dora_identity_offset ? 1 : 0);
    put_u64(st.settings.hidden_dims.size());
    for (int h : st.settings.hidden_dims) put_u64(static_cast<std::uint64_t>(h));
    put_u64(st.plan.m);
    put_u64(st.plan.n_mlp);
    put_u64(st.theta.size());
    for (double t : st.theta) put_f64(t);
    put_u64(st.mapping_params.size());
    out.write(reinterpret_cast<const char*>(st.mapping_params.data()),
              static_cast<std::streamsize>(st.mapping_params.size() * sizeof(double)));
    if (!out) throw std::runtime_error("short write to " + path);
}

inline GeneratorState load_generator(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw config_error("cannot open generator checkpoint: " + path);
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kGeneratorMagic, sizeof magic) != 0) {
        throw config_error(path + " is not a generator checkpoint");
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
    if (get_u64() != 1) throw config_error("unsupported generator version");
    GeneratorState st;
    st.spec.family = static_cast<peft::Family>(get_u64());
    st.spec.d = get_u64();
    st.spec.k = get_u64();
    st.spec.rank = get_u64();
    st.spec.n_prefix = get_u64();
    st.spec.bottleneck = get_u64();
    st.spec.alpha = get_f64();
    st.settings.kind = static_cast<sim::AnsatzKind>(get_u64());
    st.settings.depth = static_cast<int>(get_u64());
    st.settings.n_mlp = get_u64();
    st.settings.prob_rescale = get_u64() != 0;
    st.settings.dora_identity_offset = get_u64() != 0;
    const std::uint64_t n_hidden = get_u64();
    st.settings.hidden_dims.resize(n_hidden);
    for (auto& h : st.settings.hidden_dims) h = static_cast<int>(get_u64());
    const std::uint64_t m = get_u64();
    const std::uint64_t n_mlp_plan = get_u64();
    st.plan = gen::plan_chunks(m, n_mlp_plan);
    st.theta.resize(get_u64());
    for (auto& t : st.theta) t = get_f64();
    st.mapping_params.resize(get_u64());
    in.read(reinterpret_cast<char*>(st.mapping_params.data()),
            static_cast<std::streamsize>(st.mapping_params.size() * sizeof(double)));
    if (!in) throw config_error("generator checkpoint truncated");
    return st;
}

}  // namespace qpa::train
