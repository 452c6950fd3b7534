// Declarative experiment configuration (JSON), sweep expansion, and the
// CSV/JSONL output schemas. Parsing is strict: unknown keys anywhere in the
// document are rejected so saved configs stay exact run descriptions.
#pragma once

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "qpa/adapters.hpp"
#include "qpa/trainer.hpp"

namespace qpa::cli {

using json = nlohmann::json;

namespace detail {

inline void check_keys(const json& j, std::initializer_list<const char*> allowed,
                       const std::string& where) {
    if (!j.is_object()) throw config_error(where + " must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : allowed) {
            if (it.key() == k) {
                known = true;
                break;
            }
        }
        if (!known) {
            throw config_error("unknown key \"" + it.key() + "\" in " + where);
        }
    }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
    if (j.contains(key)) {
        try {
            out = j.at(key).get<T>();
        } catch (const json::exception& e) {
            throw config_error(std::string("bad value for \"") + key +
                               "\": " + e.what());
        }
    }
}

}  // namespace detail

struct CorpusConfig {
    std::string path = "data/corpus_task.txt";
    double train_frac = 0.9;
    double val_frac = 0.05;
};

struct ModelConfig {
    int dim = 64;
    int n_layers = 2;
    int n_heads = 2;
    int context = 128;
};

struct AdapterConfig {
    std::string family = "lora";
    std::uint64_t rank = 4;
    double alpha = -1.0;  // -1: default to 2r
    std::uint64_t n_prefix = 16;
    std::uint64_t bottleneck = 8;
    // 0 means "use the model dims" (d = model.dim, k = vocab). Explicit
    // values let count-only runs evaluate paper-scale layers.
    std::uint64_t d = 0;
    std::uint64_t k = 0;
};

struct QpaConfig {
    std::uint64_t n_mlp = 32;
    std::string ansatz = "ry";
    int depth = 8;
    std::vector<int> hidden_dims = gen::kDefaultHiddenDims;
    bool prob_rescale = true;
    bool dora_identity_offset = false;
    int max_qubits = sim::kDefaultMaxQubits;
};

struct TrainerConfig {
    double lr = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    int epochs = 3;
    int batch_size = 1;
    int warmup_steps = 0;
    int steps_per_epoch = 0;  // 0: derive from split size
    double grad_clip = 0.0;
    int log_every = 10;
};

struct PretrainCliConfig {
    int max_steps = 2000;
    double lr = 1e-3;
    int warmup_steps = 20;
    int batch_size = 1;
    double weight_decay = 0.0;
    double grad_clip = 0.0;
    int val_every = 100;
    double val_margin = 0.5;
    int min_steps = 200;
};

struct ShotsConfig {
    std::vector<std::uint64_t> budgets;  // empty: {10,20,40} * 2^N
    int reps = 32;
    int n_qubits = 0;  // 0: derive from the adapter plan
};

struct NoiseConfig {
    double single_qubit_p = 0.001;
    double two_qubit_p = 0.01;
    double readout_p = 0.01;
    std::vector<double> levels = {0.0, 0.5, 1.0, 2.0};
    std::uint64_t n_shots = 0;  // 0: 20 * 2^N
};

struct ProbeConfig {
    std::vector<int> qubits = {4, 5, 6, 7, 8, 9, 10};
    std::vector<int> depths = {2, 8, 32};
    int n_seeds = 3;
    int n_batches = 3;
};

struct ExperimentConfig {
    CorpusConfig corpus;
    ModelConfig model;
    AdapterConfig adapter;
    std::string mode = "baseline";  // baseline | qpa
    QpaConfig qpa;
    TrainerConfig trainer;
    PretrainCliConfig pretrain;
    ShotsConfig shots;
    NoiseConfig noise;
    ProbeConfig probe;
    std::uint64_t seed = 42;
    std::string out_dir = "runs/out";
    std::string checkpoint;

    void validate() const {
        if (mode != "baseline" && mode != "qpa") {
            throw config_error("mode must be \"baseline\" or \"qpa\"");
        }
        peft::family_from_string(adapter.family);
        sim::ansatz_from_string(qpa.ansatz);
        if (qpa.n_mlp < 1) throw config_error("qpa.n_mlp must be >= 1");
        if (qpa.depth < 0) throw config_error("qpa.depth must be >= 0");
        if (trainer.lr <= 0.0) throw config_error("trainer.lr must be > 0");
        if (trainer.epochs < 1) throw config_error("trainer.epochs must be >= 1");
        if (trainer.batch_size < 1) {
            throw config_error("trainer.batch_size must be >= 1");
        }
    }

    peft::AdapterSpec adapter_spec(int model_dim, int vocab) const {
        const std::uint64_t d =
            adapter.d > 0 ? adapter.d : static_cast<std::uint64_t>(model_dim);
        const std::uint64_t k =
            adapter.k > 0 ? adapter.k : static_cast<std::uint64_t>(vocab);
        switch (peft::family_from_string(adapter.family)) {
            case peft::Family::LoRA:
                return peft::lora_spec(d, k, adapter.rank, adapter.alpha);
            case peft::Family::DoRA:
                return peft::dora_spec(d, k, adapter.rank, adapter.alpha);
            case peft::Family::Prefix:
                return peft::prefix_spec(d, k, adapter.n_prefix);
            case peft::Family::FFA:
                return peft::ffa_spec(d, k, adapter.bottleneck);
        }
        throw config_error("unreachable adapter family");
    }

    train::QpaSettings qpa_settings() const {
        train::QpaSettings s;
        s.kind = sim::ansatz_from_string(qpa.ansatz);
        s.depth = qpa.depth;
        s.n_mlp = qpa.n_mlp;
        s.hidden_dims = qpa.hidden_dims;
        s.prob_rescale = qpa.prob_rescale;
        s.dora_identity_offset = qpa.dora_identity_offset;
        s.max_qubits = qpa.max_qubits;
        return s;
    }

    lm::NanoConfig nano_config() const {
        lm::NanoConfig c;
        c.vocab = lm::Tokenizer{}.vocab_size();
        c.dim = model.dim;
        c.n_layers = model.n_layers;
        c.n_heads = model.n_heads;
        c.context = model.context;
        return c;
    }

    train::RunOptions run_options() const {
        train::RunOptions r;
        r.opt.lr = trainer.lr;
        r.opt.beta1 = trainer.beta1;
        r.opt.beta2 = trainer.beta2;
        r.opt.eps = trainer.eps;
        r.opt.weight_decay = trainer.weight_decay;
        r.epochs = trainer.epochs;
        r.batch_size = trainer.batch_size;
        r.warmup_steps = trainer.warmup_steps;
        r.steps_per_epoch = trainer.steps_per_epoch;
        r.grad_clip = trainer.grad_clip;
        r.log_every = trainer.log_every;
        r.seed = seed;
        return r;
    }

    static ExperimentConfig from_json(const json& j) {
        detail::check_keys(j,
                           {"corpus", "model", "adapter", "mode", "qpa",
                            "trainer", "pretrain", "shots", "noise", "probe",
                            "seed", "out_dir", "checkpoint"},
                           "config");
        ExperimentConfig c;
        if (j.contains("corpus")) {
            const auto& s = j.at("corpus");
            detail::check_keys(s, {"path", "train_frac", "val_frac"}, "corpus");
            detail::read(s, "path", c.corpus.path);
            detail::read(s, "train_frac", c.corpus.train_frac);
            detail::read(s, "val_frac", c.corpus.val_frac);
        }
        if (j.contains("model")) {
            const auto& s = j.at("model");
            detail::check_keys(s, {"dim", "n_layers", "n_heads", "context"},
                               "model");
            detail::read(s, "dim", c.model.dim);
            detail::read(s, "n_layers", c.model.n_layers);
            detail::read(s, "n_heads", c.model.n_heads);
            detail::read(s, "context", c.model.context);
        }
        if (j.contains("adapter")) {
            const auto& s = j.at("adapter");
            detail::check_keys(
                s, {"family", "rank", "alpha", "n_prefix", "bottleneck", "d", "k"},
                "adapter");
            detail::read(s, "family", c.adapter.family);
            detail::read(s, "rank", c.adapter.rank);
            detail::read(s, "alpha", c.adapter.alpha);
            detail::read(s, "n_prefix", c.adapter.n_prefix);
            detail::read(s, "bottleneck", c.adapter.bottleneck);
            detail::read(s, "d", c.adapter.d);
            detail::read(s, "k", c.adapter.k);
        }
        detail::read(j, "mode", c.mode);
        if (j.contains("qpa")) {
            const auto& s = j.at("qpa");
            detail::check_keys(s,
                               {"n_mlp", "ansatz", "depth", "hidden_dims",
                                "prob_rescale", "dora_identity_offset",
                                "max_qubits"},
                               "qpa");
            detail::read(s, "n_mlp", c.qpa.n_mlp);
            detail::read(s, "ansatz", c.qpa.ansatz);
            detail::read(s, "depth", c.qpa.depth);
            detail::read(s, "hidden_dims", c.qpa.hidden_dims);
            detail::read(s, "prob_rescale", c.qpa.prob_rescale);
            detail::read(s, "dora_identity_offset", c.qpa.dora_identity_offset);
            detail::read(s, "max_qubits", c.qpa.max_qubits);
        }
        if (j.contains("trainer")) {
            const auto& s = j.at("trainer");
            detail::check_keys(s,
                               {"lr", "beta1", "beta2", "eps", "weight_decay",
                                "epochs", "batch_size", "warmup_steps",
                                "steps_per_epoch", "grad_clip", "log_every"},
                               "trainer");
            detail::read(s, "lr", c.trainer.lr);
            detail::read(s, "beta1", c.trainer.beta1);
            detail::read(s, "beta2", c.trainer.beta2);
            detail::read(s, "eps", c.trainer.eps);
            detail::read(s, "weight_decay", c.trainer.weight_decay);
            detail::read(s, "epochs", c.trainer.epochs);
            detail::read(s, "batch_size", c.trainer.batch_size);
            detail::read(s, "warmup_steps", c.trainer.warmup_steps);
            detail::read(s, "steps_per_epoch", c.trainer.steps_per_epoch);
            detail::read(s, "grad_clip", c.trainer.grad_clip);
            detail::read(s, "log_every", c.trainer.log_every);
        }
        if (j.contains("pretrain")) {
            const auto& s = j.at("pretrain");
            detail::check_keys(s,
                               {"max_steps", "lr", "warmup_steps", "batch_size",
                                "weight_decay", "grad_clip", "val_every",
                                "val_margin", "min_steps"},
                               "pretrain");
            detail::read(s, "max_steps", c.pretrain.max_steps);
            detail::read(s, "lr", c.pretrain.lr);
            detail::read(s, "warmup_steps", c.pretrain.warmup_steps);
            detail::read(s, "batch_size", c.pretrain.batch_size);
            detail::read(s, "weight_decay", c.pretrain.weight_decay);
            detail::read(s, "grad_clip", c.pretrain.grad_clip);
            detail::read(s, "val_every", c.pretrain.val_every);
            detail::read(s, "val_margin", c.pretrain.val_margin);
            detail::read(s, "min_steps", c.pretrain.min_steps);
        }
        if (j.contains("shots")) {
            const auto& s = j.at("shots");
            detail::check_keys(s, {"budgets", "reps", "n_qubits"}, "shots");
            detail::read(s, "budgets", c.shots.budgets);
            detail::read(s, "reps", c.shots.reps);
            detail::read(s, "n_qubits", c.shots.n_qubits);
        }
        if (j.contains("noise")) {
            const auto& s = j.at("noise");
            detail::check_keys(s,
                               {"single_qubit_p", "two_qubit_p", "readout_p",
                                "levels", "n_shots"},
                               "noise");
            detail::read(s, "single_qubit_p", c.noise.single_qubit_p);
            detail::read(s, "two_qubit_p", c.noise.two_qubit_p);
            detail::read(s, "readout_p", c.noise.readout_p);
            detail::read(s, "levels", c.noise.levels);
            detail::read(s, "n_shots", c.noise.n_shots);
        }
        if (j.contains("probe")) {
            const auto& s = j.at("probe");
            detail::check_keys(s, {"qubits", "depths", "n_seeds", "n_batches"},
                               "probe");
            detail::read(s, "qubits", c.probe.qubits);
            detail::read(s, "depths", c.probe.depths);
            detail::read(s, "n_seeds", c.probe.n_seeds);
            detail::read(s, "n_batches", c.probe.n_batches);
        }
        detail::read(j, "seed", c.seed);
        detail::read(j, "out_dir", c.out_dir);
        detail::read(j, "checkpoint", c.checkpoint);
        c.validate();
        return c;
    }

    json to_json() const {
        json j;
        j["corpus"] = {{"path", corpus.path},
                       {"train_frac", corpus.train_frac},
                       {"val_frac", corpus.val_frac}};
        j["model"] = {{"dim", model.dim},
                      {"n_layers", model.n_layers},
                      {"n_heads", model.n_heads},
                      {"context", model.context}};
        j["adapter"] = {{"family", adapter.family}, {"rank", adapter.rank},
                        {"alpha", adapter.alpha},   {"n_prefix", adapter.n_prefix},
                        {"bottleneck", adapter.bottleneck}, {"d", adapter.d},
                        {"k", adapter.k}};
        j["mode"] = mode;
        j["qpa"] = {{"n_mlp", qpa.n_mlp},
                    {"ansatz", qpa.ansatz},
                    {"depth", qpa.depth},
                    {"hidden_dims", qpa.hidden_dims},
                    {"prob_rescale", qpa.prob_rescale},
                    {"dora_identity_offset", qpa.dora_identity_offset},
                    {"max_qubits", qpa.max_qubits}};
        j["trainer"] = {{"lr", trainer.lr},
                        {"beta1", trainer.beta1},
                        {"beta2", trainer.beta2},
                        {"eps", trainer.eps},
                        {"weight_decay", trainer.weight_decay},
                        {"epochs", trainer.epochs},
                        {"batch_size", trainer.batch_size},
                        {"warmup_steps", trainer.warmup_steps},
                        {"steps_per_epoch", trainer.steps_per_epoch},
                        {"grad_clip", trainer.grad_clip},
                        {"log_every", trainer.log_every}};
        j["pretrain"] = {{"max_steps", pretrain.max_steps},
                         {"lr", pretrain.lr},
                         {"warmup_steps", pretrain.warmup_steps},
                         {"batch_size", pretrain.batch_size},
                         {"weight_decay", pretrain.weight_decay},
                         {"grad_clip", pretrain.grad_clip},
                         {"val_every", pretrain.val_every},
                         {"val_margin", pretrain.val_margin},
                         {"min_steps", pretrain.min_steps}};
        j["shots"] = {{"budgets", shots.budgets},
                      {"reps", shots.reps},
                      {"n_qubits", shots.n_qubits}};
        j["noise"] = {{"single_qubit_p", noise.single_qubit_p},
                      {"two_qubit_p", noise.two_qubit_p},
                      {"readout_p", noise.readout_p},
                      {"levels", noise.levels},
                      {"n_shots", noise.n_shots}};
        j["probe"] = {{"qubits", probe.qubits},
                      {"depths", probe.depths},
                      {"n_seeds", probe.n_seeds},
                      {"n_batches", probe.n_batches}};
        j["seed"] = seed;
        j["out_dir"] = out_dir;
        j["checkpoint"] = checkpoint;
        return j;
    }

    static ExperimentConfig load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw config_error("cannot open config file: " + path);
        json j;
        try {
            in >> j;
        } catch (const json::exception& e) {
            throw config_error("config is not valid JSON: " +
                               std::string(e.what()));
        }
        return from_json(j);
    }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("cannot write config to " + path);
        out << to_json().dump(2) << "\n";
    }
};

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

inline const std::vector<std::string> kSweepAxes = {
    "n_mlp", "rank", "depth", "kind", "n_shots", "noise"};

struct SweepSpec {
    std::string axis;
    std::vector<std::string> values;
    ExperimentConfig base;
};

// One derived cell config; the value string is parsed per axis.
inline ExperimentConfig apply_sweep_value(const ExperimentConfig& base,
                                          const std::string& axis,
                                          const std::string& value) {
    ExperimentConfig c = base;
    try {
        if (axis == "n_mlp") {
            c.qpa.n_mlp = std::stoull(value);
        } else if (axis == "rank") {
            c.adapter.rank = std::stoull(value);
        } else if (axis == "depth") {
            c.qpa.depth = std::stoi(value);
        } else if (axis == "kind") {
            sim::ansatz_from_string(value);
            c.qpa.ansatz = value;
        } else if (axis == "n_shots") {
            c.shots.budgets = {std::stoull(value)};
        } else if (axis == "noise") {
            c.noise.levels = {std::stod(value)};
        } else {
            throw config_error("unknown sweep axis: " + axis);
        }
    } catch (const std::invalid_argument&) {
        throw config_error("cannot parse sweep value \"" + value +
                           "\" for axis " + axis);
    } catch (const std::out_of_range&) {
        throw config_error("sweep value out of range: " + value);
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Output formats (documented in the README; column order is stable).
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
    std::ostringstream ss;
    ss.precision(17);
    ss << v;
    return ss.str();
}

inline constexpr const char* kMetricsSchema = "qpa.metrics.v1";
inline constexpr const char* kMetricsCsvHeader =
    "schema,step,epoch,train_loss,val_loss,test_ppl,trainable_params,qubits,"
    "step_seconds,grad_norm,grad_var_theta,grad_var_b";

inline void write_metrics_csv(const std::string& path,
                              std::span<const train::MetricsRecord> records) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << kMetricsCsvHeader << "\n";
    for (const auto& r : records) {
        out << kMetricsSchema << ',' << r.step << ',' << r.epoch << ','
            << format_double(r.train_loss) << ','
            << (std::isnan(r.val_loss) ? "" : format_double(r.val_loss)) << ','
            << (std::isnan(r.test_ppl) ? "" : format_double(r.test_ppl)) << ','
            << r.trainable << ',' << r.qubits << ','
            << format_double(r.step_seconds) << ','
            << format_double(r.grad_norm) << ','
            << format_double(r.grad_var_theta) << ','
            << format_double(r.grad_var_b) << "\n";
    }
}

inline void write_metrics_jsonl(const std::string& path,
                                std::span<const train::MetricsRecord> records) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    for (const auto& r : records) {
        json j;
        j["schema"] = kMetricsSchema;
        j["step"] = r.step;
        j["epoch"] = r.epoch;
        j["train_loss"] = r.train_loss;
        if (!std::isnan(r.val_loss)) j["val_loss"] = r.val_loss;
        if (!std::isnan(r.test_ppl)) j["test_ppl"] = r.test_ppl;
        j["trainable_params"] = r.trainable;
        j["qubits"] = r.qubits;
        j["step_seconds"] = r.step_seconds;
        j["grad_norm"] = r.grad_norm;
        j["grad_var_theta"] = r.grad_var_theta;
        j["grad_var_b"] = r.grad_var_b;
        out << j.dump() << "\n";
    }
}

// Re-reads a metrics.jsonl stream (the export command).
inline std::vector<train::MetricsRecord> read_metrics_jsonl(
    const std::string& path) {
    std::ifstream in(path);
    if (!in) throw config_error("cannot open " + path);
    std::vector<train::MetricsRecord> records;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw config_error("bad JSONL line in " + path + ": " + e.what());
        }
        train::MetricsRecord r;
        r.step = j.value("step", 0);
        r.epoch = j.value("epoch", 0);
        r.train_loss = j.value("train_loss", 0.0);
        r.val_loss = j.value("val_loss",
                             std::numeric_limits<double>::quiet_NaN());
        r.test_ppl = j.value("test_ppl",
                             std::numeric_limits<double>::quiet_NaN());
        r.trainable = j.value("trainable_params", std::uint64_t{0});
        r.qubits = j.value("qubits", 0);
        r.step_seconds = j.value("step_seconds", 0.0);
        r.grad_norm = j.value("grad_norm", 0.0);
        r.grad_var_theta = j.value("grad_var_theta", 0.0);
        r.grad_var_b = j.value("grad_var_b", 0.0);
        records.push_back(r);
    }
    return records;
}

// Hash of the artifacts a run depends on; recorded next to the config.
inline json input_manifest(const ExperimentConfig& cfg) {
    json m;
    m["schema"] = "qpa.manifest.v1";
    m["seed"] = cfg.seed;
    m["config_hash"] = to_hex(fnv1a64(cfg.to_json().dump()));
    auto file_hash = [](const std::string& path) -> json {
        std::ifstream in(path, std::ios::binary);
        if (!in) return nullptr;
        std::string bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
        return to_hex(fnv1a64(bytes));
    };
    m["corpus_hash"] = file_hash(cfg.corpus.path);
    m["checkpoint_hash"] =
        cfg.checkpoint.empty() ? json(nullptr) : file_hash(cfg.checkpoint);
    return m;
}

inline void write_run_artifacts(const ExperimentConfig& cfg) {
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);
    cfg.save((fs::path(cfg.out_dir) / "config.json").string());
    std::ofstream out((fs::path(cfg.out_dir) / "manifest.json").string());
    out << input_manifest(cfg).dump(2) << "\n";
}

}  // namespace qpa::cli
