// Command-line harness: pretraining, fine-tuning (baseline and QPA), sweeps,
// shot/noise studies, the gradient-variance probe, reference-table checks and
// metrics export.
//
// Exit codes: 0 success, 2 configuration/user error, 3 numerical failure,
// 4 verification mismatch.

#include <CLI11.hpp>

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

#include "qpa/config.hpp"
#include "qpa/verify.hpp"

namespace fs = std::filesystem;
using qpa::cli::ExperimentConfig;
using qpa::cli::json;

namespace {

struct GlobalFlags {
    std::string config_path;
    std::string out_dir;
    long long seed = -1;
    bool count_only = false;
    int threads = 1;
};

ExperimentConfig load_config(const GlobalFlags& flags) {
    if (flags.config_path.empty()) {
        throw qpa::config_error("--config PATH is required");
    }
    ExperimentConfig cfg = ExperimentConfig::load(flags.config_path);
    if (flags.seed >= 0) cfg.seed = static_cast<std::uint64_t>(flags.seed);
    if (!flags.out_dir.empty()) cfg.out_dir = flags.out_dir;
    return cfg;
}

std::uint64_t file_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw qpa::config_error("cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
    return qpa::fnv1a64(bytes);
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

int cmd_pretrain(const GlobalFlags& flags) {
    auto cfg = load_config(flags);
    qpa::lm::Tokenizer tok;
    auto corpus = qpa::lm::Corpus::load(cfg.corpus.path, tok,
                                        cfg.corpus.train_frac,
                                        cfg.corpus.val_frac);

    qpa::lm::NanoLM model = [&] {
        if (!cfg.checkpoint.empty()) {
            std::cerr << "resuming from " << cfg.checkpoint << "\n";
            auto m = qpa::lm::load_checkpoint(cfg.checkpoint);
            if (m.frozen()) {
                throw qpa::config_error(
                    "checkpoint is frozen; pretraining cannot resume from it");
            }
            return m;
        }
        return qpa::lm::NanoLM::init(cfg.nano_config(), cfg.seed);
    }();

    qpa::lm::PretrainConfig pc;
    pc.max_steps = cfg.pretrain.max_steps;
    pc.lr = cfg.pretrain.lr;
    pc.warmup_steps = cfg.pretrain.warmup_steps;
    pc.batch_size = cfg.pretrain.batch_size;
    pc.weight_decay = cfg.pretrain.weight_decay;
    pc.grad_clip = cfg.pretrain.grad_clip;
    pc.val_every = cfg.pretrain.val_every;
    pc.val_margin = cfg.pretrain.val_margin;
    pc.min_steps = cfg.pretrain.min_steps;
    pc.seed = cfg.seed;

    auto res = qpa::lm::pretrain(model, corpus, pc);

    qpa::cli::write_run_artifacts(cfg);
    const auto ckpt_path = (fs::path(cfg.out_dir) / "base.ckpt").string();
    qpa::lm::save_checkpoint(ckpt_path, model);

    std::vector<qpa::train::MetricsRecord> records;
    for (std::size_t i = 0; i < res.losses.size(); ++i) {
        qpa::train::MetricsRecord r;
        r.step = static_cast<int>(i);
        r.train_loss = res.losses[i];
        records.push_back(r);
    }
    records.back().val_loss = res.final_val_loss;
    qpa::cli::write_metrics_jsonl(
        (fs::path(cfg.out_dir) / "metrics.jsonl").string(), records);
    qpa::cli::write_metrics_csv(
        (fs::path(cfg.out_dir) / "metrics.csv").string(), records);

    const double test_ppl =
        corpus.test.empty() ? std::nan("") : qpa::lm::perplexity(model, corpus.test);
    std::cout << "pretrain steps=" << res.steps_run
              << " final_val_loss=" << res.final_val_loss
              << " target_reached=" << (res.reached_target ? "yes" : "no")
              << " test_ppl=" << test_ppl << " checkpoint=" << ckpt_path
              << " checkpoint_hash=" << qpa::to_hex(file_hash(ckpt_path))
              << "\n";
    if (!res.reached_target) {
        std::cerr << "warning: validation loss did not reach ln(vocab) - margin\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------
// finetune
// ---------------------------------------------------------------------------

json count_summary(const ExperimentConfig& cfg) {
    const int vocab = qpa::lm::Tokenizer{}.vocab_size();
    auto spec = cfg.adapter_spec(cfg.model.dim, vocab);
    json j;
    j["mode"] = cfg.mode;
    j["family"] = cfg.adapter.family;
    j["d"] = spec.d;
    j["k"] = spec.k;
    j["adapter_params"] = spec.param_count();
    j["warnings"] = spec.warnings();
    if (cfg.mode == "qpa") {
        const auto plan = qpa::gen::plan_chunks(spec.param_count(), cfg.qpa.n_mlp);
        const auto counts = qpa::gen::count_trainable(
            plan, qpa::sim::ansatz_from_string(cfg.qpa.ansatz), cfg.qpa.depth,
            cfg.qpa.hidden_dims);
        j["n_mlp"] = plan.n_mlp;
        j["n_ch"] = plan.n_ch;
        j["qubits"] = plan.n_qubits;
        j["theta_count"] = counts.theta_count;
        j["b_count"] = counts.b_count;
        j["trainable"] = counts.total;
    } else {
        j["trainable"] = spec.param_count();
    }
    return j;
}

int cmd_finetune(const GlobalFlags& flags) {
    auto cfg = load_config(flags);
    if (flags.count_only) {
        std::cout << count_summary(cfg).dump(2) << "\n";
        return 0;
    }
    if (cfg.checkpoint.empty()) {
        throw qpa::config_error("finetune requires a pretrained checkpoint");
    }
    auto model = qpa::lm::load_checkpoint(cfg.checkpoint);
    if (!model.frozen()) {
        throw qpa::config_error("checkpoint is not a frozen pretrained base");
    }
    if (cfg.adapter.d > 0 &&
        cfg.adapter.d != static_cast<std::uint64_t>(model.config().dim)) {
        throw qpa::config_error(
            "adapter.d disagrees with the checkpoint's model dim");
    }
    if (cfg.adapter.k > 0 &&
        cfg.adapter.k != static_cast<std::uint64_t>(model.config().vocab)) {
        throw qpa::config_error(
            "adapter.k disagrees with the checkpoint's vocab");
    }

    qpa::lm::Tokenizer tok;
    auto corpus = qpa::lm::Corpus::load(cfg.corpus.path, tok,
                                        cfg.corpus.train_frac,
                                        cfg.corpus.val_frac);
    auto spec = cfg.adapter_spec(model.config().dim, model.config().vocab);
    for (const auto& w : spec.warnings()) std::cerr << "warning: " << w << "\n";
    const auto run = cfg.run_options();

    qpa::cli::write_run_artifacts(cfg);
    qpa::train::RunResult res;
    if (cfg.mode == "qpa") {
        qpa::train::QpaTrainer trainer(spec, model, cfg.qpa_settings(),
                                       run.opt, run.grad_clip, cfg.seed);
        res = qpa::train::run_training(trainer, model, corpus, run);
        qpa::train::GeneratorState st;
        st.spec = spec;
        st.settings = cfg.qpa_settings();
        st.plan = trainer.plan();
        st.theta = res.best_theta;
        st.mapping_params = res.best_mapping;
        qpa::train::save_generator(
            (fs::path(cfg.out_dir) / "generator.bin").string(), st);
    } else {
        qpa::train::BaselineTrainer trainer(spec, model, run.opt,
                                            run.grad_clip, cfg.seed);
        res = qpa::train::run_training(trainer, model, corpus, run);
    }
    qpa::peft::save_adapter((fs::path(cfg.out_dir) / "adapter.bin").string(),
                            spec, res.best_adapter);
    qpa::cli::write_metrics_jsonl(
        (fs::path(cfg.out_dir) / "metrics.jsonl").string(), res.records);
    qpa::cli::write_metrics_csv(
        (fs::path(cfg.out_dir) / "metrics.csv").string(), res.records);

    std::cout << "finetune mode=" << cfg.mode << " family=" << cfg.adapter.family
              << " trainable=" << res.trainable;
    if (cfg.mode == "qpa") std::cout << " qubits=" << res.qubits;
    std::cout << " best_val_loss=" << qpa::cli::format_double(res.best_val_loss)
              << " test_ppl=" << qpa::cli::format_double(res.test_perplexity)
              << " mean_step_seconds="
              << qpa::cli::format_double(res.mean_step_seconds) << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

struct SweepRow {
    std::string value;
    std::string status = "ok";
    std::uint64_t trainable = 0;
    int qubits = 0;
    double best_val = std::nan("");
    double test_ppl = std::nan("");
    double step_seconds = std::nan("");
    double rmse = std::nan("");
};

SweepRow run_sweep_cell(const ExperimentConfig& cell, const std::string& axis,
                        const std::string& value, bool count_only);

int cmd_sweep(const GlobalFlags& flags, const std::string& axis,
              const std::vector<std::string>& values) {
    if (std::find(qpa::cli::kSweepAxes.begin(), qpa::cli::kSweepAxes.end(),
                  axis) == qpa::cli::kSweepAxes.end()) {
        throw qpa::config_error("unknown sweep axis: " + axis);
    }
    if (values.empty()) throw qpa::config_error("sweep needs a value list");
    auto base = load_config(flags);
    fs::create_directories(base.out_dir);

    std::vector<ExperimentConfig> cells;
    for (std::size_t i = 0; i < values.size(); ++i) {
        auto cell = qpa::cli::apply_sweep_value(base, axis, values[i]);
        cell.out_dir = (fs::path(base.out_dir) /
                        ("cell_" + std::to_string(i) + "_" + axis + "=" +
                         values[i]))
                           .string();
        cells.push_back(std::move(cell));
    }

    std::vector<SweepRow> rows(cells.size());
    std::atomic<std::size_t> next{0};
    std::mutex log_mutex;
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= cells.size()) return;
            try {
                rows[i] = run_sweep_cell(cells[i], axis, values[i],
                                         flags.count_only);
            } catch (const std::exception& e) {
                rows[i].value = values[i];
                rows[i].status = "failed";
                std::lock_guard<std::mutex> lock(log_mutex);
                std::cerr << "cell " << i << " (" << axis << "=" << values[i]
                          << ") failed: " << e.what() << "\n";
            }
        }
    };
    const int n_threads = std::max(1, flags.threads);
    std::vector<std::thread> pool;
    for (int t = 1; t < n_threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    const auto csv_path = (fs::path(base.out_dir) / "sweep.csv").string();
    std::ofstream out(csv_path);
    out << "schema,axis,value,status,trainable_params,qubits,best_val_loss,"
           "test_ppl,mean_step_seconds,rmse\n";
    for (const auto& r : rows) {
        out << "qpa.sweep.v1," << axis << ',' << r.value << ',' << r.status
            << ',' << r.trainable << ',' << r.qubits << ','
            << (std::isnan(r.best_val) ? "" : qpa::cli::format_double(r.best_val))
            << ','
            << (std::isnan(r.test_ppl) ? "" : qpa::cli::format_double(r.test_ppl))
            << ','
            << (std::isnan(r.step_seconds)
                    ? ""
                    : qpa::cli::format_double(r.step_seconds))
            << ','
            << (std::isnan(r.rmse) ? "" : qpa::cli::format_double(r.rmse))
            << "\n";
    }
    std::cout << "sweep axis=" << axis << " cells=" << cells.size()
              << " csv=" << csv_path << "\n";
    for (const auto& r : rows) {
        if (r.status != "ok") return 0;  // partial failures are reported, not fatal
    }
    return 0;
}

// ---------------------------------------------------------------------------
// shot / noise studies
// ---------------------------------------------------------------------------

struct StudySetup {
    qpa::sim::CircuitSpec circuit;
    std::vector<double> theta;
    std::vector<double> exact;
};

StudySetup study_setup(const ExperimentConfig& cfg) {
    const int vocab = qpa::lm::Tokenizer{}.vocab_size();
    auto spec = cfg.adapter_spec(cfg.model.dim, vocab);
    int n = cfg.shots.n_qubits;
    if (n <= 0) {
        n = qpa::gen::plan_chunks(spec.param_count(), cfg.qpa.n_mlp).n_qubits;
    }
    StudySetup s;
    s.circuit = qpa::sim::build_ansatz(
        qpa::sim::ansatz_from_string(cfg.qpa.ansatz), n, cfg.qpa.depth,
        cfg.qpa.max_qubits);
    s.theta = qpa::sim::random_theta(s.circuit, cfg.seed);
    s.exact =
        qpa::sim::basis_probabilities(qpa::sim::apply_circuit(s.circuit, s.theta));
    return s;
}

double rmse(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += (a[i] - b[i]) * (a[i] - b[i]);
    }
    return std::sqrt(acc / static_cast<double>(a.size()));
}

int cmd_shot_study(const GlobalFlags& flags) {
    auto cfg = load_config(flags);
    auto setup = study_setup(cfg);
    const int n = setup.circuit.n_qubits;
    const std::uint64_t cells = std::uint64_t{1} << n;

    std::vector<std::uint64_t> budgets = cfg.shots.budgets;
    if (budgets.empty()) budgets = {10 * cells, 20 * cells, 40 * cells};

    qpa::cli::write_run_artifacts(cfg);
    const auto csv_path = (fs::path(cfg.out_dir) / "shot_study.csv").string();
    std::ofstream out(csv_path);
    out << "schema,n_qubits,n_shots,label,reps,rmse,max_abs_err\n";
    for (std::size_t bi = 0; bi < budgets.size(); ++bi) {
        const std::uint64_t n_shots = budgets[bi];
        double rmse_acc = 0.0, max_err = 0.0;
        for (int rep = 0; rep < cfg.shots.reps; ++rep) {
            auto freq = qpa::sim::sample_shots(
                setup.exact, n_shots,
                cfg.seed + 7919 * bi + static_cast<std::uint64_t>(rep));
            rmse_acc += rmse(freq, setup.exact);
            for (std::size_t i = 0; i < freq.size(); ++i) {
                max_err = std::max(max_err, std::abs(freq[i] - setup.exact[i]));
            }
        }
        std::string label;
        if (n_shots == 10 * cells) label = "10x2^N";
        if (n_shots == 20 * cells) label = "20x2^N";
        if (n_shots == 40 * cells) label = "40x2^N";
        out << "qpa.shots.v1," << n << ',' << n_shots << ',' << label << ','
            << cfg.shots.reps << ','
            << qpa::cli::format_double(rmse_acc / cfg.shots.reps) << ','
            << qpa::cli::format_double(max_err) << "\n";
    }
    std::cout << "shot-study qubits=" << n << " budgets=" << budgets.size()
              << " csv=" << csv_path << "\n";
    return 0;
}

int cmd_noise_study(const GlobalFlags& flags) {
    auto cfg = load_config(flags);
    auto setup = study_setup(cfg);
    const int n = setup.circuit.n_qubits;
    const std::uint64_t n_shots =
        cfg.noise.n_shots > 0 ? cfg.noise.n_shots
                              : 20 * (std::uint64_t{1} << n);

    qpa::cli::write_run_artifacts(cfg);
    const auto csv_path = (fs::path(cfg.out_dir) / "noise_study.csv").string();
    std::ofstream out(csv_path);
    out << "schema,n_qubits,level,single_qubit_p,two_qubit_p,readout_p,"
           "n_shots,rmse,total_variation\n";
    // Exact-mode sanity row: the infinite-shot noiseless limit.
    out << "qpa.noise.v1," << n << ",exact,0,0,0,0,0,0\n";
    for (std::size_t li = 0; li < cfg.noise.levels.size(); ++li) {
        const double level = cfg.noise.levels[li];
        qpa::sim::NoiseModel nm{level * cfg.noise.single_qubit_p,
                                level * cfg.noise.two_qubit_p,
                                level * cfg.noise.readout_p};
        auto freq = qpa::sim::apply_noise(setup.circuit, setup.theta, nm,
                                          n_shots, cfg.seed + 13 * li);
        double tv = 0.0;
        for (std::size_t i = 0; i < freq.size(); ++i) {
            tv += std::abs(freq[i] - setup.exact[i]);
        }
        out << "qpa.noise.v1," << n << ',' << qpa::cli::format_double(level)
            << ',' << qpa::cli::format_double(nm.single_qubit_depolarizing_p)
            << ',' << qpa::cli::format_double(nm.two_qubit_depolarizing_p)
            << ',' << qpa::cli::format_double(nm.readout_flip_p) << ','
            << n_shots << ',' << qpa::cli::format_double(rmse(freq, setup.exact))
            << ',' << qpa::cli::format_double(0.5 * tv) << "\n";
    }
    std::cout << "noise-study qubits=" << n << " levels="
              << cfg.noise.levels.size() << " csv=" << csv_path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// gradient-variance probe
// ---------------------------------------------------------------------------

int cmd_grad_variance(const GlobalFlags& flags) {
    auto cfg = load_config(flags);
    if (cfg.checkpoint.empty()) {
        throw qpa::config_error("grad-variance requires a pretrained checkpoint");
    }
    auto model = qpa::lm::load_checkpoint(cfg.checkpoint);
    qpa::lm::Tokenizer tok;
    auto corpus = qpa::lm::Corpus::load(cfg.corpus.path, tok,
                                        cfg.corpus.train_frac,
                                        cfg.corpus.val_frac);
    auto spec = cfg.adapter_spec(model.config().dim, model.config().vocab);

    auto rows = qpa::train::gradient_variance_probe(
        model, corpus, spec, cfg.qpa_settings(), cfg.probe.qubits,
        cfg.probe.depths, cfg.probe.n_seeds, cfg.probe.n_batches, cfg.seed);

    qpa::cli::write_run_artifacts(cfg);
    const auto csv_path = (fs::path(cfg.out_dir) / "grad_variance.csv").string();
    std::ofstream out(csv_path);
    out << "schema,n_qubits,depth,n_samples,variance,mean_abs\n";
    for (const auto& r : rows) {
        out << "qpa.gradvar.v1," << r.n_qubits << ',' << r.depth << ','
            << r.n_samples << ',' << qpa::cli::format_double(r.variance) << ','
            << qpa::cli::format_double(r.mean_abs) << "\n";
    }
    std::cout << "grad-variance cells=" << rows.size() << " csv=" << csv_path
              << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// verify-tables / export
// ---------------------------------------------------------------------------

int cmd_verify_tables() {
    auto checks = qpa::verify::reference_table_checks();
    bool all_ok = true;
    for (const auto& c : checks) {
        std::cout << (c.pass ? "PASS" : "FAIL") << "  " << c.name << "  ["
                  << c.detail << "]\n";
        all_ok = all_ok && c.pass;
    }
    return all_ok ? 0 : 4;
}

int cmd_export(const std::string& run_dir, std::string out_path) {
    const auto jsonl = (fs::path(run_dir) / "metrics.jsonl").string();
    auto records = qpa::cli::read_metrics_jsonl(jsonl);
    if (out_path.empty()) {
        out_path = (fs::path(run_dir) / "metrics.csv").string();
    }
    qpa::cli::write_metrics_csv(out_path, records);
    std::cout << "export records=" << records.size() << " csv=" << out_path
              << "\n";
    return 0;
}

// Sweep cell body: training axes fine-tune, evaluation axes run the studies.
SweepRow run_sweep_cell(const ExperimentConfig& cell, const std::string& axis,
                        const std::string& value, bool count_only) {
    SweepRow row;
    row.value = value;
    if (axis == "n_shots" || axis == "noise") {
        auto setup = study_setup(cell);
        if (axis == "n_shots") {
            const std::uint64_t n_shots = std::stoull(value);
            double acc = 0.0;
            for (int rep = 0; rep < cell.shots.reps; ++rep) {
                auto freq = qpa::sim::sample_shots(
                    setup.exact, n_shots,
                    cell.seed + static_cast<std::uint64_t>(rep));
                acc += rmse(freq, setup.exact);
            }
            row.rmse = acc / cell.shots.reps;
        } else {
            const double level = std::stod(value);
            qpa::sim::NoiseModel nm{level * cell.noise.single_qubit_p,
                                    level * cell.noise.two_qubit_p,
                                    level * cell.noise.readout_p};
            const int n = setup.circuit.n_qubits;
            const std::uint64_t n_shots =
                cell.noise.n_shots > 0 ? cell.noise.n_shots
                                       : 20 * (std::uint64_t{1} << n);
            auto freq = qpa::sim::apply_noise(setup.circuit, setup.theta, nm,
                                              n_shots, cell.seed);
            row.rmse = rmse(freq, setup.exact);
        }
        row.qubits = setup.circuit.n_qubits;
        return row;
    }

    const auto counts = count_summary(cell);
    row.trainable = counts.at("trainable").get<std::uint64_t>();
    if (counts.contains("qubits")) row.qubits = counts.at("qubits").get<int>();
    if (count_only) return row;

    if (cell.checkpoint.empty()) {
        throw qpa::config_error("sweep cell needs a pretrained checkpoint");
    }
    auto model = qpa::lm::load_checkpoint(cell.checkpoint);
    qpa::lm::Tokenizer tok;
    auto corpus = qpa::lm::Corpus::load(cell.corpus.path, tok,
                                        cell.corpus.train_frac,
                                        cell.corpus.val_frac);
    auto spec = cell.adapter_spec(model.config().dim, model.config().vocab);
    const auto run = cell.run_options();
    qpa::cli::write_run_artifacts(cell);
    qpa::train::RunResult res;
    if (cell.mode == "qpa") {
        qpa::train::QpaTrainer trainer(spec, model, cell.qpa_settings(),
                                       run.opt, run.grad_clip, cell.seed);
        res = qpa::train::run_training(trainer, model, corpus, run);
    } else {
        qpa::train::BaselineTrainer trainer(spec, model, run.opt,
                                            run.grad_clip, cell.seed);
        res = qpa::train::run_training(trainer, model, corpus, run);
    }
    qpa::cli::write_metrics_jsonl(
        (fs::path(cell.out_dir) / "metrics.jsonl").string(), res.records);
    qpa::cli::write_metrics_csv(
        (fs::path(cell.out_dir) / "metrics.csv").string(), res.records);
    row.trainable = res.trainable;
    row.qubits = res.qubits;
    row.best_val = res.best_val_loss;
    row.test_ppl = res.test_perplexity;
    row.step_seconds = res.mean_step_seconds;
    return row;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Quantum-generated parameter-efficient fine-tuning harness"};
    app.require_subcommand(1);
    app.fallthrough();  // accept global flags after the subcommand name

    GlobalFlags flags;
    app.add_option("--config", flags.config_path, "Experiment config (JSON)");
    app.add_option("--seed", flags.seed, "Override the config seed");
    app.add_option("--out", flags.out_dir, "Override the output directory");
    app.add_flag("--count-only", flags.count_only,
                 "Report parameter/qubit counts without training");
    app.add_option("--threads", flags.threads, "Worker threads for sweeps");

    auto* sc_pretrain = app.add_subcommand("pretrain", "Train and freeze a base model");
    auto* sc_finetune = app.add_subcommand("finetune", "Fine-tune an adapter (baseline or qpa)");
    auto* sc_sweep = app.add_subcommand("sweep", "Run a value sweep and aggregate a CSV");
    std::string axis;
    std::vector<std::string> values;
    sc_sweep->add_option("--axis", axis, "Sweep axis")->required();
    sc_sweep->add_option("--values", values, "Comma-separated values")
        ->delimiter(',');
    auto* sc_shots = app.add_subcommand("shot-study", "Empirical vs exact probabilities across shot budgets");
    auto* sc_noise = app.add_subcommand("noise-study", "Probability perturbation across noise levels");
    auto* sc_gradvar = app.add_subcommand("grad-variance", "Gradient-variance probe over (N, L)");
    auto* sc_verify = app.add_subcommand("verify-tables", "Check reference configuration arithmetic");
    auto* sc_export = app.add_subcommand("export", "Convert a run's metrics.jsonl to CSV");
    std::string run_dir, export_out;
    sc_export->add_option("--run", run_dir, "Run directory")->required();
    sc_export->add_option("--out", export_out, "Output CSV path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (sc_pretrain->parsed()) return cmd_pretrain(flags);
        if (sc_finetune->parsed()) return cmd_finetune(flags);
        if (sc_sweep->parsed()) return cmd_sweep(flags, axis, values);
        if (sc_shots->parsed()) return cmd_shot_study(flags);
        if (sc_noise->parsed()) return cmd_noise_study(flags);
        if (sc_gradvar->parsed()) return cmd_grad_variance(flags);
        if (sc_verify->parsed()) return cmd_verify_tables();
        if (sc_export->parsed()) return cmd_export(run_dir, export_out);
    } catch (const qpa::config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const qpa::numerical_error& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const qpa::verification_error& e) {
        std::cerr << "verification mismatch: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
