#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "qpa/trainer.hpp"

using namespace qpa::train;
using qpa::Rng;
namespace lmns = qpa::lm;
namespace peft = qpa::peft;

namespace {

struct Fixture {
    lmns::NanoLM model;
    lmns::Corpus corpus;
    std::string corpus_path;

    static const Fixture& get() {
        static Fixture f = make();
        return f;
    }

  private:
    static Fixture make() {
        namespace fs = std::filesystem;
        std::string text;
        const char* lines[] = {
            "the quick brown fox jumps over the lazy dog. ",
            "pack my box with five dozen liquor jugs. ",
            "how vexingly quick daft zebras jump! ",
        };
        for (int i = 0; i < 240; ++i) text += lines[i % 3];
        const auto path =
            (fs::temp_directory_path() / "qpa_trainer_fixture.txt").string();
        std::ofstream(path, std::ios::binary) << text;

        lmns::Tokenizer tok;
        auto corpus = lmns::Corpus::load(path, tok);
        lmns::NanoConfig cfg;
        cfg.dim = 16;
        cfg.n_layers = 1;
        cfg.n_heads = 2;
        cfg.context = 32;
        auto model = lmns::NanoLM::init(cfg, 7);
        lmns::PretrainConfig pc;
        pc.max_steps = 250;
        pc.lr = 3e-3;
        pc.val_every = 50;
        pc.min_steps = 100;
        pc.seed = 99;
        lmns::pretrain(model, corpus, pc);
        return Fixture{std::move(model), std::move(corpus), path};
    }
};

}  // namespace

TEST_CASE("AdamW basics") {
    SECTION("zero learning rate leaves parameters unchanged") {
        AdamWConfig cfg;
        cfg.lr = 0.0;
        AdamW opt(3, cfg);
        std::vector<double> p{1.0, -2.0, 0.5};
        std::vector<double> g{0.3, 0.1, -0.2};
        auto before = p;
        opt.step(p, g);
        CHECK(p == before);
    }

    SECTION("zero gradient with zero weight decay is a no-op") {
        AdamWConfig cfg;
        cfg.lr = 1e-2;
        AdamW opt(2, cfg);
        std::vector<double> p{0.7, -0.3};
        std::vector<double> g{0.0, 0.0};
        auto before = p;
        opt.step(p, g);
        CHECK(p == before);
    }

    SECTION("quadratic toy converges to the closed-form optimum") {
        // L(x) = 0.5 * sum (x - c)^2, optimum x = c.
        const std::vector<double> c{1.5, -0.25, 3.0, 0.0};
        AdamWConfig cfg;
        cfg.lr = 1e-2;
        AdamW opt(c.size(), cfg);
        std::vector<double> x(c.size(), 0.0);
        std::vector<double> g(c.size());
        for (int step = 0; step < 5000; ++step) {
            for (std::size_t i = 0; i < x.size(); ++i) g[i] = x[i] - c[i];
            opt.step(x, g);
        }
        for (std::size_t i = 0; i < x.size(); ++i) {
            CHECK(std::abs(x[i] - c[i]) < 1e-6);
        }
    }
}

TEST_CASE("linear schedule and gradient clipping") {
    CHECK(linear_lr(1.0, 0, 100, 0) == Catch::Approx(1.0));
    CHECK(linear_lr(1.0, 50, 100, 0) == Catch::Approx(0.5));
    CHECK(linear_lr(1.0, 99, 100, 0) == Catch::Approx(0.01));
    CHECK(linear_lr(1.0, 0, 100, 10) == Catch::Approx(0.1));
    CHECK(linear_lr(1.0, 9, 100, 10) == Catch::Approx(1.0));
    CHECK(linear_lr(1.0, 55, 100, 10) == Catch::Approx(0.5));

    std::vector<double> g{3.0, 4.0};
    const double norm = clip_global_norm(g, 1.0);
    CHECK(norm == Catch::Approx(5.0));
    CHECK(g[0] == Catch::Approx(0.6));
    CHECK(g[1] == Catch::Approx(0.8));
    std::vector<double> g2{0.3, 0.4};
    clip_global_norm(g2, 1.0);
    CHECK(g2[0] == Catch::Approx(0.3));
}

TEST_CASE("baseline step respects lr=0 and decreases loss on a fixed batch") {
    const auto& fx = Fixture::get();
    auto spec = peft::lora_spec(16, 97, 4);

    SECTION("lr = 0 leaves the adapter unchanged") {
        BaselineTrainer tr(spec, fx.model, AdamWConfig{}, 0.0, 5);
        std::vector<double> before(tr.params().begin(), tr.params().end());
        Rng rng(1);
        auto batch = sample_batch(fx.corpus.train, 32, 1, rng);
        tr.step(fx.model, batch, 0.0, 0);
        CHECK(std::equal(before.begin(), before.end(), tr.params().begin()));
    }

    SECTION("repeated stepping on one batch strictly decreases the loss") {
        AdamWConfig opt;
        opt.lr = 3e-4;
        BaselineTrainer tr(spec, fx.model, opt, 0.0, 5);
        Rng rng(2);
        auto batch = sample_batch(fx.corpus.train, 32, 1, rng);
        double prev = tr.step(fx.model, batch, opt.lr, 0);
        for (int i = 1; i < 50; ++i) {
            const double loss = tr.step(fx.model, batch, opt.lr, i);
            CHECK(loss < prev);
            prev = loss;
        }
    }
}

TEST_CASE("qpa training starts next to the frozen-base loss") {
    const auto& fx = Fixture::get();
    auto spec = peft::lora_spec(16, 97, 4);
    QpaSettings qpa;
    qpa.n_mlp = 16;
    qpa.depth = 4;
    qpa.hidden_dims = {8, 8};
    QpaTrainer tr(spec, fx.model, qpa, AdamWConfig{}, 0.0, 11);

    Rng rng(3);
    auto batch = sample_batch(fx.corpus.train, 32, 1, rng);

    // The output layer is initialized small, so the generated adapter is a
    // tiny perturbation of zero (an exactly-zero start would be a stationary
    // saddle for the low-rank factors, see MappingModel).
    auto a0 = tr.generated();
    double max_abs = 0.0;
    for (double v : a0) max_abs = std::max(max_abs, std::abs(v));
    CHECK(max_abs < 0.05);
    CHECK(max_abs > 0.0);
    auto qpa_loss = adapter_loss_and_grad(fx.model, spec, a0, batch).loss;

    // Plain-head loss on the same batch.
    const auto& input = batch.inputs[0];
    const auto& target = batch.targets[0];
    auto h = fx.model.hidden_forward(input, 1, 32, nullptr);
    auto logits = fx.model.head_forward(h, 32);
    auto base = lmns::cross_entropy_and_grad(logits, 32, 97, target);
    CHECK(qpa_loss == Catch::Approx(base.loss).epsilon(1e-3));
}

TEST_CASE("qpa repeated stepping on one batch strictly decreases the loss") {
    const auto& fx = Fixture::get();
    auto spec = peft::lora_spec(16, 97, 2);
    QpaSettings qpa;
    qpa.n_mlp = 16;
    qpa.depth = 4;
    qpa.hidden_dims = {8, 8};
    AdamWConfig opt;
    opt.lr = 3e-4;
    QpaTrainer tr(spec, fx.model, qpa, opt, 0.0, 13);
    Rng rng(4);
    auto batch = sample_batch(fx.corpus.train, 32, 1, rng);
    double prev = tr.step(fx.model, batch, opt.lr, 0);
    for (int i = 1; i < 50; ++i) {
        const double loss = tr.step(fx.model, batch, opt.lr, i);
        CHECK(loss < prev);
        prev = loss;
    }
}

TEST_CASE("qpa full-chain gradient matches end-to-end finite differences") {
    lmns::NanoConfig cfg;
    cfg.vocab = 11;
    cfg.dim = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.context = 6;
    auto model = lmns::NanoLM::init(cfg, 17);
    model.freeze();

    auto spec = peft::lora_spec(8, 11, 2);  // m = 38
    QpaSettings qpa;
    qpa.n_mlp = 4;
    qpa.depth = 2;
    qpa.hidden_dims = {4};
    QpaTrainer tr(spec, model, qpa, AdamWConfig{}, 0.0, 23);
    REQUIRE(tr.counts().total <= 200);

    Batch batch;
    batch.inputs.push_back({1, 7, 3, 0, 9, 2});
    batch.targets.push_back({7, 3, 0, 9, 2, 4});

    // Make the generated adapter (and hence the theta path) non-trivial.
    {
        Rng rng(31);
        for (double& p : tr.mapping().params()) p = rng.uniform(-0.4, 0.4);
    }

    auto grads = tr.gradients(model, batch, nullptr, 0);
    auto loss_at = [&] {
        return adapter_loss_and_grad(model, spec, tr.generated(), batch).loss;
    };
    const double h = 1e-5;

    auto theta = tr.theta();
    for (std::size_t j = 0; j < theta.size(); ++j) {
        const double keep = theta[j];
        theta[j] = keep + h;
        const double plus = loss_at();
        theta[j] = keep - h;
        const double minus = loss_at();
        theta[j] = keep;
        const double fd = (plus - minus) / (2 * h);
        CHECK(grads.d_theta[j] ==
              Catch::Approx(fd).epsilon(1e-4).margin(1e-7));
    }
    auto params = tr.mapping().params();
    for (std::size_t j = 0; j < params.size(); ++j) {
        const double keep = params[j];
        params[j] = keep + h;
        const double plus = loss_at();
        params[j] = keep - h;
        const double minus = loss_at();
        params[j] = keep;
        const double fd = (plus - minus) / (2 * h);
        CHECK(grads.d_b[j] == Catch::Approx(fd).epsilon(1e-4).margin(1e-7));
    }
}

TEST_CASE("run_training is deterministic and never touches the base model") {
    const auto& fx = Fixture::get();
    auto spec = peft::lora_spec(16, 97, 4);
    RunOptions run;
    run.opt.lr = 1e-3;
    run.epochs = 2;
    run.steps_per_epoch = 15;
    run.log_every = 5;
    run.seed = 77;

    // Byte snapshot of every frozen tensor.
    std::vector<std::vector<double>> before;
    for (const auto& t : fx.model.tensors()) before.push_back(t.value);

    auto make_run = [&] {
        BaselineTrainer tr(spec, fx.model, run.opt, 0.0, 5);
        // const_cast-free: run_training takes the model by const reference.
        return run_training(tr, fx.model, fx.corpus, run);
    };
    auto r1 = make_run();
    auto r2 = make_run();
    CHECK(r1.step_losses == r2.step_losses);
    CHECK(r1.best_val_loss == r2.best_val_loss);
    CHECK(r1.test_perplexity == r2.test_perplexity);
    CHECK(r1.step_losses.size() == 30);
    CHECK(std::isfinite(r1.mean_step_seconds));
    CHECK(r1.trainable == spec.param_count());

    QpaSettings qpa;
    qpa.n_mlp = 16;
    qpa.depth = 4;
    qpa.hidden_dims = {8, 8};
    auto make_qpa = [&] {
        QpaTrainer tr(spec, fx.model, qpa, run.opt, 0.0, 9);
        return run_training(tr, fx.model, fx.corpus, run);
    };
    auto q1 = make_qpa();
    auto q2 = make_qpa();
    CHECK(q1.step_losses == q2.step_losses);
    CHECK(q1.qubits == qpa::gen::plan_chunks(spec.param_count(), 16).n_qubits);

    for (std::size_t i = 0; i < before.size(); ++i) {
        const auto& now = fx.model.tensors()[i].value;
        CHECK(std::memcmp(before[i].data(), now.data(),
                          now.size() * sizeof(double)) == 0);
    }

    // Training on an unfrozen model is a configuration error.
    lmns::NanoConfig cfg;
    cfg.dim = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.context = 32;
    auto fresh = lmns::NanoLM::init(cfg, 1);
    BaselineTrainer tr(spec, fresh, run.opt, 0.0, 5);
    CHECK_THROWS_AS(run_training(tr, fresh, fx.corpus, run),
                    qpa::config_error);
}

TEST_CASE("training improves validation loss over the frozen base") {
    const auto& fx = Fixture::get();
    const double base_val = lmns::split_loss(fx.model, fx.corpus.val);

    auto spec = peft::lora_spec(16, 97, 4);
    RunOptions run;
    run.opt.lr = 2e-3;
    run.epochs = 3;
    run.steps_per_epoch = 40;
    run.seed = 5;
    BaselineTrainer tr(spec, fx.model, run.opt, 0.0, 5);
    auto res = run_training(tr, fx.model, fx.corpus, run);
    CHECK(res.best_val_loss < base_val);
}

TEST_CASE("generator checkpoint round trip preserves the next loss") {
    const auto& fx = Fixture::get();
    auto spec = peft::lora_spec(16, 97, 2);
    QpaSettings qpa;
    qpa.n_mlp = 8;
    qpa.depth = 3;
    qpa.hidden_dims = {6, 6};
    AdamWConfig opt;
    opt.lr = 1e-3;
    QpaTrainer tr(spec, fx.model, qpa, opt, 0.0, 41);
    Rng rng(8);
    auto batch = sample_batch(fx.corpus.train, 32, 1, rng);
    for (int i = 0; i < 5; ++i) tr.step(fx.model, batch, opt.lr, i);

    GeneratorState st;
    st.spec = spec;
    st.settings = qpa;
    st.plan = tr.plan();
    st.theta.assign(tr.theta().begin(), tr.theta().end());
    st.mapping_params.assign(tr.mapping().params().begin(),
                             tr.mapping().params().end());
    namespace fs = std::filesystem;
    const auto path = (fs::temp_directory_path() / "qpa_gen_ckpt.bin").string();
    save_generator(path, st);
    auto loaded = load_generator(path);
    CHECK(loaded.theta == st.theta);
    CHECK(loaded.mapping_params == st.mapping_params);
    CHECK(loaded.plan.n_qubits == st.plan.n_qubits);
    CHECK(loaded.spec.param_count() == spec.param_count());

    // Restoring the state reproduces the same loss on the same batch.
    QpaTrainer restored(loaded.spec, fx.model, loaded.settings, opt, 0.0, 1);
    std::copy(loaded.theta.begin(), loaded.theta.end(),
              restored.theta().begin());
    std::copy(loaded.mapping_params.begin(), loaded.mapping_params.end(),
              restored.mapping().params().begin());
    const double l1 =
        adapter_loss_and_grad(fx.model, spec, tr.generated(), batch).loss;
    const double l2 =
        adapter_loss_and_grad(fx.model, spec, restored.generated(), batch).loss;
    CHECK(l1 == l2);
    std::remove(path.c_str());
}

TEST_CASE("gradient variance probe produces positive finite cells") {
    const auto& fx = Fixture::get();
    auto spec = peft::lora_spec(16, 97, 4);  // m = 452
    QpaSettings qpa;
    qpa.hidden_dims = {8, 8};
    const int qubits[] = {4, 5, 6};
    const int depths[] = {2, 4};
    auto rows = gradient_variance_probe(fx.model, fx.corpus, spec, qpa, qubits,
                                        depths, 2, 2, 123);
    REQUIRE(rows.size() == 6);
    for (const auto& row : rows) {
        CHECK(row.variance > 0.0);
        CHECK(std::isfinite(row.variance));
        CHECK(row.n_samples > 0);
    }
}
