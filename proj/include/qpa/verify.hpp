// Fast arithmetic checks of the reference configurations this project is
// calibrated against: qubit-count ladders, trainable-parameter ladders and
// the mapping-model size. Pure integer arithmetic; safe at full scale.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qpa/adapters.hpp"
#include "qpa/generator.hpp"

namespace qpa::verify {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

inline std::vector<CheckResult> reference_table_checks() {
    std::vector<CheckResult> out;
    auto check = [&](const std::string& name, bool ok, const std::string& detail) {
        out.push_back(CheckResult{name, ok, detail});
    };

    // GPT-2-scale LoRA layer: d=768, k=50257.
    {
        auto spec = peft::lora_spec(768, 50257, 4);
        const int want[] = {10, 9, 8, 7, 6, 5};
        bool ok = spec.param_count() == 204100;
        std::string got;
        int idx = 0;
        for (std::uint64_t n_mlp : {256, 512, 1024, 2048, 4096, 8192}) {
            const int q = peft::qubit_count(spec, n_mlp);
            ok = ok && q == want[idx++];
            got += (got.empty() ? "" : ",") + std::to_string(q);
        }
        check("lora r=4 qubit ladder over n_mlp {256..8192}", ok,
              "got (" + got + "), want (10,9,8,7,6,5)");
    }
    {
        const std::uint64_t want[] = {51025, 102050, 204100,
                                      408200, 816400, 1632800};
        bool ok = true;
        std::string got;
        int idx = 0;
        for (std::uint64_t r : {1, 2, 4, 8, 16, 32}) {
            const auto m = peft::lora_spec(768, 50257, r).param_count();
            ok = ok && m == want[idx++];
            got += (got.empty() ? "" : ",") + std::to_string(m);
        }
        check("lora trainable ladder r in {1..32}", ok, "got (" + got + ")");
    }
    {
        const auto plan = gen::plan_chunks(1'000'000'000ull, 1024);
        check("one-billion-parameter target at n_mlp=1024 needs 20 qubits",
              plan.n_qubits == 20, "got " + std::to_string(plan.n_qubits));
    }
    {
        auto spec = peft::dora_spec(768, 50257, 4);
        const auto plan = gen::plan_chunks(spec.param_count(), 2048);
        const bool ok = spec.param_count() == 254357 && plan.n_ch == 125 &&
                        plan.n_qubits == 7;
        check("dora r=4 count/chunks/qubits at n_mlp=2048", ok,
              "m=" + std::to_string(spec.param_count()) +
                  " n_ch=" + std::to_string(plan.n_ch) +
                  " N=" + std::to_string(plan.n_qubits));
    }
    {
        check("prefix vector size at n_prefix=512, d=768",
              peft::prefix_spec(768, 50257, 512).param_count() == 393216,
              "got " + std::to_string(
                           peft::prefix_spec(768, 50257, 512).param_count()));
    }
    {
        // Gemma-scale head dims are inferred: back-solved from the published
        // r=1 count (258048) and the ~0.52B layer size.
        const std::uint64_t d = 2048, k = 256000;
        bool ok = peft::lora_spec(d, k, 1).param_count() == 258048;
        const std::uint64_t want[] = {258048,  516096,  1032192,
                                      2064384, 4128768, 8257536};
        int idx = 0;
        for (std::uint64_t r : {1, 2, 4, 8, 16, 32}) {
            ok = ok && peft::lora_spec(d, k, r).param_count() == want[idx++];
        }
        ok = ok && d * k == 524'288'000ull;
        check("gemma-scale lora ladder and 0.52B head size (inferred dims)", ok,
              "d=2048 k=256000 head=" + std::to_string(d * k));
    }
    {
        // Architecture-derived mapping-model size for N=7, n_mlp=2048. The
        // externally reported total for this configuration is 1056 larger;
        // we count exactly what the declared layer widths imply.
        const auto b = gen::mapping_param_count(7, gen::kDefaultHiddenDims, 2048);
        check("mapping model size at N=7, n_mlp=2048 (architecture-derived)",
              b == 105152 && b + 56 == 105208, "b=" + std::to_string(b));
    }
    return out;
}

}  // namespace qpa::verify
