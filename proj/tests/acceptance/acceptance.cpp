// SPDX-License-Identifier: Apache-2.0
//
// Acceptance checks. `tva_acceptance [criterion]` prints one PASS/FAIL line
// per criterion and exits 1 if any failed.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>

#include "commands.hpp"
#include "json.hpp"
#include "tva/config.hpp"
#include "tva/harness.hpp"
#include "tva/rng.hpp"
#include "tva/tensor_file.hpp"
#include "tva_test_support.hpp"

using namespace tva;
using tva::testing::between;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

DiffArray unit_rows(std::size_t n, std::size_t d, Rng& rng) {
    return tva::testing::gaussian({n, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
}

Outcome gradients() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(mix_seed(0xacce, 1));
    std::map<std::string, double> worst;
    std::size_t failures = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t frames = between(2, 4, rng), videos = between(1, 16 / frames, rng);
        const std::size_t n = videos * frames, d = between(2, 16, rng);
        const double tau = std::array{1.0, 0.5, 0.1}[trial % 3];
        const DiffArray z = unit_rows(n, d, rng);
        const DiffArray za = tva::testing::away_from_ties(z, 0.02, 0.3, rng);
        const FrameGrouping g{videos, frames};
        const std::vector<std::pair<std::string, std::function<DiffArray(const DiffArray&)>>> losses{
            {"L1", [&](const DiffArray& a) { return l1_loss(z, a); }},
            {"c2a", [&](const DiffArray& a) { return contrastive_clean_to_adv(z, a, tau).loss; }},
            {"a2c", [&](const DiffArray& a) { return contrastive_adv_to_clean(z, a, tau).loss; }},
            {"Bi-con", [&](const DiffArray& a) { return bicon_loss(z, a, tau); }},
            {"TC", [&](const DiffArray& a) { return tc_loss(a, g); }},
            {"total", [&](const DiffArray& a) { return total_loss(z, a, g, tau, {}); }},
        };
        for (const auto& [name, f] : losses) {
            const auto r = tva::testing::check_gradient(f, za, 1e-5);
            worst[name] = std::max(worst[name], r.error);
            if (!tva::testing::grad_ok(r)) ++failures;
        }
    }
    const double secs = seconds_since(t0);
    std::ostringstream d;
    d << "100 inputs, worst error";
    for (const auto& [name, e] : worst) d << " " << name << "=" << fmt(e);
    d << ", " << failures << " failures, " << fmt(secs) << "s";
    return {failures == 0 && secs < 120.0, d.str()};
}

const CheckResult* find_check(const std::vector<CheckResult>& checks, const std::string& name) {
    for (const auto& c : checks)
        if (c.name == name) return &c;
    return nullptr;
}

Outcome gradient_asymmetry() {
    VerifySettings s;
    s.theorem2_trials = 100;
    const VerificationReport r = run_verification(s);
    std::ostringstream d;
    bool pass = !r.theorem2.empty();
    for (const auto& c : r.theorem2) {
        if (c.relation == "info") continue;
        pass = pass && c.pass;
        d << c.name << "=" << fmt(c.value) << (c.pass ? " " : "(!) ");
    }
    // Tolerances pinned here as well, independent of the settings defaults.
    const auto* a2c = find_check(r.theorem2, "adv_to_clean_prefactor_error");
    const auto* c2a = find_check(r.theorem2, "clean_to_adv_prefactor_error");
    const auto* asym = find_check(r.theorem2, "min_asymmetry_n4");
    const auto* bicon = find_check(r.theorem2, "bicon_average_identity");
    pass = pass && a2c && c2a && asym && bicon && a2c->value <= 1e-8 && c2a->value <= 1e-8 && asym->value > 1e-3 &&
           bicon->value <= 1e-12;
    return {pass, d.str()};
}

Outcome deviation_identity() {
    const VerificationReport r = run_verification(VerifySettings{});
    const auto* al = find_check(r.form_a, "linear_residual");
    const auto* az = find_check(r.form_a, "zero_delta_deviation");
    const auto* bl = find_check(r.form_b, "linear_residual");
    const auto* bt = find_check(r.form_b, "tanh_residual_clean_point");
    const auto* bz = find_check(r.form_b, "zero_delta_deviation");
    if (!al || !az || !bl || !bt || !bz) return {false, "missing checks in verification report"};

    // Form (b) on the default zoo at the clean point.
    const ExperimentPlan plan = default_plan();
    const Zoo zoo = build_zoo(plan);
    double zoo_b = 0.0;
    for (const auto& m : zoo.members)
        if (m.victim.is_form_b()) zoo_b = std::max(zoo_b, verify_theorem1(m.victim, attack_data(plan, 1)).residual);

    const bool pass = al->value <= 1e-8 && az->value == 0.0 && bl->value <= 1e-8 && bt->value <= 1e-4 &&
                      bz->value == 0.0 && zoo_b <= 1e-4;
    return {pass, "form_a linear=" + fmt(al->value) + " zero=" + fmt(az->value) + "; form_b linear=" +
                      fmt(bl->value) + " tanh=" + fmt(bt->value) + " zoo=" + fmt(zoo_b) + " zero=" + fmt(bz->value)};
}

Outcome feasibility() {
    const ExperimentPlan plan = default_plan();
    const auto surrogate = std::make_shared<const Encoder>(plan.surrogate);
    const double eps = 8.0 / 255.0;
    std::size_t checked = 0, violations = 0;
    double worst_linf = 0.0;
    for (std::uint64_t run = 0; run < 100; ++run) {
        DataSpec spec = plan.data;
        spec.videos = 4;
        spec.seed = mix_seed(0xfea5, run);
        const VideoBatch x = gen_synthetic(spec);
        for (AttackConfig cfg : plan.expanded_attacks()) {
            cfg.seed = mix_seed(cfg.seed, run);
            run_attack(cfg, *surrogate, x, [&](std::size_t, const Perturbation& delta) {
                ++checked;
                for (std::size_t i = 0; i < delta.values.size(); ++i) {
                    const double dv = delta.values[i], adv = x.values[i] + dv;
                    worst_linf = std::max(worst_linf, std::abs(dv));
                    if (std::abs(dv) > eps + 1e-12 || adv < 0.0 || adv > 1.0) ++violations;
                }
            });
        }
    }
    return {violations == 0 && checked > 0, std::to_string(checked) + " iterates over 100 runs x " +
                                                 std::to_string(plan.expanded_attacks().size()) +
                                                 " attacks, max |delta| " + fmt(worst_linf * 255.0) + "/255, " +
                                                 std::to_string(violations) + " violations"};
}

Outcome loss_bounds() {
    Rng rng(mix_seed(0xacce, 5));
    double tc_min = 1e300, tc_max = -1e300;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t v = between(1, 4, rng), t = between(2, 4, rng), d = between(2, 16, rng);
        const double l = tc_loss(tva::testing::gaussian({v * t, d}, 1.0, rng), {v, t}).item();
        tc_min = std::min(tc_min, l);
        tc_max = std::max(tc_max, l);
    }
    double single = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t d = between(1, 16, rng);
        const DiffArray z = unit_rows(1, d, rng), za = unit_rows(1, d, rng);
        for (double tau : {1.0, 0.1, 0.01}) {
            single = std::max({single, std::abs(contrastive_clean_to_adv(z, za, tau).loss.item()),
                               std::abs(contrastive_adv_to_clean(z, za, tau).loss.item()),
                               std::abs(bicon_loss(z, za, tau).item())});
        }
    }
    double qsum = 0.0;
    for (double tau : {1.0, 0.1, 0.01, 0.005}) {
        for (int trial = 0; trial < 50; ++trial) {
            const std::size_t n = between(2, 16, rng), d = between(2, 16, rng);
            const DiffArray z = unit_rows(n, d, rng), za = unit_rows(n, d, rng);
            for (std::size_t i = 0; i < n; ++i) {
                const auto q = prefactor_adv_to_clean(z, za, tau, i).weights;
                qsum = std::max(qsum, std::abs(std::accumulate(q.begin(), q.end(), 0.0) - 1.0));
            }
        }
    }
    const bool pass = tc_min >= 0.0 && tc_max <= 2.0 && single == 0.0 && qsum <= 1e-12;
    return {pass, "TC in [" + fmt(tc_min) + ", " + fmt(tc_max) + "] over 1000, n=1 max |loss| " + fmt(single) +
                      ", max |sum q - 1| " + fmt(qsum)};
}

Outcome ablation() {
    const auto t0 = std::chrono::steady_clock::now();
    const ExperimentPlan plan = default_plan();
    const TransferReport r = evaluate_transfer(plan);
    const auto counts = ablation_ordering(r, plan);
    const double secs = seconds_since(t0);
    bool pass = !counts.empty() && secs < 600.0;
    std::ostringstream d;
    for (const auto& c : counts) {
        pass = pass && c.deviation_seeds >= 8 && c.asr_seeds >= 8;
        d << c.victim << " dev " << c.deviation_seeds << "/" << c.total << " asr " << c.asr_seeds << "/" << c.total
          << "; ";
    }
    d << fmt(secs) << "s";
    return {pass, d.str()};
}

Outcome momentum() {
    ExperimentPlan plan = default_plan();
    plan.ablation.clear();
    const TransferReport r = evaluate_transfer(plan);
    const auto counts = momentum_ordering(r, plan);
    const auto mean = std::find_if(counts.begin(), counts.end(), [](const auto& c) { return c.victim == "mean"; });
    if (mean == counts.end()) return {false, "no mean entry"};
    std::ostringstream d;
    d << "TVA+MI >= TVA+I on mean victim deviation in " << mean->deviation_seeds << "/" << mean->total << " seeds";
    for (const auto& c : counts)
        if (c.victim != "mean") d << "; " << c.victim << " " << c.deviation_seeds << "/" << c.total;
    return {mean->deviation_seeds >= 7, d.str()};
}

Outcome temperature_sweep_check() {
    ExperimentPlan plan = default_plan();
    const std::vector<double> taus{1.0, 0.1, 0.07, 0.01};
    plan.sweep_decayed = true;
    const SweepResult s = temperature_sweep(plan, taus);
    std::ostringstream d;
    bool decayed = false;
    for (const auto& c : s.columns) {
        d << c.label << ":" << fmt(c.mean_asr) << " ";
        decayed |= c.schedule.mode == TemperatureSchedule::Mode::exponential;
    }
    d << "trend " << s.trend;
    const bool pass = s.columns.size() == taus.size() + 1 && decayed &&
                      (s.trend == "monotone_decreasing" || s.trend == "unimodal");
    return {pass, d.str()};
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = read_file(e.path());
    return files;
}

Outcome determinism() {
    tva::testing::TempDir dir("acceptance");
    write_file(dir / "config.json", dump_config(RunConfig{}));
    std::ostringstream log;
    std::map<std::string, std::string> runs[2];
    for (int k = 0; k < 2; ++k) {
        const fs::path run = dir / ("run" + std::to_string(k));
        if (cli::gen_data(dir / "config.json", run / "data", log) != cli::kOk ||
            cli::attack(dir / "config.json", run / "data", run / "perturb", log) != cli::kOk ||
            cli::eval(dir / "config.json", run / "data", run / "perturb", run / "eval", false, log) != cli::kOk) {
            return {false, "pipeline failed: " + log.str()};
        }
        runs[k] = snapshot(run);
    }
    std::size_t tensors = 0, differing = 0;
    for (const auto& [name, bytes] : runs[0]) {
        tensors += name.ends_with(".tvat");
        const auto it = runs[1].find(name);
        if (it == runs[1].end() || it->second != bytes) ++differing;
    }
    const bool has_report = runs[0].contains("eval/report.json") && runs[0].contains("eval/report.csv");
    const bool pass = differing == 0 && runs[0].size() == runs[1].size() && has_report && tensors > 0;
    return {pass, std::to_string(runs[0].size()) + " files (" + std::to_string(tensors) + " tensors), " +
                      std::to_string(differing) + " differ"};
}

Outcome efficiency() {
    const ExperimentPlan plan = default_plan();
    const Encoder surrogate(plan.surrogate);
    const VideoBatch x = attack_data(plan, 1);
    const std::map<std::string, std::size_t> expected{{"I-FGSM", 1}, {"MI-FGSM", 1},    {"DI-FGSM", 1},
                                                      {"TI-FGSM", 1}, {"SIM", 5},        {"TVA+I-FGSM", 1},
                                                      {"TVA+MI-FGSM", 1}};
    bool pass = true;
    std::ostringstream d;
    for (const auto& [name, want] : expected) {
        const auto it = std::find_if(plan.attacks.begin(), plan.attacks.end(),
                                     [&](const AttackConfig& a) { return a.name == name; });
        if (it == plan.attacks.end()) {
            pass = false;
            d << name << " missing; ";
            continue;
        }
        std::size_t calls = 0;
        const EmbedFn base = embed_fn(surrogate);
        const EmbedFn counted = [&](const DiffArray& v) {
            ++calls;
            return base(v);
        };
        const AttackResult r = run_attack(*it, counted, x);
        // One call embeds the clean batch; the rest are attack iterations.
        const std::size_t per_iter = (calls - 1) / it->iterations;
        const bool exact = calls == 1 + want * it->iterations;
        bool trace_ok = r.forward_passes.size() == it->iterations;
        for (auto f : r.forward_passes) trace_ok = trace_ok && f == want;
        const bool ok = exact && trace_ok && it->samples_per_iteration() == want;
        pass = pass && ok;
        d << name << "=" << per_iter << (ok ? " " : "(!) ");
    }
    return {pass, d.str()};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"gradients", gradients},
        {"gradient_asymmetry", gradient_asymmetry},
        {"deviation_identity", deviation_identity},
        {"feasibility", feasibility},
        {"loss_bounds", loss_bounds},
        {"ablation", ablation},
        {"momentum", momentum},
        {"temperature_sweep", temperature_sweep_check},
        {"determinism", determinism},
        {"efficiency", efficiency},
    };
    const std::string only = argc > 1 ? argv[1] : "";
    bool any = false, all_pass = true;
    for (const auto& [name, check] : criteria) {
        if (!only.empty() && only != name) continue;
        any = true;
        Outcome o;
        try {
            o = check();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
        all_pass = all_pass && o.pass;
    }
    if (!any) {
        std::cerr << "unknown criterion '" << only << "'\n";
        return 2;
    }
    return all_pass ? 0 : 1;
}
