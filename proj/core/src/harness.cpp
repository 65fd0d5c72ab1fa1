// SPDX-License-Identifier: Apache-2.0

#include "tva/harness.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "tva/rng.hpp"

namespace tva {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::RowVectorXd;

namespace {

Eigen::Map<const Matrix> as_matrix(const Affine& a) {
    return Eigen::Map<const Matrix>(a.weight.data(), static_cast<Eigen::Index>(a.in),
                                    static_cast<Eigen::Index>(a.out));
}

Eigen::Map<const RowVector> as_row(const Affine& a) {
    return Eigen::Map<const RowVector>(a.bias.data(), static_cast<Eigen::Index>(a.out));
}

std::vector<double> flatten_plus(std::span<const double> a, std::span<const double> b) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

double max_abs(std::span<const double> v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

double norm2(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

DiffArray rows_of(const DiffArray& z) { return reshape(z, {z.dim(0) * z.dim(1), z.dim(2)}); }

}  // namespace

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

void DataSpec::validate() const {
    if (videos == 0) throw std::invalid_argument("data: videos must be positive");
    if (frames < 2) throw std::invalid_argument("data: frames must be at least 2");
    if (classes < 2 || classes > 4) throw std::invalid_argument("data: classes must lie in [2, 4]");
    if (blob == 0) throw std::invalid_argument("data: blob must be positive");
    if (!(noise >= 0.0)) throw std::invalid_argument("data: noise must be >= 0");
    const std::size_t travel = frames - 1;
    if (blob + travel > frame.width || blob + travel > frame.height) {
        throw std::invalid_argument("data: a " + std::to_string(blob) + "px blob moving " + std::to_string(travel) +
                                    "px does not fit a " + std::to_string(frame.height) + "x" +
                                    std::to_string(frame.width) + " frame");
    }
}

VideoBatch gen_synthetic(const DataSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    const auto& f = spec.frame;
    const std::size_t t_count = spec.frames, b = spec.blob, travel = t_count - 1;

    VideoBatch batch;
    batch.videos = spec.videos;
    batch.frames = t_count;
    batch.frame = f;
    batch.values.assign(shape_size(batch.shape()), 0.0);
    batch.labels.resize(spec.videos);

    auto start_range = [&](std::size_t extent) {
        const std::size_t room = extent - b - travel;
        return std::min<std::size_t>(2, room);
    };
    auto center_range = [&](std::size_t extent) {
        const std::size_t mid = (extent - b) / 2;
        const std::size_t lo = mid >= 2 ? mid - 2 : 0;
        const std::size_t hi = std::min(extent - b, mid + 2);
        return std::pair{lo, hi};
    };

    for (std::size_t v = 0; v < spec.videos; ++v) {
        const int label = static_cast<int>(rng.index(spec.classes));
        batch.labels[v] = label;
        const bool horizontal = label < 2;
        const bool forward = label % 2 == 0;
        const std::size_t along = horizontal ? f.width : f.height;
        const std::size_t across = horizontal ? f.height : f.width;
        const std::size_t reach = start_range(along);
        std::size_t s = rng.index(reach + 1);
        if (!forward) s = along - b - s;
        const auto [lo, hi] = center_range(across);
        const std::size_t c = lo + rng.index(hi - lo + 1);

        for (std::size_t t = 0; t < t_count; ++t) {
            const std::size_t pos = forward ? s + t : s - t;
            const std::size_t y0 = horizontal ? c : pos;
            const std::size_t x0 = horizontal ? pos : c;
            const double bright = 0.6 + 0.3 * static_cast<double>(t) / static_cast<double>(travel);
            for (std::size_t ch = 0; ch < f.channels; ++ch)
                for (std::size_t y = 0; y < f.height; ++y)
                    for (std::size_t x = 0; x < f.width; ++x) {
                        const bool inside = y >= y0 && y < y0 + b && x >= x0 && x < x0 + b;
                        double value = inside ? bright : 0.1;
                        if (spec.noise > 0.0) value += spec.noise * rng.normal();
                        const std::size_t idx = (((v * t_count + t) * f.channels + ch) * f.height + y) * f.width + x;
                        batch.values[idx] = std::clamp(value, 0.0, 1.0);
                    }
        }
    }
    return batch;
}

// ---------------------------------------------------------------------------
// Heads
// ---------------------------------------------------------------------------

HeadFit fit_linear_head(const DiffArray& features, std::span<const int> labels, std::size_t classes, double ridge) {
    if (features.rank() != 2) throw ShapeError("fit_linear_head expects n x D features");
    const std::size_t n = features.dim(0), d = features.dim(1);
    if (labels.size() != n) throw std::invalid_argument("fit_linear_head: label count differs from rows");
    if (!(ridge >= 0.0)) throw std::invalid_argument("fit_linear_head: ridge must be >= 0");
    const auto ni = static_cast<Eigen::Index>(n), di = static_cast<Eigen::Index>(d);
    const auto ki = static_cast<Eigen::Index>(classes);

    Matrix a(ni, di + 1);
    Matrix y = Matrix::Zero(ni, ki);
    for (Eigen::Index r = 0; r < ni; ++r) {
        for (Eigen::Index c = 0; c < di; ++c) a(r, c) = features[static_cast<std::size_t>(r) * d + static_cast<std::size_t>(c)];
        a(r, di) = 1.0;
        const int label = labels[static_cast<std::size_t>(r)];
        if (label < 0 || static_cast<std::size_t>(label) >= classes) {
            throw std::invalid_argument("fit_linear_head: label " + std::to_string(label) + " out of range");
        }
        y(r, label) = 1.0;
    }
    const Matrix gram = a.transpose() * a;
    const Matrix rhs = a.transpose() * y;

    HeadFit fit;
    fit.ridge = ridge;
    auto solve = [&](double lambda) -> std::optional<Matrix> {
        Matrix m = gram;
        m.diagonal().array() += lambda;
        Eigen::LLT<Matrix> llt(m);
        if (llt.info() != Eigen::Success) return std::nullopt;
        Matrix w = llt.solve(rhs);
        if (!w.allFinite()) return std::nullopt;
        return w;
    };
    std::optional<Matrix> w = solve(ridge);
    if (!w && ridge == 0.0) {
        fit.ridge = 1e-6;
        fit.ridge_fallback = true;
        w = solve(fit.ridge);
    }
    if (!w) throw std::runtime_error("fit_linear_head: normal matrix is not positive definite");

    fit.weights = Affine::zeros(d, classes);
    for (Eigen::Index r = 0; r < di; ++r)
        for (Eigen::Index c = 0; c < ki; ++c)
            fit.weights.weight[static_cast<std::size_t>(r) * classes + static_cast<std::size_t>(c)] = (*w)(r, c);
    for (Eigen::Index c = 0; c < ki; ++c) fit.weights.bias[static_cast<std::size_t>(c)] = (*w)(di, c);
    fit.train_accuracy = accuracy(fit.weights.apply(features), labels);
    return fit;
}

std::vector<int> argmax_rows(const DiffArray& logits) {
    if (logits.rank() != 2) throw ShapeError("argmax_rows expects a matrix");
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    std::vector<int> out(n);
    for (std::size_t r = 0; r < n; ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < k; ++c)
            if (logits[r * k + c] > logits[r * k + best]) best = c;
        out[r] = static_cast<int>(best);
    }
    return out;
}

double accuracy(const DiffArray& logits, std::span<const int> labels) {
    const auto pred = argmax_rows(logits);
    if (pred.size() != labels.size()) throw std::invalid_argument("accuracy: label count differs from rows");
    if (pred.empty()) return 0.0;
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i] ? 1 : 0;
    return static_cast<double>(hit) / static_cast<double>(pred.size());
}

TrainedVictim train_head(const Victim& victim, const VideoBatch& data, std::size_t classes, double ridge) {
    data.validate();
    if (data.labels.size() != data.videos) throw std::invalid_argument("train_head needs labeled data");
    if (const auto* b = std::get_if<FormB>(&victim.form()); b && b->classes != classes) {
        throw std::invalid_argument("train_head: victim head has " + std::to_string(b->classes) + " classes, data has " +
                                    std::to_string(classes));
    }
    const DiffArray features = victim.pooled_embeddings(data.as_array());
    HeadFit fit = fit_linear_head(features, data.labels, classes, ridge);

    TaskHead head;
    if (victim.is_form_b()) {
        head.base = victim.head().base;
        head.delta = fit.weights;
        for (std::size_t i = 0; i < head.delta.weight.size(); ++i) head.delta.weight[i] -= head.base.weight[i];
        for (std::size_t i = 0; i < head.delta.bias.size(); ++i) head.delta.bias[i] -= head.base.bias[i];
    } else {
        head.base = fit.weights;
        head.delta = Affine::zeros(fit.weights.in, fit.weights.out);
    }
    return {victim.with_head(std::move(head)), fit};
}

double attack_success_rate(const DiffArray& clean_logits, const DiffArray& adv_logits, std::span<const int> labels) {
    const auto clean = argmax_rows(clean_logits);
    const auto adv = argmax_rows(adv_logits);
    if (clean.size() != labels.size() || adv.size() != labels.size()) {
        throw std::invalid_argument("attack_success_rate: row counts differ");
    }
    std::size_t correct = 0, flipped = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (clean[i] != labels[i]) continue;
        ++correct;
        if (adv[i] != clean[i]) ++flipped;
    }
    return correct == 0 ? 0.0 : static_cast<double>(flipped) / static_cast<double>(correct);
}

// ---------------------------------------------------------------------------
// Plans
// ---------------------------------------------------------------------------

LossWeights ablation_weights(const std::string& mask) {
    LossWeights w{0.0, 0.0, 0.0};
    std::stringstream ss(mask);
    std::string term;
    bool any = false;
    while (std::getline(ss, term, '+')) {
        if (term == "L1") w.l1 = 1.0;
        else if (term == "Bi-con") w.bicon = 1.0;
        else if (term == "TC") w.tc = 1.0;
        else throw std::invalid_argument("unknown ablation term '" + term + "' in '" + mask + "'");
        any = true;
    }
    if (!any) throw std::invalid_argument("empty ablation mask");
    return w;
}

std::vector<AttackConfig> ExperimentPlan::expanded_attacks() const {
    std::vector<AttackConfig> out = attacks;
    for (const auto& mask : ablation) {
        AttackConfig cfg = ablation_base;
        cfg.name = "ablation:" + mask;
        cfg.weights = ablation_weights(mask);
        out.push_back(std::move(cfg));
    }
    return out;
}

void ExperimentPlan::validate() const {
    data.validate();
    surrogate.validate();
    if (!(surrogate.frame == data.frame)) throw std::invalid_argument("plan: surrogate frame differs from data frame");
    if (victims.empty()) throw std::invalid_argument("plan: at least one victim is required");
    if (seeds.empty()) throw std::invalid_argument("plan: at least one seed is required");
    if (train_videos == 0) throw std::invalid_argument("plan: train_videos must be positive");
    std::set<std::string> names;
    if (include_surrogate) names.insert("surrogate");
    for (const auto& v : victims) {
        if (v.name.empty()) throw std::invalid_argument("plan: victim name must be non-empty");
        if (!names.insert(v.name).second) throw std::invalid_argument("plan: duplicate victim name '" + v.name + "'");
        if (const auto* b = std::get_if<FormB>(&v.form); b && b->classes != data.classes) {
            throw std::invalid_argument("plan: victim '" + v.name + "' has " + std::to_string(b->classes) +
                                        " classes but data has " + std::to_string(data.classes));
        }
    }
    names.clear();
    for (const auto& a : expanded_attacks()) {
        if (a.name.empty()) throw std::invalid_argument("plan: attack name must be non-empty");
        if (!names.insert(a.name).second) throw std::invalid_argument("plan: duplicate attack name '" + a.name + "'");
        a.validate();
    }
    for (double tau : sweep_taus) {
        if (!(tau > 0.0)) throw std::invalid_argument("plan: sweep temperatures must be positive");
    }
    sweep_decay.validate();
    std::set<std::uint64_t> unique(seeds.begin(), seeds.end());
    if (unique.size() != seeds.size()) throw std::invalid_argument("plan: duplicate seeds");
}

ExperimentPlan default_plan() {
    ExperimentPlan plan;
    plan.data.seed = 7;
    plan.surrogate.seed = 11;
    plan.victims = {
        {"FormA@0.1", FormA{0.1}, 101},
        {"FormA@0.5", FormA{0.5}, 102},
        {"FormB", FormB{4, HeadInit::random, 0.0}, 103},
    };

    AttackConfig profile;
    profile.epsilon = 8.0 / 255.0;
    profile.alpha = 2.0 / 255.0;
    profile.iterations = 4;
    profile.schedule = TemperatureSchedule::constant(0.01);

    auto make = [&](std::string name, BaseOptimizer base, LossWeights w, bool di, bool ti, bool si) {
        AttackConfig c = profile;
        c.name = std::move(name);
        c.base = base;
        c.weights = w;
        c.di = di;
        c.ti = ti;
        c.si = si;
        return c;
    };
    const LossWeights l1{1.0, 0.0, 0.0};
    const LossWeights full{1.0, 1.0, 1.0};
    plan.attacks = {
        make("I-FGSM", BaseOptimizer::i_fgsm, l1, false, false, false),
        make("MI-FGSM", BaseOptimizer::mi_fgsm, l1, false, false, false),
        make("DI-FGSM", BaseOptimizer::i_fgsm, l1, true, false, false),
        make("TI-FGSM", BaseOptimizer::i_fgsm, l1, false, true, false),
        make("SIM", BaseOptimizer::i_fgsm, l1, false, false, true),
        make("TVA+I-FGSM", BaseOptimizer::i_fgsm, full, false, false, false),
        make("TVA+MI-FGSM", BaseOptimizer::mi_fgsm, full, false, false, false),
    };
    plan.ablation = {"L1", "L1+Bi-con", "L1+Bi-con+TC"};
    plan.ablation_base = make("TVA+MI-FGSM", BaseOptimizer::mi_fgsm, full, false, false, false);
    plan.sweep_taus = {1.0, 0.1, 0.07, 0.01};
    plan.seeds = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    return plan;
}

VideoBatch attack_data(const ExperimentPlan& plan, std::uint64_t seed) {
    DataSpec spec = plan.data;
    spec.seed = mix_seed(plan.data.seed, seed);
    return gen_synthetic(spec);
}

VideoBatch training_data(const ExperimentPlan& plan) {
    DataSpec spec = plan.data;
    spec.videos = plan.train_videos;
    spec.seed = mix_seed(plan.data.seed, 0x7ea1);
    return gen_synthetic(spec);
}

Zoo build_zoo(const ExperimentPlan& plan) { return build_zoo(plan, training_data(plan)); }

Zoo build_zoo(const ExperimentPlan& plan, const VideoBatch& train) {
    plan.validate();
    Zoo zoo;
    zoo.surrogate = std::make_shared<const Encoder>(plan.surrogate);
    auto add = [&](const std::string& name, const Victim& v) {
        auto trained = train_head(v, train, plan.data.classes, plan.head_ridge);
        zoo.members.push_back({name, std::move(trained.victim), trained.fit});
    };
    if (plan.include_surrogate) add("surrogate", Victim(zoo.surrogate, FormA{0.0}, 0));
    for (const auto& spec : plan.victims) add(spec.name, derive_victim(zoo.surrogate, spec.form, spec.seed));
    return zoo;
}

// ---------------------------------------------------------------------------
// Transfer evaluation
// ---------------------------------------------------------------------------

std::vector<AttackRun> run_attacks(const ExperimentPlan& plan, const Zoo& zoo, const VideoBatch& data,
                                   std::uint64_t seed) {
    std::vector<AttackRun> runs;
    for (AttackConfig cfg : plan.expanded_attacks()) {
        AttackRun run;
        run.attack = cfg.name;
        run.seed = seed;
        run.samples_per_iteration = cfg.samples_per_iteration();
        cfg.seed = mix_seed(cfg.seed, seed);
        try {
            run.result = run_attack(cfg, *zoo.surrogate, data);
        } catch (const std::exception& e) {
            run.error = e.what();
        }
        runs.push_back(std::move(run));
    }
    return runs;
}

namespace {

double final_tau(const AttackConfig& cfg) {
    return cfg.schedule.value(cfg.iterations == 0 ? 0 : cfg.iterations - 1, cfg.iterations);
}

}  // namespace

std::vector<CellResult> evaluate_cells(const ExperimentPlan& plan, const Zoo& zoo, const VideoBatch& data,
                                       std::uint64_t seed, const std::vector<AttackRun>& runs) {
    const auto configs = plan.expanded_attacks();
    const DiffArray clean = data.as_array();
    const EmbedFn surrogate = embed_fn(*zoo.surrogate);
    std::vector<CellResult> cells;
    for (const auto& run : runs) {
        const auto cfg = std::find_if(configs.begin(), configs.end(), [&](const auto& c) { return c.name == run.attack; });
        for (const auto& member : zoo.members) {
            CellResult cell{run.attack, member.name, seed, 0.0, 0.0, 0.0, run.error};
            if (cell.error) {
                cells.push_back(std::move(cell));
                continue;
            }
            try {
                if (cfg == configs.end()) throw std::invalid_argument("attack '" + run.attack + "' is not in the plan");
                const auto& delta = run.result.delta.values;
                if (delta.size() != data.values.size()) {
                    throw ShapeError("perturbation holds " + std::to_string(delta.size()) + " values, data holds " +
                                     std::to_string(data.values.size()));
                }
                const DiffArray adv(data.shape(), flatten_plus(data.values, delta));
                const DiffArray zc = member.victim.encode(clean);
                const DiffArray za = member.victim.encode(adv);
                double dev = 0.0;
                for (std::size_t i = 0; i < zc.size(); ++i) dev += std::abs(za[i] - zc[i]);
                cell.deviation = dev / static_cast<double>(data.videos);
                cell.asr = attack_success_rate(member.victim.head_forward(clean), member.victim.head_forward(adv),
                                               data.labels);
                cell.grad_cosine = gradient_mismatch(surrogate, embed_fn(member.victim), data, delta, final_tau(*cfg),
                                                     cfg->weights);
            } catch (const std::exception& e) {
                cell.error = e.what();
            }
            cells.push_back(std::move(cell));
        }
    }
    return cells;
}

TransferReport zoo_report(const Zoo& zoo, const VideoBatch& first_batch) {
    TransferReport report;
    for (const auto& m : zoo.members) {
        report.heads.push_back({m.name, m.fit.ridge, m.fit.ridge_fallback, m.fit.train_accuracy});
        if (m.fit.ridge_fallback) {
            report.notes.push_back("head for '" + m.name + "': singular normal matrix, ridge 1e-6 applied");
        }
        report.theorem1.push_back({m.name, verify_theorem1(m.victim, first_batch)});
    }
    return report;
}

TransferReport evaluate_transfer(const ExperimentPlan& plan) {
    const Zoo zoo = build_zoo(plan);
    TransferReport report;
    for (std::size_t s = 0; s < plan.seeds.size(); ++s) {
        const std::uint64_t seed = plan.seeds[s];
        const VideoBatch data = attack_data(plan, seed);
        if (s == 0) report = zoo_report(zoo, data);
        auto runs = run_attacks(plan, zoo, data, seed);
        auto cells = evaluate_cells(plan, zoo, data, seed, runs);
        report.cells.insert(report.cells.end(), cells.begin(), cells.end());
        for (auto& r : runs) report.runs.push_back(std::move(r));
    }
    return report;
}

namespace {

template <typename Field>
std::optional<double> mean_of(const TransferReport& r, const std::string& attack, const std::string& victim,
                              std::optional<std::uint64_t> seed, Field field) {
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& c : r.cells) {
        if (c.error) continue;
        if (!attack.empty() && c.attack != attack) continue;
        if (!victim.empty() && c.victim != victim) continue;
        if (seed && c.seed != *seed) continue;
        total += field(c);
        ++count;
    }
    if (count == 0) return std::nullopt;
    return total / static_cast<double>(count);
}

}  // namespace

std::optional<double> mean_deviation(const TransferReport& r, const std::string& attack, const std::string& victim,
                                     std::optional<std::uint64_t> seed) {
    return mean_of(r, attack, victim, seed, [](const CellResult& c) { return c.deviation; });
}

std::optional<double> mean_asr(const TransferReport& r, const std::string& attack, const std::string& victim,
                               std::optional<std::uint64_t> seed) {
    return mean_of(r, attack, victim, seed, [](const CellResult& c) { return c.asr; });
}

namespace {

std::vector<OrderingCount> ordering(const TransferReport& report, const ExperimentPlan& plan,
                                    const std::vector<std::string>& chain, bool with_mean) {
    std::vector<OrderingCount> out;
    auto holds = [&](auto metric, const std::string& victim, std::uint64_t seed) {
        std::optional<double> prev;
        for (const auto& attack : chain) {
            const auto v = metric(report, attack, victim, seed);
            if (!v) return false;
            if (prev && *v > *prev) return false;
            prev = v;
        }
        return true;
    };
    auto count = [&](const std::string& label, const std::string& victim) {
        OrderingCount c{label, 0, 0, plan.seeds.size()};
        for (auto seed : plan.seeds) {
            c.deviation_seeds += holds(mean_deviation, victim, seed) ? 1 : 0;
            c.asr_seeds += holds(mean_asr, victim, seed) ? 1 : 0;
        }
        return c;
    };
    for (const auto& v : plan.victims) out.push_back(count(v.name, v.name));
    if (with_mean) {
        // Mean over victims, surrogate excluded.
        OrderingCount c{"mean", 0, 0, plan.seeds.size()};
        for (auto seed : plan.seeds) {
            auto victim_mean = [&](auto metric, const std::string& attack) -> std::optional<double> {
                double total = 0.0;
                for (const auto& v : plan.victims) {
                    const auto m = metric(report, attack, v.name, seed);
                    if (!m) return std::nullopt;
                    total += *m;
                }
                return total / static_cast<double>(plan.victims.size());
            };
            auto chain_holds = [&](auto metric) {
                std::optional<double> prev;
                for (const auto& attack : chain) {
                    const auto v = victim_mean(metric, attack);
                    if (!v || (prev && *v > *prev)) return false;
                    prev = v;
                }
                return true;
            };
            c.deviation_seeds += chain_holds(mean_deviation) ? 1 : 0;
            c.asr_seeds += chain_holds(mean_asr) ? 1 : 0;
        }
        out.push_back(c);
    }
    return out;
}

bool has_attack(const ExperimentPlan& plan, const std::string& name) {
    const auto all = plan.expanded_attacks();
    return std::any_of(all.begin(), all.end(), [&](const auto& a) { return a.name == name; });
}

}  // namespace

std::vector<OrderingCount> ablation_ordering(const TransferReport& report, const ExperimentPlan& plan) {
    const std::vector<std::string> chain{"ablation:L1+Bi-con+TC", "ablation:L1+Bi-con", "ablation:L1"};
    for (const auto& a : chain)
        if (!has_attack(plan, a)) return {};
    return ordering(report, plan, chain, false);
}

std::vector<OrderingCount> momentum_ordering(const TransferReport& report, const ExperimentPlan& plan) {
    const std::vector<std::string> chain{"TVA+MI-FGSM", "TVA+I-FGSM"};
    for (const auto& a : chain)
        if (!has_attack(plan, a)) return {};
    return ordering(report, plan, chain, true);
}

// ---------------------------------------------------------------------------
// Deviation identity
// ---------------------------------------------------------------------------

namespace {

std::vector<double> cotangent(const DiffArray& output, const OutputLoss& loss) {
    Tape tape;
    const DiffArray leaf = tape.leaf(output.detached());
    const DiffArray value = loss(leaf);
    return tape.backward(value).wrt(leaf).data();
}

using Forward = std::function<DiffArray(const DiffArray& input)>;

std::vector<double> input_gradient(const DiffArray& input, const Forward& forward, const DiffArray& cot) {
    Tape tape;
    const DiffArray leaf = tape.leaf(input.detached());
    const DiffArray out = forward(leaf);
    return tape.backward(dot(cot, out)).wrt(leaf).data();
}

// Per-layer Jacobian of act(v W + b) w.r.t. v, as an out x in matrix.
Matrix block_jacobian(const Affine& a, Activation act, const RowVector& v) {
    const RowVector pre = v * as_matrix(a) + as_row(a);
    Matrix j = as_matrix(a).transpose();
    if (act == Activation::tanh) {
        for (Eigen::Index r = 0; r < j.rows(); ++r) {
            const double t = std::tanh(pre(r));
            j.row(r) *= 1.0 - t * t;
        }
    }
    return j;
}

RowVector block_value(const Affine& a, Activation act, const RowVector& v) {
    RowVector pre = v * as_matrix(a) + as_row(a);
    if (act == Activation::tanh) pre = pre.array().tanh().matrix();
    return pre;
}

Theorem1Report compare(std::string form, std::span<const double> lhs, std::span<const double> rhs) {
    Theorem1Report r;
    r.form = std::move(form);
    double diff = 0.0;
    for (std::size_t i = 0; i < lhs.size(); ++i) diff = std::max(diff, std::abs(lhs[i] - rhs[i]));
    r.abs_residual = diff;
    r.lhs_norm = max_abs(lhs);
    r.rhs_norm = max_abs(rhs);
    const double scale = std::max(r.lhs_norm, r.rhs_norm);
    r.residual = scale > 0.0 ? diff / scale : diff;
    return r;
}

Matrix frames_matrix(const VideoBatch& x) {
    const auto rows = static_cast<Eigen::Index>(x.rows());
    const auto cols = static_cast<Eigen::Index>(x.frame.size());
    return Eigen::Map<const Matrix>(x.values.data(), rows, cols);
}

Matrix pooling_matrix(const Encoder& e) {
    const auto& p = e.pooling();
    return Eigen::Map<const Matrix>(p.data().data(), static_cast<Eigen::Index>(p.dim(0)),
                                    static_cast<Eigen::Index>(p.dim(1)));
}

}  // namespace

Theorem1Report verify_theorem1_form_a(const Victim& victim, const VideoBatch& x, const OutputLoss& loss) {
    if (!victim.is_form_a()) throw std::invalid_argument("Form (a) check needs a residual-adapted victim");
    x.validate();
    const Encoder& base = victim.backbone();
    base.check_input(x.shape());
    const std::size_t rows = x.rows(), pixels = x.frame.size();
    const DiffArray frames({rows, pixels}, x.values);

    const DiffArray z_victim = victim.encode_frames(frames);
    const DiffArray cot({rows, z_victim.dim(1)}, cotangent(z_victim, loss));
    const auto gv = input_gradient(frames, [&](const DiffArray& f) { return victim.encode_frames(f); }, cot);
    const auto gs = input_gradient(frames, [&](const DiffArray& f) { return base.encode_frames(f); }, cot);
    std::vector<double> lhs(gv.size());
    for (std::size_t i = 0; i < gv.size(); ++i) lhs[i] = gv[i] - gs[i];

    const Matrix xm = frames_matrix(x);
    const Matrix pool = pooling_matrix(base);
    const Matrix proj_t = as_matrix(base.projection()).transpose();
    const Activation act = base.spec().activation;
    const Eigen::Map<const Matrix> cm(cot.data().data(), static_cast<Eigen::Index>(rows),
                                 static_cast<Eigen::Index>(cot.dim(1)));

    std::vector<double> rhs(lhs.size());
    for (Eigen::Index r = 0; r < static_cast<Eigen::Index>(rows); ++r) {
        RowVector v = xm.row(r) * pool;
        Matrix adapted = Matrix::Identity(v.size(), v.size());
        Matrix plain = adapted;
        for (std::size_t i = 0; i < base.blocks().size(); ++i) {
            const Affine& block = base.blocks()[i];
            const Affine& resid = victim.residuals()[i];
            const Matrix jf = block_jacobian(block, act, v);
            const Matrix jh = as_matrix(resid).transpose();
            adapted = (jf + jh) * adapted;
            plain = jf * plain;
            v = block_value(block, act, v) + v * as_matrix(resid) + as_row(resid);
        }
        const RowVector g = cm.row(r) * proj_t * (adapted - plain) * pool.transpose();
        for (Eigen::Index c = 0; c < g.size(); ++c) rhs[static_cast<std::size_t>(r) * pixels + static_cast<std::size_t>(c)] = g(c);
    }
    return compare("a", lhs, rhs);
}

Theorem1Report verify_theorem1_form_b(const Victim& victim, const VideoBatch& x, const OutputLoss& loss) {
    if (!victim.has_head()) throw std::invalid_argument("Form (b) check needs a victim with a task head");
    if (!victim.is_form_b()) throw std::invalid_argument("Form (b) check needs a frozen-backbone victim");
    x.validate();
    const Encoder& base = victim.backbone();
    const TaskHead& head = victim.head();
    const DiffArray video = x.as_array();

    const DiffArray logits = victim.head_forward(video);
    const DiffArray cot(logits.shape(), cotangent(logits, loss));
    const auto g_adapted = input_gradient(video, [&](const DiffArray& v) { return victim.head_forward(v); }, cot);
    const auto g_base = input_gradient(video, [&](const DiffArray& v) { return victim.head_forward_base(v); }, cot);
    std::vector<double> lhs(g_adapted.size());
    for (std::size_t i = 0; i < lhs.size(); ++i) lhs[i] = g_adapted[i] - g_base[i];

    const Matrix xm = frames_matrix(x);
    const Matrix pool = pooling_matrix(base);
    const Matrix proj_t = as_matrix(base.projection()).transpose();
    const Matrix dh_t = as_matrix(head.delta).transpose();
    const Activation act = base.spec().activation;
    const std::size_t t_count = x.frames, pixels = x.frame.size(), k = logits.dim(1);
    const double inv_t = 1.0 / static_cast<double>(t_count);

    std::vector<double> rhs(lhs.size());
    for (std::size_t v = 0; v < x.videos; ++v) {
        const Eigen::Map<const RowVector> gy(cot.data().data() + v * k, static_cast<Eigen::Index>(k));
        const RowVector gz = gy * dh_t;
        for (std::size_t t = 0; t < t_count; ++t) {
            const auto r = static_cast<Eigen::Index>(v * t_count + t);
            RowVector h = xm.row(r) * pool;
            Matrix chain = Matrix::Identity(h.size(), h.size());
            for (const auto& block : base.blocks()) {
                chain = block_jacobian(block, act, h) * chain;
                h = block_value(block, act, h);
            }
            const Matrix jf = proj_t * chain * pool.transpose();
            const RowVector g = inv_t * gz * jf;
            for (Eigen::Index c = 0; c < g.size(); ++c) {
                rhs[static_cast<std::size_t>(r) * pixels + static_cast<std::size_t>(c)] = g(c);
            }
        }
    }
    return compare("b", lhs, rhs);
}

DiffArray cross_entropy(const DiffArray& logits, std::span<const int> labels) {
    if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
        throw ShapeError("cross_entropy: " + shape_to_string(logits.shape()) + " logits for " +
                         std::to_string(labels.size()) + " labels");
    }
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    const DiffArray lp = log_softmax(logits, 1);
    std::vector<double> pick(n * k, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= k) {
            throw std::invalid_argument("cross_entropy: label out of range");
        }
        pick[r * k + static_cast<std::size_t>(labels[r])] = -1.0 / static_cast<double>(n);
    }
    return dot(DiffArray({n, k}, std::move(pick)), lp);
}

Theorem1Report verify_theorem1(const Victim& victim, const VideoBatch& x) {
    if (victim.is_form_b()) {
        std::vector<int> labels = x.labels;
        if (labels.empty()) labels = argmax_rows(victim.head_forward(x.as_array()));
        return verify_theorem1_form_b(victim, x, [labels](const DiffArray& y) { return cross_entropy(y, labels); });
    }
    const DiffArray frames({x.rows(), x.frame.size()}, x.values);
    const DiffArray anchors = victim.backbone().encode_frames(frames);
    const FrameGrouping grouping{x.videos, x.frames};
    return verify_theorem1_form_a(victim, x, [anchors, grouping](const DiffArray& z) {
        return total_loss(anchors, z, grouping, 0.1, LossWeights{});
    });
}

// ---------------------------------------------------------------------------
// Gradient asymmetry
// ---------------------------------------------------------------------------

Theorem2Report verify_theorem2(const DiffArray& z, const DiffArray& z_adv, double tau) {
    if (z.rank() != 2 || z.shape() != z_adv.shape()) throw ShapeError("verify_theorem2: shape mismatch");
    const std::size_t n = z.dim(0), d = z.dim(1);
    if (n < 2) throw std::invalid_argument("verify_theorem2 needs at least two rows");
    const double inv_n = 1.0 / static_cast<double>(n);

    auto grad_wrt_adv = [&](const std::function<DiffArray(const DiffArray&)>& f) {
        Tape tape;
        const DiffArray leaf = tape.leaf(z_adv.detached());
        return tape.backward(f(leaf)).wrt(leaf).data();
    };
    auto rel = [](std::span<const double> a, std::span<const double> b) {
        double diff = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) diff += (a[i] - b[i]) * (a[i] - b[i]);
        diff = std::sqrt(diff);
        const double scale = norm2(b);
        return scale > 0.0 ? diff / scale : diff;
    };

    const auto full_c2a = grad_wrt_adv([&](const DiffArray& a) { return contrastive_clean_to_adv(z, a, tau).loss; });
    const auto full_a2c = grad_wrt_adv([&](const DiffArray& a) { return contrastive_adv_to_clean(z, a, tau).loss; });
    const auto full_bicon = grad_wrt_adv([&](const DiffArray& a) { return bicon_loss(z, a, tau); });

    Theorem2Report r;
    for (std::size_t i = 0; i < full_bicon.size(); ++i) {
        r.bicon_identity_error =
            std::max(r.bicon_identity_error, std::abs(full_bicon[i] - 0.5 * (full_c2a[i] + full_a2c[i])));
    }

    r.min_asymmetry = r.min_orthogonal_asymmetry = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = [&](const std::vector<double>& g) {
            return std::vector<double>(g.begin() + static_cast<std::ptrdiff_t>(i * d),
                                       g.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
        };
        const auto c2a = prefactor_clean_to_adv(z, z_adv, tau, i);
        const auto a2c = prefactor_adv_to_clean(z, z_adv, tau, i);
        const auto oracle_c2a = row(grad_wrt_adv([&](const DiffArray& a) {
            return scale(contrastive_anchor_term_clean_to_adv(z, a, tau, i), inv_n);
        }));
        const auto oracle_a2c = row(grad_wrt_adv([&](const DiffArray& a) {
            return scale(contrastive_anchor_term_adv_to_clean(z, a, tau, i), inv_n);
        }));
        r.clean_to_adv_error = std::max(r.clean_to_adv_error, rel(c2a, oracle_c2a));
        r.adv_to_clean_error = std::max(r.adv_to_clean_error, rel(a2c.vector, oracle_a2c));

        double wsum = 0.0;
        for (double q : a2c.weights) wsum += q;
        r.weight_sum_error = std::max(r.weight_sum_error, std::abs(wsum - 1.0));

        std::vector<double> gap(d), zi(d), cross(d);
        const auto full_row = row(full_c2a);
        for (std::size_t k = 0; k < d; ++k) {
            gap[k] = c2a[k] - a2c.vector[k];
            zi[k] = z[i * d + k];
            cross[k] = full_row[k] - c2a[k];
        }
        const double denom = std::max(norm2(c2a), 1e-12);
        const double asym = norm2(gap) / denom;
        r.asymmetry.push_back(asym);
        r.min_asymmetry = std::min(r.min_asymmetry, asym);

        const double zz = std::inner_product(zi.begin(), zi.end(), zi.begin(), 0.0);
        if (zz > 0.0) {
            const double proj = std::inner_product(gap.begin(), gap.end(), zi.begin(), 0.0) / zz;
            for (std::size_t k = 0; k < d; ++k) gap[k] -= proj * zi[k];
        }
        r.min_orthogonal_asymmetry = std::min(r.min_orthogonal_asymmetry, norm2(gap) / denom);
        r.cross_anchor_norm = std::max(r.cross_anchor_norm, norm2(cross));
    }
    return r;
}

double gradient_mismatch(const EmbedFn& surrogate, const EmbedFn& victim, const VideoBatch& x,
                         std::span<const double> delta, double tau, const LossWeights& weights) {
    if (delta.size() != x.values.size()) throw ShapeError("gradient_mismatch: perturbation size differs from data");
    const FrameGrouping grouping{x.videos, x.frames};
    const DiffArray clean = x.as_array();
    const DiffArray adv(x.shape(), flatten_plus(x.values, delta));
    auto grad = [&](const EmbedFn& model) {
        const DiffArray anchors = rows_of(model(clean)).detached();
        const InputLoss objective = embedding_objective(model, anchors, grouping, tau, weights);
        Tape tape;
        const DiffArray leaf = tape.leaf(adv);
        return tape.backward(objective(leaf)).wrt(leaf).data();
    };
    const auto a = grad(surrogate);
    const auto b = grad(victim);
    const double num = std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
    const double den = std::max(norm2(a), 1e-12) * std::max(norm2(b), 1e-12);
    return std::clamp(num / den, -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// Verification suite
// ---------------------------------------------------------------------------

bool VerificationReport::pass() const {
    for (const auto* group : {&form_a, &form_b, &theorem2})
        for (const auto& c : *group)
            if (!c.pass) return false;
    return true;
}

const CheckResult* VerificationReport::worst() const {
    const CheckResult* worst = nullptr;
    double worst_ratio = -1.0;
    for (const auto* group : {&form_a, &form_b, &theorem2})
        for (const auto& c : *group) {
            if (c.pass) continue;
            double ratio = std::numeric_limits<double>::infinity();
            if (c.relation == "<=" && c.tolerance > 0.0) ratio = c.value / c.tolerance;
            if (c.relation == ">" && c.value > 0.0) ratio = c.tolerance / c.value;
            if (ratio > worst_ratio) {
                worst_ratio = ratio;
                worst = &c;
            }
        }
    return worst;
}

namespace {

CheckResult at_most(std::string name, double value, double tolerance) {
    return {std::move(name), value, tolerance, "<=", value <= tolerance};
}

CheckResult above(std::string name, double value, double threshold) {
    return {std::move(name), value, threshold, ">", value > threshold};
}

CheckResult info(std::string name, double value) { return {std::move(name), value, 0.0, "info", true}; }

EncoderSpec toy_spec(Activation act, std::uint64_t seed) {
    EncoderSpec s;
    s.blocks = 2;
    s.hidden = 8;
    s.embed_dim = 4;
    s.activation = act;
    s.frame = FrameShape{1, 8, 8};
    s.seed = seed;
    return s;
}

VideoBatch random_batch(const FrameShape& frame, std::size_t videos, std::size_t frames, std::size_t classes, Rng& rng) {
    VideoBatch x;
    x.videos = videos;
    x.frames = frames;
    x.frame = frame;
    x.values.resize(shape_size(x.shape()));
    for (auto& v : x.values) v = rng.uniform();
    for (std::size_t i = 0; i < videos; ++i) x.labels.push_back(static_cast<int>(rng.index(classes)));
    return x;
}

DiffArray gaussian(std::size_t n, std::size_t d, double scale, Rng& rng) {
    std::vector<double> v(n * d);
    for (auto& e : v) e = scale * rng.normal();
    return DiffArray({n, d}, std::move(v));
}

}  // namespace

VerificationReport run_verification(const VerifySettings& settings) {
    VerificationReport report;
    Rng rng(mix_seed(settings.seed, 0x7e51));

    double a_linear = 0.0, a_tanh = 0.0, a_zero = 0.0;
    double b_linear = 0.0, b_tanh = 0.0, b_zero = 0.0;
    for (std::size_t trial = 0; trial < settings.theorem1_trials; ++trial) {
        const std::uint64_t seed = mix_seed(settings.seed, trial);
        for (const Activation act : {Activation::identity, Activation::tanh}) {
            auto enc = std::make_shared<const Encoder>(toy_spec(act, seed));
            Rng data_rng(mix_seed(seed, 0xda7a));
            const VideoBatch x = random_batch(enc->spec().frame, 2, 3, 4, data_rng);
            const bool linear = act == Activation::identity;

            const auto fa = verify_theorem1(Victim(enc, FormA{0.3}, seed), x);
            (linear ? a_linear : a_tanh) = std::max(linear ? a_linear : a_tanh, fa.residual);
            const auto fa0 = verify_theorem1(Victim(enc, FormA{0.0}, seed), x);
            a_zero = std::max({a_zero, fa0.lhs_norm, fa0.rhs_norm});

            const auto fb = verify_theorem1(Victim(enc, FormB{4, HeadInit::random, 0.3}, seed), x);
            (linear ? b_linear : b_tanh) = std::max(linear ? b_linear : b_tanh, fb.residual);
            const auto fb0 = verify_theorem1(Victim(enc, FormB{4, HeadInit::random, 0.0}, seed), x);
            b_zero = std::max({b_zero, fb0.lhs_norm, fb0.rhs_norm});
        }
    }
    report.form_a.push_back(at_most("linear_residual", a_linear, settings.linear_tolerance));
    report.form_a.push_back(at_most("zero_delta_deviation", a_zero, 0.0));
    report.form_a.push_back(info("tanh_residual", a_tanh));
    report.form_b.push_back(at_most("linear_residual", b_linear, settings.linear_tolerance));
    report.form_b.push_back(at_most("tanh_residual_clean_point", b_tanh, settings.tanh_tolerance));
    report.form_b.push_back(at_most("zero_delta_deviation", b_zero, 0.0));

    double a2c = 0.0, c2a = 0.0, bicon = 0.0, wsum = 0.0, cross = 0.0;
    double asym = std::numeric_limits<double>::infinity();
    const double taus[] = {1.0, 0.1};
    for (std::size_t trial = 0; trial < settings.theorem2_trials; ++trial) {
        const std::size_t n = 2 + rng.index(7), d = 2 + rng.index(15);
        const double tau = taus[trial % 2];
        const double s = 1.0 / std::sqrt(static_cast<double>(d));
        const DiffArray z = gaussian(n, d, s, rng), za = gaussian(n, d, s, rng);
        const auto r = verify_theorem2(z, za, tau);
        a2c = std::max(a2c, r.adv_to_clean_error);
        c2a = std::max(c2a, r.clean_to_adv_error);
        bicon = std::max(bicon, r.bicon_identity_error);
        wsum = std::max(wsum, r.weight_sum_error);
        cross = std::max(cross, r.cross_anchor_norm);

        const DiffArray z4 = gaussian(4, 8, 1.0 / std::sqrt(8.0), rng), za4 = gaussian(4, 8, 1.0 / std::sqrt(8.0), rng);
        asym = std::min(asym, verify_theorem2(z4, za4, 0.1).min_asymmetry);
    }
    for (const double tau : {1.0, 0.1, 0.01, 0.005}) {
        const auto r = verify_theorem2(gaussian(6, 8, 1.0, rng), gaussian(6, 8, 1.0, rng), tau);
        wsum = std::max(wsum, r.weight_sum_error);
    }

    // All rows on one line through the origin: v_c2a and v_a2c become parallel.
    std::vector<double> col(4 * 8);
    std::vector<double> dir(8);
    for (auto& e : dir) e = rng.normal();
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t k = 0; k < 8; ++k) col[i * 8 + k] = (0.5 + 0.25 * static_cast<double>(i)) * dir[k];
    const DiffArray colinear({4, 8}, col);
    const auto rc = verify_theorem2(colinear, colinear, 0.1);

    report.theorem2.push_back(at_most("adv_to_clean_prefactor_error", a2c, settings.theorem2_tolerance));
    report.theorem2.push_back(at_most("clean_to_adv_prefactor_error", c2a, settings.theorem2_tolerance));
    report.theorem2.push_back(above("min_asymmetry_n4", asym, settings.min_asymmetry));
    report.theorem2.push_back(at_most("bicon_average_identity", bicon, settings.bicon_tolerance));
    report.theorem2.push_back(at_most("weight_sum_error", wsum, settings.weight_sum_tolerance));
    report.theorem2.push_back(info("cross_anchor_term_norm", cross));
    report.theorem2.push_back(info("colinear_asymmetry", rc.min_asymmetry));
    report.theorem2.push_back(info("colinear_orthogonal_asymmetry", rc.min_orthogonal_asymmetry));
    return report;
}

// ---------------------------------------------------------------------------
// Temperature sweep
// ---------------------------------------------------------------------------

std::string classify_trend(std::span<const double> v) {
    constexpr double tol = 1e-12;
    auto non_increasing = [&](std::size_t from, std::size_t to) {
        for (std::size_t i = from; i + 1 < to; ++i)
            if (v[i + 1] > v[i] + tol) return false;
        return true;
    };
    auto non_decreasing = [&](std::size_t from, std::size_t to) {
        for (std::size_t i = from; i + 1 < to; ++i)
            if (v[i + 1] < v[i] - tol) return false;
        return true;
    };
    if (non_increasing(0, v.size())) return "monotone_decreasing";
    if (non_decreasing(0, v.size())) return "monotone_increasing";
    for (std::size_t peak = 1; peak + 1 < v.size(); ++peak) {
        if (non_decreasing(0, peak + 1) && non_increasing(peak, v.size())) return "unimodal";
    }
    return "irregular";
}

SweepResult temperature_sweep(const ExperimentPlan& plan, std::span<const double> taus) {
    plan.validate();
    for (double tau : taus) {
        if (!(tau > 0.0)) throw std::invalid_argument("temperature sweep: tau must be positive");
    }
    std::vector<AttackConfig> contrastive;
    for (const auto& a : plan.attacks)
        if (a.weights.bicon > 0.0) contrastive.push_back(a);
    if (contrastive.empty()) contrastive.push_back(plan.ablation_base);

    auto column = [&](std::string label, const TemperatureSchedule& schedule) {
        ExperimentPlan p = plan;
        p.attacks = contrastive;
        for (auto& a : p.attacks) a.schedule = schedule;
        p.ablation.clear();
        SweepColumn col{std::move(label), schedule, evaluate_transfer(p), 0.0, 0.0};
        for (auto& run : col.report.runs) run.result.delta.values.clear();
        double asr = 0.0, dev = 0.0;
        std::size_t count = 0;
        for (const auto& c : col.report.cells) {
            if (c.error || c.victim == "surrogate") continue;
            asr += c.asr;
            dev += c.deviation;
            ++count;
        }
        if (count > 0) {
            col.mean_asr = asr / static_cast<double>(count);
            col.mean_deviation = dev / static_cast<double>(count);
        }
        return col;
    };

    SweepResult result;
    for (double tau : taus) {
        std::ostringstream label;
        label << "tau=" << tau;
        result.columns.push_back(column(label.str(), TemperatureSchedule::constant(tau)));
    }
    std::vector<std::pair<double, double>> by_tau;
    for (std::size_t i = 0; i < taus.size(); ++i) by_tau.emplace_back(taus[i], result.columns[i].mean_asr);
    std::stable_sort(by_tau.begin(), by_tau.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<double> ordered;
    for (const auto& [tau, asr] : by_tau) ordered.push_back(asr);
    result.trend = classify_trend(ordered);

    if (plan.sweep_decayed) {
        std::ostringstream label;
        label << "decay=" << plan.sweep_decay.start << "->" << plan.sweep_decay.end;
        result.columns.push_back(column(label.str(), plan.sweep_decay));
    }
    return result;
}

}  // namespace tva
