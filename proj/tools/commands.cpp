// SPDX-License-Identifier: Apache-2.0

#include "commands.hpp"

#include "json.hpp"

#include <algorithm>
#include <ostream>
#include <stdexcept>

#include "tva/config.hpp"
#include "tva/report.hpp"
#include "tva/tensor_file.hpp"

namespace tva::cli {

namespace {

using ordered = nlohmann::ordered_json;

// Validation and I/O problems the user can fix; mapped to exit code 2.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

void fresh_dir(const fs::path& dir) {
    if (fs::exists(dir)) {
        if (!fs::is_directory(dir)) throw UsageError(dir.string() + " exists and is not a directory");
        if (!fs::is_empty(dir)) throw UsageError("refusing to overwrite non-empty directory " + dir.string());
    }
    fs::create_directories(dir);
}

std::string seed_dir(std::uint64_t seed) { return "seed-" + std::to_string(seed); }

std::string slug(const std::string& name) {
    std::string out;
    for (char c : name) {
        const bool keep = std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '.' || c == '_';
        out += keep ? c : '_';
    }
    return out;
}

ordered dims_json(const Shape& s) { return ordered(std::vector<std::size_t>(s.begin(), s.end())); }

void write_batch(const fs::path& root, const std::string& rel, const VideoBatch& b, ordered& files) {
    fs::create_directories(root / rel);
    const std::string videos = rel + "/videos.tvat", labels = rel + "/labels.tvat";
    write_tensor(root / videos, b.shape(), b.values, DType::f64);
    std::vector<double> lab(b.labels.begin(), b.labels.end());
    write_tensor(root / labels, {b.videos}, lab, DType::f64);
    files.push_back({{"path", videos}, {"dims", dims_json(b.shape())}, {"dtype", "float64"}});
    files.push_back({{"path", labels}, {"dims", dims_json({b.videos})}, {"dtype", "float64"}});
}

VideoBatch read_batch(const fs::path& root, const std::string& rel, const DataSpec& spec, std::size_t videos) {
    const fs::path vp = root / rel / "videos.tvat", lp = root / rel / "labels.tvat";
    if (!fs::exists(vp)) throw UsageError("missing data file " + vp.string());
    const Tensor v = read_tensor(vp);
    VideoBatch b;
    b.videos = videos;
    b.frames = spec.frames;
    b.frame = spec.frame;
    if (v.dims != b.shape()) {
        throw UsageError(vp.string() + " has dims " + shape_to_string(v.dims) + ", config expects " +
                         shape_to_string(b.shape()));
    }
    b.values = v.values;
    if (fs::exists(lp)) {
        const Tensor l = read_tensor(lp);
        if (l.dims != Shape{videos}) throw UsageError(lp.string() + " has dims " + shape_to_string(l.dims));
        for (double x : l.values) b.labels.push_back(static_cast<int>(x));
    }
    b.validate();
    return b;
}

template <typename Body>
int guarded(std::ostream& log, Body body) {
    try {
        return body();
    } catch (const std::exception& e) {
        log << "error: " << e.what() << "\n";
    }
    return kUsage;
}

RunConfig config_from(const fs::path& path) {
    if (!fs::exists(path)) throw UsageError("config file not found: " + path.string());
    return load_config(path);
}

}  // namespace

int gen_data(const fs::path& config, const fs::path& out, std::ostream& log) {
    return guarded(log, [&] {
        const RunConfig cfg = config_from(config);
        fresh_dir(out);
        ordered files = ordered::array();
        write_batch(out, "train", training_data(cfg.plan), files);
        for (auto seed : cfg.plan.seeds) write_batch(out, seed_dir(seed), attack_data(cfg.plan, seed), files);
        write_file(out / "config.json", dump_config(cfg));
        const ordered manifest{{"format", "TVAT"}, {"version", 1}, {"files", files}};
        write_file(out / "manifest.json", manifest.dump(2) + "\n");
        log << "wrote " << files.size() << " tensors to " << out.string() << "\n";
        return kOk;
    });
}

int attack(const fs::path& config, const fs::path& data, const fs::path& out, std::ostream& log) {
    return guarded(log, [&] {
        const RunConfig cfg = config_from(config);
        const auto& plan = cfg.plan;
        if (!fs::is_directory(data)) throw UsageError("data directory not found: " + data.string());
        fresh_dir(out);
        Zoo zoo;
        zoo.surrogate = std::make_shared<const Encoder>(plan.surrogate);
        std::vector<AttackRun> all;
        ordered files = ordered::array();
        for (auto seed : plan.seeds) {
            const VideoBatch batch = read_batch(data, seed_dir(seed), plan.data, plan.data.videos);
            auto runs = run_attacks(plan, zoo, batch, seed);
            fs::create_directories(out / seed_dir(seed));
            for (auto& r : runs) {
                if (r.error) {
                    log << "attack '" << r.attack << "' seed " << seed << " failed: " << *r.error << "\n";
                } else {
                    const std::string rel = seed_dir(seed) + "/" + slug(r.attack) + ".delta.tvat";
                    write_tensor(out / rel, batch.shape(), r.result.delta.values, DType::f32);
                    files.push_back({{"attack", r.attack}, {"seed", seed}, {"path", rel}, {"dims", dims_json(batch.shape())}});
                }
                r.result.delta.values.clear();
                all.push_back(std::move(r));
            }
        }
        write_file(out / "config.json", dump_config(cfg));
        write_file(out / "runs.json", runs_json(all));
        write_file(out / "loss_traces.csv", loss_trace_csv(all));
        write_file(out / "perturbations.json", ordered{{"perturbations", files}}.dump(2) + "\n");
        log << "wrote " << files.size() << " perturbations to " << out.string() << "\n";
        return kOk;
    });
}

int eval(const fs::path& config, const fs::path& data, const fs::path& perturb, const fs::path& out, bool sweep,
         std::ostream& log) {
    return guarded(log, [&] {
        const RunConfig cfg = config_from(config);
        const auto& plan = cfg.plan;
        if (!fs::is_directory(data)) throw UsageError("data directory not found: " + data.string());
        const fs::path manifest = perturb / "perturbations.json";
        if (!fs::exists(manifest)) throw UsageError("missing " + manifest.string());
        fresh_dir(out);

        const auto listing = nlohmann::json::parse(read_file(manifest)).at("perturbations");
        std::vector<AttackRun> traces;
        if (fs::exists(perturb / "runs.json")) traces = parse_runs_json(read_file(perturb / "runs.json"));

        const VideoBatch train = read_batch(data, "train", plan.data, plan.train_videos);
        const Zoo zoo = build_zoo(plan, train);
        const auto attacks = plan.expanded_attacks();
        TransferReport report;
        for (std::size_t s = 0; s < plan.seeds.size(); ++s) {
            const auto seed = plan.seeds[s];
            const VideoBatch batch = read_batch(data, seed_dir(seed), plan.data, plan.data.videos);
            if (s == 0) report = zoo_report(zoo, batch);
            std::vector<AttackRun> runs;
            for (const auto& a : attacks) {
                AttackRun run;
                run.attack = a.name;
                run.seed = seed;
                run.samples_per_iteration = a.samples_per_iteration();
                const auto t = std::find_if(traces.begin(), traces.end(),
                                            [&](const AttackRun& r) { return r.attack == a.name && r.seed == seed; });
                if (t != traces.end()) run = *t;
                const auto entry = std::find_if(listing.begin(), listing.end(), [&](const auto& j) {
                    return j.at("attack").template get<std::string>() == a.name &&
                           j.at("seed").template get<std::uint64_t>() == seed;
                });
                if (entry == listing.end()) {
                    if (!run.error) run.error = "no perturbation file for attack '" + a.name + "'";
                    runs.push_back(std::move(run));
                    continue;
                }
                const fs::path file = perturb / entry->at("path").template get<std::string>();
                const Tensor delta = read_tensor(file);
                if (delta.dims != batch.shape()) {
                    throw UsageError("shape mismatch: " + file.string() + " " + shape_to_string(delta.dims) + " vs " +
                                     (data / seed_dir(seed) / "videos.tvat").string() + " " +
                                     shape_to_string(batch.shape()));
                }
                run.result.delta = clip_project(Perturbation{delta.values, a.epsilon}, batch.values);
                runs.push_back(std::move(run));
            }
            auto cells = evaluate_cells(plan, zoo, batch, seed, runs);
            report.cells.insert(report.cells.end(), cells.begin(), cells.end());
            for (auto& r : runs) {
                r.result.delta.values.clear();
                report.runs.push_back(std::move(r));
            }
        }
        std::optional<SweepResult> sw;
        if (sweep || cfg.sweep) sw = temperature_sweep(plan, plan.sweep_taus);
        write_file(out / "report.json", report_json(report, cfg, sw));
        write_file(out / "report.csv", report_csv(report));
        log << "wrote " << report.cells.size() << " cells to " << out.string() << "\n";
        return kOk;
    });
}

int verify(const fs::path& config, const fs::path& out, std::ostream& log) {
    return guarded(log, [&] {
        const RunConfig cfg = config_from(config);
        fresh_dir(out);
        const VerificationReport r = run_verification(cfg.verify);
        auto section = [](const std::vector<CheckResult>& checks) {
            ordered a = ordered::array();
            for (const auto& c : checks) {
                a.push_back({{"name", c.name},
                             {"value", round9(c.value)},
                             {"tolerance", c.tolerance},
                             {"relation", c.relation},
                             {"pass", c.pass}});
            }
            return a;
        };
        const ordered doc{{"pass", r.pass()},
                          {"form_a", section(r.form_a)},
                          {"form_b", section(r.form_b)},
                          {"theorem2", section(r.theorem2)}};
        write_file(out / "verify.json", doc.dump(2) + "\n");
        if (const CheckResult* w = r.worst()) {
            log << "verification failed: worst check '" << w->name << "' value " << format_number(w->value) << " "
                << (w->relation == ">" ? "not above " : "exceeds ") << format_number(w->tolerance) << "\n";
            return kVerifyFailed;
        }
        log << "all residuals within tolerance\n";
        return kOk;
    });
}

int report(const fs::path& in, const fs::path& out, std::ostream& log) {
    return guarded(log, [&] {
        if (!fs::is_directory(in)) throw UsageError("input directory not found: " + in.string());
        if (fs::exists(out)) throw UsageError("refusing to overwrite " + out.string());
        std::vector<fs::path> csvs;
        for (const auto& e : fs::recursive_directory_iterator(in)) {
            if (e.is_regular_file() && e.path().filename() == "report.csv") csvs.push_back(e.path());
        }
        std::sort(csvs.begin(), csvs.end());
        if (csvs.empty()) throw UsageError("no report.csv found under " + in.string());
        std::vector<ReportInput> inputs;
        for (const auto& p : csvs) {
            ReportInput ri;
            ri.rows = parse_report_csv(read_file(p), p.string());
            const fs::path js = p.parent_path() / "report.json";
            if (fs::exists(js)) {
                const auto doc = nlohmann::json::parse(read_file(js));
                if (doc.contains("config")) ri.ablation = doc["config"].value("ablation", std::vector<std::string>{});
                if (doc.contains("sweep")) ri.trend = doc["sweep"].at("trend").get<std::string>();
            }
            inputs.push_back(std::move(ri));
        }
        const MergedReport merged = merge_reports(inputs);
        if (out.has_parent_path()) fs::create_directories(out.parent_path());
        fs::path summary = out;
        summary.replace_extension(".summary.json");
        write_file(out, merged.csv);
        write_file(summary, merged.summary_json);
        log << "merged " << csvs.size() << " report(s) into " << out.string() << "\n";
        return kOk;
    });
}

}  // namespace tva::cli
