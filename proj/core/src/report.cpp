// SPDX-License-Identifier: Apache-2.0

#include "tva/report.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace tva {

using ordered = nlohmann::ordered_json;

std::string format_number(double value) {
    if (std::isnan(value)) return "nan";
    if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", value);
    return buf;
}

double round9(double value) {
    if (!std::isfinite(value)) return value;
    return std::strtod(format_number(value).c_str(), nullptr);
}

namespace {

ordered num(double v) {
    if (!std::isfinite(v)) return nullptr;
    return round9(v);
}

ordered nums(const std::vector<double>& v) {
    ordered a = ordered::array();
    for (double x : v) a.push_back(num(x));
    return a;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    fields.push_back(std::move(cur));
    return fields;
}

ordered run_json(const AttackRun& r) {
    ordered j{
        {"attack", r.attack},
        {"seed", r.seed},
        {"samples_per_iteration", r.samples_per_iteration},
        {"forward_passes", r.result.forward_passes},
        {"di_applied", r.result.di_applied},
        {"loss_trace", nums(r.result.loss_trace)},
        {"tau_trace", nums(r.result.tau_trace)},
    };
    if (r.error) j["error"] = *r.error;
    return j;
}

std::string csv_row(const CellResult& c) {
    std::string row = csv_field(c.attack) + "," + csv_field(c.victim) + "," + std::to_string(c.seed) + ",";
    if (c.error) return row + ",,";
    return row + format_number(c.deviation) + "," + format_number(c.asr) + "," + format_number(c.grad_cosine);
}

}  // namespace

std::string report_csv(const TransferReport& report) {
    std::string out(kReportCsvHeader);
    out += "\n";
    for (const auto& c : report.cells) out += csv_row(c) + "\n";
    return out;
}

std::string report_json(const TransferReport& report, const RunConfig& config, const std::optional<SweepResult>& sweep) {
    const auto& plan = config.plan;
    ordered doc;
    doc["attack_config_hash"] = attack_config_hash(plan);
    doc["config"] = ordered::parse(dump_config(config));

    ordered heads = ordered::array();
    for (const auto& h : report.heads) {
        heads.push_back({{"victim", h.victim},
                         {"ridge", num(h.ridge)},
                         {"ridge_fallback", h.ridge_fallback},
                         {"train_accuracy", num(h.train_accuracy)}});
    }
    doc["heads"] = heads;

    ordered th = ordered::array();
    for (const auto& t : report.theorem1) {
        th.push_back({{"victim", t.victim},
                      {"form", t.report.form},
                      {"residual", num(t.report.residual)},
                      {"abs_residual", num(t.report.abs_residual)},
                      {"lhs_max_abs", num(t.report.lhs_norm)},
                      {"rhs_max_abs", num(t.report.rhs_norm)}});
    }
    doc["theorem1"] = th;

    ordered runs = ordered::array();
    for (const auto& r : report.runs) runs.push_back(run_json(r));
    doc["runs"] = runs;

    // Forward passes per iteration against the configured sample count.
    ordered eff = ordered::array();
    for (const auto& a : plan.expanded_attacks()) {
        std::set<std::size_t> seen;
        bool any = false;
        for (const auto& r : report.runs) {
            if (r.attack != a.name || r.error) continue;
            any = true;
            seen.insert(r.result.forward_passes.begin(), r.result.forward_passes.end());
        }
        const bool match = any && (seen.empty() || (seen.size() == 1 && *seen.begin() == a.samples_per_iteration()));
        eff.push_back({{"attack", a.name},
                       {"configured_samples_per_iteration", a.samples_per_iteration()},
                       {"observed_forward_passes_per_iteration", std::vector<std::size_t>(seen.begin(), seen.end())},
                       {"match", match}});
    }
    doc["efficiency"] = eff;

    ordered cells = ordered::array();
    for (const auto& c : report.cells) {
        ordered j{{"attack", c.attack}, {"victim", c.victim}, {"seed", c.seed}};
        if (c.error) {
            j["error"] = *c.error;
        } else {
            j["deviation"] = num(c.deviation);
            j["asr"] = num(c.asr);
            j["grad_cosine"] = num(c.grad_cosine);
        }
        cells.push_back(j);
    }
    doc["cells"] = cells;

    ordered means = ordered::array();
    std::vector<std::string> members;
    if (plan.include_surrogate) members.push_back("surrogate");
    for (const auto& v : plan.victims) members.push_back(v.name);
    for (const auto& a : plan.expanded_attacks())
        for (const auto& m : members) {
            const auto dev = mean_deviation(report, a.name, m);
            const auto asr = mean_asr(report, a.name, m);
            means.push_back({{"attack", a.name},
                             {"victim", m},
                             {"mean_deviation", dev ? num(*dev) : ordered(nullptr)},
                             {"mean_asr", asr ? num(*asr) : ordered(nullptr)}});
        }
    auto order_json = [](const std::vector<OrderingCount>& v, std::size_t threshold) {
        ordered a = ordered::array();
        for (const auto& c : v) {
            a.push_back({{"victim", c.victim},
                         {"deviation_seeds", c.deviation_seeds},
                         {"asr_seeds", c.asr_seeds},
                         {"seeds", c.total},
                         {"threshold", threshold}});
        }
        return a;
    };
    doc["summary"] = {
        {"means", means},
        {"ablation_ordering", order_json(ablation_ordering(report, plan), plan.ablation_min_seeds)},
        {"momentum_ordering", order_json(momentum_ordering(report, plan), plan.momentum_min_seeds)},
    };

    if (sweep) {
        ordered cols = ordered::array();
        for (const auto& c : sweep->columns) {
            cols.push_back({{"label", c.label},
                            {"mode", c.schedule.mode == TemperatureSchedule::Mode::constant ? "constant" : "exponential"},
                            {"start", num(c.schedule.start)},
                            {"end", num(c.schedule.end)},
                            {"mean_asr", num(c.mean_asr)},
                            {"mean_deviation", num(c.mean_deviation)},
                            {"cells", c.report.cells.size()}});
        }
        doc["sweep"] = {{"columns", cols}, {"trend", sweep->trend}};
    }
    doc["notes"] = report.notes;
    return doc.dump(2) + "\n";
}

std::string runs_json(const std::vector<AttackRun>& runs) {
    ordered a = ordered::array();
    for (const auto& r : runs) a.push_back(run_json(r));
    return ordered{{"runs", a}}.dump(2) + "\n";
}

std::vector<AttackRun> parse_runs_json(std::string_view text) {
    const auto doc = nlohmann::json::parse(text);
    std::vector<AttackRun> out;
    for (const auto& j : doc.at("runs")) {
        AttackRun r;
        r.attack = j.at("attack").get<std::string>();
        r.seed = j.at("seed").get<std::uint64_t>();
        r.samples_per_iteration = j.at("samples_per_iteration").get<std::size_t>();
        r.result.forward_passes = j.at("forward_passes").get<std::vector<std::size_t>>();
        r.result.di_applied = j.at("di_applied").get<std::size_t>();
        for (const auto& v : j.at("loss_trace")) r.result.loss_trace.push_back(v.is_null() ? NAN : v.get<double>());
        for (const auto& v : j.at("tau_trace")) r.result.tau_trace.push_back(v.is_null() ? NAN : v.get<double>());
        if (j.contains("error")) r.error = j.at("error").get<std::string>();
        out.push_back(std::move(r));
    }
    return out;
}

std::string loss_trace_csv(const std::vector<AttackRun>& runs) {
    std::string out = "attack,seed,iteration,tau,loss,forward_passes\n";
    for (const auto& r : runs) {
        for (std::size_t t = 0; t < r.result.loss_trace.size(); ++t) {
            out += csv_field(r.attack) + "," + std::to_string(r.seed) + "," + std::to_string(t) + "," +
                   format_number(r.result.tau_trace[t]) + "," + format_number(r.result.loss_trace[t]) + "," +
                   std::to_string(r.result.forward_passes[t]) + "\n";
        }
    }
    return out;
}

std::vector<CsvRow> parse_report_csv(std::string_view text, const std::string& source) {
    std::istringstream in{std::string(text)};
    std::string line;
    if (!std::getline(in, line) || line != kReportCsvHeader) {
        throw std::runtime_error(source + ": missing or unexpected CSV header");
    }
    std::vector<CsvRow> rows;
    std::size_t lineno = 1;
    auto opt = [&](const std::string& s) -> std::optional<double> {
        if (s.empty()) return std::nullopt;
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(s, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != s.size()) throw std::runtime_error(source + ":" + std::to_string(lineno) + ": bad number '" + s + "'");
        return v;
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        if (f.size() != 6) {
            throw std::runtime_error(source + ":" + std::to_string(lineno) + ": expected 6 fields, got " +
                                     std::to_string(f.size()));
        }
        CsvRow r;
        r.attack = f[0];
        r.victim = f[1];
        try {
            r.seed = std::stoull(f[2]);
        } catch (const std::exception&) {
            throw std::runtime_error(source + ":" + std::to_string(lineno) + ": bad seed '" + f[2] + "'");
        }
        r.deviation = opt(f[3]);
        r.asr = opt(f[4]);
        r.grad_cosine = opt(f[5]);
        rows.push_back(std::move(r));
    }
    return rows;
}

MergedReport merge_reports(const std::vector<ReportInput>& inputs) {
    MergedReport out;
    out.csv = std::string(kReportCsvHeader) + "\n";

    struct Acc {
        double dev = 0.0, asr = 0.0, cos = 0.0;
        std::size_t rows = 0, valid = 0;
        std::set<std::uint64_t> seeds;
    };
    std::vector<std::string> order;
    std::map<std::string, Acc> per_attack;
    std::vector<std::string> masks;
    std::vector<std::string> trends;
    std::size_t total = 0;

    for (const auto& in : inputs) {
        for (const auto& m : in.ablation)
            if (std::find(masks.begin(), masks.end(), m) == masks.end()) masks.push_back(m);
        if (in.trend) trends.push_back(*in.trend);
        for (const auto& r : in.rows) {
            auto field = [](const std::optional<double>& v) { return v ? format_number(*v) : std::string(); };
            out.csv += csv_field(r.attack) + "," + csv_field(r.victim) + "," + std::to_string(r.seed) + "," +
                       field(r.deviation) + "," + field(r.asr) + "," + field(r.grad_cosine) + "\n";
            ++total;
            if (!per_attack.contains(r.attack)) order.push_back(r.attack);
            auto& acc = per_attack[r.attack];
            ++acc.rows;
            acc.seeds.insert(r.seed);
            if (r.deviation && r.asr && r.grad_cosine) {
                acc.dev += *r.deviation;
                acc.asr += *r.asr;
                acc.cos += *r.grad_cosine;
                ++acc.valid;
            }
        }
    }

    auto entry = [&](const std::string& attack) {
        const auto it = per_attack.find(attack);
        ordered j{{"attack", attack}};
        if (it == per_attack.end() || it->second.valid == 0) {
            j["rows"] = it == per_attack.end() ? 0 : it->second.rows;
            j["seeds"] = it == per_attack.end() ? 0 : it->second.seeds.size();
            j["mean_deviation"] = nullptr;
            j["mean_asr"] = nullptr;
            j["mean_grad_cosine"] = nullptr;
            return j;
        }
        const auto& a = it->second;
        const double n = static_cast<double>(a.valid);
        j["rows"] = a.rows;
        j["seeds"] = a.seeds.size();
        j["mean_deviation"] = num(a.dev / n);
        j["mean_asr"] = num(a.asr / n);
        j["mean_grad_cosine"] = num(a.cos / n);
        return j;
    };

    ordered attacks = ordered::array();
    for (const auto& a : order) attacks.push_back(entry(a));
    ordered ablation = ordered::array();
    for (const auto& m : masks) {
        ordered j = entry("ablation:" + m);
        j["mask"] = m;
        ablation.push_back(j);
    }
    ordered summary{{"reports", inputs.size()}, {"rows", total}, {"attacks", attacks}, {"ablation", ablation}};
    if (!trends.empty()) summary["temperature_trends"] = trends;
    out.summary_json = summary.dump(2) + "\n";
    return out;
}

}  // namespace tva
