// SPDX-License-Identifier: Apache-2.0
//
// Report files: a JSON document of the whole transfer report and a flat CSV
// with one row per (attack, victim, seed). Numbers carry 9 significant digits.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tva/config.hpp"
#include "tva/harness.hpp"

namespace tva {

/// printf "%.9g"; "nan", "inf", "-inf" for non-finite values.
std::string format_number(double value);
/// value rounded to 9 significant digits.
double round9(double value);

inline constexpr std::string_view kReportCsvHeader = "attack,victim,seed,deviation,asr,grad_cosine";

/// Error cells keep their key columns and leave the numeric ones empty.
std::string report_csv(const TransferReport& report);
std::string report_json(const TransferReport& report, const RunConfig& config,
                        const std::optional<SweepResult>& sweep = std::nullopt);

/// Per-run traces and forward-pass counts, as written by the attack command.
std::string runs_json(const std::vector<AttackRun>& runs);
/// Reads runs_json output (perturbations are not included).
std::vector<AttackRun> parse_runs_json(std::string_view text);
/// attack,seed,iteration,tau,loss,forward_passes
std::string loss_trace_csv(const std::vector<AttackRun>& runs);

struct CsvRow {
    std::string attack;
    std::string victim;
    std::uint64_t seed = 0;
    std::optional<double> deviation;
    std::optional<double> asr;
    std::optional<double> grad_cosine;
};

/// Parses a report CSV; throws std::runtime_error naming `source` on a bad header or row.
std::vector<CsvRow> parse_report_csv(std::string_view text, const std::string& source = "report.csv");

struct ReportInput {
    std::vector<CsvRow> rows;
    /// Ablation masks of the plan that produced the rows.
    std::vector<std::string> ablation;
    std::optional<std::string> trend;
};

struct MergedReport {
    std::string csv;
    std::string summary_json;
};

/// Concatenates rows in input order and summarizes per attack (means over
/// non-error rows, distinct seed counts) and per ablation mask.
MergedReport merge_reports(const std::vector<ReportInput>& inputs);

}  // namespace tva
