// SPDX-License-Identifier: Apache-2.0
//
// JSON run configuration. Every key is optional except the name and form of
// each victim; absent keys take the defaults of default_plan(). Unknown keys
// are rejected with their dotted path. dump_config writes every field, so the
// echoed document reproduces the run on its own.

#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

#include "tva/harness.hpp"

namespace tva {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct RunConfig {
    ExperimentPlan plan = default_plan();
    VerifySettings verify;
    /// Also run the temperature sweep during eval.
    bool sweep = false;
};

RunConfig parse_config(std::string_view json_text);
RunConfig load_config(const std::filesystem::path& path);
/// Pretty-printed JSON with all defaults materialized.
std::string dump_config(const RunConfig& config);

/// Canonical JSON of a single attack (used for provenance hashes).
std::string dump_attack(const AttackConfig& attack);

std::uint64_t fnv1a64(std::string_view bytes);
/// 16 hex digits of FNV-1a over the canonical JSON of every expanded attack.
std::string attack_config_hash(const ExperimentPlan& plan);

}  // namespace tva
