// SPDX-License-Identifier: Apache-2.0
//
// Subcommand bodies of the tva tool. Each returns the process exit code:
// 0 success, 1 verification failure, 2 usage or validation error.

#pragma once

#include <filesystem>
#include <iosfwd>

namespace tva::cli {

namespace fs = std::filesystem;

inline constexpr int kOk = 0;
inline constexpr int kVerifyFailed = 1;
inline constexpr int kUsage = 2;

int gen_data(const fs::path& config, const fs::path& out, std::ostream& log);
int attack(const fs::path& config, const fs::path& data, const fs::path& out, std::ostream& log);
int eval(const fs::path& config, const fs::path& data, const fs::path& perturb, const fs::path& out, bool sweep,
         std::ostream& log);
int verify(const fs::path& config, const fs::path& out, std::ostream& log);
int report(const fs::path& in, const fs::path& out, std::ostream& log);

}  // namespace tva::cli
