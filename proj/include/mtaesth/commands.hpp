#pragma once

#include <map>
#include <string>

namespace mtaesth::cli {

/// Exit codes shared by every subcommand.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;  ///< config or data error
inline constexpr int kExitTrainAbort = 3;
inline constexpr int kExitEvalIncompatible = 4;
inline constexpr int kExitGradCheckFailed = 5;

using Overrides = std::map<std::string, std::string>;

int cmd_gen(const std::string& spec_path, const std::string& out_dir);

/// Trains from a config file; command-line overrides take precedence over
/// file keys. Writes checkpoint.bin, report.csv and (with relationship
/// learning) omega.csv into the output directory.
int cmd_train(const std::string& config_path, const Overrides& overrides);

int cmd_eval(const std::string& checkpoint_path, const std::string& manifest,
             const std::string& split);

int cmd_analyze(const std::string& omega_csv_path, const std::string& out_path,
                std::size_t top_k);

/// Runs the gradient check across the variant x relationship matrix.
/// `inject_fault` corrupts one analytic gradient entry first (test hook for
/// the harness's sensitivity).
int cmd_gradcheck(const std::string& config_path, bool inject_fault);

}  // namespace mtaesth::cli
