#pragma once

#include "radd/kgdata.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace radd::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfigError = 2,
  kDataError = 3,
  kNumericError = 4,
};

// Entry point shared by the radd binary and the tests; never throws.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Files written by `synth`, in order.
const std::vector<std::string>& synth_file_names();

std::string synth_manifest(const kg::SynthOptions& options);
kg::SynthOptions parse_synth_manifest(const std::string& text);
void write_synth(const std::filesystem::path& dir, const kg::SynthOptions& options);

// `base`, or `base-<timestamp>[-n]` when base already exists.
std::filesystem::path fresh_run_dir(const std::filesystem::path& base);

}  // namespace radd::cli
