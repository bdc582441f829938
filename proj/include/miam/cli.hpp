#pragma once

namespace miam::cli {

enum ExitCode : int {
  kOk = 0,
  kUsage = 1,
  kIo = 2,
  kDiverged = 3,
  kCheckFailed = 4,
};

/// Entry point of the `miam` tool: synth, preprocess, train, evaluate,
/// impute and gradcheck. Returns the process exit code.
int run(int argc, char** argv);

}  // namespace miam::cli
