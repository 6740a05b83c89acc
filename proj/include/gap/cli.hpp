#pragma once

#include <ostream>

namespace gap::cli {

/// Exit statuses returned by run().
inline constexpr int kOk = 0;
inline constexpr int kRuntimeFailure = 1;
inline constexpr int kUsageError = 2;

/// Dispatches argv[1] to one of: pca-fit, build-data, train, profile-norms,
/// intervene, sweep, audit, grad-check. Every run writes its resolved
/// configuration to <out>/config.txt; passing that file back via --config
/// replays the run.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace gap::cli
