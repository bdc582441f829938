#pragma once

#include <string>

namespace miam {

enum class LogLevel : int { kQuiet = 0, kWarn = 1, kInfo = 2, kDebug = 3 };

void set_log_level(LogLevel level);
LogLevel log_level();

/// Writes "[miam] <message>" to stderr when `level` is enabled.
void log(LogLevel level, const std::string& message);

}  // namespace miam
