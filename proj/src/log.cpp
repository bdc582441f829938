#include "miam/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace miam {

namespace {
std::atomic<int> g_level{static_cast<int>(LogLevel::kWarn)};
std::mutex g_mutex;
}  // namespace

void set_log_level(LogLevel level) { g_level = static_cast<int>(level); }

LogLevel log_level() { return static_cast<LogLevel>(g_level.load()); }

void log(LogLevel level, const std::string& message) {
  if (static_cast<int>(level) > g_level.load()) return;
  std::lock_guard lock(g_mutex);
  std::cerr << "[miam] " << message << '\n';
}

}  // namespace miam
