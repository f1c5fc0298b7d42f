#pragma once

#include <atomic>
#include <iostream>
#include <mutex>
#include <string_view>

namespace fvtb::log {

enum class Level { quiet = 0, warn = 1, info = 2, debug = 3 };

inline std::atomic<Level>& level() {
  static std::atomic<Level> lvl{Level::warn};
  return lvl;
}

inline void emit(Level l, std::string_view tag, std::string_view msg) {
  if (static_cast<int>(l) > static_cast<int>(level().load())) return;
  static std::mutex mu;
  std::lock_guard lock(mu);
  std::cerr << "[fvtb " << tag << "] " << msg << '\n';
}

inline void warn(std::string_view msg) { emit(Level::warn, "warn", msg); }
inline void info(std::string_view msg) { emit(Level::info, "info", msg); }
inline void debug(std::string_view msg) { emit(Level::debug, "debug", msg); }

}  // namespace fvtb::log
