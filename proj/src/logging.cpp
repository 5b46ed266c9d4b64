#include "wscloc/logging.hpp"

#include <cstdlib>
#include <iostream>

namespace wscloc::util {

LogLevel log_level() {
  static const LogLevel level = [] {
    const char* env = std::getenv("WSCLOC_LOG");
    if (env == nullptr) return LogLevel::Info;
    const std::string v(env);
    if (v == "error") return LogLevel::Error;
    if (v == "debug") return LogLevel::Debug;
    return LogLevel::Info;
  }();
  return level;
}

void log_error(const std::string& msg) { std::cerr << "[error] " << msg << '\n'; }

void log_info(const std::string& msg) {
  if (log_level() >= LogLevel::Info) std::cerr << "[info] " << msg << '\n';
}

void log_debug(const std::string& msg) {
  if (log_level() >= LogLevel::Debug) std::cerr << "[debug] " << msg << '\n';
}

}  // namespace wscloc::util
