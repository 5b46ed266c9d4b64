#pragma once

#include <string>

namespace wscloc::util {

enum class LogLevel { Error = 0, Info = 1, Debug = 2 };

// Level comes from the WSCLOC_LOG environment variable (error|info|debug);
// defaults to info. All output goes to stderr.
LogLevel log_level();

void log_error(const std::string& msg);
void log_info(const std::string& msg);
void log_debug(const std::string& msg);

}  // namespace wscloc::util
