#pragma once

#include <string>

namespace cirm {

enum class LogLevel { error = 0, info = 1, debug = 2 };

// Level comes from the CIRM_LOG environment variable (error|info|debug),
// read once. Default is info. All logging goes to stderr so stdout stays
// reserved for machine-readable command output.
LogLevel log_level();

void log_error(const std::string& msg);
void log_info(const std::string& msg);
void log_debug(const std::string& msg);

}  // namespace cirm
