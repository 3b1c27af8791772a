#include "cirm/log.hpp"

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <mutex>

namespace cirm {

LogLevel log_level() {
  static LogLevel level = [] {
    const char* env = std::getenv("CIRM_LOG");
    if (env == nullptr) return LogLevel::info;
    if (std::strcmp(env, "error") == 0) return LogLevel::error;
    if (std::strcmp(env, "debug") == 0) return LogLevel::debug;
    return LogLevel::info;
  }();
  return level;
}

namespace {

std::mutex g_log_mutex;

void emit(const char* tag, const std::string& msg) {
  std::lock_guard<std::mutex> lock(g_log_mutex);
  std::fprintf(stderr, "[cirm %s] %s\n", tag, msg.c_str());
}

}  // namespace

void log_error(const std::string& msg) { emit("error", msg); }

void log_info(const std::string& msg) {
  if (log_level() >= LogLevel::info) emit("info", msg);
}

void log_debug(const std::string& msg) {
  if (log_level() >= LogLevel::debug) emit("debug", msg);
}

}  // namespace cirm
