#include "log.hpp"

#include <cstdio>
#include <mutex>

namespace xs {

namespace {

std::mutex g_mutex;
LogLevel g_level = LogLevel::warning;
LogSink g_sink;

const char* tag(LogLevel level) {
  switch (level) {
    case LogLevel::debug: return "debug";
    case LogLevel::info: return "info";
    case LogLevel::warning: return "warning";
    case LogLevel::error: return "error";
    case LogLevel::off: break;
  }
  return "";
}

}  // namespace

void set_log_level(LogLevel level) {
  std::lock_guard lock(g_mutex);
  g_level = level;
}

LogLevel log_level() {
  std::lock_guard lock(g_mutex);
  return g_level;
}

void set_log_sink(LogSink sink) {
  std::lock_guard lock(g_mutex);
  g_sink = std::move(sink);
}

void log_message(LogLevel level, const std::string& message) {
  std::lock_guard lock(g_mutex);
  if (level < g_level || level == LogLevel::off) return;
  if (g_sink) {
    g_sink(level, message);
    return;
  }
  std::fprintf(stderr, "[%s] %s\n", tag(level), message.c_str());
}

}  // namespace xs
