#pragma once

#include <functional>
#include <string>

namespace xs {

enum class LogLevel { debug = 0, info = 1, warning = 2, error = 3, off = 4 };

using LogSink = std::function<void(LogLevel, const std::string&)>;

// Messages below the threshold are dropped. The default sink writes to stderr.
void set_log_level(LogLevel level);
LogLevel log_level();
void set_log_sink(LogSink sink);  // empty sink restores stderr

void log_message(LogLevel level, const std::string& message);
inline void log_info(const std::string& m) { log_message(LogLevel::info, m); }
inline void log_warning(const std::string& m) { log_message(LogLevel::warning, m); }
inline void log_error(const std::string& m) { log_message(LogLevel::error, m); }

}  // namespace xs
