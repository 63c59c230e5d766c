#pragma once

#include <string_view>

namespace xmodal::log {

enum class Level { error = 0, warn = 1, info = 2, debug = 3 };

void set_level(Level level);
Level level();

void write(Level level, std::string_view message);

inline void warn(std::string_view message) { write(Level::warn, message); }
inline void info(std::string_view message) { write(Level::info, message); }
inline void debug(std::string_view message) { write(Level::debug, message); }

}  // namespace xmodal::log
