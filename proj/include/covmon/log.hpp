#pragma once

#include <iostream>
#include <string>

namespace covmon {

inline void log_warn(const std::string& message) { std::cerr << "[covmon] warning: " << message << "\n"; }
inline void log_info(const std::string& message) { std::cerr << "[covmon] " << message << "\n"; }

}  // namespace covmon
