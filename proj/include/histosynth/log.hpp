#pragma once

#include <string_view>

// Thin logging facade. Translation units that include torch headers cannot
// include spdlog (torch ships an incompatible fmt), so they log through here.
namespace histosynth::log {

void info(std::string_view message);
void warn(std::string_view message);
void error(std::string_view message);

}  // namespace histosynth::log
