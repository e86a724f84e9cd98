#include "histosynth/log.hpp"

#include <spdlog/spdlog.h>

namespace histosynth::log {

void info(std::string_view message) { spdlog::info("{}", message); }
void warn(std::string_view message) { spdlog::warn("{}", message); }
void error(std::string_view message) { spdlog::error("{}", message); }

}  // namespace histosynth::log
