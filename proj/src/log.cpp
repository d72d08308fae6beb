#include "cnncert/log.hpp"

#include <cstdlib>
#include <string>

#include <spdlog/sinks/stdout_sinks.h>

namespace cnncert {

namespace {

spdlog::level::level_enum level_from_env() {
  const char* raw = std::getenv("CNNCERT_LOG");
  if (raw == nullptr || *raw == '\0') return spdlog::level::warn;
  const auto level = spdlog::level::from_str(raw);
  // from_str maps unknown names to off; keep warnings visible instead.
  return level == spdlog::level::off && std::string(raw) != "off" ? spdlog::level::warn : level;
}

}  // namespace

std::shared_ptr<spdlog::logger> logger() {
  static const std::shared_ptr<spdlog::logger> instance = [] {
    auto log = std::make_shared<spdlog::logger>("cnncert", std::make_shared<spdlog::sinks::stderr_sink_mt>());
    log->set_level(level_from_env());
    log->set_pattern("[%l] %v");
    return log;
  }();
  return instance;
}

}  // namespace cnncert
