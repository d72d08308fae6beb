#pragma once

#include <memory>

#include <spdlog/spdlog.h>

namespace cnncert {

/// Shared stderr logger. The level comes from CNNCERT_LOG (error, warn, info,
/// debug); unset means warn.
std::shared_ptr<spdlog::logger> logger();

}  // namespace cnncert
