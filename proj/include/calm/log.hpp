#pragma once

#include <spdlog/spdlog.h>

namespace calm {

/// Shared stderr logger. Verbosity comes from CALM_LOG_LEVEL
/// (trace, debug, info, warn, error, off); the default is warn.
spdlog::logger& logger();

}  // namespace calm
