#pragma once

#include <spdlog/spdlog.h>

namespace entsel {

/// Sets the global log level from E2_LOG (trace, debug, info, warn, error,
/// off). Default is warn so library code stays quiet in tests.
void init_logging();

}  // namespace entsel
