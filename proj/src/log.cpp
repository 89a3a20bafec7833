#include "entsel/log.hpp"

#include <cstdlib>
#include <string>

#include <spdlog/sinks/stdout_color_sinks.h>

namespace entsel {

void init_logging() {
  const char* env = std::getenv("E2_LOG");
  auto level = spdlog::level::warn;
  if (env != nullptr && *env != '\0') level = spdlog::level::from_str(env);
  if (!spdlog::get("entsel")) spdlog::set_default_logger(spdlog::stderr_color_mt("entsel"));
  spdlog::set_level(level);
  spdlog::set_pattern("[%H:%M:%S.%e] [%^%l%$] %v");
}

}  // namespace entsel
