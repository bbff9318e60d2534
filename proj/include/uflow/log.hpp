#pragma once

namespace uflow {

/// Configure the library logger from the UF_LOG environment variable
/// (trace, debug, info, warn, error, off). Defaults to warn. Idempotent.
void init_logging();

}  // namespace uflow
