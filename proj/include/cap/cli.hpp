#pragma once

namespace cap {

// Entry point behind the `cap` binary, kept in the library so tests can
// drive subcommands in-process. argv follows main() conventions. Returns
// the process exit code: 0 success, 1 domain error, 2 usage error.
int cli_main(int argc, const char* const* argv);

} // namespace cap
