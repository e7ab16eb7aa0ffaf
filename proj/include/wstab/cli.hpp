#pragma once

#include <iosfwd>

namespace wstab {

/// Command-line entry point. Returns 0 on success, 1 on usage errors, 2 on
/// data/model errors (including a failed gradient check).
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace wstab
