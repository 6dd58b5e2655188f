#pragma once

namespace patchsae {

/// Entry point of the `patchsae` command. Returns 0 on success, 1 on
/// contract/config/format/lookup errors, 2 on usage errors.
int run_cli(int argc, const char* const* argv);

} // namespace patchsae
