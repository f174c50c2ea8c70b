#pragma once

namespace cornerdet {

/// Exit codes: 0 ok, 1 user error (bad arguments, files, config), 2 internal error.
int cli_main(int argc, char** argv);

}  // namespace cornerdet
