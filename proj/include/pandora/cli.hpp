#pragma once

namespace pandora::cli {

/// Entry point behind the `pandora` tool. Exit codes: 0 success, 1
/// operational failure, 2 usage error. `run` passes the binary's own exit
/// status through.
int dispatch(int argc, char** argv);

}  // namespace pandora::cli
