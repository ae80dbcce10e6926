#pragma once

namespace cmnet {

// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
// Failures leave error.json in the output directory when it can be created.
int run_cli(int argc, char** argv);

}  // namespace cmnet
