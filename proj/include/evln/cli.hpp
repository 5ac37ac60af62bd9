#pragma once

#include <iosfwd>

namespace evln {

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitIo = 2;
inline constexpr int kExitNumeric = 3;

/// Entry point of the evln tool. Subcommands:
///   run <config> [--out DIR]
///   ablate <config> [--seeds N] [--jobs J] [--out DIR]
///   sweep-lambda <config> --values 0.1,0.5,1.0 [--seeds N] [--jobs J] [--out DIR]
///   gradcheck [--seed S] [--tol T]
///   report <results-dir>
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace evln
