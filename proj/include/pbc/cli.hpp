#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "pbc/image.hpp"

namespace pbc {

enum ExitCode : int { exit_ok = 0, exit_failure = 1, exit_config = 2, exit_data = 3, exit_missing = 4 };

// Entry point of the `pbc` tool: prepare, train, analyze, mirc-eval.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Binary or ASCII PGM (P5/P2) or binary PPM (P6), scaled to [0, 1].
Image read_netpbm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Image& image);

} // namespace pbc
