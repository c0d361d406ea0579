#pragma once

#include <memory>

#include <CLI11.hpp>

namespace exmap::cli {

/// Builds the full command tree. Each subcommand's callback runs the work, so
/// parsing a complete argv executes it; tests can also introspect the tree.
std::unique_ptr<CLI::App> build_app();

/// Parses and runs; prints "error: <class>: <message>" to stderr and returns
/// a nonzero exit code on failure.
int run_cli(int argc, const char* const* argv);

}  // namespace exmap::cli
