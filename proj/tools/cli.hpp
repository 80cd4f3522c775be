#pragma once

#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

namespace CLI {
class App;
}

namespace lmbot::cli {

/// Parses and runs one command; returns the process exit code
/// (0 ok, 1 config error, 2 data error, 3 training failure).
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// The full command tree, for help introspection.
std::unique_ptr<CLI::App> make_app();

}  // namespace lmbot::cli
