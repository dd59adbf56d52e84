#ifndef UFM_TOOLS_CLI_HPP
#define UFM_TOOLS_CLI_HPP

#include <iosfwd>
#include <string>
#include <vector>

namespace ufm::cli {

inline constexpr const char* kVersion = "0.1.0";

/// Entry point of the `ufm` tool. Returns 0 on success, 1 on usage or I/O
/// errors and 2 when the numerics fail.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace ufm::cli

#endif  // UFM_TOOLS_CLI_HPP
