#pragma once

#include <filesystem>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

// The xmgan command line: make-data, train, generate, evaluate, classify and
// gradcheck. Exit codes: 0 success, 1 runtime failure, 2 usage error.
namespace xmgan::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

// Bad flags, flag values or config file entries.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// `args` excludes the program name.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// $XMGAN_RUN_DIR if set, otherwise "runs".
std::filesystem::path runs_root();

// Comma-separated simplex weights. UsageError when an entry is not a number,
// is negative, or the entries do not sum to 1 within 1e-9.
std::vector<double> parse_alpha(std::string_view text);

// "key=value" lines ('#' comments, blank lines) turned into "--key value"
// arguments, underscores in keys becoming dashes. UsageError on malformed lines.
std::vector<std::string> config_file_args(const std::filesystem::path& path);

}  // namespace xmgan::cli
