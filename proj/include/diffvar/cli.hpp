#pragma once

// Batch front end: typed experiment configuration, the five commands and
// their CSV output.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "diffvar/density_approx.hpp"
#include "diffvar/functional.hpp"
#include "diffvar/sde_engine.hpp"
#include "diffvar/variational.hpp"

namespace diffvar::cli {

/// Flat key-value configuration. Every key has a type and a default; unknown
/// keys and malformed values throw InvalidInput as soon as they are set.
class Config {
 public:
  Config();

  /// Reads `key = value` lines; `#` starts a comment, blank lines are ignored.
  void load(std::istream& in, std::string_view source = "config");
  void load_file(const std::string& path);
  /// Applies one `key=value` override.
  void apply_override(std::string_view assignment);
  void set(const std::string& key, const std::string& value);

  const std::string& str(const std::string& key) const;
  double real(const std::string& key) const;
  std::int64_t integer(const std::string& key) const;
  std::size_t count(const std::string& key) const;  // non-negative integer
  bool flag(const std::string& key) const;

  /// Sorted `key=value` lines with values in canonical form.
  std::string canonical() const;
  /// FNV-1a 64 of canonical(), as 16 hex digits.
  std::string hash() const;

 private:
  enum class Type { text, real, integer, flag };
  struct Entry {
    Type type;
    std::string value;
  };
  const Entry& entry(const std::string& key) const;
  std::map<std::string, Entry> entries_;
};

CoefficientField make_coefficients(const Config& config);
/// Preset functionals; "random" is not a path functional and is rejected here.
PathFunctional make_functional(const Config& config);
ControlFamily make_family(const Config& config, std::size_t m, std::size_t d, const TimeGrid& grid);
OptimizerOptions make_optimizer_options(const Config& config);
/// Parses "n0:a:n:eta;n0:a:n:eta;...".
std::vector<ApproximationParams> parse_schedule(std::string_view text);

/// CSV writer with the fixed column layout
/// command,config_hash,seed,n_steps,n_paths,quantity,value,std_error,status.
class CsvReport {
 public:
  CsvReport(std::string command, const Config& config);
  void set_shape(std::size_t n_steps, std::size_t n_paths);
  void row(const std::string& quantity, double value, double std_error, const std::string& status);
  const std::string& text() const { return text_; }
  std::size_t rows() const { return rows_; }

 private:
  std::string command_;
  std::string hash_;
  std::string seed_;
  std::size_t n_steps_ = 0;
  std::size_t n_paths_ = 0;
  std::string text_;
  std::size_t rows_ = 0;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitInvalid = 2;
inline constexpr int kExitNumerical = 3;

/// Runs a command on a validated configuration. Returns the exit code; the
/// report is complete only when the code is 0 (or 3 for a failed battery).
int run_command(const std::string& command, const Config& config, CsvReport& report);

/// Entry point: `diffvar <command> [--config file] [key=value ...]`.
/// CSV goes to `out`, diagnostics to `err`; nothing is written to `out`
/// unless the command produced its rows.
int main(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace diffvar::cli
