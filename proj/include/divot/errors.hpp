#pragma once

#include <stdexcept>
#include <string>

namespace divot {

// Error taxonomy, aligned with the CLI exit codes:
//   usage  -> 1 (bad flags / missing subcommand, raised by the CLI layer)
//   config -> 2 (unparseable or out-of-range configuration)
//   runtime-> 3 (everything that goes wrong after a well-formed start)
enum class ErrKind { usage = 1, config = 2, runtime = 3 };

class Error : public std::runtime_error {
public:
  Error(ErrKind kind, std::string msg) : std::runtime_error(std::move(msg)), kind_(kind) {}
  ErrKind kind() const { return kind_; }

private:
  ErrKind kind_;
};

[[noreturn]] inline void fail_config(const std::string& msg) { throw Error(ErrKind::config, msg); }
[[noreturn]] inline void fail_runtime(const std::string& msg) { throw Error(ErrKind::runtime, msg); }

}  // namespace divot
