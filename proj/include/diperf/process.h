#pragma once

// Child process management: spawn with optional stdio pipes, bounded waits,
// and process-group kill.

#include <sys/types.h>

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "diperf/net.h"

namespace diperf {

// The executable could not be started (missing, not executable, ...).
class SpawnError : public Error {
 public:
  using Error::Error;
};

struct SpawnOptions {
  bool pipe_stdin = false;
  bool pipe_stdout = false;
  // Otherwise stdout/stderr go to /dev/null.
  bool inherit_stdout = false;
  bool inherit_stderr = false;
  // Leader of a fresh process group so kill() reaches grandchildren too.
  bool new_process_group = true;
  std::vector<std::pair<std::string, std::string>> extra_env;
};

class ChildProcess {
 public:
  static ChildProcess spawn(const std::vector<std::string>& argv,
                            const SpawnOptions& options = {});

  ChildProcess() = default;
  ChildProcess(ChildProcess&&) noexcept;
  ChildProcess& operator=(ChildProcess&&) noexcept;
  ~ChildProcess();

  pid_t pid() const { return pid_; }
  bool running() const { return pid_ > 0 && !exit_status_; }

  // Write end of the child's stdin / read end of its stdout, when piped.
  UniqueFd& stdin_fd() { return stdin_; }
  UniqueFd& stdout_fd() { return stdout_; }

  // Exit status (128+signal for signalled children) or nullopt when the
  // timeout elapsed or the stop signal fired first.
  std::optional<int> wait_for(Millis timeout, const StopSignal* stop = nullptr);
  int wait();
  // SIGKILL to the child (and its group) followed by a reap.
  void kill();
  std::optional<int> exit_status() const { return exit_status_; }

 private:
  bool try_reap();

  pid_t pid_ = -1;
  UniqueFd pidfd_;
  UniqueFd stdin_;
  UniqueFd stdout_;
  bool own_group_ = false;
  std::optional<int> exit_status_;
};

// Shell-like split honouring single quotes, double quotes and backslashes.
std::vector<std::string> split_command(std::string_view command);

// Quote an argument for a POSIX shell.
std::string shell_quote(std::string_view arg);

// Absolute path of the running executable.
std::string self_executable();

}  // namespace diperf
