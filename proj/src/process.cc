#include "diperf/process.h"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/stat.h>
#include <sys/syscall.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <filesystem>

#include <fmt/format.h>

#ifndef CLOSE_RANGE_CLOEXEC
#define CLOSE_RANGE_CLOEXEC (1U << 2)
#endif

extern char** environ;

namespace diperf {

namespace {

std::string resolve_executable(const std::string& name) {
  if (name.find('/') != std::string::npos) return name;
  const char* path = std::getenv("PATH");
  std::string_view dirs = path ? path : "/usr/local/bin:/usr/bin:/bin";
  while (!dirs.empty()) {
    auto colon = dirs.find(':');
    auto dir = dirs.substr(0, colon);
    std::string candidate = fmt::format("{}/{}", dir.empty() ? "." : dir, name);
    if (::access(candidate.c_str(), X_OK) == 0) {
      struct stat st{};
      if (::stat(candidate.c_str(), &st) == 0 && S_ISREG(st.st_mode)) {
        return candidate;
      }
    }
    if (colon == std::string_view::npos) break;
    dirs.remove_prefix(colon + 1);
  }
  return {};
}

int decode_status(int status) {
  if (WIFEXITED(status)) return WEXITSTATUS(status);
  if (WIFSIGNALED(status)) return 128 + WTERMSIG(status);
  return 255;
}

}  // namespace

ChildProcess ChildProcess::spawn(const std::vector<std::string>& argv,
                                 const SpawnOptions& options) {
  if (argv.empty() || argv.front().empty()) throw SpawnError("empty command");
  const std::string path = resolve_executable(argv.front());
  if (path.empty()) {
    throw SpawnError(fmt::format("{}: command not found", argv.front()));
  }

  std::vector<char*> args;
  for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
  args.push_back(nullptr);

  std::vector<std::string> env_storage;
  for (char** e = environ; *e != nullptr; ++e) env_storage.emplace_back(*e);
  for (const auto& [key, value] : options.extra_env) {
    env_storage.push_back(fmt::format("{}={}", key, value));
  }
  std::vector<char*> envp;
  for (auto& e : env_storage) envp.push_back(e.data());
  envp.push_back(nullptr);

  int in_pipe[2] = {-1, -1};
  int out_pipe[2] = {-1, -1};
  int err_pipe[2] = {-1, -1};
  if (options.pipe_stdin && ::pipe2(in_pipe, O_CLOEXEC) != 0) {
    throw SpawnError(fmt::format("pipe: {}", std::strerror(errno)));
  }
  if (options.pipe_stdout && ::pipe2(out_pipe, O_CLOEXEC) != 0) {
    throw SpawnError(fmt::format("pipe: {}", std::strerror(errno)));
  }
  if (::pipe2(err_pipe, O_CLOEXEC) != 0) {
    throw SpawnError(fmt::format("pipe: {}", std::strerror(errno)));
  }
  const int devnull = ::open("/dev/null", O_RDWR | O_CLOEXEC);

  pid_t pid = ::fork();
  if (pid < 0) {
    int err = errno;
    for (int fd : {in_pipe[0], in_pipe[1], out_pipe[0], out_pipe[1], err_pipe[0],
                   err_pipe[1], devnull}) {
      if (fd >= 0) ::close(fd);
    }
    throw SpawnError(fmt::format("fork: {}", std::strerror(err)));
  }
  if (pid == 0) {
    // Child: only async-signal-safe calls from here on.
    if (options.new_process_group) ::setpgid(0, 0);
    ::dup2(options.pipe_stdin ? in_pipe[0] : devnull, STDIN_FILENO);
    if (options.pipe_stdout) {
      ::dup2(out_pipe[1], STDOUT_FILENO);
    } else if (!options.inherit_stdout) {
      ::dup2(devnull, STDOUT_FILENO);
    }
    if (!options.inherit_stderr) ::dup2(devnull, STDERR_FILENO);
    ::syscall(SYS_close_range, 3U, ~0U, CLOSE_RANGE_CLOEXEC);
    sigset_t none;
    sigemptyset(&none);
    ::sigprocmask(SIG_SETMASK, &none, nullptr);
    ::signal(SIGPIPE, SIG_DFL);
    ::execve(path.c_str(), args.data(), envp.data());
    int err = errno;
    [[maybe_unused]] auto n = ::write(err_pipe[1], &err, sizeof(err));
    ::_exit(127);
  }

  ::close(err_pipe[1]);
  if (devnull >= 0) ::close(devnull);
  ChildProcess child;
  child.pid_ = pid;
  child.own_group_ = options.new_process_group;
  if (options.new_process_group) ::setpgid(pid, pid);
  if (options.pipe_stdin) {
    ::close(in_pipe[0]);
    child.stdin_.reset(in_pipe[1]);
  }
  if (options.pipe_stdout) {
    ::close(out_pipe[1]);
    child.stdout_.reset(out_pipe[0]);
  }
  child.pidfd_.reset(static_cast<int>(::syscall(SYS_pidfd_open, pid, 0)));

  int exec_errno = 0;
  ssize_t n;
  do {
    n = ::read(err_pipe[0], &exec_errno, sizeof(exec_errno));
  } while (n < 0 && errno == EINTR);
  ::close(err_pipe[0]);
  if (n == sizeof(exec_errno)) {
    child.wait();
    throw SpawnError(fmt::format("{}: {}", argv.front(), std::strerror(exec_errno)));
  }
  return child;
}

ChildProcess::ChildProcess(ChildProcess&& other) noexcept { *this = std::move(other); }

ChildProcess& ChildProcess::operator=(ChildProcess&& other) noexcept {
  if (this != &other) {
    if (running()) kill();
    pid_ = std::exchange(other.pid_, -1);
    pidfd_ = std::move(other.pidfd_);
    stdin_ = std::move(other.stdin_);
    stdout_ = std::move(other.stdout_);
    own_group_ = other.own_group_;
    exit_status_ = std::exchange(other.exit_status_, std::nullopt);
  }
  return *this;
}

ChildProcess::~ChildProcess() {
  if (running()) kill();
}

bool ChildProcess::try_reap() {
  if (exit_status_) return true;
  int status = 0;
  pid_t rc = ::waitpid(pid_, &status, WNOHANG);
  if (rc == pid_) {
    exit_status_ = decode_status(status);
    return true;
  }
  if (rc < 0 && errno == ECHILD) {
    exit_status_ = 255;
    return true;
  }
  return false;
}

std::optional<int> ChildProcess::wait_for(Millis timeout, const StopSignal* stop) {
  if (pid_ <= 0) return exit_status_;
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  for (;;) {
    if (try_reap()) return exit_status_;
    auto left = std::chrono::duration_cast<Millis>(deadline -
                                                   std::chrono::steady_clock::now());
    if (left.count() <= 0) return std::nullopt;
    if (pidfd_.valid()) {
      pollfd fds[2] = {{pidfd_.get(), POLLIN, 0}, {stop ? stop->fd() : -1, POLLIN, 0}};
      int rc = ::poll(fds, stop ? 2 : 1, static_cast<int>(left.count()));
      if (rc > 0 && stop && (fds[1].revents & POLLIN)) {
        if (try_reap()) return exit_status_;
        return std::nullopt;
      }
    } else {
      if (stop && stop->raised()) return std::nullopt;
      ::usleep(1000);
    }
  }
}

int ChildProcess::wait() {
  while (!exit_status_) {
    int status = 0;
    pid_t rc = ::waitpid(pid_, &status, 0);
    if (rc == pid_) {
      exit_status_ = decode_status(status);
    } else if (rc < 0 && errno != EINTR) {
      exit_status_ = 255;
    }
  }
  return *exit_status_;
}

void ChildProcess::kill() {
  if (pid_ <= 0 || exit_status_) return;
  if (own_group_) ::kill(-pid_, SIGKILL);
  ::kill(pid_, SIGKILL);
  wait();
}

std::vector<std::string> split_command(std::string_view command) {
  std::vector<std::string> out;
  std::string current;
  bool in_token = false;
  char quote = 0;
  for (std::size_t i = 0; i < command.size(); ++i) {
    char c = command[i];
    if (quote == '\'') {
      if (c == '\'') {
        quote = 0;
      } else {
        current += c;
      }
    } else if (quote == '"') {
      if (c == '"') {
        quote = 0;
      } else if (c == '\\' && i + 1 < command.size() &&
                 (command[i + 1] == '"' || command[i + 1] == '\\')) {
        current += command[++i];
      } else {
        current += c;
      }
    } else if (c == '\'' || c == '"') {
      quote = c;
      in_token = true;
    } else if (c == '\\' && i + 1 < command.size()) {
      current += command[++i];
      in_token = true;
    } else if (c == ' ' || c == '\t' || c == '\n') {
      if (in_token) {
        out.push_back(std::move(current));
        current.clear();
        in_token = false;
      }
    } else {
      current += c;
      in_token = true;
    }
  }
  if (quote != 0) throw ParseError(fmt::format("unterminated quote in '{}'", command));
  if (in_token) out.push_back(std::move(current));
  return out;
}

std::string shell_quote(std::string_view arg) {
  if (!arg.empty() && arg.find_first_not_of(
                          "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ"
                          "0123456789_-./:=@,+") == std::string_view::npos) {
    return std::string(arg);
  }
  std::string out = "'";
  for (char c : arg) {
    if (c == '\'') {
      out += "'\\''";
    } else {
      out += c;
    }
  }
  out += "'";
  return out;
}

std::string self_executable() {
  return std::filesystem::read_symlink("/proc/self/exe").string();
}

}  // namespace diperf
