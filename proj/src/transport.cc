#include "diperf/transport.h"

#include <unistd.h>

#include <fstream>
#include <future>
#include <istream>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <openssl/evp.h>
#include <spdlog/spdlog.h>

namespace diperf {

namespace fs = std::filesystem;

std::string_view to_string(Backend backend) {
  return backend == Backend::kLocal ? "local" : "ssh";
}

Backend parse_backend(std::string_view text) {
  if (text == "local") return Backend::kLocal;
  if (text == "ssh" || text == "remote" || text == "remoteshell") {
    return Backend::kRemoteShell;
  }
  throw ParseError(fmt::format("unknown backend '{}' (expected local|ssh)", text));
}

std::vector<NodeEndpoint> parse_nodes(std::istream& in) {
  std::vector<NodeEndpoint> nodes;
  std::set<std::string> seen;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const auto fields = split_fields(line);
    if (fields.empty()) continue;
    if (fields.size() != 3) {
      throw ParseError(fmt::format("nodes line {}: expected 'node_id address backend'",
                                   line_no));
    }
    NodeEndpoint node{std::string(fields[0]), std::string(fields[1]),
                      parse_backend(fields[2])};
    if (!seen.insert(node.node_id).second) {
      throw ParseError(fmt::format("nodes line {}: duplicate node_id '{}'", line_no,
                                   node.node_id));
    }
    nodes.push_back(std::move(node));
  }
  return nodes;
}

std::vector<NodeEndpoint> load_nodes_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(fmt::format("cannot open nodes file {}", path.string()));
  return parse_nodes(in);
}

LineChannel::LineChannel(UniqueFd read_fd, UniqueFd write_fd,
                         std::optional<ChildProcess> process)
    : read_fd_(std::move(read_fd)),
      write_fd_(std::move(write_fd)),
      reader_(read_fd_.get()),
      process_(std::move(process)) {}

LineChannel::~LineChannel() { close(Millis(0)); }

bool LineChannel::send(std::string_view line) {
  std::lock_guard lock(write_mutex_);
  if (closed_ || !write_fd_.valid()) return false;
  // One write per line keeps lines whole even with concurrent senders.
  std::string framed(line);
  framed += '\n';
  try {
    write_all(write_fd_.get(), framed);
    return true;
  } catch (const NetError&) {
    return false;
  }
}

LineReader::Status LineChannel::receive(std::string& line, Millis timeout,
                                        const StopSignal* stop) {
  if (!read_fd_.valid()) return LineReader::Status::kClosed;
  return reader_.read_line(line, timeout, stop);
}

void LineChannel::close(Millis grace) {
  {
    std::lock_guard lock(write_mutex_);
    if (closed_) return;
    closed_ = true;
    write_fd_.reset();
  }
  if (process_ && process_->running()) {
    if (!process_->wait_for(grace)) process_->kill();
  }
}

bool LineChannel::closed() const {
  std::lock_guard lock(write_mutex_);
  return closed_;
}

std::optional<int> LineChannel::peer_pid() const {
  if (!process_) return std::nullopt;
  return process_->pid();
}

namespace {

std::vector<std::string> ssh_command(const NodeEndpoint& node,
                                     const std::vector<std::string>& remote,
                                     const TransportConfig& config) {
  std::vector<std::string> argv{config.ssh_program};
  argv.insert(argv.end(), config.ssh_options.begin(), config.ssh_options.end());
  argv.push_back(node.address);
  std::string joined;
  for (const auto& arg : remote) {
    if (!joined.empty()) joined += ' ';
    joined += shell_quote(arg);
  }
  argv.push_back(joined);
  return argv;
}

// Runs argv to completion; returns exit status or nullopt on timeout.
std::optional<int> run_bounded(const std::vector<std::string>& argv, Millis timeout) {
  auto child = ChildProcess::spawn(argv);
  auto status = child.wait_for(timeout);
  if (!status) child.kill();
  return status;
}

bool answers(const NodeEndpoint& node, Millis timeout, const TransportConfig& config) {
  try {
    std::vector<std::string> argv = node.backend == Backend::kLocal
                                        ? std::vector<std::string>{"true"}
                                        : ssh_command(node, {"true"}, config);
    auto status = run_bounded(argv, timeout);
    return status && *status == 0;
  } catch (const Error& e) {
    spdlog::debug("probe {}: {}", node.node_id, e.what());
    return false;
  }
}

DeploymentReport deploy_one(const fs::path& payload, const NodeEndpoint& node,
                            const TransportConfig& config) {
  DeploymentReport report{node.node_id, false, staged_path(node, payload, config), {}};
  const fs::path target(report.staged_path);
  try {
    if (node.backend == Backend::kLocal) {
      fs::create_directories(target.parent_path());
      // Copy then rename so a running copy of an older payload is untouched.
      const fs::path temp = target.string() + fmt::format(".tmp{}", ::getpid());
      fs::copy_file(payload, temp, fs::copy_options::overwrite_existing);
      fs::rename(temp, target);
      report.ok = true;
      return report;
    }
    auto mkdir =
        run_bounded(ssh_command(node, {"mkdir", "-p", target.parent_path().string()}, config),
                    config.copy_timeout);
    if (!mkdir || *mkdir != 0) {
      report.error = "remote mkdir failed";
      return report;
    }
    std::vector<std::string> scp{config.scp_program};
    scp.insert(scp.end(), config.scp_options.begin(), config.scp_options.end());
    scp.push_back(payload.string());
    scp.push_back(fmt::format("{}:{}", node.address, target.string()));
    auto status = run_bounded(scp, config.copy_timeout);
    if (!status) {
      report.error = "copy timed out";
    } else if (*status != 0) {
      report.error = fmt::format("copy exited with status {}", *status);
    } else {
      report.ok = true;
    }
  } catch (const std::exception& e) {
    report.error = e.what();
  }
  return report;
}

}  // namespace

std::vector<NodeEndpoint> probe_availability(std::span<const NodeEndpoint> candidates,
                                             Millis timeout,
                                             const TransportConfig& config) {
  if (timeout.count() <= 0) throw ValidationError("timeout", "must be > 0");
  std::vector<std::future<bool>> pending;
  pending.reserve(candidates.size());
  for (const auto& node : candidates) {
    pending.push_back(std::async(std::launch::async, [&node, timeout, &config] {
      return answers(node, timeout, config);
    }));
  }
  std::vector<NodeEndpoint> available;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (pending[i].get()) {
      available.push_back(candidates[i]);
    } else {
      spdlog::warn("node {} ({}) unavailable", candidates[i].node_id,
                   candidates[i].address);
    }
  }
  return available;
}

std::string staged_path(const NodeEndpoint& node, const fs::path& payload,
                        const TransportConfig& config) {
  return (config.staging_root / node.node_id / payload.filename()).string();
}

std::vector<DeploymentReport> distribute_code(const fs::path& payload,
                                              std::span<const NodeEndpoint> nodes,
                                              const TransportConfig& config) {
  {
    std::ifstream probe(payload, std::ios::binary);
    if (!probe) throw Error(fmt::format("payload {} is not readable", payload.string()));
  }
  std::vector<std::future<DeploymentReport>> pending;
  for (const auto& node : nodes) {
    pending.push_back(std::async(std::launch::async, [&payload, &node, &config] {
      return deploy_one(payload, node, config);
    }));
  }
  std::vector<DeploymentReport> reports;
  for (auto& p : pending) reports.push_back(p.get());
  return reports;
}

std::unique_ptr<LineChannel> open_control_channel(const NodeEndpoint& node,
                                                  const std::vector<std::string>& command,
                                                  const TransportConfig& config) {
  SpawnOptions options;
  options.pipe_stdin = true;
  options.pipe_stdout = true;
  options.inherit_stderr = true;
  auto argv = node.backend == Backend::kLocal ? command : ssh_command(node, command, config);
  auto child = ChildProcess::spawn(argv, options);
  UniqueFd read_fd(child.stdout_fd().release());
  UniqueFd write_fd(child.stdin_fd().release());
  return std::make_unique<LineChannel>(std::move(read_fd), std::move(write_fd),
                                       std::move(child));
}

namespace protocol {

std::string base64_encode(std::string_view data) {
  std::string out(4 * ((data.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(data.data()),
                                static_cast<int>(data.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::string base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) throw ParseError("base64 length is not a multiple of 4");
  std::string out(3 * text.size() / 4, '\0');
  const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(text.data()),
                                static_cast<int>(text.size()));
  if (n < 0) throw ParseError("invalid base64");
  std::size_t size = static_cast<std::size_t>(n);
  // EVP_DecodeBlock counts padding bytes as zeros.
  if (!text.empty() && text.back() == '=') --size;
  if (text.size() >= 2 && text[text.size() - 2] == '=') --size;
  out.resize(size);
  return out;
}

std::string encode_start(const TestDescription& description) {
  return fmt::format("START {}", base64_encode(to_json(description)));
}

TestDescription decode_start(std::string_view line) {
  const auto fields = split_fields(line);
  if (fields.size() != 2 || fields[0] != "START") {
    throw ParseError(fmt::format("malformed START line '{}'", line));
  }
  return description_from_json(base64_decode(fields[1]));
}

}  // namespace protocol

}  // namespace diperf
