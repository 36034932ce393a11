#pragma once

// Node liveness probing, client-code distribution and the line-oriented
// control channel between controller and testers. Two interchangeable
// backends: Local (child processes on this host, pipes as the channel) and
// RemoteShell (the system ssh/scp executables).

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "diperf/model.h"
#include "diperf/net.h"
#include "diperf/process.h"

namespace diperf {

enum class Backend { kLocal, kRemoteShell };

std::string_view to_string(Backend backend);
Backend parse_backend(std::string_view text);

struct NodeEndpoint {
  std::string node_id;
  std::string address;
  Backend backend = Backend::kLocal;

  bool operator==(const NodeEndpoint&) const = default;
};

// Nodes file: one "node_id address backend" triple per line; '#' comments.
std::vector<NodeEndpoint> parse_nodes(std::istream& in);
std::vector<NodeEndpoint> load_nodes_file(const std::filesystem::path& path);

struct TransportConfig {
  std::string ssh_program = "ssh";
  std::string scp_program = "scp";
  std::vector<std::string> ssh_options = {"-o", "BatchMode=yes", "-o",
                                          "ConnectTimeout=10"};
  std::vector<std::string> scp_options = {"-q", "-p", "-o", "BatchMode=yes"};
  // Payloads land in <staging_root>/<node_id>/ on every node.
  std::filesystem::path staging_root = "/tmp/diperf-staging";
  Millis copy_timeout{120000};
};

// Bidirectional newline-delimited channel. send() is safe from any thread;
// receive() must be driven by a single reader.
class LineChannel {
 public:
  LineChannel(UniqueFd read_fd, UniqueFd write_fd,
              std::optional<ChildProcess> process = std::nullopt);
  ~LineChannel();
  LineChannel(const LineChannel&) = delete;
  LineChannel& operator=(const LineChannel&) = delete;

  // Returns false once the channel is closed.
  bool send(std::string_view line);
  LineReader::Status receive(std::string& line, Millis timeout,
                             const StopSignal* stop = nullptr);
  // Closes our write side so the peer observes end-of-stream, then waits up
  // to `grace` for the peer process (if any) before killing it.
  void close(Millis grace = Millis(2000));
  bool closed() const;
  std::optional<int> peer_pid() const;

 private:
  mutable std::mutex write_mutex_;
  UniqueFd read_fd_;
  UniqueFd write_fd_;
  LineReader reader_;
  std::optional<ChildProcess> process_;
  bool closed_ = false;
};

// Nodes that answered a trivial command within `timeout`, in input order.
std::vector<NodeEndpoint> probe_availability(std::span<const NodeEndpoint> candidates,
                                             Millis timeout,
                                             const TransportConfig& config);

struct DeploymentReport {
  std::string node_id;
  bool ok = false;
  std::string staged_path;
  std::string error;
};

std::string staged_path(const NodeEndpoint& node, const std::filesystem::path& payload,
                        const TransportConfig& config);

// Copies the payload to every node; a failure on one node never aborts the
// others. Reports are in input order.
std::vector<DeploymentReport> distribute_code(const std::filesystem::path& payload,
                                              std::span<const NodeEndpoint> nodes,
                                              const TransportConfig& config);

// Starts `command` on the node with its stdin/stdout as the channel.
std::unique_ptr<LineChannel> open_control_channel(const NodeEndpoint& node,
                                                  const std::vector<std::string>& command,
                                                  const TransportConfig& config);

// Control protocol messages.
//   controller -> tester: START <base64(json)>, PING, STOP
//   tester -> controller: ACK, PONG, REC ... OFF <o> <u>, BYE <reason>
namespace protocol {

std::string encode_start(const TestDescription& description);
// Throws ParseError on anything that is not a well-formed START line.
TestDescription decode_start(std::string_view line);

std::string base64_encode(std::string_view data);
std::string base64_decode(std::string_view text);

inline constexpr std::string_view kAck = "ACK";
inline constexpr std::string_view kPing = "PING";
inline constexpr std::string_view kPong = "PONG";
inline constexpr std::string_view kStop = "STOP";
inline constexpr std::string_view kBye = "BYE";

}  // namespace protocol

}  // namespace diperf
