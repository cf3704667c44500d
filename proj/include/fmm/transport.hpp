#pragma once

#include <condition_variable>
#include <cstdint>
#include <memory>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <atomic>

namespace fmm {

// Message key within a run phase. (src, dst, tag) identifies one message;
// senders must not reuse a tag toward the same peer while a previous message
// with that tag is still unclaimed.
struct Tag {
  std::uint32_t stage = 0;
  std::uint32_t level = 0;
  std::uint32_t aux = 0;
  friend auto operator<=>(const Tag&, const Tag&) = default;
};

// Reserved for Endpoint::barrier; engine stages must use other values.
inline constexpr std::uint32_t kBarrierStage = 0xFFFFFFFFu;

using Payload = std::vector<std::uint8_t>;

class TransportTimeout : public std::runtime_error {
 public:
  explicit TransportTimeout(const std::string& msg) : std::runtime_error(msg) {}
};

struct TransportStats {
  std::uint64_t messages_sent = 0;
  std::uint64_t bytes_sent = 0;
  std::uint64_t messages_received = 0;
  std::uint64_t bytes_received = 0;
};

// Pending receive. Created by recv_nb; the payload is claimed by wait or
// wait_any exactly once.
struct RecvHandle {
  int src = -1;
  Tag tag;
  Payload payload;
  bool claimed = false;
};

struct SendState {
  std::mutex mu;
  std::condition_variable cv;
  bool done = false;
  std::string error;

  void complete() {
    {
      std::lock_guard lk(mu);
      done = true;
    }
    cv.notify_all();
  }
  void fail(std::string why) {
    {
      std::lock_guard lk(mu);
      if (error.empty()) error = std::move(why);
    }
    cv.notify_all();
  }
};

// Pending send. An empty state means the payload was handed off synchronously.
struct SendHandle {
  std::shared_ptr<SendState> state;
};

class Inbox;

// One endpoint per rank. send_nb never blocks beyond buffer handoff; all
// blocking waits give up after watchdog_seconds with TransportTimeout.
class Endpoint {
 public:
  virtual ~Endpoint();
  Endpoint(const Endpoint&) = delete;
  Endpoint& operator=(const Endpoint&) = delete;

  int rank() const { return rank_; }
  int ranks() const { return ranks_; }
  double watchdog_seconds() const { return watchdog_; }

  virtual SendHandle send_nb(int dest, Tag tag, Payload payload) = 0;
  RecvHandle recv_nb(int src, Tag tag) const;

  bool ready(const RecvHandle& h) const;
  Payload& wait(RecvHandle& h);
  // Claims one unclaimed completed handle and returns its index.
  std::size_t wait_any(std::span<RecvHandle> handles);

  bool done(const SendHandle& h) const;
  void wait(SendHandle& h);

  void barrier();

  TransportStats stats() const;

 protected:
  Endpoint(int rank, int ranks, double watchdog_seconds);
  void check_peer(int r) const;
  void count_send(std::size_t bytes) {
    sent_msgs_.fetch_add(1, std::memory_order_relaxed);
    sent_bytes_.fetch_add(bytes, std::memory_order_relaxed);
  }

  Inbox* inbox_ = nullptr;
  int rank_ = 0;
  int ranks_ = 1;
  double watchdog_ = 60.0;
  std::uint32_t barrier_epoch_ = 0;
  std::atomic<std::uint64_t> sent_msgs_{0};
  std::atomic<std::uint64_t> sent_bytes_{0};
};

// All ranks in one process, connected by unbounded in-memory queues.
std::vector<std::unique_ptr<Endpoint>> make_memory_fabric(int ranks,
                                                          double watchdog_seconds = 60.0);

struct HostPort {
  std::string host;
  std::uint16_t port = 0;
};

// One "host:port" per line, rank = line index. '#' starts a comment.
std::vector<HostPort> parse_roster(const std::string& text);
std::vector<HostPort> load_roster(const std::string& path);

// Listens on roster[rank].port and lazily connects to peers. Frames are
// little-endian [stage u32][level u32][aux u32][len u64][payload].
std::unique_ptr<Endpoint> make_tcp_endpoint(const std::vector<HostPort>& roster, int rank,
                                            double watchdog_seconds = 60.0);

// The socket backend with every rank in-process on loopback ephemeral ports.
std::vector<std::unique_ptr<Endpoint>> make_tcp_local_fabric(int ranks,
                                                             double watchdog_seconds = 60.0);

}  // namespace fmm
