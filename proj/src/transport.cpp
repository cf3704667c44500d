#include "fmm/transport.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <deque>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>
#include <utility>

namespace fmm {

namespace {

using Clock = std::chrono::steady_clock;

Clock::time_point deadline_after(double seconds) {
  return Clock::now() + std::chrono::duration_cast<Clock::duration>(
                            std::chrono::duration<double>(seconds));
}

std::string tag_str(const Tag& t) {
  return "(" + std::to_string(t.stage) + "," + std::to_string(t.level) + "," +
         std::to_string(t.aux) + ")";
}

}  // namespace

class Inbox {
 public:
  void deliver(int src, const Tag& tag, Payload&& p) {
    std::size_t n = p.size();
    {
      std::lock_guard lk(mu_);
      slots_[Key{src, tag}].push_back(std::move(p));
      ++msgs_;
      bytes_ += n;
    }
    cv_.notify_all();
  }

  void fail(const std::string& why) {
    {
      std::lock_guard lk(mu_);
      if (error_.empty()) error_ = why;
    }
    cv_.notify_all();
  }

  bool has(int src, const Tag& tag) const {
    std::lock_guard lk(mu_);
    auto it = slots_.find(Key{src, tag});
    return it != slots_.end() && !it->second.empty();
  }

  Payload claim(int src, const Tag& tag, double timeout_s, int self) {
    std::unique_lock lk(mu_);
    auto deadline = deadline_after(timeout_s);
    for (;;) {
      if (!error_.empty()) throw std::runtime_error(error_);
      auto it = slots_.find(Key{src, tag});
      if (it != slots_.end() && !it->second.empty()) {
        Payload p = std::move(it->second.front());
        it->second.pop_front();
        if (it->second.empty()) slots_.erase(it);
        return p;
      }
      if (cv_.wait_until(lk, deadline) == std::cv_status::timeout)
        throw TransportTimeout("rank " + std::to_string(self) + ": no message from rank " +
                               std::to_string(src) + " tag " + tag_str(tag) +
                               " within watchdog");
    }
  }

  std::size_t claim_any(std::span<RecvHandle> handles, double timeout_s, int self) {
    std::unique_lock lk(mu_);
    auto deadline = deadline_after(timeout_s);
    bool open = false;
    for (const RecvHandle& h : handles) open = open || !h.claimed;
    if (!open) throw std::logic_error("wait_any: every token was already claimed");
    for (;;) {
      if (!error_.empty()) throw std::runtime_error(error_);
      for (std::size_t i = 0; i < handles.size(); ++i) {
        RecvHandle& h = handles[i];
        if (h.claimed) continue;
        auto it = slots_.find(Key{h.src, h.tag});
        if (it == slots_.end() || it->second.empty()) continue;
        h.payload = std::move(it->second.front());
        it->second.pop_front();
        if (it->second.empty()) slots_.erase(it);
        h.claimed = true;
        return i;
      }
      if (cv_.wait_until(lk, deadline) == std::cv_status::timeout)
        throw TransportTimeout("rank " + std::to_string(self) +
                               ": wait_any idle past the watchdog");
    }
  }

  std::uint64_t messages() const {
    std::lock_guard lk(mu_);
    return msgs_;
  }
  std::uint64_t bytes() const {
    std::lock_guard lk(mu_);
    return bytes_;
  }

 private:
  using Key = std::pair<int, Tag>;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::map<Key, std::deque<Payload>> slots_;
  std::string error_;
  std::uint64_t msgs_ = 0;
  std::uint64_t bytes_ = 0;
};

Endpoint::Endpoint(int rank, int ranks, double watchdog_seconds)
    : rank_(rank), ranks_(ranks), watchdog_(watchdog_seconds) {
  if (ranks < 1) throw std::invalid_argument("transport: rank count must be positive");
  if (rank < 0 || rank >= ranks) throw std::invalid_argument("transport: rank out of range");
  if (!(watchdog_seconds > 0.0))
    throw std::invalid_argument("transport: watchdog must be positive");
}

Endpoint::~Endpoint() = default;

void Endpoint::check_peer(int r) const {
  if (r < 0 || r >= ranks_)
    throw std::invalid_argument("transport: unknown rank " + std::to_string(r));
  if (r == rank_)
    throw std::invalid_argument("transport: rank " + std::to_string(r) + " addressed itself");
}

RecvHandle Endpoint::recv_nb(int src, Tag tag) const {
  check_peer(src);
  RecvHandle h;
  h.src = src;
  h.tag = tag;
  return h;
}

bool Endpoint::ready(const RecvHandle& h) const {
  return h.claimed || inbox_->has(h.src, h.tag);
}

Payload& Endpoint::wait(RecvHandle& h) {
  if (!h.claimed) {
    h.payload = inbox_->claim(h.src, h.tag, watchdog_, rank_);
    h.claimed = true;
  }
  return h.payload;
}

std::size_t Endpoint::wait_any(std::span<RecvHandle> handles) {
  return inbox_->claim_any(handles, watchdog_, rank_);
}

bool Endpoint::done(const SendHandle& h) const {
  if (!h.state) return true;
  std::lock_guard lk(h.state->mu);
  if (!h.state->error.empty()) throw std::runtime_error(h.state->error);
  return h.state->done;
}

void Endpoint::wait(SendHandle& h) {
  if (!h.state) return;
  std::unique_lock lk(h.state->mu);
  auto deadline = deadline_after(watchdog_);
  while (!h.state->done && h.state->error.empty()) {
    if (h.state->cv.wait_until(lk, deadline) == std::cv_status::timeout)
      throw TransportTimeout("rank " + std::to_string(rank_) +
                             ": send still pending past the watchdog");
  }
  if (!h.state->error.empty()) throw std::runtime_error(h.state->error);
}

void Endpoint::barrier() {
  Tag t{kBarrierStage, barrier_epoch_++, 0};
  if (ranks_ == 1) return;
  if (rank_ == 0) {
    for (int q = 1; q < ranks_; ++q) inbox_->claim(q, t, watchdog_, rank_);
    for (int q = 1; q < ranks_; ++q) send_nb(q, t, {});
  } else {
    send_nb(0, t, {});
    inbox_->claim(0, t, watchdog_, rank_);
  }
}

TransportStats Endpoint::stats() const {
  return {sent_msgs_.load(), sent_bytes_.load(), inbox_->messages(), inbox_->bytes()};
}

namespace {

struct MemoryShared {
  std::vector<std::unique_ptr<Inbox>> inboxes;
};

class MemoryEndpoint final : public Endpoint {
 public:
  MemoryEndpoint(std::shared_ptr<MemoryShared> shared, int rank, int ranks, double watchdog)
      : Endpoint(rank, ranks, watchdog), shared_(std::move(shared)) {
    inbox_ = shared_->inboxes[static_cast<std::size_t>(rank)].get();
  }

  SendHandle send_nb(int dest, Tag tag, Payload payload) override {
    check_peer(dest);
    count_send(payload.size());
    shared_->inboxes[static_cast<std::size_t>(dest)]->deliver(rank_, tag, std::move(payload));
    return {};
  }

 private:
  std::shared_ptr<MemoryShared> shared_;
};

}  // namespace

std::vector<std::unique_ptr<Endpoint>> make_memory_fabric(int ranks, double watchdog_seconds) {
  if (ranks < 1) throw std::invalid_argument("transport: rank count must be positive");
  auto shared = std::make_shared<MemoryShared>();
  for (int r = 0; r < ranks; ++r) shared->inboxes.push_back(std::make_unique<Inbox>());
  std::vector<std::unique_ptr<Endpoint>> eps;
  for (int r = 0; r < ranks; ++r)
    eps.push_back(std::make_unique<MemoryEndpoint>(shared, r, ranks, watchdog_seconds));
  return eps;
}

namespace {

constexpr std::uint32_t kHelloMagic = 0x544D4D46u;  // "FMMT"
constexpr std::uint64_t kMaxFrameBytes = 1ull << 33;

void put_u32(std::uint8_t* p, std::uint32_t v) {
  p[0] = static_cast<std::uint8_t>(v);
  p[1] = static_cast<std::uint8_t>(v >> 8);
  p[2] = static_cast<std::uint8_t>(v >> 16);
  p[3] = static_cast<std::uint8_t>(v >> 24);
}

void put_u64(std::uint8_t* p, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) p[i] = static_cast<std::uint8_t>(v >> (8 * i));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = v << 8 | p[i];
  return v;
}

bool write_full(int fd, const std::uint8_t* p, std::size_t n) {
  while (n > 0) {
    ssize_t k = ::send(fd, p, n, MSG_NOSIGNAL);
    if (k < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    p += k;
    n -= static_cast<std::size_t>(k);
  }
  return true;
}

bool read_full(int fd, std::uint8_t* p, std::size_t n) {
  while (n > 0) {
    ssize_t k = ::recv(fd, p, n, 0);
    if (k < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    if (k == 0) return false;
    p += k;
    n -= static_cast<std::size_t>(k);
  }
  return true;
}

int make_listener(std::uint16_t port, std::uint16_t* actual) {
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) return -1;
  int one = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_ANY);
  addr.sin_port = htons(port);
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 ||
      ::listen(fd, 64) != 0) {
    ::close(fd);
    return -1;
  }
  if (actual) {
    sockaddr_in got{};
    socklen_t len = sizeof(got);
    if (::getsockname(fd, reinterpret_cast<sockaddr*>(&got), &len) != 0) {
      ::close(fd);
      return -1;
    }
    *actual = ntohs(got.sin_port);
  }
  return fd;
}

int dial_once(const std::string& host, std::uint16_t port) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res) != 0) return -1;
  int fd = -1;
  for (addrinfo* ai = res; ai; ai = ai->ai_next) {
    fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(res);
  if (fd >= 0) {
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  }
  return fd;
}

struct Frame {
  Tag tag;
  Payload data;
  std::shared_ptr<SendState> st;
};

class TcpEndpoint final : public Endpoint {
 public:
  TcpEndpoint(std::vector<HostPort> roster, int rank, double watchdog, int listen_fd)
      : Endpoint(rank, static_cast<int>(roster.size()), watchdog),
        roster_(std::move(roster)),
        listen_fd_(listen_fd) {
    inbox_ = &box_;
    for (int r = 0; r < ranks_; ++r) outs_.push_back(std::make_unique<Out>());
    accept_thread_ = std::thread([this] { accept_loop(); });
  }

  ~TcpEndpoint() override {
    closing_.store(true);
    for (auto& o : outs_) {
      {
        std::lock_guard lk(o->mu);
      }
      o->cv.notify_all();
    }
    for (auto& o : outs_)
      if (o->th.joinable()) o->th.join();
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    if (accept_thread_.joinable()) accept_thread_.join();
    {
      std::lock_guard lk(conn_mu_);
      for (int fd : in_fds_) ::shutdown(fd, SHUT_RD);
    }
    for (auto& t : readers_)
      if (t.joinable()) t.join();
    for (int fd : in_fds_) ::close(fd);
  }

  SendHandle send_nb(int dest, Tag tag, Payload payload) override {
    check_peer(dest);
    count_send(payload.size());
    auto st = std::make_shared<SendState>();
    Out& o = *outs_[static_cast<std::size_t>(dest)];
    {
      std::lock_guard lk(o.mu);
      if (o.dead) throw std::runtime_error("transport: connection to rank " +
                                           std::to_string(dest) + " is down");
      o.q.push_back(Frame{tag, std::move(payload), st});
      if (!o.started) {
        o.started = true;
        o.th = std::thread([this, dest] { writer_loop(dest); });
      }
    }
    o.cv.notify_all();
    return {std::move(st)};
  }

 private:
  struct Out {
    std::mutex mu;
    std::condition_variable cv;
    std::deque<Frame> q;
    bool started = false;
    bool dead = false;
    std::thread th;
  };

  void fail_out(Out& o, const std::string& why) {
    std::deque<Frame> orphaned;
    {
      std::lock_guard lk(o.mu);
      o.dead = true;
      orphaned.swap(o.q);
    }
    for (Frame& f : orphaned)
      if (f.st) f.st->fail(why);
    box_.fail(why);
  }

  void writer_loop(int dest) {
    Out& o = *outs_[static_cast<std::size_t>(dest)];
    const HostPort& hp = roster_[static_cast<std::size_t>(dest)];
    auto deadline = deadline_after(watchdog_);
    int fd = -1;
    for (std::chrono::milliseconds back{1};; back = std::min(back * 2,
                                                             std::chrono::milliseconds{256})) {
      fd = dial_once(hp.host, hp.port);
      if (fd >= 0) break;
      if (closing_.load() || Clock::now() > deadline) {
        fail_out(o, "rank " + std::to_string(rank_) + ": cannot reach rank " +
                        std::to_string(dest) + " at " + hp.host + ":" +
                        std::to_string(hp.port));
        return;
      }
      std::this_thread::sleep_for(back);
    }
    std::uint8_t hello[8];
    put_u32(hello, kHelloMagic);
    put_u32(hello + 4, static_cast<std::uint32_t>(rank_));
    if (!write_full(fd, hello, sizeof(hello))) {
      ::close(fd);
      fail_out(o, "transport: hello to rank " + std::to_string(dest) + " failed");
      return;
    }
    for (;;) {
      Frame f;
      {
        std::unique_lock lk(o.mu);
        o.cv.wait(lk, [&] { return !o.q.empty() || closing_.load(); });
        if (o.q.empty()) break;
        f = std::move(o.q.front());
        o.q.pop_front();
      }
      std::uint8_t head[20];
      put_u32(head, f.tag.stage);
      put_u32(head + 4, f.tag.level);
      put_u32(head + 8, f.tag.aux);
      put_u64(head + 12, f.data.size());
      if (!write_full(fd, head, sizeof(head)) ||
          (!f.data.empty() && !write_full(fd, f.data.data(), f.data.size()))) {
        if (f.st) f.st->fail("transport: write to rank " + std::to_string(dest) + " failed");
        ::close(fd);
        fail_out(o, "transport: write to rank " + std::to_string(dest) + " failed");
        return;
      }
      if (f.st) f.st->complete();
    }
    ::shutdown(fd, SHUT_WR);
    ::close(fd);
  }

  void accept_loop() {
    for (;;) {
      int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) {
        if (errno == EINTR && !closing_.load()) continue;
        break;
      }
      int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
      std::uint8_t hello[8];
      if (!read_full(fd, hello, sizeof(hello)) || get_u32(hello) != kHelloMagic) {
        ::close(fd);
        continue;
      }
      int peer = static_cast<int>(get_u32(hello + 4));
      if (peer < 0 || peer >= ranks_ || peer == rank_) {
        ::close(fd);
        continue;
      }
      std::lock_guard lk(conn_mu_);
      in_fds_.push_back(fd);
      readers_.emplace_back([this, fd, peer] { reader_loop(fd, peer); });
    }
  }

  void reader_loop(int fd, int peer) {
    for (;;) {
      std::uint8_t head[20];
      if (!read_full(fd, head, sizeof(head))) break;
      Tag tag{get_u32(head), get_u32(head + 4), get_u32(head + 8)};
      std::uint64_t len = get_u64(head + 12);
      if (len > kMaxFrameBytes) {
        box_.fail("transport: oversized frame from rank " + std::to_string(peer));
        break;
      }
      Payload p(static_cast<std::size_t>(len));
      if (len && !read_full(fd, p.data(), p.size())) {
        if (!closing_.load())
          box_.fail("transport: truncated frame from rank " + std::to_string(peer));
        break;
      }
      box_.deliver(peer, tag, std::move(p));
    }
  }

  std::vector<HostPort> roster_;
  int listen_fd_ = -1;
  Inbox box_;
  std::vector<std::unique_ptr<Out>> outs_;
  std::thread accept_thread_;
  std::mutex conn_mu_;
  std::vector<int> in_fds_;
  std::vector<std::thread> readers_;
  std::atomic<bool> closing_{false};
};

}  // namespace

std::vector<HostPort> parse_roster(const std::string& text) {
  std::vector<HostPort> roster;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    auto e = line.find_last_not_of(" \t\r");
    std::string entry = line.substr(b, e - b + 1);
    auto colon = entry.rfind(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 == entry.size())
      throw std::runtime_error("roster line " + std::to_string(lineno) +
                               ": expected host:port, got '" + entry + "'");
    int port = 0;
    try {
      std::size_t used = 0;
      port = std::stoi(entry.substr(colon + 1), &used);
      if (used != entry.size() - colon - 1) port = -1;
    } catch (const std::exception&) {
      port = -1;
    }
    if (port < 1 || port > 65535)
      throw std::runtime_error("roster line " + std::to_string(lineno) + ": bad port in '" +
                               entry + "'");
    roster.push_back({entry.substr(0, colon), static_cast<std::uint16_t>(port)});
  }
  if (roster.empty()) throw std::runtime_error("roster: no host:port entries");
  return roster;
}

std::vector<HostPort> load_roster(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("roster: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_roster(buf.str());
}

std::unique_ptr<Endpoint> make_tcp_endpoint(const std::vector<HostPort>& roster, int rank,
                                            double watchdog_seconds) {
  if (rank < 0 || rank >= static_cast<int>(roster.size()))
    throw std::invalid_argument("transport: rank has no roster entry");
  std::uint16_t port = roster[static_cast<std::size_t>(rank)].port;
  int fd = make_listener(port, nullptr);
  if (fd < 0)
    throw std::runtime_error("transport: cannot listen on port " + std::to_string(port));
  return std::make_unique<TcpEndpoint>(roster, rank, watchdog_seconds, fd);
}

std::vector<std::unique_ptr<Endpoint>> make_tcp_local_fabric(int ranks,
                                                             double watchdog_seconds) {
  if (ranks < 1) throw std::invalid_argument("transport: rank count must be positive");
  std::vector<int> fds;
  std::vector<HostPort> roster;
  for (int r = 0; r < ranks; ++r) {
    std::uint16_t port = 0;
    int fd = make_listener(0, &port);
    if (fd < 0) {
      for (int f : fds) ::close(f);
      throw std::runtime_error("transport: cannot open loopback listener");
    }
    fds.push_back(fd);
    roster.push_back({"127.0.0.1", port});
  }
  std::vector<std::unique_ptr<Endpoint>> eps;
  for (int r = 0; r < ranks; ++r)
    eps.push_back(std::make_unique<TcpEndpoint>(roster, r, watchdog_seconds, fds[r]));
  return eps;
}

}  // namespace fmm
