#pragma once

#include <atomic>
#include <cerrno>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include "protobank/bank.hpp"
#include "protobank/codec.hpp"
#include "protobank/error.hpp"

namespace protobank {

enum class Opcode : std::uint8_t { kPut = 1, kGet = 2, kList = 3 };
enum class Status : std::uint8_t { kOk = 0, kNotFound = 1, kBadRequest = 2, kServerError = 3 };

inline bool valid_source_id(std::string_view id) {
  if (id.empty() || id.size() > 64) return false;
  for (char c : id) {
    const bool ok = (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_' || c == '-';
    if (!ok) return false;
  }
  return true;
}

// One sealed prototype-set file per source id.
class BankStore {
 public:
  explicit BankStore(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
  }

  // Validates, then atomically replaces the entry for the set's source id.
  std::string put(const Bytes& container) {
    const PrototypeSet s = deserialize_set(container);
    if (!valid_source_id(s.source_id)) throw FormatError("source id '" + s.source_id + "' is not a safe name");
    std::lock_guard<std::mutex> lock(write_mu_);
    write_file_atomic(path_of(s.source_id), container);
    return s.source_id;
  }

  Bytes get(const std::string& id) const {
    if (!valid_source_id(id)) throw NotFoundError("unknown source id '" + id + "'");
    const auto p = path_of(id);
    if (!std::filesystem::exists(p)) throw NotFoundError("unknown source id '" + id + "'");
    return read_file(p);
  }

  // Source ids with their created_at stamps, sorted by id.
  std::vector<std::pair<std::string, std::uint64_t>> list() const {
    std::map<std::string, std::uint64_t> out;
    for (const auto& e : std::filesystem::directory_iterator(dir_)) {
      if (e.path().extension() != ".pbk") continue;
      try {
        const PrototypeSet s = deserialize_set(read_file(e.path()));
        out[s.source_id] = s.created_at;
      } catch (const Error&) {
        // Skip files replaced or damaged behind our back.
      }
    }
    return {out.begin(), out.end()};
  }

  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path path_of(const std::string& id) const { return dir_ / (id + ".pbk"); }

  std::filesystem::path dir_;
  std::mutex write_mu_;
};

struct Response {
  Status status = Status::kOk;
  Bytes body;
};

namespace detail {

inline Response error_response(Status s, const std::string& msg) {
  return {s, Bytes(msg.begin(), msg.end())};
}

}  // namespace detail

// Request bodies:
//   PUT  prototype-set container          -> source id
//   GET  u32 count, count x (u32 len, id)  -> u32 count, count x (u64 len, stored container)
//   LIST empty                            -> u32 count, count x (u32 len, id, u64 created_at)
inline Response handle_request(BankStore& store, std::uint8_t opcode, const Bytes& body) {
  try {
    switch (static_cast<Opcode>(opcode)) {
      case Opcode::kPut: {
        const std::string id = store.put(body);
        return {Status::kOk, Bytes(id.begin(), id.end())};
      }
      case Opcode::kGet: {
        ByteReader r(body);
        const std::uint32_t n = r.u32();
        if (n > body.size() / 4) throw FormatError("bad id count");
        std::vector<Bytes> found;
        for (std::uint32_t i = 0; i < n; ++i) found.push_back(store.get(r.str(256)));
        if (r.remaining() != 0) throw FormatError("trailing bytes in GET");
        ByteWriter w;
        w.u32(n);
        for (const auto& b : found) {
          w.u64(b.size());
          w.raw(b);
        }
        return {Status::kOk, std::move(w).bytes()};
      }
      case Opcode::kList: {
        if (!body.empty()) throw FormatError("LIST takes no body");
        const auto items = store.list();
        ByteWriter w;
        w.u32(static_cast<std::uint32_t>(items.size()));
        for (const auto& [id, ts] : items) {
          w.str(id);
          w.u64(ts);
        }
        return {Status::kOk, std::move(w).bytes()};
      }
    }
    return detail::error_response(Status::kBadRequest, "unknown opcode " + std::to_string(opcode));
  } catch (const NotFoundError& e) {
    return detail::error_response(Status::kNotFound, e.what());
  } catch (const FormatError& e) {
    return detail::error_response(Status::kBadRequest, e.what());
  } catch (const std::exception& e) {
    return detail::error_response(Status::kServerError, e.what());
  }
}

// ---------------------------------------------------------------------------
// Framing: u32 length (of what follows) + u8 tag + body. Requests carry the
// opcode in the tag, responses the status.

namespace net {

inline constexpr std::uint32_t kMaxFrame = 1u << 30;

inline bool read_exact(int fd, std::uint8_t* p, std::size_t n) {
  while (n > 0) {
    const ssize_t got = ::recv(fd, p, n, 0);
    if (got == 0) return false;
    if (got < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    p += got;
    n -= static_cast<std::size_t>(got);
  }
  return true;
}

inline bool write_all(int fd, const std::uint8_t* p, std::size_t n) {
  while (n > 0) {
    const ssize_t put = ::send(fd, p, n, MSG_NOSIGNAL);
    if (put < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    p += put;
    n -= static_cast<std::size_t>(put);
  }
  return true;
}

inline bool send_frame(int fd, std::uint8_t tag, const Bytes& body) {
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(body.size() + 1));
  w.u8(tag);
  const Bytes head = std::move(w).bytes();
  return write_all(fd, head.data(), head.size()) && write_all(fd, body.data(), body.size());
}

// false on clean EOF before a frame starts; throws on malformed frames.
inline bool recv_frame(int fd, std::uint8_t& tag, Bytes& body) {
  std::uint8_t head[5];
  if (!read_exact(fd, head, 4)) return false;
  const std::uint32_t len = static_cast<std::uint32_t>(head[0]) | (static_cast<std::uint32_t>(head[1]) << 8) |
                            (static_cast<std::uint32_t>(head[2]) << 16) | (static_cast<std::uint32_t>(head[3]) << 24);
  if (len == 0 || len > kMaxFrame) throw FormatError("bad frame length " + std::to_string(len));
  if (!read_exact(fd, head + 4, 1)) throw FormatError("connection closed mid-frame");
  tag = head[4];
  body.resize(len - 1);
  if (!read_exact(fd, body.data(), body.size())) throw FormatError("connection closed mid-frame");
  return true;
}

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
};

// "host:port" or ":port" or "port".
inline Endpoint parse_endpoint(const std::string& s) {
  Endpoint e;
  const auto colon = s.rfind(':');
  std::string port = s;
  if (colon != std::string::npos) {
    if (colon > 0) e.host = s.substr(0, colon);
    port = s.substr(colon + 1);
  }
  try {
    std::size_t used = 0;
    const unsigned long v = std::stoul(port, &used);
    if (used != port.size() || v > 65535) throw std::out_of_range("port");
    e.port = static_cast<std::uint16_t>(v);
  } catch (const std::exception&) {
    throw ConfigError("bad address '" + s + "', expected host:port");
  }
  return e;
}

inline sockaddr_in resolve(const Endpoint& e) {
  sockaddr_in a{};
  a.sin_family = AF_INET;
  a.sin_port = htons(e.port);
  if (::inet_pton(AF_INET, e.host.c_str(), &a.sin_addr) == 1) return a;
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(e.host.c_str(), nullptr, &hints, &res) != 0 || !res) {
    throw ConfigError("cannot resolve host '" + e.host + "'");
  }
  a.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
  ::freeaddrinfo(res);
  return a;
}

class Socket {
 public:
  explicit Socket(int fd = -1) : fd_(fd) {}
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket() { reset(); }

  int fd() const { return fd_; }
  void reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_;
};

}  // namespace net

// Thread-per-connection TCP server over a BankStore.
class BankServer {
 public:
  BankServer(std::filesystem::path store_dir, const std::string& listen = "127.0.0.1:0") : store_(std::move(store_dir)) {
    const auto ep = net::parse_endpoint(listen);
    net::Socket s(::socket(AF_INET, SOCK_STREAM, 0));
    if (s.fd() < 0) throw Error(std::string("socket: ") + std::strerror(errno));
    int one = 1;
    ::setsockopt(s.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr = net::resolve(ep);
    if (::bind(s.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
      throw Error("bind " + listen + ": " + std::strerror(errno));
    }
    if (::listen(s.fd(), 64) != 0) throw Error(std::string("listen: ") + std::strerror(errno));
    socklen_t len = sizeof addr;
    ::getsockname(s.fd(), reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    listener_ = std::move(s);
    acceptor_ = std::thread([this] { accept_loop(); });
  }

  BankServer(const BankServer&) = delete;
  BankServer& operator=(const BankServer&) = delete;
  ~BankServer() { stop(); }

  std::uint16_t port() const { return port_; }
  BankStore& store() { return store_; }

  void stop() {
    if (stopping_.exchange(true)) return;
    ::shutdown(listener_.fd(), SHUT_RDWR);
    if (acceptor_.joinable()) acceptor_.join();
    std::vector<std::thread> workers;
    {
      std::lock_guard<std::mutex> lock(mu_);
      for (int fd : open_) ::shutdown(fd, SHUT_RDWR);
      workers.swap(workers_);
    }
    for (auto& t : workers) t.join();
    listener_.reset();
  }

  // Blocks until stop() is called from another thread.
  void wait() {
    if (acceptor_.joinable()) acceptor_.join();
  }

 private:
  void accept_loop() {
    while (!stopping_) {
      const int fd = ::accept(listener_.fd(), nullptr, nullptr);
      if (fd < 0) {
        if (errno == EINTR) continue;
        return;
      }
      std::lock_guard<std::mutex> lock(mu_);
      if (stopping_) {
        ::close(fd);
        return;
      }
      open_.push_back(fd);
      workers_.emplace_back([this, fd] { serve(fd); });
    }
  }

  void serve(int fd) {
    try {
      std::uint8_t tag = 0;
      Bytes body;
      while (net::recv_frame(fd, tag, body)) {
        const Response r = handle_request(store_, tag, body);
        if (!net::send_frame(fd, static_cast<std::uint8_t>(r.status), r.body)) break;
      }
    } catch (const std::exception&) {
      // Malformed framing: drop the connection.
    }
    std::lock_guard<std::mutex> lock(mu_);
    std::erase(open_, fd);
    ::close(fd);
  }

  BankStore store_;
  net::Socket listener_;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::thread acceptor_;
  std::mutex mu_;
  std::vector<int> open_;
  std::vector<std::thread> workers_;
};

class BankClient {
 public:
  explicit BankClient(const std::string& address) {
    const auto ep = net::parse_endpoint(address);
    net::Socket s(::socket(AF_INET, SOCK_STREAM, 0));
    if (s.fd() < 0) throw Error(std::string("socket: ") + std::strerror(errno));
    sockaddr_in addr = net::resolve(ep);
    if (::connect(s.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
      throw Error("connect " + address + ": " + std::strerror(errno));
    }
    int one = 1;
    ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    sock_ = std::move(s);
  }

  std::string put(const Bytes& container) {
    const Bytes r = call(Opcode::kPut, container);
    return std::string(r.begin(), r.end());
  }

  void put(const PrototypeSet& s) { put(serialize(s)); }

  // Stored containers, in request order.
  std::vector<Bytes> get_raw(const std::vector<std::string>& ids) {
    ByteWriter w;
    w.u32(static_cast<std::uint32_t>(ids.size()));
    for (const auto& id : ids) w.str(id);
    const Bytes body = call(Opcode::kGet, std::move(w).bytes());
    ByteReader r(body);
    std::vector<Bytes> out(r.u32());
    for (auto& b : out) {
      const std::uint64_t len = r.u64();
      if (len > r.remaining()) throw FormatError("truncated GET response");
      const std::string s = r.raw(static_cast<std::size_t>(len));
      b.assign(s.begin(), s.end());
    }
    return out;
  }

  MemoryBank get(const std::vector<std::string>& ids) {
    std::vector<PrototypeSet> sets;
    for (const auto& b : get_raw(ids)) sets.push_back(deserialize_set(b));
    return assemble(std::move(sets));
  }

  std::vector<std::pair<std::string, std::uint64_t>> list() {
    const Bytes body = call(Opcode::kList, {});
    ByteReader r(body);
    std::vector<std::pair<std::string, std::uint64_t>> out(r.u32());
    for (auto& [id, ts] : out) {
      id = r.str(256);
      ts = r.u64();
    }
    return out;
  }

 private:
  Bytes call(Opcode op, const Bytes& body) {
    if (!net::send_frame(sock_.fd(), static_cast<std::uint8_t>(op), body)) throw Error("send failed");
    std::uint8_t status = 0;
    Bytes resp;
    if (!net::recv_frame(sock_.fd(), status, resp)) throw Error("server closed the connection");
    const std::string msg(resp.begin(), resp.end());
    switch (static_cast<Status>(status)) {
      case Status::kOk: return resp;
      case Status::kNotFound: throw NotFoundError(msg);
      case Status::kBadRequest: throw FormatError(msg);
      default: throw Error("server error: " + msg);
    }
  }

  net::Socket sock_;
};

}  // namespace protobank
