#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cstring>

#include "pacbti/attestation.hpp"

namespace pacbti {

namespace {

// "host:port"; empty host binds/connects on 127.0.0.1.
sockaddr_in parse_addr(const std::string& host_port) {
    std::string host = "127.0.0.1";
    std::string port = host_port;
    if (const size_t c = host_port.rfind(':'); c != std::string::npos) {
        if (c > 0)
            host = host_port.substr(0, c);
        port = host_port.substr(c + 1);
    }
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(uint16_t(std::stoi(port)));
    if (inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1)
        throw SimError("bad address: " + host_port);
    return addr;
}

} // namespace

TcpStream::~TcpStream() {
    if (fd_ >= 0)
        ::close(fd_);
}

size_t TcpStream::read(uint8_t* buf, size_t n) {
    const ssize_t r = ::recv(fd_, buf, n, 0);
    if (r < 0)
        throw TransportClosed();
    return size_t(r);
}

void TcpStream::write(std::span<const uint8_t> data) {
    size_t off = 0;
    while (off < data.size()) {
        const ssize_t w = ::send(fd_, data.data() + off, data.size() - off, MSG_NOSIGNAL);
        if (w <= 0)
            throw TransportClosed();
        off += size_t(w);
    }
}

std::unique_ptr<TcpStream> tcp_connect(const std::string& host_port) {
    const sockaddr_in addr = parse_addr(host_port);
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0)
        throw SimError("socket() failed");
    if (::connect(fd, reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) != 0) {
        ::close(fd);
        throw SimError("connect to " + host_port + " failed");
    }
    return std::make_unique<TcpStream>(fd);
}

TcpListener::TcpListener(const std::string& host_port) {
    const sockaddr_in addr = parse_addr(host_port);
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0)
        throw SimError("socket() failed");
    const int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    if (::bind(fd_, reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) != 0) {
        ::close(fd_);
        throw SimError("bind " + host_port + " failed");
    }
    if (::listen(fd_, 4) != 0) {
        ::close(fd_);
        throw SimError("listen failed");
    }
    sockaddr_in bound{};
    socklen_t len = sizeof(bound);
    if (::getsockname(fd_, reinterpret_cast<sockaddr*>(&bound), &len) == 0)
        port_ = ntohs(bound.sin_port);
}

TcpListener::~TcpListener() {
    if (fd_ >= 0)
        ::close(fd_);
}

std::unique_ptr<TcpStream> TcpListener::accept_one() {
    const int c = ::accept(fd_, nullptr, nullptr);
    if (c < 0)
        throw SimError("accept failed");
    return std::make_unique<TcpStream>(c);
}

} // namespace pacbti
