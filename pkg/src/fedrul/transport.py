"""Point-to-point message channels between the server and its clients.

Two backends with the same observable behaviour: in-process queues and TCP
sockets. Both carry encoded frames, so the codec is exercised either way.
Delivery is reliable and in order per (sender, receiver) pair.
"""

from __future__ import annotations

import queue
import socket
import threading
from typing import Callable

from fedrul.wire import HEADER_SIZE, DecodeError, Message, decode_header, decode_message, encode_message

SERVER_PEER = -1
_CLOSED = object()


class TransportError(RuntimeError):
    pass


class Endpoint:
    """One side of a set of channels; ``peer`` is a client id or SERVER_PEER."""

    def send(self, peer: int, msg: Message) -> None:
        raise NotImplementedError

    def recv(self, peer: int, timeout: float | None = None) -> Message:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


# -- in-process ------------------------------------------------------------


class _Pipe:
    def __init__(self) -> None:
        self.q: queue.Queue = queue.Queue()

    def put(self, item) -> None:
        self.q.put(item)

    def get(self, timeout):
        try:
            item = self.q.get(timeout=timeout)
        except queue.Empty:
            raise TransportError(f"timed out after {timeout}s waiting for a message") from None
        if item is _CLOSED:
            self.q.put(_CLOSED)  # keep later readers failing too
            raise TransportError("peer disconnected")
        return item


class InProcEndpoint(Endpoint):
    def __init__(self, outgoing: dict[int, _Pipe], incoming: dict[int, _Pipe]):
        self._out = outgoing
        self._in = incoming
        self._closed = False

    def send(self, peer: int, msg: Message) -> None:
        if self._closed:
            raise TransportError("send on a closed endpoint")
        try:
            pipe = self._out[peer]
        except KeyError:
            raise TransportError(f"unknown peer {peer}") from None
        pipe.put(encode_message(msg))

    def recv(self, peer: int, timeout: float | None = None) -> Message:
        if self._closed:
            raise TransportError("recv on a closed endpoint")
        try:
            pipe = self._in[peer]
        except KeyError:
            raise TransportError(f"unknown peer {peer}") from None
        return decode_message(pipe.get(timeout))

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            for pipe in self._out.values():
                pipe.put(_CLOSED)


class InProcHub:
    """Queues wiring one server endpoint to ``client_ids`` client endpoints."""

    def __init__(self, client_ids):
        self.client_ids = list(client_ids)
        to_client = {c: _Pipe() for c in self.client_ids}
        to_server = {c: _Pipe() for c in self.client_ids}
        self.server = InProcEndpoint(to_client, to_server)
        self.clients = {c: InProcEndpoint({SERVER_PEER: to_server[c]}, {SERVER_PEER: to_client[c]}) for c in self.client_ids}


class DirectEndpoint(Endpoint):
    """Single-threaded server endpoint: each send runs the client handler inline.

    ``handlers`` maps client id to a callable taking a Message and returning a
    reply Message or None. Frames still go through the codec.
    """

    def __init__(self, handlers: dict[int, Callable[[Message], Message | None]]):
        self._handlers = handlers
        self._pending = {c: [] for c in handlers}
        self._closed = False

    def send(self, peer: int, msg: Message) -> None:
        if self._closed:
            raise TransportError("send on a closed endpoint")
        if peer not in self._handlers:
            raise TransportError(f"unknown peer {peer}")
        reply = self._handlers[peer](decode_message(encode_message(msg)))
        if reply is not None:
            self._pending[peer].append(encode_message(reply))

    def recv(self, peer: int, timeout: float | None = None) -> Message:
        if self._closed:
            raise TransportError("recv on a closed endpoint")
        if not self._pending.get(peer):
            raise TransportError(f"no message pending from client {peer}")
        return decode_message(self._pending[peer].pop(0))

    def close(self) -> None:
        self._closed = True


# -- TCP -------------------------------------------------------------------


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        try:
            chunk = sock.recv(min(n - len(buf), 1 << 20))
        except socket.timeout:
            raise TransportError("timed out waiting for a frame") from None
        except OSError as exc:
            raise TransportError(f"socket error: {exc}") from None
        if not chunk:
            raise TransportError("peer disconnected")
        buf.extend(chunk)
    return bytes(buf)


def read_frame(sock: socket.socket) -> Message:
    header = _recv_exact(sock, HEADER_SIZE)
    try:
        _, _, _, length = decode_header(header)
    except DecodeError as exc:
        raise TransportError(f"bad frame from peer: {exc}") from exc
    return decode_message(header + _recv_exact(sock, length))


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


class TcpServerEndpoint(Endpoint):
    """Listens, then maps each connection to a client id from its REGISTER frame."""

    def __init__(self, listen: tuple[str, int] = ("127.0.0.1", 0)):
        self._listener = socket.create_server(listen)
        self.address = self._listener.getsockname()[:2]
        self._socks: dict[int, socket.socket] = {}
        self._pending: dict[int, Message] = {}
        self._closed = False

    def accept(self, n_clients: int, timeout: float | None = 60.0) -> dict[int, Message]:
        """Accept ``n_clients`` connections and return their REGISTER messages by client id."""
        self._listener.settimeout(timeout)
        hellos = {}
        while len(hellos) < n_clients:
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                raise TransportError(f"only {len(hellos)} of {n_clients} clients connected") from None
            conn.settimeout(timeout)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            hello = read_frame(conn)
            if hello.sender in self._socks:
                raise TransportError(f"client id {hello.sender} connected twice")
            self._socks[hello.sender] = conn
            hellos[hello.sender] = hello
        return hellos

    def send(self, peer: int, msg: Message) -> None:
        if self._closed:
            raise TransportError("send on a closed endpoint")
        try:
            self._socks[peer].sendall(encode_message(msg))
        except KeyError:
            raise TransportError(f"unknown peer {peer}") from None
        except OSError as exc:
            raise TransportError(f"send to client {peer} failed: {exc}") from None

    def recv(self, peer: int, timeout: float | None = None) -> Message:
        if self._closed:
            raise TransportError("recv on a closed endpoint")
        if peer not in self._socks:
            raise TransportError(f"unknown peer {peer}")
        sock = self._socks[peer]
        sock.settimeout(timeout)
        return read_frame(sock)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        for s in self._socks.values():
            s.close()
        self._listener.close()


class TcpClientEndpoint(Endpoint):
    def __init__(self, address: tuple[str, int], timeout: float | None = 60.0):
        try:
            self._sock = socket.create_connection(address, timeout=timeout)
        except OSError as exc:
            raise TransportError(f"cannot connect to {address}: {exc}") from None
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._lock = threading.Lock()
        self._closed = False

    def send(self, peer: int, msg: Message) -> None:
        if self._closed:
            raise TransportError("send on a closed endpoint")
        try:
            with self._lock:
                self._sock.sendall(encode_message(msg))
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from None

    def recv(self, peer: int, timeout: float | None = None) -> Message:
        if self._closed:
            raise TransportError("recv on a closed endpoint")
        self._sock.settimeout(timeout)
        return read_frame(self._sock)

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._sock.close()
