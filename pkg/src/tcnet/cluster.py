"""Distributed ensemble inference: one student per worker, merge on master.

Wire protocol: frames are a u32 big-endian length (payload size + 1), a u8
type tag, then the payload. Integer payload fields are big-endian (network
order); tensor payloads are little-endian f32, matching the TCN1 file format.

Payload layouts:
  ASSIGN      u32 student_index, u32 range_start, u32 range_end,
              u16 path length, UTF-8 model path
  INFER_REQ   u64 request_id, u32 batch, u32 dim, batch*dim f32 LE
  INFER_RESP  u64 request_id, u32 batch, u32 chunk_dim, batch*chunk_dim f32 LE
  ERROR       u16 reason code, UTF-8 message

The master fans requests out to all workers concurrently and merges responses
in partition order (never arrival order); combined with the deterministic
forward pass this makes distributed predictions bit-identical to local
ensemble inference.
"""

from __future__ import annotations

import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from concurrent.futures import ThreadPoolExecutor
from statistics import mean, median

import numpy as np

from .nn import Network, Tensor, load_network
from .distill import SubspacePartition, merge_subspaces

TAG_HELLO = 0x01
TAG_ASSIGN = 0x02
TAG_INFER_REQ = 0x03
TAG_INFER_RESP = 0x04
TAG_PING = 0x05
TAG_PONG = 0x06
TAG_SHUTDOWN = 0x07
TAG_ERROR = 0x7F

VALID_TAGS = frozenset({TAG_HELLO, TAG_ASSIGN, TAG_INFER_REQ, TAG_INFER_RESP,
                        TAG_PING, TAG_PONG, TAG_SHUTDOWN, TAG_ERROR})

MAX_PAYLOAD = 64 * 1024 * 1024

ERR_NOT_ASSIGNED = 1
ERR_MALFORMED = 2
ERR_BAD_MODEL = 3


class ProtocolError(ValueError):
    """Frame violates the wire protocol."""


class NeedMoreBytes(Exception):
    """Buffer ends mid-frame; read more and retry."""


class InferenceError(RuntimeError):
    """Distributed inference failed (timeout, worker error, bad response)."""


@dataclass(frozen=True)
class WireMessage:
    type: int
    payload: bytes = b""

    def __post_init__(self):
        if self.type not in VALID_TAGS:
            raise ProtocolError(f"unknown message type 0x{self.type:02x}")
        if len(self.payload) > MAX_PAYLOAD:
            raise ProtocolError(f"payload of {len(self.payload)} bytes exceeds cap")


def encode(msg: WireMessage) -> bytes:
    return struct.pack(">IB", len(msg.payload) + 1, msg.type) + msg.payload


def decode_frame(buf: bytes):
    """Decode one frame from the head of buf; returns (msg, bytes_consumed).

    Raises NeedMoreBytes for an incomplete frame, ProtocolError for an
    oversize frame or unknown tag.
    """
    if len(buf) < 4:
        raise NeedMoreBytes(f"have {len(buf)} of 4 header bytes")
    (length,) = struct.unpack_from(">I", buf, 0)
    if length < 1:
        raise ProtocolError("frame length 0 at byte 0")
    if length - 1 > MAX_PAYLOAD:
        raise ProtocolError(f"frame payload {length - 1} exceeds {MAX_PAYLOAD}")
    if len(buf) < 4 + length:
        raise NeedMoreBytes(f"have {len(buf)} of {4 + length} frame bytes")
    tag = buf[4]
    if tag not in VALID_TAGS:
        raise ProtocolError(f"unknown message type 0x{tag:02x} at byte 4")
    return WireMessage(tag, bytes(buf[5:4 + length])), 4 + length


def decode(data: bytes) -> WireMessage:
    """Strict single-frame decode: the buffer must hold exactly one frame."""
    msg, used = decode_frame(data)
    if used != len(data):
        raise ProtocolError(
            f"frame length mismatch at byte 4: declared payload "
            f"{used - 5} but buffer carries {len(data) - 5} payload bytes"
        )
    return msg


class FrameDecoder:
    """Incremental decoder for a byte stream of frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes):
        self._buf.extend(data)

    def next_frame(self):
        """The next complete frame, or None if more bytes are needed."""
        try:
            msg, used = decode_frame(bytes(self._buf))
        except NeedMoreBytes:
            return None
        del self._buf[:used]
        return msg


def pack_tensor(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return struct.pack(">II", arr.shape[0], arr.shape[1]) + arr.tobytes()


def unpack_tensor(payload: bytes, offset: int = 0) -> np.ndarray:
    if len(payload) < offset + 8:
        raise ProtocolError("tensor header truncated")
    batch, dim = struct.unpack_from(">II", payload, offset)
    need = offset + 8 + 4 * batch * dim
    if batch == 0 or dim == 0 or len(payload) != need:
        raise ProtocolError(
            f"tensor payload size {len(payload)} != expected {need}"
        )
    flat = np.frombuffer(payload, dtype="<f4", count=batch * dim,
                         offset=offset + 8)
    return flat.reshape(batch, dim).copy()


def pack_infer_req(request_id: int, arr: np.ndarray) -> bytes:
    return struct.pack(">Q", request_id) + pack_tensor(arr)


def unpack_infer(payload: bytes):
    if len(payload) < 8:
        raise ProtocolError("infer payload truncated before request_id")
    (request_id,) = struct.unpack_from(">Q", payload, 0)
    return request_id, unpack_tensor(payload, 8)


def pack_assign(student_index: int, range_start: int, range_end: int,
                model_path: str) -> bytes:
    path = model_path.encode("utf-8")
    return struct.pack(">IIIH", student_index, range_start, range_end,
                       len(path)) + path


def unpack_assign(payload: bytes):
    if len(payload) < 14:
        raise ProtocolError("assign payload truncated")
    idx, start, end, plen = struct.unpack_from(">IIIH", payload, 0)
    if len(payload) != 14 + plen:
        raise ProtocolError("assign path length mismatch")
    return idx, start, end, payload[14:].decode("utf-8")


def pack_error(code: int, message: str) -> bytes:
    return struct.pack(">H", code) + message.encode("utf-8")


def unpack_error(payload: bytes):
    if len(payload) < 2:
        raise ProtocolError("error payload truncated")
    (code,) = struct.unpack_from(">H", payload, 0)
    return code, payload[2:].decode("utf-8", errors="replace")


@dataclass
class WorkerState:
    assigned_student_index: int | None = None
    student: Network | None = None
    range: tuple | None = None


def _recv_frame(sock: socket.socket, decoder: FrameDecoder):
    while True:
        msg = decoder.next_frame()
        if msg is not None:
            return msg
        data = sock.recv(65536)
        if not data:
            return None
        decoder.feed(data)


class WorkerServer:
    """Serves one student over a stream socket until SHUTDOWN.

    One connection is handled at a time; requests on a connection are
    processed serially in arrival order.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(8)
        self.address = self._sock.getsockname()
        self.state = WorkerState()
        self._shutdown = False

    def serve_forever(self):
        try:
            while not self._shutdown:
                try:
                    conn, _ = self._sock.accept()
                except OSError:
                    break
                with conn:
                    self._serve_connection(conn)
        finally:
            self._sock.close()

    def _serve_connection(self, conn: socket.socket):
        decoder = FrameDecoder()
        while not self._shutdown:
            try:
                msg = _recv_frame(conn, decoder)
            except (ProtocolError, OSError) as exc:
                try:
                    conn.sendall(encode(WireMessage(
                        TAG_ERROR, pack_error(ERR_MALFORMED, str(exc)))))
                except OSError:
                    pass
                return
            if msg is None:
                return
            reply = self._handle(msg)
            if reply is not None:
                try:
                    conn.sendall(encode(reply))
                except OSError:
                    return
            if msg.type == TAG_SHUTDOWN:
                self._shutdown = True
                return

    def _handle(self, msg: WireMessage):
        if msg.type == TAG_PING:
            return WireMessage(TAG_PONG, msg.payload)
        if msg.type == TAG_HELLO:
            return WireMessage(TAG_HELLO, msg.payload)
        if msg.type == TAG_SHUTDOWN:
            return None
        if msg.type == TAG_ASSIGN:
            try:
                idx, start, end, path = unpack_assign(msg.payload)
                student = load_network(path)
            except ProtocolError as exc:
                return WireMessage(TAG_ERROR, pack_error(ERR_MALFORMED, str(exc)))
            except Exception as exc:
                return WireMessage(TAG_ERROR, pack_error(ERR_BAD_MODEL, str(exc)))
            if student.out_dim != end - start:
                return WireMessage(TAG_ERROR, pack_error(
                    ERR_BAD_MODEL,
                    f"model out_dim {student.out_dim} != range width {end - start}"))
            self.state = WorkerState(idx, student, (start, end))
            return WireMessage(TAG_HELLO, struct.pack(">I", idx))
        if msg.type == TAG_INFER_REQ:
            if self.state.student is None:
                return WireMessage(TAG_ERROR, pack_error(
                    ERR_NOT_ASSIGNED, "INFER_REQ before ASSIGN"))
            try:
                request_id, arr = unpack_infer(msg.payload)
            except ProtocolError as exc:
                return WireMessage(TAG_ERROR, pack_error(ERR_MALFORMED, str(exc)))
            try:
                out = self.state.student.forward(Tensor.from_array(arr))
            except Exception as exc:
                return WireMessage(TAG_ERROR, pack_error(ERR_MALFORMED, str(exc)))
            payload = struct.pack(">Q", request_id) + pack_tensor(out.view())
            return WireMessage(TAG_INFER_RESP, payload)
        return WireMessage(TAG_ERROR,
                           pack_error(ERR_MALFORMED,
                                      f"unexpected tag 0x{msg.type:02x}"))

    def start_thread(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t


def worker_serve(host: str, port: int):
    """Blocking worker entry point; returns after a SHUTDOWN frame."""
    WorkerServer(host, port).serve_forever()


@dataclass
class LatencyReport:
    fanout_s: list = field(default_factory=list)
    slowest_worker_s: list = field(default_factory=list)
    merge_head_s: list = field(default_factory=list)
    end_to_end_s: list = field(default_factory=list)
    rtt_mean_s: float | None = None
    rtt_median_s: float | None = None
    rtt_min_s: float | None = None

    def to_dict(self):
        return {
            "fanout_s": self.fanout_s,
            "slowest_worker_s": self.slowest_worker_s,
            "merge_head_s": self.merge_head_s,
            "end_to_end_s": self.end_to_end_s,
            "rtt_mean_s": self.rtt_mean_s,
            "rtt_median_s": self.rtt_median_s,
            "rtt_min_s": self.rtt_min_s,
        }


class _WorkerLink:
    """One multiplexed connection to a worker; requests issued serially."""

    def __init__(self, address, timeout: float):
        self.address = tuple(address)
        self.sock = socket.create_connection(self.address, timeout=timeout)
        self.sock.settimeout(timeout)
        self.decoder = FrameDecoder()
        self.lock = threading.Lock()

    def request(self, msg: WireMessage) -> WireMessage:
        with self.lock:
            try:
                self.sock.sendall(encode(msg))
                reply = _recv_frame(self.sock, self.decoder)
            except socket.timeout as exc:
                raise InferenceError(
                    f"worker {self.address} timed out") from exc
            except OSError as exc:
                raise InferenceError(
                    f"worker {self.address} connection failed: {exc}") from exc
        if reply is None:
            raise InferenceError(f"worker {self.address} closed the connection")
        if reply.type == TAG_ERROR:
            code, text = unpack_error(reply.payload)
            raise InferenceError(
                f"worker {self.address} reported error {code}: {text}")
        return reply

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


class MasterClient:
    """Fans inference out to one worker per student and merges the chunks."""

    def __init__(self, addresses, partition: SubspacePartition, head: Network,
                 timeout: float = 10.0):
        if len(addresses) != partition.n:
            raise InferenceError(
                f"need exactly one worker per student: {len(addresses)} "
                f"workers for {partition.n} ranges"
            )
        self.partition = partition
        self.head = head
        self.links = [_WorkerLink(addr, timeout) for addr in addresses]
        self._next_request_id = 0
        self._id_lock = threading.Lock()

    def _new_request_id(self) -> int:
        with self._id_lock:
            self._next_request_id += 1
            return self._next_request_id

    def assign_all(self, model_paths):
        for k, (link, path) in enumerate(zip(self.links, model_paths)):
            start, end = self.partition.ranges[k]
            reply = link.request(WireMessage(
                TAG_ASSIGN, pack_assign(k, start, end, str(path))))
            if reply.type != TAG_HELLO:
                raise InferenceError(
                    f"worker {link.address} rejected assignment "
                    f"(tag 0x{reply.type:02x})")

    def infer(self, x: Tensor):
        """Distributed prediction; returns (probabilities, LatencyReport)."""
        arr = x.view()
        t0 = time.monotonic()
        send_done = [0.0] * len(self.links)
        chunks: list = [None] * len(self.links)
        worker_times = [0.0] * len(self.links)

        def ask(k):
            link = self.links[k]
            req_id = self._new_request_id()
            ts = time.monotonic()
            reply = link.request(WireMessage(TAG_INFER_REQ,
                                             pack_infer_req(req_id, arr)))
            send_done[k] = ts
            worker_times[k] = time.monotonic() - ts
            if reply.type != TAG_INFER_RESP:
                raise InferenceError(
                    f"worker {link.address} sent tag 0x{reply.type:02x}")
            resp_id, chunk = unpack_infer(reply.payload)
            if resp_id != req_id:
                raise ProtocolError(
                    f"worker {link.address} answered request {resp_id}, "
                    f"expected {req_id}")
            a, b = self.partition.ranges[k]
            if chunk.shape != (arr.shape[0], b - a):
                raise InferenceError(
                    f"worker {link.address} chunk shape {chunk.shape} != "
                    f"{(arr.shape[0], b - a)}")
            chunks[k] = Tensor.from_array(chunk)

        with ThreadPoolExecutor(max_workers=len(self.links)) as pool:
            futures = [pool.submit(ask, k) for k in range(len(self.links))]
            for f in futures:
                f.result()
        t_gathered = time.monotonic()
        merged = merge_subspaces(chunks, self.partition)
        probs = self.head.forward(merged)
        t_end = time.monotonic()

        report = LatencyReport()
        report.fanout_s.append(max(send_done) - t0)
        report.slowest_worker_s.append(max(worker_times))
        report.merge_head_s.append(t_end - t_gathered)
        report.end_to_end_s.append(t_end - t0)
        return probs, report

    def measure_rtt(self, worker_index: int, count: int = 100):
        """count PING/PONG round trips; returns (mean, median, min) seconds."""
        link = self.links[worker_index]
        samples = []
        for _ in range(count):
            t0 = time.monotonic()
            reply = link.request(WireMessage(TAG_PING))
            if reply.type != TAG_PONG or reply.payload != b"":
                raise ProtocolError(
                    f"expected empty PONG, got tag 0x{reply.type:02x}")
            samples.append(time.monotonic() - t0)
        return mean(samples), median(samples), min(samples)

    def shutdown_all(self):
        for link in self.links:
            try:
                link.sock.sendall(encode(WireMessage(TAG_SHUTDOWN)))
            except OSError:
                pass
            link.close()

    def close(self):
        for link in self.links:
            link.close()
