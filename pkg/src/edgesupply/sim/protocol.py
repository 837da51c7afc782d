"""Edge-cloud messages, the cloud ranking server and its transports.

Wire format: one JSON object per line, UTF-8, ``\\n`` terminated, keys in the
order listed below, no insignificant whitespace::

    {"type":"PagingRequest","session":<int>,"page":<int>,"trigger":"manual"|"auto","t":<float>}
    {"type":"PageResponse","session":<int>,"page":<int>,
     "items":[[<item id>,<category>,[<4 stats>],<p_ctr>,<p_cvr>], ...]}
    {"type":"LogUpload","session":<int>,"events":[<event objects>]}
    {"type":"Ack","session":<int>}
    {"type":"Error","error":<class name>,"message":<str>}

The in-process and socket transports carry exactly these objects.
"""
from __future__ import annotations

import json
import socket
import socketserver
import threading
from dataclasses import dataclass

import numpy as np

from ..features import ItemFeatures
from .world import Catalog, LatentUser, WorldConfig, make_user, sigmoid

TRIGGERS = ("manual", "auto")


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class PagingRequest:
    session: int
    page: int
    trigger: str
    t: float = 0.0

    def __post_init__(self):
        if self.trigger not in TRIGGERS:
            raise ProtocolError(f"unknown trigger {self.trigger!r}")
        if self.page < 0:
            raise ProtocolError("page index must be non-negative")


@dataclass(frozen=True)
class PageResponse:
    session: int
    page: int
    items: tuple[ItemFeatures, ...]


@dataclass(frozen=True)
class LogUpload:
    session: int
    events: tuple[dict, ...]


@dataclass(frozen=True)
class Ack:
    session: int


def encode_message(msg) -> bytes:
    if isinstance(msg, PagingRequest):
        obj = {"type": "PagingRequest", "session": msg.session, "page": msg.page, "trigger": msg.trigger, "t": msg.t}
    elif isinstance(msg, PageResponse):
        obj = {"type": "PageResponse", "session": msg.session, "page": msg.page,
               "items": [it.to_list() for it in msg.items]}
    elif isinstance(msg, LogUpload):
        obj = {"type": "LogUpload", "session": msg.session, "events": list(msg.events)}
    elif isinstance(msg, Ack):
        obj = {"type": "Ack", "session": msg.session}
    elif isinstance(msg, Exception):
        obj = {"type": "Error", "error": type(msg).__name__, "message": str(msg)}
    else:
        raise ProtocolError(f"cannot encode {type(msg).__name__}")
    return json.dumps(obj, separators=(",", ":")).encode("utf-8") + b"\n"


def decode_message(line: bytes | str):
    obj = json.loads(line)
    kind = obj.get("type")
    if kind == "PagingRequest":
        return PagingRequest(int(obj["session"]), int(obj["page"]), obj["trigger"], float(obj["t"]))
    if kind == "PageResponse":
        return PageResponse(int(obj["session"]), int(obj["page"]),
                            tuple(ItemFeatures.from_list(r) for r in obj["items"]))
    if kind == "LogUpload":
        return LogUpload(int(obj["session"]), tuple(obj["events"]))
    if kind == "Ack":
        return Ack(int(obj["session"]))
    if kind == "Error":
        raise ProtocolError(f"{obj['error']}: {obj['message']}")
    raise ProtocolError(f"unknown message type {kind!r}")


def server_scores(cfg: WorldConfig, catalog: Catalog, snapshot: np.ndarray, noise: np.ndarray) -> np.ndarray:
    return catalog.vectors @ snapshot + catalog.popularity + noise


def served_order(scores: np.ndarray) -> np.ndarray:
    """The session's full served ranking: descending score, ties by id."""
    return np.lexsort((np.arange(len(scores)), -scores))


def cloud_rank(cfg: WorldConfig, catalog: Catalog, snapshot: np.ndarray, noise: np.ndarray,
               page_index: int, page_size: int, session: int = 0, order: np.ndarray | None = None) -> PageResponse:
    """One page of the server ranking built from a stale preference snapshot.

    Pages are consecutive slices of one fixed ranking (``order``, plain score
    order when omitted); past the end of the catalog the page is empty.
    """
    scores = server_scores(cfg, catalog, snapshot, noise)
    if order is None:
        order = served_order(scores)
    chunk = order[page_index * page_size:(page_index + 1) * page_size]
    a, b = cfg.android, cfg.ios
    c0, c1 = (a.click_base + b.click_base) / 2, (a.click_affinity + b.click_affinity) / 2
    v0, v1 = (a.buy_base + b.buy_base) / 2, (a.buy_affinity + b.buy_affinity) / 2
    items = tuple(
        ItemFeatures(int(i), int(catalog.categories[i]), tuple(float(x) for x in catalog.info[i]),
                     sigmoid(c0 + c1 * float(scores[i])), sigmoid(v0 + v1 * float(scores[i])))
        for i in chunk)
    return PageResponse(session, page_index, items)


class CloudServer:
    """Holds each session's ranking and enforces request ordering.

    The session id doubles as the user id inside run ``run_seed``.
    """

    def __init__(self, cfg: WorldConfig, catalog: Catalog, run_seed: int):
        self.cfg, self.catalog, self.run_seed = cfg, catalog, run_seed
        self._orders: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
        self._last_page: dict[int, int] = {}
        self.uploads: dict[int, list[dict]] = {}
        self.lock = threading.Lock()

    def open_session(self, session: int, user: LatentUser) -> None:
        scores = server_scores(self.cfg, self.catalog, user.snapshot, user.score_noise)
        order = served_order(scores)
        self._orders[session] = (user.snapshot, user.score_noise, order)

    def handle(self, msg):
        with self.lock:
            if isinstance(msg, PagingRequest):
                last = self._last_page.get(msg.session, -1)
                if msg.page <= last:
                    raise ProtocolError(f"session {msg.session}: page {msg.page} not after {last}")
                self._last_page[msg.session] = msg.page
                if msg.session not in self._orders:
                    self.open_session(msg.session, make_user(self.cfg, self.catalog, self.run_seed, msg.session))
                snapshot, noise, order = self._orders[msg.session]
                return cloud_rank(self.cfg, self.catalog, snapshot, noise, msg.page, self.cfg.page_size,
                                  msg.session, order)
            if isinstance(msg, LogUpload):
                self.uploads.setdefault(msg.session, []).extend(msg.events)
                return Ack(msg.session)
            raise ProtocolError(f"unexpected message {type(msg).__name__}")


class InProcessTransport:
    """Direct calls that still round-trip through the wire encoding when ``wire=True``."""

    def __init__(self, server: CloudServer, wire: bool = False):
        self.server = server
        self.wire = wire

    def request(self, msg):
        if self.wire:
            msg = decode_message(encode_message(msg))
        resp = self.server.handle(msg)
        if self.wire:
            resp = decode_message(encode_message(resp))
        _check_response(msg, resp)
        return resp

    def close(self) -> None:
        pass


def _check_response(req, resp) -> None:
    if isinstance(req, PagingRequest):
        if not isinstance(resp, PageResponse) or resp.session != req.session or resp.page != req.page:
            raise ProtocolError(f"response does not answer request for session {req.session} page {req.page}")


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        for line in self.rfile:
            if not line.strip():
                continue
            try:
                resp = self.server.cloud.handle(decode_message(line))
            except Exception as exc:  # reported to the client as an Error message
                resp = exc
            self.wfile.write(encode_message(resp))
            self.wfile.flush()


class _TCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


def serve_cloud(server: CloudServer, host: str = "127.0.0.1", port: int = 0) -> tuple[_TCPServer, threading.Thread]:
    """Start a background socket server; returns it with its thread (``.server_address`` has the port)."""
    tcp = _TCPServer((host, port), _Handler)
    tcp.cloud = server
    thread = threading.Thread(target=tcp.serve_forever, daemon=True)
    thread.start()
    return tcp, thread


class SocketTransport:
    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.rfile = self.sock.makefile("rb")

    def request(self, msg):
        self.sock.sendall(encode_message(msg))
        line = self.rfile.readline()
        if not line:
            raise ProtocolError("connection closed by server")
        resp = decode_message(line)
        _check_response(msg, resp)
        return resp

    def close(self) -> None:
        self.rfile.close()
        self.sock.close()
