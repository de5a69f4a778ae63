"""Budgeted query access to a target model.

:class:`Oracle` is the in-process form. :func:`serve` exposes one over TCP
with newline-delimited JSON, and :class:`OracleClient` talks to it with the
same ``query``/``status`` surface, so attack code cannot tell them apart.

Wire protocol (one UTF-8 JSON object per line)::

    -> {"id": 1, "op": "query", "graph": {"num_nodes": n, "edges": [[u, v], ...],
                                          "features": [[...], ...]}}
    <- {"id": 1, "label": 0, "probs": [...], "explanation": [...], "remaining_budget": 119}
    -> {"id": 2, "op": "status"}
    <- {"id": 2, "remaining_budget": 119, "explainer": "GraphCAM"}
    <- {"id": ..., "error": "budget_exhausted" | "bad_request" | "dimension_mismatch"}

Floats are written with Python's shortest round-trip repr, so decoding
reproduces the server's float64 values exactly.
"""
from __future__ import annotations

import json
import logging
import socket
import socketserver
import threading
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (
    BudgetExhausted, ConfigError, DimensionError, FormatError, OracleConnectionError,
    ProtocolError,
)
from .explain import METHODS, ExplanationVector, explain
from .gnnmodel import ModelState, load_model
from .graphdata import Graph

__all__ = ["OracleConfig", "QueryRecord", "Oracle", "OracleServer", "serve", "OracleClient",
           "connect_client", "parse_address"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OracleConfig:
    model_path: str = ""
    explainer: str = "GraphCAM"
    budget: int = 0
    return_probs: bool = True
    listen_address: str = "127.0.0.1:0"

    def __post_init__(self):
        if self.budget < 0:
            raise ConfigError("budget must be >= 0")
        if self.explainer not in METHODS:
            raise ConfigError(f"unknown explainer {self.explainer!r}")


@dataclass
class QueryRecord:
    graph: Graph
    predicted_label: int
    probs: Optional[np.ndarray]
    explanation: ExplanationVector

    def to_json(self) -> dict:
        return {
            "graph": self.graph.to_wire(),
            "label": int(self.predicted_label),
            "probs": None if self.probs is None else self.probs.tolist(),
            "explanation": self.explanation.scores.tolist(),
            "explainer": self.explanation.method,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "QueryRecord":
        label = int(obj["label"])
        probs = obj.get("probs")
        return cls(
            Graph.from_wire(obj["graph"]), label,
            None if probs is None else np.asarray(probs, dtype=np.float64),
            ExplanationVector(np.asarray(obj["explanation"], dtype=np.float64), label,
                              obj.get("explainer", "GraphCAM")),
        )


class Oracle:
    """Target model plus explainer behind a hard query budget.

    Thread-safe: the budget check-and-decrement is atomic; inference runs
    outside the lock over the read-only model.
    """

    def __init__(self, state: ModelState, explainer: str = "GraphCAM", budget: int = 0,
                 return_probs: bool = True):
        if explainer not in METHODS:
            raise ConfigError(f"unknown explainer {explainer!r}")
        if budget < 0:
            raise ConfigError("budget must be >= 0")
        self.state = state
        self.explainer = explainer
        self.return_probs = return_probs
        self._remaining = int(budget)
        self._lock = threading.Lock()

    @classmethod
    def from_config(cls, config: OracleConfig) -> "Oracle":
        return cls(load_model(config.model_path), config.explainer, config.budget,
                   config.return_probs)

    @property
    def remaining_budget(self) -> int:
        return self._remaining

    def status(self) -> dict:
        return {"remaining_budget": self._remaining, "explainer": self.explainer}

    def _reserve(self) -> int:
        with self._lock:
            if self._remaining <= 0:
                raise BudgetExhausted("query budget exhausted")
            self._remaining -= 1
            return self._remaining

    def answer(self, graph: Graph) -> QueryRecord:
        """Unbudgeted forward pass + explanation (the body of ``query``)."""
        fwd, expl = explain(self.state, graph, self.explainer)
        return QueryRecord(graph, fwd.predicted_class,
                           fwd.probs.copy() if self.return_probs else None, expl)

    def query(self, graph: Graph) -> QueryRecord:
        return self.query_counted(graph)[0]

    def query_counted(self, graph: Graph):
        """``query`` that also returns the budget left right after this charge."""
        if graph.feature_dim != self.state.config.feature_dim:
            raise DimensionError(
                f"graph feature width {graph.feature_dim} != model {self.state.config.feature_dim}"
            )
        if graph.num_nodes < 1:
            raise DimensionError("graph has no nodes")
        remaining = self._reserve()
        return self.answer(graph), remaining


# --------------------------------------------------------------------------
# TCP service

def parse_address(address) -> tuple:
    if isinstance(address, tuple):
        return address[0], int(address[1])
    host, _, port = str(address).rpartition(":")
    return host or "127.0.0.1", int(port)


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        oracle: Oracle = self.server.oracle
        for raw in self.rfile:
            if not raw.strip():
                continue
            reply = self._dispatch(oracle, raw)
            try:
                self.wfile.write((json.dumps(reply) + "\n").encode("utf-8"))
                self.wfile.flush()
            except OSError:
                return

    @staticmethod
    def _dispatch(oracle: Oracle, raw: bytes) -> dict:
        try:
            msg = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, ValueError):
            return {"id": None, "error": "bad_request"}
        if not isinstance(msg, dict):
            return {"id": None, "error": "bad_request"}
        rid = msg.get("id")
        op = msg.get("op")
        if op == "status":
            return {"id": rid, **oracle.status()}
        if op != "query":
            return {"id": rid, "error": "bad_request"}
        try:
            graph = Graph.from_wire(msg["graph"])
        except (KeyError, TypeError, FormatError, DimensionError):
            return {"id": rid, "error": "bad_request"}
        try:
            # the budget must be checked before any model output is produced
            rec, remaining = oracle.query_counted(graph)
        except BudgetExhausted:
            return {"id": rid, "error": "budget_exhausted"}
        except DimensionError:
            return {"id": rid, "error": "dimension_mismatch"}
        reply = {"id": rid, "label": rec.predicted_label}
        if rec.probs is not None:
            reply["probs"] = rec.probs.tolist()
        reply["explanation"] = rec.explanation.scores.tolist()
        reply["remaining_budget"] = remaining
        return reply


class OracleServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, oracle: Oracle, address=("127.0.0.1", 0)):
        self.oracle = oracle
        super().__init__(parse_address(address), _Handler)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> "OracleServer":
        """Serve on a daemon thread and return self."""
        # short poll interval so stop() returns promptly
        self._thread = threading.Thread(target=self.serve_forever, kwargs={"poll_interval": 0.02},
                                        daemon=True)
        self._thread.start()
        return self

    def stop(self):
        if getattr(self, "_thread", None) is not None:
            self.shutdown()
            self._thread = None
        self.server_close()

    def __exit__(self, *exc):
        self.stop()


def serve(config: OracleConfig, oracle: Optional[Oracle] = None, block: bool = True) -> OracleServer:
    """Start the oracle service. Blocks forever unless ``block`` is false."""
    oracle = oracle or Oracle.from_config(config)
    server = OracleServer(oracle, config.listen_address)
    log.info("oracle listening on %s (budget %d, explainer %s)", server.address,
             oracle.remaining_budget, oracle.explainer)
    if block:
        try:
            server.serve_forever()
        finally:
            server.server_close()
        return server
    return server.start()


class OracleClient:
    """Line-protocol client with the in-process oracle's query surface."""

    def __init__(self, address, timeout: float = 30.0):
        host, port = parse_address(address)
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise OracleConnectionError(f"cannot reach oracle at {host}:{port}: {exc}") from exc
        self._rfile = self._sock.makefile("rb")
        self._next_id = 0
        self._explainer: Optional[str] = None
        self.last_remaining: Optional[int] = None

    def close(self):
        try:
            self._rfile.close()
        finally:
            self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _call(self, payload: dict) -> dict:
        self._next_id += 1
        payload = {"id": self._next_id, **payload}
        try:
            self._sock.sendall((json.dumps(payload) + "\n").encode("utf-8"))
            line = self._rfile.readline()
        except OSError as exc:
            raise OracleConnectionError(f"transport failure: {exc}") from exc
        if not line:
            raise OracleConnectionError("oracle closed the connection")
        try:
            reply = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, ValueError) as exc:
            raise ProtocolError(f"undecodable reply: {exc}") from exc
        if not isinstance(reply, dict) or reply.get("id") != self._next_id:
            raise ProtocolError(f"unexpected reply: {reply!r}")
        return reply

    def status(self) -> dict:
        reply = self._call({"op": "status"})
        self.last_remaining = reply.get("remaining_budget")
        self._explainer = reply.get("explainer")
        return {k: v for k, v in reply.items() if k != "id"}

    @property
    def remaining_budget(self) -> int:
        return self.status()["remaining_budget"]

    def query(self, graph: Graph) -> QueryRecord:
        if self._explainer is None:
            self.status()
        reply = self._call({"op": "query", "graph": graph.to_wire()})
        err = reply.get("error")
        if err == "budget_exhausted":
            raise BudgetExhausted("query budget exhausted")
        if err == "dimension_mismatch":
            raise DimensionError("oracle rejected the graph's feature width")
        if err is not None:
            raise ProtocolError(f"oracle error: {err}")
        try:
            label = int(reply["label"])
            probs = reply.get("probs")
            scores = np.asarray(reply["explanation"], dtype=np.float64)
            self.last_remaining = int(reply["remaining_budget"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed query reply: {exc}") from exc
        if len(scores) != graph.num_nodes:
            raise ProtocolError("explanation length does not match the graph")
        return QueryRecord(graph, label, None if probs is None else np.asarray(probs, dtype=np.float64),
                           ExplanationVector(scores, label, self._explainer or "External"))


def connect_client(address, timeout: float = 30.0) -> OracleClient:
    return OracleClient(address, timeout)
