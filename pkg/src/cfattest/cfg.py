"""Control-flow graph learned from delimited ID streams, and edge-level verification.

A stream is a flat sequence of 64-bit values in which BEGIN/END delimit one
request. Learning merges the consecutive-ID pairs of every request into a
CFG; verification checks each request of a stream against it and localizes
the first illegal transition.
"""

from __future__ import annotations

import re
import struct
import zlib
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional

from .ids import BEGIN, END, format_id, is_tag, parse_id

EndpointID = int


class CFGError(Exception):
    pass


class StreamError(CFGError):
    """Malformed delimiting in a learning trace."""


class CFGFormatError(CFGError):
    """A serialized CFG could not be decoded."""


class Edge(NamedTuple):
    src: EndpointID
    dst: EndpointID

    def __str__(self) -> str:
        return f"{format_id(self.src)}->{format_id(self.dst)}"


@dataclass(frozen=True)
class ControlFlowGraph:
    nodes: frozenset[int] = frozenset()
    edges: frozenset[Edge] = frozenset()
    starts: frozenset[int] = frozenset()
    ends: frozenset[int] = frozenset()
    allows_empty: bool = False  # an empty request (BEGIN END) was seen while learning

    def __post_init__(self):
        for e in self.edges:
            if e.src not in self.nodes or e.dst not in self.nodes:
                raise CFGError(f"edge {e} references a node outside the graph")
        if not self.starts <= self.nodes or not self.ends <= self.nodes:
            raise CFGError("start/end sets must be subsets of the node set")
        if any(is_tag(n) for n in self.nodes):
            raise CFGError("delimiter tags cannot be graph nodes")

    def __le__(self, other: "ControlFlowGraph") -> bool:
        return (
            self.nodes <= other.nodes
            and self.edges <= other.edges
            and self.starts <= other.starts
            and self.ends <= other.ends
            and (not self.allows_empty or other.allows_empty)
        )

    def union(self, other: "ControlFlowGraph") -> "ControlFlowGraph":
        return ControlFlowGraph(
            self.nodes | other.nodes,
            self.edges | other.edges,
            self.starts | other.starts,
            self.ends | other.ends,
            self.allows_empty or other.allows_empty,
        )


class Learner:
    """Incremental CFG construction; feed it values as batches arrive."""

    def __init__(self):
        self.nodes: set[int] = set()
        self.edges: set[Edge] = set()
        self.starts: set[int] = set()
        self.ends: set[int] = set()
        self.allows_empty = False
        self._open = False
        self._prev: Optional[int] = None
        self.requests = 0

    def feed(self, values: Iterable[int]) -> None:
        for v in values:
            if v == BEGIN:
                if self._open:
                    raise StreamError("nested BEGIN")
                self._open, self._prev = True, None
            elif v == END:
                if not self._open:
                    raise StreamError("END without BEGIN")
                if self._prev is None:
                    self.allows_empty = True
                else:
                    self.ends.add(self._prev)
                self._open = False
                self.requests += 1
            else:
                if not self._open:
                    raise StreamError(f"ID {v} outside of a request")
                self.nodes.add(v)
                if self._prev is None:
                    self.starts.add(v)
                else:
                    self.edges.add(Edge(self._prev, v))
                self._prev = v

    def finish(self) -> ControlFlowGraph:
        if self._open:
            raise StreamError("trace ends inside an open request")
        return ControlFlowGraph(
            frozenset(self.nodes),
            frozenset(self.edges),
            frozenset(self.starts),
            frozenset(self.ends),
            self.allows_empty,
        )


def learn(traces: Iterable[Iterable[int]]) -> ControlFlowGraph:
    learner = Learner()
    for trace in traces:
        learner.feed(trace)
        if learner._open:
            raise StreamError("trace ends inside an open request")
    return learner.finish()


@dataclass(frozen=True)
class AttestationRecord:
    """Verdict for one request. `request` is None for values outside any request."""

    request: Optional[int]
    valid: bool
    edge: Optional[Edge] = None
    position: Optional[int] = None

    def __post_init__(self):
        if self.valid == (self.edge is not None):
            raise ValueError("a violation carries an offending edge, a valid record does not")

    @property
    def verdict(self) -> str:
        return "valid" if self.valid else "violation"

    def to_line(self) -> str:
        req = "-" if self.request is None else str(self.request)
        edge = "-" if self.edge is None else str(self.edge)
        pos = "-" if self.position is None else str(self.position)
        return f"request={req} verdict={self.verdict} edge={edge} pos={pos}"

    @classmethod
    def from_line(cls, line: str) -> "AttestationRecord":
        m = _LINE.fullmatch(line.strip())
        if not m:
            raise ValueError(f"malformed log line: {line!r}")
        req, verdict, edge, pos = m.groups()
        if edge == "-":
            e = None
        else:
            a, b = edge.split("->")
            e = Edge(parse_id(a), parse_id(b))
        return cls(
            None if req == "-" else int(req),
            verdict == "valid",
            e,
            None if pos == "-" else int(pos),
        )


_LINE = re.compile(
    r"request=(-|\d+) verdict=(valid|violation) edge=(-|[A-Z0-9x]+->[A-Z0-9x]+) pos=(-|\d+)"
)


class StreamVerifier:
    """Incremental verification of a delimited stream against a CFG.

    Produces one record per BEGIN..END request, plus a protocol-violation
    record (request=None) for every run of values outside any request.
    """

    def __init__(self, cfg: ControlFlowGraph):
        self.cfg = cfg
        self._edges = cfg.edges
        self._starts = cfg.starts
        self._open = False
        self._prev: Optional[int] = None
        self._pos = 0
        self._failure: Optional[tuple[Edge, int]] = None
        self._stray = False  # inside a run of values outside a request
        self._last_closed = END
        self.requests = 0

    def feed(self, values: Iterable[int]) -> list[AttestationRecord]:
        out: list[AttestationRecord] = []
        edges = self._edges
        for v in values:
            if self._open:
                if v == END:
                    out.append(self._close())
                elif v == BEGIN:
                    # nested BEGIN: the open request is illegal here
                    if self._failure is None:
                        self._failure = (Edge(self._prev if self._prev is not None else BEGIN, BEGIN), self._pos)
                    out.append(self._close(force=True))
                    self._begin()
                else:
                    if self._failure is None:
                        if self._prev is None:
                            if v not in self._starts:
                                self._failure = (Edge(BEGIN, v), self._pos)
                        elif (self._prev, v) not in edges:
                            self._failure = (Edge(self._prev, v), self._pos)
                    self._prev = v
                    self._pos += 1
            elif v == BEGIN:
                self._stray = False
                self._begin()
            elif not self._stray:
                # first value outside any request
                self._stray = True
                out.append(AttestationRecord(None, False, Edge(self._last_closed, v), None))
        return out

    def _begin(self) -> None:
        self._open, self._prev, self._pos, self._failure = True, None, 0, None

    def _close(self, force: bool = False) -> AttestationRecord:
        idx = self.requests
        self.requests += 1
        self._open = False
        self._last_closed = END
        if self._failure is None and not force:
            if self._prev is None:
                if not self.cfg.allows_empty:
                    self._failure = (Edge(BEGIN, END), 0)
            elif self._prev not in self.cfg.ends:
                self._failure = (Edge(self._prev, END), self._pos)
        if self._failure is None:
            return AttestationRecord(idx, True)
        edge, pos = self._failure
        return AttestationRecord(idx, False, edge, pos)

    def finish(self) -> list[AttestationRecord]:
        """Close out a stream that ended inside an open request."""
        if not self._open:
            return []
        if self._failure is None:
            last = self._prev if self._prev is not None else BEGIN
            self._failure = (Edge(last, BEGIN), self._pos)  # truncated request
        return [self._close(force=True)]


def verify(cfg: ControlFlowGraph, stream: Iterable[int]) -> list[AttestationRecord]:
    sv = StreamVerifier(cfg)
    records = sv.feed(stream)
    records.extend(sv.finish())
    return records


# -- binary format --------------------------------------------------------------------------

MAGIC = b"CFAG"
VERSION = 1
_HEADER = struct.Struct("<4sHHI")  # magic, version, flags, crc32 of flags + body
_FLAGS = struct.Struct("<H")
_COUNTS = struct.Struct("<QQQQ")


def _checksum(flags: int, body) -> int:
    return zlib.crc32(body, zlib.crc32(_FLAGS.pack(flags)))


def serialize(cfg: ControlFlowGraph) -> bytes:
    nodes = sorted(cfg.nodes)
    edges = sorted(cfg.edges)
    starts = sorted(cfg.starts)
    ends = sorted(cfg.ends)
    body = bytearray(_COUNTS.pack(len(nodes), len(edges), len(starts), len(ends)))
    body += struct.pack(f"<{len(nodes)}Q", *nodes)
    body += struct.pack(f"<{2 * len(edges)}Q", *(x for e in edges for x in e))
    body += struct.pack(f"<{len(starts)}Q", *starts)
    body += struct.pack(f"<{len(ends)}Q", *ends)
    flags = 1 if cfg.allows_empty else 0
    return _HEADER.pack(MAGIC, VERSION, flags, _checksum(flags, body)) + bytes(body)


def deserialize(data: bytes) -> ControlFlowGraph:
    if len(data) < _HEADER.size + _COUNTS.size:
        raise CFGFormatError("truncated header")
    magic, version, flags, crc = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CFGFormatError("bad magic")
    if version != VERSION:
        raise CFGFormatError(f"unsupported version {version}")
    if flags & ~1:
        raise CFGFormatError(f"unknown flags {flags:#x}")
    body = memoryview(data)[_HEADER.size:]
    if _checksum(flags, body) != crc:
        raise CFGFormatError("checksum mismatch")
    n_nodes, n_edges, n_starts, n_ends = _COUNTS.unpack_from(body, 0)
    expected = _COUNTS.size + 8 * (n_nodes + 2 * n_edges + n_starts + n_ends)
    if len(body) != expected:
        raise CFGFormatError(f"length mismatch: expected {expected} body bytes, got {len(body)}")
    off = _COUNTS.size
    words = struct.unpack_from(f"<{(expected - off) // 8}Q", body, off)
    nodes = words[:n_nodes]
    flat = words[n_nodes:n_nodes + 2 * n_edges]
    starts = words[n_nodes + 2 * n_edges:n_nodes + 2 * n_edges + n_starts]
    ends = words[n_nodes + 2 * n_edges + n_starts:]
    edges = [Edge(flat[i], flat[i + 1]) for i in range(0, len(flat), 2)]
    for seq in (nodes, edges, starts, ends):
        if list(seq) != sorted(set(seq)):
            raise CFGFormatError("entries are not strictly sorted")
    try:
        return ControlFlowGraph(
            frozenset(nodes), frozenset(edges), frozenset(starts), frozenset(ends), bool(flags & 1)
        )
    except CFGError as exc:
        raise CFGFormatError(str(exc)) from None


def read_log(lines: Iterable[str]) -> tuple[list[AttestationRecord], list[tuple[int, str]]]:
    """Parse attestation-log lines; returns (records, [(lineno, bad line), ...])."""
    records, bad = [], []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            records.append(AttestationRecord.from_line(line))
        except ValueError:
            bad.append((lineno, line.rstrip("\n")))
    return records, bad
