"""Instrumentation pass: assigns endpoint IDs to every edge endpoint of a laid-out program.

Two stages share one counter. The first stage works on the block structure
alone (block entries/exits, direct calls); the second handles indirect calls,
indirect jumps and returns, whose emitted IDs are masked with the jump offset
at run time.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

from ..ids import OFFSET_MASK, static_id
from .model import IRError, Kind, Program


class Site(str, enum.Enum):
    BLOCK_ENTRY = "block-entry"
    BLOCK_EXIT = "block-exit"
    PRE_DIRECT_CALL = "pre-direct-call"
    POST_DIRECT_CALL = "post-direct-call"
    PRE_INDIRECT_CALL = "pre-indirect-call"
    POST_INDIRECT_CALL = "post-indirect-call"
    PRE_INDIRECT_JUMP = "pre-indirect-jump"
    PRE_RETURN = "pre-return"


MASKED_SITES = frozenset((Site.PRE_INDIRECT_CALL, Site.PRE_INDIRECT_JUMP, Site.PRE_RETURN))


@dataclass(frozen=True)
class InstrumentationPoint:
    """A trampoline call site.

    `anchor` is the gap the call occupies: a point anchored at address `a`
    runs immediately before the instruction at `a` executes, so pre-transfer
    points share the address of the transfer they guard.
    """

    id: int
    site: Site
    anchor: int
    block: str
    instruction: int  # address of the instruction the point is attached to

    @property
    def masked(self) -> bool:
        return self.site in MASKED_SITES


def emit_masked_id(static: int, source_addr: int, dest_addr: int) -> int:
    """Value recorded for an indirect transfer from `source_addr` to `dest_addr`.

    The signed offset is wrapped two's-complement into the offset width, so the
    result depends only on the distance between the addresses.
    """
    return static ^ ((dest_addr - source_addr) & OFFSET_MASK)


@dataclass(frozen=True)
class InstrumentedProgram:
    program: Program
    points: tuple[InstrumentationPoint, ...]
    # Per-address execution tables, indexed by (address - base):
    pre: tuple[tuple[int, ...], ...]  # ids emitted on arrival
    post: tuple[tuple[int, ...], ...]  # ids emitted after normal completion
    masked: tuple[Optional[int], ...]  # static id of the masked point at a transfer

    @classmethod
    def uninstrumented(cls, program: Program) -> "InstrumentedProgram":
        """Same program with no trampoline calls; used for baseline timing."""
        if not program.laid_out:
            raise IRError("program must be laid out")
        n = program.size
        return cls(program, (), ((),) * n, ((),) * n, (None,) * n)

    def point(self, pid: int) -> InstrumentationPoint:
        for p in self.points:
            if p.id == pid:
                return p
        raise KeyError(pid)

    @property
    def ids(self) -> frozenset[int]:
        return frozenset(p.id for p in self.points)

    def points_at(self, block_id: str) -> list[InstrumentationPoint]:
        return [p for p in self.points if p.block == block_id]


def instrument(program: Program) -> InstrumentedProgram:
    if not program.laid_out:
        raise IRError("program must be laid out before instrumentation")
    base = program.base
    n = program.size
    counter = 0

    def next_id() -> int:
        nonlocal counter
        counter += 1
        return static_id(counter)

    # (order key, point) pairs; order key = (address slot, phase, rank)
    placed: list[tuple[tuple[int, int, int], InstrumentationPoint]] = []

    def add(site, anchor, block, ins, key):
        placed.append((key, InstrumentationPoint(next_id(), site, anchor, block.id, ins.address)))

    # Stage 1: block boundaries and direct calls.
    for _, block in program.blocks():
        first = block.instructions[0]
        add(Site.BLOCK_ENTRY, first.address, block, first, (first.address, 0, 0))
        for ins in block.instructions:
            if ins.kind is Kind.DIRECT_CALL:
                add(Site.PRE_DIRECT_CALL, ins.address, block, ins, (ins.address, 0, 1))
                add(Site.POST_DIRECT_CALL, ins.address + 1, block, ins, (ins.address, 1, 0))
        term = block.terminator
        if term.kind is Kind.COND_BRANCH:
            add(Site.BLOCK_EXIT, term.address, block, term, (term.address, 0, 2))
        elif term.kind not in (Kind.INDIRECT_JUMP, Kind.RETURN):
            add(Site.BLOCK_EXIT, term.address + 1, block, term, (term.address, 1, 1))

    # Stage 2: indirect transfers, placed directly in front of the transfer.
    for _, block in program.blocks():
        for ins in block.instructions:
            if ins.kind is Kind.INDIRECT_CALL:
                add(Site.PRE_INDIRECT_CALL, ins.address, block, ins, (ins.address, 0, 3))
                add(Site.POST_INDIRECT_CALL, ins.address + 1, block, ins, (ins.address, 1, 0))
            elif ins.kind is Kind.INDIRECT_JUMP:
                add(Site.PRE_INDIRECT_JUMP, ins.address, block, ins, (ins.address, 0, 3))
            elif ins.kind is Kind.RETURN:
                add(Site.PRE_RETURN, ins.address, block, ins, (ins.address, 0, 3))

    placed.sort(key=lambda kp: kp[0])
    pre: list[list[int]] = [[] for _ in range(n)]
    post: list[list[int]] = [[] for _ in range(n)]
    masked: list[Optional[int]] = [None] * n
    for (addr, phase, _), point in placed:
        i = addr - base
        if point.masked:
            masked[i] = point.id
        elif phase == 0:
            pre[i].append(point.id)
        else:
            post[i].append(point.id)
    return InstrumentedProgram(
        program=program,
        points=tuple(p for _, p in placed),
        pre=tuple(tuple(x) for x in pre),
        post=tuple(tuple(x) for x in post),
        masked=tuple(masked),
    )
