"""Seeded generator of small, always-terminating toy programs for property tests.

Calls only go to functions defined later, branches and jump-table entries
only point forward, so every execution terminates.
"""

from __future__ import annotations

import random

from .model import BasicBlock, Instruction, Kind, Program, ins, validate

REGS = ("r0", "r1", "r2", "r3")


def random_inputs(rng: random.Random, length: int = 4, spread: int = 4) -> list[int]:
    return [rng.randrange(spread) for _ in range(length)]


def random_program(seed: int, size_budget: int) -> Program:
    """Build a valid program with roughly `size_budget` basic blocks."""
    if size_budget < 1:
        raise ValueError("size budget must be >= 1")
    rng = random.Random(seed)
    if size_budget == 1:
        body = (
            ins(Kind.ANNOTATE_BEGIN),
            ins(Kind.COMPUTE, "in", "r0", rng.randrange(4)),
            ins(Kind.COMPUTE, "out", "r0"),
            ins(Kind.ANNOTATE_END),
            ins(Kind.RETURN),
        )
        return Program(functions={"main": (BasicBlock("main.b0", body),)}, entry="main")

    nfuncs = 1 + min(size_budget // 4, 5)
    # split the block budget: main keeps at least two blocks
    sizes = [1] * nfuncs
    sizes[0] = 2
    for _ in range(max(0, size_budget - sum(sizes))):
        sizes[rng.randrange(nfuncs)] += 1
    names = ["main"] + [f"f{i}" for i in range(1, nfuncs)]

    jump_tables: list[tuple[str, ...]] = []
    call_slots: list[str] = []
    want = {Kind.DIRECT_CALL, Kind.INDIRECT_CALL, Kind.INDIRECT_JUMP, Kind.COND_BRANCH}
    functions = {}
    for fi, fname in enumerate(names):
        nblocks = sizes[fi]
        ids = [f"{fname}.b{k}" for k in range(nblocks)]
        callees = names[fi + 1:]
        blocks = []
        for bi in range(nblocks):
            body: list[Instruction] = []
            if fname == "main" and bi == 0:
                body.append(ins(Kind.ANNOTATE_BEGIN))
            for _ in range(rng.randrange(1, 3)):
                body.append(_random_compute(rng))
            if callees and (Kind.DIRECT_CALL in want or rng.random() < 0.35):
                body.append(ins(Kind.DIRECT_CALL, rng.choice(callees)))
                want.discard(Kind.DIRECT_CALL)
            if callees and (Kind.INDIRECT_CALL in want or rng.random() < 0.2):
                call_slots.append(rng.choice(callees))
                body.append(ins(Kind.INDIRECT_CALL, len(call_slots) - 1))
                want.discard(Kind.INDIRECT_CALL)
            last = bi == nblocks - 1
            later = ids[bi + 2:]  # skip the fallthrough block so branches skip code
            if last:
                if fname == "main":
                    body.append(ins(Kind.ANNOTATE_END))
                body.append(ins(Kind.RETURN))
            else:
                choice = rng.random()
                if Kind.INDIRECT_JUMP in want and bi + 1 < nblocks:
                    choice = 0.0
                elif Kind.COND_BRANCH in want:
                    choice = 0.5
                if choice < 0.3:
                    targets = ids[bi + 1:]
                    table = tuple(rng.choice(targets) for _ in range(rng.randrange(1, 4)))
                    jump_tables.append(table)
                    body.append(_random_compute(rng, dst="r3"))
                    body.append(ins(Kind.INDIRECT_JUMP, len(jump_tables) - 1, "r3"))
                    want.discard(Kind.INDIRECT_JUMP)
                elif choice < 0.75:
                    tgt = rng.choice(later or ids[bi + 1:])
                    body.append(ins(Kind.COMPUTE, "in", "r2", rng.randrange(8)))
                    body.append(ins(Kind.COMPUTE, "and", "r2", "r2", 1))
                    body.append(ins(Kind.COND_BRANCH, "r2", tgt))
                    want.discard(Kind.COND_BRANCH)
                elif fname != "main" and rng.random() < 0.3:
                    body.append(ins(Kind.RETURN))  # early return
                # else: fall through
            blocks.append(BasicBlock(ids[bi], tuple(body)))
        functions[fname] = tuple(blocks)
    program = Program(
        functions=functions,
        entry="main",
        jump_tables=tuple(jump_tables),
        call_slots=tuple(call_slots),
    )
    validate(program)
    return program


def _random_compute(rng: random.Random, dst: str | None = None) -> Instruction:
    d = dst or rng.choice(REGS)
    roll = rng.random() * (0.8 if dst else 1.0)
    if roll < 0.4:
        return ins(Kind.COMPUTE, "in", d, rng.randrange(8))
    if roll < 0.8:
        op = rng.choice(("add", "xor", "sub", "mul", "and", "mod"))
        return ins(Kind.COMPUTE, op, d, rng.choice(REGS), rng.randrange(1, 7))
    return ins(Kind.COMPUTE, "out", rng.choice(REGS))
