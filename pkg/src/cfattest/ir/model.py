"""Program representation for the toy target: functions, basic blocks, instructions.

Addresses are abstract: one unit per instruction, assigned by `layout` in
program order starting at a base offset.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Optional, Union

Operand = Union[int, str]  # integer literal or register name


class IRError(Exception):
    """Structural problem in a program (bad reference, duplicate label, ...)."""


class Kind(str, enum.Enum):
    COMPUTE = "compute"
    COND_BRANCH = "br"
    DIRECT_CALL = "call"
    INDIRECT_CALL = "icall"
    INDIRECT_JUMP = "ijmp"
    RETURN = "ret"
    ANNOTATE_BEGIN = "begin"
    ANNOTATE_END = "end"


CALL_KINDS = frozenset((Kind.DIRECT_CALL, Kind.INDIRECT_CALL))
# instructions that may only appear as the last instruction of a block
TERMINATOR_KINDS = frozenset((Kind.COND_BRANCH, Kind.INDIRECT_JUMP, Kind.RETURN))
# a block ending in one of these never falls through to the next block
NO_FALLTHROUGH = frozenset((Kind.INDIRECT_JUMP, Kind.RETURN))

COMPUTE_OPS = {
    # op: number of operands after the destination register (None = no destination)
    "nop": (None, 0),
    "set": (True, 1),
    "add": (True, 2),
    "sub": (True, 2),
    "mul": (True, 2),
    "xor": (True, 2),
    "and": (True, 2),
    "or": (True, 2),
    "shl": (True, 2),
    "shr": (True, 2),
    "mod": (True, 2),
    "eq": (True, 2),
    "ne": (True, 2),
    "lt": (True, 2),
    "in": (True, 1),
    "out": (None, 1),
}


@dataclass(frozen=True)
class Instruction:
    """One instruction.

    `args` depends on `kind`:

    - compute: (op, *operands), where the first operand is the destination
      register for ops that write one
    - br: (condition, target_block)
    - call: (function,)
    - icall: (slot_index,)
    - ijmp: (table, index)
    - ret / begin / end: ()
    """

    kind: Kind
    args: tuple = ()
    address: Optional[int] = None

    @property
    def is_call(self) -> bool:
        return self.kind in CALL_KINDS


@dataclass(frozen=True)
class BasicBlock:
    id: str
    instructions: tuple[Instruction, ...]

    @property
    def terminator(self) -> Instruction:
        return self.instructions[-1]

    @property
    def address(self) -> Optional[int]:
        return self.instructions[0].address


@dataclass(frozen=True)
class Program:
    functions: dict[str, tuple[BasicBlock, ...]]
    entry: str
    jump_tables: tuple[tuple[str, ...], ...] = ()
    call_slots: tuple[str, ...] = ()
    base: Optional[int] = None

    @property
    def laid_out(self) -> bool:
        return self.base is not None

    def blocks(self):
        for name, blocks in self.functions.items():
            for block in blocks:
                yield name, block

    def instructions(self):
        for _, block in self.blocks():
            yield from block.instructions

    @property
    def size(self) -> int:
        return sum(len(b.instructions) for _, b in self.blocks())

    def block(self, block_id: str) -> BasicBlock:
        for _, block in self.blocks():
            if block.id == block_id:
                return block
        raise KeyError(block_id)

    def function_address(self, name: str) -> Optional[int]:
        blocks = self.functions[name]
        return blocks[0].address if blocks else None

    def block_address(self, block_id: str) -> int:
        return self.block(block_id).address

    def resolved_call_slots(self) -> list[int]:
        """Call-slot contents as code addresses (laid-out programs only)."""
        return [self.function_address(name) for name in self.call_slots]

    def resolved_jump_tables(self) -> list[list[int]]:
        return [[self.block_address(b) for b in table] for table in self.jump_tables]

    @property
    def exit_address(self) -> int:
        """Return address handed to the entry function; one past the last instruction."""
        return self.base + self.size


def _is_register(operand) -> bool:
    return isinstance(operand, str)


def validate(program: Program) -> None:
    """Raise IRError unless `program` is structurally valid."""
    if program.entry not in program.functions:
        raise IRError(f"entry function {program.entry!r} does not exist")
    seen: dict[str, str] = {}
    for fname, blocks in program.functions.items():
        for block in blocks:
            if block.id in seen:
                raise IRError(f"duplicate block id {block.id!r}")
            seen[block.id] = fname
    for fname, blocks in program.functions.items():
        local = {b.id for b in blocks}
        for i, block in enumerate(blocks):
            if not block.instructions:
                raise IRError(f"block {block.id!r} is empty")
            for ins in block.instructions[:-1]:
                if ins.kind in TERMINATOR_KINDS:
                    raise IRError(f"{ins.kind.value} before the end of block {block.id!r}")
            for ins in block.instructions:
                _check_instruction(program, fname, local, block, ins)
            last = i == len(blocks) - 1
            if last and block.terminator.kind not in NO_FALLTHROUGH:
                raise IRError(f"control falls off the end of function {fname!r}")
    for t, table in enumerate(program.jump_tables):
        if not table:
            raise IRError(f"jump table {t} is empty")
        for target in table:
            if target not in seen:
                raise IRError(f"jump table {t} references unknown block {target!r}")
    for s, fname in enumerate(program.call_slots):
        if fname not in program.functions:
            raise IRError(f"call slot {s} references unknown function {fname!r}")
        if not program.functions[fname]:
            raise IRError(f"call slot {s} references empty function {fname!r}")


def _check_instruction(program, fname, local, block, ins) -> None:
    k = ins.kind
    where = f"block {block.id!r}"
    if k is Kind.COMPUTE:
        if not ins.args or ins.args[0] not in COMPUTE_OPS:
            raise IRError(f"unknown compute op in {where}: {ins.args!r}")
        has_dst, nsrc = COMPUTE_OPS[ins.args[0]]
        operands = ins.args[1:]
        if len(operands) != nsrc + (1 if has_dst else 0):
            raise IRError(f"wrong operand count for {ins.args[0]} in {where}")
        if has_dst and not _is_register(operands[0]):
            raise IRError(f"destination must be a register in {where}")
    elif k is Kind.COND_BRANCH:
        if len(ins.args) != 2:
            raise IRError(f"br needs a condition and a target in {where}")
        if ins.args[1] not in local:
            raise IRError(f"dangling branch target {ins.args[1]!r} in {where}")
    elif k is Kind.DIRECT_CALL:
        if len(ins.args) != 1 or ins.args[0] not in program.functions:
            raise IRError(f"call to unknown function in {where}: {ins.args!r}")
    elif k is Kind.INDIRECT_CALL:
        if len(ins.args) != 1:
            raise IRError(f"icall needs a slot index in {where}")
        if not program.call_slots:
            raise IRError(f"icall in {where} but the program has no call slots")
    elif k is Kind.INDIRECT_JUMP:
        if len(ins.args) != 2 or not isinstance(ins.args[0], int):
            raise IRError(f"ijmp needs a table number and an index in {where}")
        if not 0 <= ins.args[0] < len(program.jump_tables):
            raise IRError(f"ijmp in {where} references missing table {ins.args[0]}")
    elif ins.args:
        raise IRError(f"{k.value} takes no arguments in {where}")


def layout(program: Program, base: int = 0) -> Program:
    """Assign strictly increasing addresses to every instruction, starting at `base`.

    Re-laying out an already laid-out program relocates it.
    """
    validate(program)
    if base < 0:
        raise IRError("base address must be non-negative")
    addr = base
    functions = {}
    for fname, blocks in program.functions.items():
        new_blocks = []
        for block in blocks:
            placed = []
            for ins in block.instructions:
                placed.append(replace(ins, address=addr))
                addr += 1
            new_blocks.append(BasicBlock(block.id, tuple(placed)))
        functions[fname] = tuple(new_blocks)
    return replace(program, functions=functions, base=base)


def block(block_id: str, *instructions: Instruction) -> BasicBlock:
    return BasicBlock(block_id, tuple(instructions))


def ins(kind: Union[Kind, str], *args) -> Instruction:
    return Instruction(Kind(kind), tuple(args))
