"""Interpreter for instrumented toy programs.

Trampoline calls are modelled as emissions into a sink callable. The runtime
memory that indirect transfers read (call slots, jump tables, the return
stack) is the attack surface and can be replaced or observed through hooks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

from ..ids import BEGIN, END, ID_MASK, OFFSET_MASK
from .instrument import InstrumentedProgram
from .model import COMPUTE_OPS, IRError, Kind, Program

DEFAULT_FUEL = 1_000_000
MAX_CALL_DEPTH = 4096

TransferHook = Callable[[Kind, int, int], int]


class Trap(Exception):
    """The target faulted: bad transfer destination, runaway execution, stack misuse."""

    def __init__(self, message: str, address: Optional[int] = None):
        super().__init__(message)
        self.address = address


class ExecutionLimit(Trap):
    pass


class TraceEvent(NamedTuple):
    value: int
    tag: Optional[str] = None  # "BEGIN" / "END" for delimiters

    @classmethod
    def of(cls, value: int) -> "TraceEvent":
        if value == BEGIN:
            return cls(value, "BEGIN")
        if value == END:
            return cls(value, "END")
        return cls(value)


@dataclass
class Memory:
    """Mutable runtime copies of the program's indirect-transfer tables."""

    call_slots: list[int]
    jump_tables: list[list[int]]

    @classmethod
    def of(cls, program: Program) -> "Memory":
        return cls(program.resolved_call_slots(), program.resolved_jump_tables())


# lowered opcodes
_COMPUTE, _BR, _CALL, _ICALL, _IJMP, _RET, _BEGIN, _END = range(8)
_OPCODE = {
    Kind.COMPUTE: _COMPUTE,
    Kind.COND_BRANCH: _BR,
    Kind.DIRECT_CALL: _CALL,
    Kind.INDIRECT_CALL: _ICALL,
    Kind.INDIRECT_JUMP: _IJMP,
    Kind.RETURN: _RET,
    Kind.ANNOTATE_BEGIN: _BEGIN,
    Kind.ANNOTATE_END: _END,
}


@dataclass
class _Lowered:
    code: list
    nregs: int
    is_call: list[bool]
    entry: Optional[int]


def _lower(program: Program) -> _Lowered:
    regs: dict[str, int] = {}

    def operand(x):
        if isinstance(x, str):
            return (True, regs.setdefault(x, len(regs)))
        return (False, x & ID_MASK)

    block_index = {}
    func_index = {}
    for fname, blocks in program.functions.items():
        func_index[fname] = blocks[0].address - program.base if blocks else None
        for b in blocks:
            block_index[b.id] = b.address - program.base

    code = []
    for ins in program.instructions():
        op = _OPCODE[ins.kind]
        if op == _COMPUTE:
            name = ins.args[0]
            has_dst, _ = COMPUTE_OPS[name]
            ops = ins.args[1:]
            dst = operand(ops[0])[1] if has_dst else None
            srcs = tuple(operand(o) for o in (ops[1:] if has_dst else ops))
            code.append((op, name, dst, srcs))
        elif op == _BR:
            code.append((op, operand(ins.args[0]), block_index[ins.args[1]], None))
        elif op == _CALL:
            code.append((op, func_index[ins.args[0]], None, None))
        elif op == _ICALL:
            code.append((op, operand(ins.args[0]), None, None))
        elif op == _IJMP:
            code.append((op, ins.args[0], operand(ins.args[1]), None))
        else:
            code.append((op, None, None, None))
    is_call = [c[0] in (_CALL, _ICALL) for c in code]
    return _Lowered(code, len(regs), is_call, func_index[program.entry])


_lowered_cache: dict[int, tuple[Program, _Lowered]] = {}


def _lowered(program: Program) -> _Lowered:
    key = id(program)
    hit = _lowered_cache.get(key)
    if hit is not None and hit[0] is program:
        return hit[1]
    low = _lower(program)
    if len(_lowered_cache) > 256:
        _lowered_cache.clear()
    _lowered_cache[key] = (program, low)
    return low


def _compute(name, a, b, inputs, outputs):
    if name == "set":
        return a
    if name == "add":
        return (a + b) & ID_MASK
    if name == "sub":
        return (a - b) & ID_MASK
    if name == "mul":
        return (a * b) & ID_MASK
    if name == "xor":
        return a ^ b
    if name == "and":
        return a & b
    if name == "or":
        return a | b
    if name == "shl":
        return (a << (b & 63)) & ID_MASK
    if name == "shr":
        return a >> (b & 63)
    if name == "mod":
        return a % b if b else 0
    if name == "eq":
        return int(a == b)
    if name == "ne":
        return int(a != b)
    if name == "lt":
        return int(a < b)
    if name == "in":
        return inputs[a % len(inputs)] & ID_MASK if inputs else 0
    if name == "out":
        outputs.append(a)
        return None
    return None  # nop


def execute(
    iprog: InstrumentedProgram,
    inputs: Sequence[int],
    sink: Callable[[int], None],
    *,
    memory: Optional[Memory] = None,
    on_transfer: Optional[TransferHook] = None,
    fuel: int = DEFAULT_FUEL,
) -> list[int]:
    """Run the entry function on `inputs`, emitting trace values into `sink`.

    Returns the output vector. Raises Trap on a transfer to an address that
    no instruction owns; the masked ID of that transfer is emitted first.
    """
    program = iprog.program
    if not program.laid_out:
        raise IRError("program must be laid out")
    low = _lowered(program)
    outputs: list[int] = []
    if low.entry is None:
        return outputs
    if memory is None:
        memory = Memory.of(program)
    code, pre, post, masked, is_call = low.code, iprog.pre, iprog.post, iprog.masked, low.is_call
    base = program.base
    n = len(code)
    exit_addr = program.exit_address
    regs = [0] * low.nregs
    stack = [exit_addr]
    inputs = list(inputs)

    def val(o):
        return regs[o[1]] if o[0] else o[1]

    def target(kind, src, dest):
        if on_transfer is not None:
            dest = on_transfer(kind, src, dest)
        static = masked[src - base]
        if static is not None:
            sink(static ^ ((dest - src) & OFFSET_MASK))
        return dest

    def index_of(dest):
        j = dest - base
        if not 0 <= j < n:
            raise Trap(f"transfer to unowned address {dest:#x}", dest)
        return j

    pc = low.entry
    for v in pre[pc]:
        sink(v)
    steps = 0
    while True:
        steps += 1
        if steps > fuel:
            raise ExecutionLimit(f"fuel exhausted after {fuel} instructions", base + pc)
        op, a, b, c = code[pc]
        if op == _COMPUTE:
            srcs = c
            x = val(srcs[0]) if srcs else 0
            y = val(srcs[1]) if len(srcs) > 1 else 0
            r = _compute(a, x, y, inputs, outputs)
            if b is not None:
                regs[b] = r
        elif op == _BR:
            for v in post[pc]:
                sink(v)
            pc = b if val(a) else pc + 1
            if pc >= n:
                raise Trap("fell off the end of code", base + pc)
            for v in pre[pc]:
                sink(v)
            continue
        elif op == _CALL:
            if a is not None:
                if len(stack) >= MAX_CALL_DEPTH:
                    raise Trap("call depth exceeded", base + pc)
                stack.append(base + pc + 1)
                pc = a
                for v in pre[pc]:
                    sink(v)
                continue
        elif op == _ICALL:
            slots = memory.call_slots
            src = base + pc
            dest = target(Kind.INDIRECT_CALL, src, slots[val(a) % len(slots)])
            if len(stack) >= MAX_CALL_DEPTH:
                raise Trap("call depth exceeded", src)
            stack.append(src + 1)
            pc = index_of(dest)
            for v in pre[pc]:
                sink(v)
            continue
        elif op == _IJMP:
            table = memory.jump_tables[a]
            src = base + pc
            dest = target(Kind.INDIRECT_JUMP, src, table[val(b) % len(table)])
            pc = index_of(dest)
            for v in pre[pc]:
                sink(v)
            continue
        elif op == _RET:
            if not stack:
                raise Trap("return with empty stack", base + pc)
            src = base + pc
            dest = target(Kind.RETURN, src, stack.pop())
            if dest == exit_addr:
                return outputs
            pc = index_of(dest)
            if pc > 0 and is_call[pc - 1]:
                # landing in the post-call trampoline of the caller
                for v in post[pc - 1]:
                    sink(v)
            for v in pre[pc]:
                sink(v)
            continue
        elif op == _BEGIN:
            sink(BEGIN)
        elif op == _END:
            sink(END)
        # normal completion, fall through to the next instruction
        for v in post[pc]:
            sink(v)
        pc += 1
        if pc >= n:
            raise Trap("fell off the end of code", base + pc)
        for v in pre[pc]:
            sink(v)


def collect_trace(iprog: InstrumentedProgram, inputs: Sequence[int], **kwargs) -> list[TraceEvent]:
    events: list[int] = []
    execute(iprog, inputs, events.append, **kwargs)
    return [TraceEvent.of(v) for v in events]
