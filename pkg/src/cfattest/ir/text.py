"""Line-based text format for toy programs.

    # comment
    entry main
    table 0: n5 n3          # jump table 0, block ids
    slot 0: sign            # call slot 0, function name
    func main:
    block b0:
      begin
      compute in r0 0
      br r0 b2
      call helper
      icall 0
      ijmp 0 r1
      end
      ret

Header lines (`entry`, `table`, `slot`) may appear anywhere; tables and slots
must be listed in index order. Operands are integers (decimal or 0x-hex) or
register names.
"""

from __future__ import annotations

import re

from .model import BasicBlock, Instruction, IRError, Kind, Program, validate

_IDENT = re.compile(r"^[A-Za-z_][A-Za-z0-9_.]*$")


class ParseError(IRError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


def _operand(tok: str, lineno: int):
    try:
        return int(tok, 0)
    except ValueError:
        pass
    if not _IDENT.match(tok):
        raise ParseError(lineno, f"bad operand {tok!r}")
    return tok


def _instruction(toks: list[str], lineno: int) -> Instruction:
    try:
        kind = Kind(toks[0])
    except ValueError:
        raise ParseError(lineno, f"unknown instruction {toks[0]!r}") from None
    rest = toks[1:]
    if kind is Kind.COMPUTE:
        if not rest:
            raise ParseError(lineno, "compute needs an op")
        args = (rest[0],) + tuple(_operand(t, lineno) for t in rest[1:])
    elif kind is Kind.COND_BRANCH:
        if len(rest) != 2:
            raise ParseError(lineno, "br takes a condition and a target block")
        args = (_operand(rest[0], lineno), rest[1])
    elif kind is Kind.DIRECT_CALL:
        if len(rest) != 1:
            raise ParseError(lineno, "call takes one function name")
        args = (rest[0],)
    elif kind is Kind.INDIRECT_CALL:
        if len(rest) != 1:
            raise ParseError(lineno, "icall takes one slot operand")
        args = (_operand(rest[0], lineno),)
    elif kind is Kind.INDIRECT_JUMP:
        if len(rest) != 2:
            raise ParseError(lineno, "ijmp takes a table number and an index operand")
        table = _operand(rest[0], lineno)
        if not isinstance(table, int):
            raise ParseError(lineno, "ijmp table must be a literal")
        args = (table, _operand(rest[1], lineno))
    else:
        if rest:
            raise ParseError(lineno, f"{kind.value} takes no operands")
        args = ()
    return Instruction(kind, args)


def parse_program(text: str) -> Program:
    entry = None
    tables: list[tuple[str, ...]] = []
    slots: list[str] = []
    functions: dict[str, list[BasicBlock]] = {}
    current_fn = None
    current_block = None
    pending: list[Instruction] = []

    def close_block():
        nonlocal current_block, pending
        if current_block is not None:
            functions[current_fn].append(BasicBlock(current_block, tuple(pending)))
        current_block, pending = None, []

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        head = toks[0]
        if head == "entry":
            if len(toks) != 2:
                raise ParseError(lineno, "entry takes one function name")
            entry = toks[1]
        elif head in ("table", "slot") and len(toks) >= 2 and toks[1].endswith(":"):
            try:
                index = int(toks[1][:-1])
            except ValueError:
                raise ParseError(lineno, f"bad {head} index") from None
            target = tables if head == "table" else slots
            if index != len(target):
                raise ParseError(lineno, f"{head} {index} listed out of order")
            if head == "table":
                tables.append(tuple(toks[2:]))
            elif len(toks) != 3:
                raise ParseError(lineno, "slot holds exactly one function")
            else:
                slots.append(toks[2])
        elif head == "func":
            if len(toks) != 2 or not toks[1].endswith(":"):
                raise ParseError(lineno, "expected 'func <name>:'")
            close_block()
            current_fn = toks[1][:-1]
            if current_fn in functions:
                raise ParseError(lineno, f"duplicate function {current_fn!r}")
            functions[current_fn] = []
        elif head == "block":
            if len(toks) != 2 or not toks[1].endswith(":"):
                raise ParseError(lineno, "expected 'block <id>:'")
            if current_fn is None:
                raise ParseError(lineno, "block outside of a function")
            close_block()
            current_block = toks[1][:-1]
        else:
            if current_block is None:
                raise ParseError(lineno, "instruction outside of a block")
            pending.append(_instruction(toks, lineno))
    close_block()
    if entry is None:
        entry = next(iter(functions), None)
    if entry is None:
        raise IRError("program has no functions")
    program = Program(
        functions={k: tuple(v) for k, v in functions.items()},
        entry=entry,
        jump_tables=tuple(tables),
        call_slots=tuple(slots),
    )
    validate(program)
    return program


def format_program(program: Program) -> str:
    lines = [f"entry {program.entry}"]
    for i, table in enumerate(program.jump_tables):
        lines.append(f"table {i}: {' '.join(table)}")
    for i, fname in enumerate(program.call_slots):
        lines.append(f"slot {i}: {fname}")
    for fname, blocks in program.functions.items():
        lines.append(f"func {fname}:")
        for block in blocks:
            lines.append(f"block {block.id}:")
            for ins in block.instructions:
                parts = [ins.kind.value] + [str(a) for a in ins.args]
                lines.append("  " + " ".join(parts))
    return "\n".join(lines) + "\n"
