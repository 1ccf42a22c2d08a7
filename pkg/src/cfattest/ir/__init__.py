"""Toy program representation standing in for an instrumented native target."""

from .generate import random_inputs, random_program
from .instrument import (
    InstrumentationPoint,
    InstrumentedProgram,
    Site,
    emit_masked_id,
    instrument,
)
from .interp import ExecutionLimit, Memory, TraceEvent, Trap, collect_trace, execute
from .model import BasicBlock, Instruction, IRError, Kind, Program, block, ins, layout, validate
from .text import ParseError, format_program, parse_program

__all__ = [
    "BasicBlock",
    "ExecutionLimit",
    "IRError",
    "Instruction",
    "InstrumentationPoint",
    "InstrumentedProgram",
    "Kind",
    "Memory",
    "ParseError",
    "Program",
    "Site",
    "TraceEvent",
    "Trap",
    "block",
    "collect_trace",
    "emit_masked_id",
    "execute",
    "format_program",
    "ins",
    "instrument",
    "layout",
    "parse_program",
    "random_inputs",
    "random_program",
    "validate",
]
