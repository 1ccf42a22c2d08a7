"""Bundled target programs and request generators."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Union

from .ir import InstrumentedProgram, Program, instrument, layout, parse_program

BUILTINS = ("dispatch", "signing", "mixed", "tiny")

SIGNING_MAGIC = 0x5349
PAYLOAD_WORDS = 64
DISPATCH_PASSWORD = 4242


def builtin_source(name: str) -> str:
    if name not in BUILTINS:
        raise KeyError(f"unknown builtin program {name!r}; choose from {', '.join(BUILTINS)}")
    return resources.files("cfattest").joinpath("programs", f"{name}.cfir").read_text()


def load_program(spec: Union[str, Path]) -> Program:
    """Parse a program file, or a bundled one given as `builtin:<name>`."""
    spec = str(spec)
    if spec.startswith("builtin:"):
        return parse_program(builtin_source(spec.split(":", 1)[1]))
    return parse_program(Path(spec).read_text())


def prepare(program: Program, base: int = 0) -> InstrumentedProgram:
    return instrument(layout(program, base))


@dataclass
class Workload:
    """Request inputs plus the seed each request was generated from."""

    requests: list[list[int]]
    seeds: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.requests)

    def __iter__(self):
        return iter(self.requests)

    def __getitem__(self, i):
        return self.requests[i]

    @classmethod
    def signing(cls, n: int, seed: int = 0, invalid_rate: float = 0.05) -> "Workload":
        rng = random.Random(seed)
        seeds = [rng.getrandbits(32) for _ in range(n)]
        return cls([signing_request(s, invalid_rate) for s in seeds], seeds)

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "Workload":
        reqs = []
        for lineno, line in enumerate(lines, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                reqs.append([int(tok, 0) for tok in line.replace(",", " ").split()])
            except ValueError:
                raise ValueError(f"line {lineno}: input values must be integers") from None
        return cls(reqs)

    def to_text(self) -> str:
        return "".join(" ".join(str(v) for v in r) + "\n" for r in self.requests)


def signing_request(seed: int, invalid_rate: float = 0.05) -> list[int]:
    """One request: [magic, digest kind, payload...], hashed and signed by the stub."""
    rng = random.Random(seed)
    magic = SIGNING_MAGIC if rng.random() >= invalid_rate else rng.randrange(1 << 16)
    kind = rng.randrange(2)
    return [magic, kind] + [rng.getrandbits(32) for _ in range(PAYLOAD_WORDS)]


def signing_driver() -> Workload:
    """Offline inputs that exercise every legal path of the signing service."""
    reqs = [signing_request(s, invalid_rate=0.0) for s in range(8)]
    reqs.append([0, 0] + [0] * PAYLOAD_WORDS)  # bad magic
    for kind in (0, 1):
        reqs.append([SIGNING_MAGIC, kind] + [2 * i for i in range(PAYLOAD_WORDS)])
        reqs.append([SIGNING_MAGIC, kind] + [2 * i + 1 for i in range(PAYLOAD_WORDS)])
    return Workload(reqs)


def dispatch_driver() -> Workload:
    return Workload([[DISPATCH_PASSWORD], [1]])


def mixed_driver() -> Workload:
    return Workload([[0, 5], [1, 5]])


def tiny_workload(n: int, seed: int = 0) -> Workload:
    rng = random.Random(seed)
    return Workload([[rng.randrange(2)] for _ in range(n)])


DRIVERS = {
    "dispatch": dispatch_driver,
    "signing": signing_driver,
    "mixed": mixed_driver,
    "tiny": lambda: Workload([[0], [1]]),
}
