"""Scripted attacks against the attestation pipeline, with asserted outcomes.

Every scenario learns a CFG from clean driver inputs, then replays a workload
through the two-thread pipeline with one attack hook installed and reports the
first detection that fired.
"""

from __future__ import annotations

import json
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence, Union

from .cfg import AttestationRecord, ControlFlowGraph, Edge
from .channel import Hooks, RunConfig, RunResult, gated_trace, learn_reference, run_pipeline, run_reference
from .ir import InstrumentedProgram, Kind
from .ir.interp import Memory
from .workload import DRIVERS, Workload, load_program, prepare

KINDS = (
    "hijack-indirect-target",
    "rop-style-return-overwrite",
    "tamper-cached-id",
    "tamper-ciphertext",
    "drop-batch",
    "replay-batch",
    "reorder-batches",
    "fork-verifier",
    "suppress-feedback",
)

DETECTIONS = (
    "cfg-violation",
    "aead-failure",
    "digest-mismatch",
    "counter-desync",
    "prover-stall-detected",
    "undetected-by-design",
)

# ProtocolError subclass name -> detection class
_CLASS_OF = {
    "AuthenticationError": "aead-failure",
    "BatchFormatError": "aead-failure",
    "DigestMismatch": "digest-mismatch",
    "CounterDesync": "counter-desync",
    "ProverStall": "prover-stall-detected",
    "cfg-violation": "cfg-violation",
}

UNDETECTED = "undetected"


class ScenarioError(ValueError):
    """A scenario cannot be built: unknown kind, bad parameters, missing hook target."""


@dataclass
class AttackScenario:
    name: str
    kind: str
    expected: str
    program: str = "builtin:signing"
    params: dict[str, Any] = field(default_factory=dict)
    requests: int = 6
    seed: int = 0
    batch_size: int = 64
    feedback_frequency: int = 2
    stall_timeout: float = 5.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ScenarioError(f"unknown scenario kind {self.kind!r}")
        if self.expected not in DETECTIONS:
            raise ScenarioError(f"unknown detection class {self.expected!r}")
        if self.expected == "undetected-by-design" and not self.params.get("mixed_flow"):
            raise ScenarioError("undetected-by-design is reserved for the mixed-flow case")
        if self.requests < 1:
            raise ScenarioError("a scenario needs at least one request")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "AttackScenario":
        if not isinstance(data, dict) or "kind" not in data:
            raise ScenarioError("scenario must be an object with a 'kind'")
        data = dict(data)
        data.setdefault("name", data["kind"])
        data.setdefault("expected", "cfg-violation")
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ScenarioError(f"unknown scenario fields: {', '.join(sorted(unknown))}")
        return cls(**data)


@dataclass
class AttackOutcome:
    scenario: AttackScenario
    observed: str
    batch_no: Optional[int] = None
    edge: Optional[Edge] = None
    request: Optional[int] = None
    message: str = ""
    effective: bool = True  # the tampering changed what the target executed or sent
    log_delta: list[AttestationRecord] = field(default_factory=list)
    result: Optional[RunResult] = None

    @property
    def matched(self) -> bool:
        if self.scenario.expected == "undetected-by-design":
            return self.observed == UNDETECTED and self.effective
        return self.observed == self.scenario.expected

    def summary(self) -> str:
        where = []
        if self.batch_no is not None:
            where.append(f"batch={self.batch_no}")
        if self.request is not None:
            where.append(f"request={self.request}")
        if self.edge is not None:
            where.append(f"edge={self.edge}")
        status = "ok" if self.matched else "MISMATCH"
        return (
            f"{self.scenario.name}: expected={self.scenario.expected} "
            f"observed={self.observed} {' '.join(where)} [{status}]".replace("  ", " ")
        )


def _param(scenario: AttackScenario, key: str, default=None):
    value = scenario.params.get(key, default)
    if value is None:
        raise ScenarioError(f"{scenario.kind} requires parameter {key!r}")
    return value


def scenario_workload(scenario: AttackScenario, program_name: str) -> Workload:
    if "inputs" in scenario.params:
        return Workload([list(r) for r in scenario.params["inputs"]])
    if program_name == "signing":
        return Workload.signing(scenario.requests, scenario.seed, invalid_rate=0.0)
    rng = random.Random(scenario.seed)
    driver = DRIVERS.get(program_name)
    if driver is None:
        raise ScenarioError(f"no default inputs for {scenario.program}; give params.inputs")
    pool = driver().requests
    return Workload([list(rng.choice(pool)) for _ in range(scenario.requests)])


def _program_name(spec: str) -> str:
    return spec.split(":", 1)[1] if spec.startswith("builtin:") else Path(spec).stem


def _hijack_memory(iprog: InstrumentedProgram, scenario: AttackScenario) -> Memory:
    program = iprog.program
    memory = Memory.of(program)
    target = _param(scenario, "target")
    if "slot" in scenario.params:
        slot = scenario.params["slot"]
        if not 0 <= slot < len(memory.call_slots):
            raise ScenarioError(f"program has no call slot {slot}")
        addr = program.function_address(target)
        if addr is None:
            raise ScenarioError(f"unknown function {target!r}")
        memory.call_slots[slot] = addr
    else:
        table = scenario.params.get("table", 0)
        index = scenario.params.get("index", 0)
        if not 0 <= table < len(memory.jump_tables) or not 0 <= index < len(memory.jump_tables[table]):
            raise ScenarioError(f"program has no jump table entry {table}[{index}]")
        try:
            memory.jump_tables[table][index] = program.block_address(target)
        except KeyError:
            raise ScenarioError(f"unknown block {target!r}") from None
    return memory


def _return_overwrite(iprog: InstrumentedProgram, scenario: AttackScenario):
    program = iprog.program
    func = _param(scenario, "function")
    if func not in program.functions:
        raise ScenarioError(f"unknown function {func!r}")
    rets = {
        i.address for b in program.functions[func] for i in b.instructions if i.kind == Kind.RETURN
    }
    try:
        dest = program.block_address(_param(scenario, "target"))
    except KeyError:
        raise ScenarioError(f"unknown block {scenario.params['target']!r}") from None
    fired = False

    def hook(kind, src, original):
        nonlocal fired
        if not fired and kind == Kind.RETURN and src in rets:
            fired = True
            return dest
        return original

    return hook


def build_hooks(iprog: InstrumentedProgram, scenario: AttackScenario) -> Hooks:
    """Translate a scenario into pipeline hooks."""
    kind = scenario.kind
    p = scenario.params
    if kind == "hijack-indirect-target":
        req = _param(scenario, "request", 0)
        memory = _hijack_memory(iprog, scenario)
        return Hooks(memory_for=lambda i: memory if i == req else None)
    if kind == "rop-style-return-overwrite":
        req = _param(scenario, "request", 0)
        return Hooks(on_transfer=lambda i: _return_overwrite(iprog, scenario) if i == req else None)
    if kind == "tamper-cached-id":
        target_batch = _param(scenario, "batch", 0)
        offset = _param(scenario, "offset", 1)
        if not 1 <= offset < scenario.batch_size:
            raise ScenarioError("offset must leave the tampered ID inside an unsealed batch")
        flip = p.get("xor", 1 << 24)
        done = False

        def post_record(buffer, state):
            nonlocal done
            if not done and state.batch_no == target_batch and len(buffer) == offset:
                buffer[-1] ^= flip  # cache rewritten, hash chain left alone
                done = True

        return Hooks(post_record=post_record)
    if kind in ("tamper-ciphertext", "drop-batch", "replay-batch", "reorder-batches"):
        n = _param(scenario, "batch", 0)
        return Hooks(in_queue=_queue_attack(kind, n, p.get("bit", 0)))
    if kind == "fork-verifier":
        return Hooks(fork_at=_param(scenario, "batch", 1))
    if kind == "suppress-feedback":
        allow = _param(scenario, "allow", 0)
        passed = 0

        def on_feedback(fb):
            nonlocal passed
            if passed < allow:
                passed += 1
                return fb
            return None

        return Hooks(on_feedback=on_feedback)
    raise ScenarioError(f"no hook for scenario kind {kind!r}")  # pragma: no cover


def _queue_attack(kind: str, n: int, bit: int):
    held = []

    def in_queue(batch):
        if batch.batch_no != n and not held:
            return [batch]
        if kind == "tamper-ciphertext":
            ct = bytearray(batch.ciphertext)
            ct[(bit // 8) % len(ct)] ^= 1 << (bit % 8)
            return [type(batch)(batch.batch_no, bytes(ct), batch.tag)]
        if kind == "drop-batch":
            return []
        if kind == "replay-batch":
            return [batch, batch]
        # reorder: hold batch n back and deliver it after n+1
        if batch.batch_no == n:
            held.append(batch)
            return []
        out = [batch, held.pop()]
        return out

    return in_queue


def first_divergence(clean: Sequence[int], tampered: Sequence[int]) -> Optional[tuple[int, Edge]]:
    """Index and edge of the first value where a tampered trace leaves the clean one."""
    for i, (a, b) in enumerate(zip(clean, tampered)):
        if a != b:
            return i, Edge(tampered[i - 1], b)
    if len(clean) != len(tampered):
        i = min(len(clean), len(tampered))
        if i < len(tampered):
            return i, Edge(tampered[i - 1], tampered[i])
        return i, Edge(tampered[i - 1], clean[i])
    return None


def _effective(iprog, scenario, workload) -> bool:
    """Whether a control-flow attack actually changed the executed path."""
    req = scenario.params.get("request", 0)
    if req >= len(workload):
        return False
    clean = gated_trace(iprog, workload[req])
    if scenario.kind == "hijack-indirect-target":
        tampered = gated_trace(iprog, workload[req], memory=_hijack_memory(iprog, scenario))
    else:
        tampered = gated_trace(iprog, workload[req], on_transfer=_return_overwrite(iprog, scenario))
    return clean != tampered


def apply(
    scenario: AttackScenario,
    *,
    cfg: Optional[ControlFlowGraph] = None,
    keys: Optional[bytes] = None,
) -> AttackOutcome:
    """Run one scenario end to end and classify what the pipeline reported."""
    name = _program_name(scenario.program)
    try:
        program = load_program(scenario.program)
    except (KeyError, OSError) as exc:
        raise ScenarioError(f"cannot load program {scenario.program!r}: {exc}") from None
    iprog = prepare(program)
    workload = scenario_workload(scenario, name)
    if cfg is None:
        driver = scenario.params.get("driver")
        learn_set = Workload([list(r) for r in driver]) if driver else DRIVERS[name]()
        cfg = learn_reference(iprog, learn_set)
    hooks = build_hooks(iprog, scenario)
    config = RunConfig(
        batch_size=scenario.batch_size,
        feedback_frequency=scenario.feedback_frequency,
        timing=False,
        stall_timeout=scenario.stall_timeout,
    )
    if keys is None:
        keys = random.Random(scenario.seed).randbytes(64)
    result = run_pipeline(iprog, cfg, config, workload, keys=keys, hooks=hooks)

    clean_log = run_reference(iprog, cfg, workload)
    delta = [r for i, r in enumerate(result.log) if i >= len(clean_log) or clean_log[i] != r]

    effective = True
    if scenario.kind in ("hijack-indirect-target", "rop-style-return-overwrite"):
        effective = _effective(iprog, scenario, workload)

    outcome = AttackOutcome(scenario, UNDETECTED, log_delta=delta, effective=effective, result=result)
    if result.detections:
        first = result.detections[0]
        outcome.observed = _CLASS_OF.get(first.kind, first.kind)
        outcome.batch_no = first.batch_no
        outcome.message = first.message
        if first.kind == "cfg-violation":
            record = AttestationRecord.from_line(first.message)
            outcome.edge, outcome.request = record.edge, record.request
    return outcome


def scenario_suite() -> list[AttackScenario]:
    """One scenario per threat, plus the mixed-flow limitation."""
    return [
        AttackScenario(
            "dispatch-gadget-jump", "hijack-indirect-target", "cfg-violation", "builtin:dispatch",
            {"request": 1, "table": 0, "index": 0, "target": "n3", "inputs": [[4242], [7], [4242], [1]]},
        ),
        AttackScenario(
            "signing-slot-hijack", "hijack-indirect-target", "cfg-violation", "builtin:signing",
            {"request": 2, "slot": 0, "target": "fold"},
        ),
        AttackScenario(
            "signing-return-overwrite", "rop-style-return-overwrite", "cfg-violation", "builtin:signing",
            {"request": 1, "function": "parse", "target": "reject"},
        ),
        AttackScenario("cached-id-rewrite", "tamper-cached-id", "digest-mismatch", params={"batch": 3, "offset": 5}),
        AttackScenario("ciphertext-bitflip", "tamper-ciphertext", "aead-failure", params={"batch": 4, "bit": 77}),
        AttackScenario("queue-drop", "drop-batch", "aead-failure", params={"batch": 4}),
        AttackScenario("queue-replay", "replay-batch", "aead-failure", params={"batch": 2}),
        AttackScenario("queue-reorder", "reorder-batches", "aead-failure", params={"batch": 6}),
        AttackScenario("verifier-fork", "fork-verifier", "counter-desync", params={"batch": 3}),
        AttackScenario(
            "feedback-suppressed", "suppress-feedback", "prover-stall-detected",
            params={"allow": 1}, stall_timeout=0.5,
        ),
        AttackScenario(
            "mixed-flow-splice", "hijack-indirect-target", "undetected-by-design", "builtin:mixed",
            {"request": 0, "table": 0, "index": 0, "target": "e", "mixed_flow": True,
             "inputs": [[0, 5], [1, 5], [0, 5]]},
        ),
    ]


def load_scenarios(source: Union[str, Path]) -> list[AttackScenario]:
    """Read a JSON scenario file: one object, or a list, or {"scenarios": [...]}."""
    try:
        data = json.loads(Path(source).read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{source}: invalid JSON: {exc}") from None
    if isinstance(data, dict) and "scenarios" in data:
        data = data["scenarios"]
    if isinstance(data, dict):
        data = [data]
    if not isinstance(data, list):
        raise ScenarioError(f"{source}: expected a scenario object or list")
    try:
        return [AttackScenario.from_dict(d) for d in data]
    except TypeError as exc:
        raise ScenarioError(f"{source}: {exc}") from None


def dump_scenarios(scenarios: Sequence[AttackScenario]) -> str:
    return json.dumps({"scenarios": [s.to_dict() for s in scenarios]}, indent=2) + "\n"
