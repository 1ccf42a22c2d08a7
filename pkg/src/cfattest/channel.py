"""Two-thread attestation pipeline over a bounded single-producer/single-consumer queue.

The prover thread runs the target through the interpreter and feeds every
emitted value to the trampoline, which caches, seals and enqueues batches and
blocks for acknowledgments. The verifier thread unseals batches, checks the
IDs against a CFG (or learns one) and writes the attestation log.
"""

from __future__ import annotations

import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .cfg import AttestationRecord, ControlFlowGraph, Learner, StreamError, StreamVerifier, verify
from .ids import BEGIN, END
from .ir import InstrumentedProgram, Trap, execute
from .ir.interp import Memory, TransferHook
from .protocol import (
    CounterDesync,
    ProtocolError,
    ProverState,
    ProverStall,
    SealedBatch,
    VerifierState,
    provision,
)

DEFAULT_QUEUE_CAPACITY = 64
DEFAULT_BATCH_SIZE = 10_000
DEFAULT_FEEDBACK_FREQUENCY = 10
DEFAULT_STALL_TIMEOUT = 10.0

_POLL = 0.05  # upper bound of one wait slice; waits re-check the abort flag in between


class QueueClosed(Exception):
    pass


class PipelineAborted(Exception):
    def __init__(self, message: str, batch_no: Optional[int] = None, cause: Optional[BaseException] = None):
        super().__init__(message)
        self.batch_no = batch_no
        self.cause = cause


class BoundedQueue:
    """FIFO of sealed batches for exactly one producer and one consumer.

    The condition variable supplies the happens-before edge between an enqueue
    and the matching dequeue.
    """

    def __init__(self, capacity: int = DEFAULT_QUEUE_CAPACITY):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        self.capacity = capacity
        self._items: deque = deque()
        self._cond = threading.Condition()
        self._closed = False
        self._aborted = False
        self.max_occupancy = 0
        self.enqueued = 0
        self.dequeued = 0

    def __len__(self) -> int:
        return len(self._items)

    def enqueue(self, batch, timeout: Optional[float] = None) -> None:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while len(self._items) >= self.capacity:
                if self._aborted:
                    raise QueueClosed("queue aborted")
                remaining = _POLL if deadline is None else min(_POLL, deadline - time.monotonic())
                if remaining <= 0:
                    raise TimeoutError("queue full")
                self._cond.wait(remaining)
            if self._closed or self._aborted:
                raise QueueClosed("enqueue on a closed queue")
            self._items.append(batch)
            self.enqueued += 1
            if len(self._items) > self.max_occupancy:
                self.max_occupancy = len(self._items)
            self._cond.notify_all()

    def dequeue(self, timeout: Optional[float] = None):
        """Next batch in FIFO order. Raises QueueClosed once closed and drained."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while not self._items:
                if self._closed or self._aborted:
                    raise QueueClosed("end of stream")
                remaining = _POLL if deadline is None else min(_POLL, deadline - time.monotonic())
                if remaining <= 0:
                    raise TimeoutError("queue empty")
                self._cond.wait(remaining)
            item = self._items.popleft()
            self.dequeued += 1
            self._cond.notify_all()
            return item

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def abort(self) -> None:
        with self._cond:
            self._aborted = True
            self._items.clear()
            self._cond.notify_all()


class FeedbackSlot:
    """Single-slot back channel carrying acknowledgments to the prover."""

    def __init__(self):
        self._item = None
        self._cond = threading.Condition()
        self._aborted = False

    def put(self, fb) -> None:
        with self._cond:
            while self._item is not None:
                if self._aborted:
                    raise QueueClosed("feedback channel aborted")
                self._cond.wait(_POLL)
            self._item = fb
            self._cond.notify_all()

    def take(self, timeout: float):
        deadline = time.monotonic() + timeout
        with self._cond:
            while self._item is None:
                if self._aborted:
                    raise QueueClosed("feedback channel aborted")
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise TimeoutError("no acknowledgment")
                self._cond.wait(min(_POLL, remaining))
            fb, self._item = self._item, None
            self._cond.notify_all()
            return fb

    def poll(self):
        """Take an acknowledgment if one is waiting, without blocking."""
        with self._cond:
            fb, self._item = self._item, None
            if fb is not None:
                self._cond.notify_all()
            return fb

    def abort(self) -> None:
        with self._cond:
            self._aborted = True
            self._cond.notify_all()


@dataclass
class RunConfig:
    batch_size: int = DEFAULT_BATCH_SIZE
    feedback_frequency: int = DEFAULT_FEEDBACK_FREQUENCY
    queue_capacity: int = DEFAULT_QUEUE_CAPACITY
    timing: bool = True
    stall_timeout: float = DEFAULT_STALL_TIMEOUT
    halt_on_violation: bool = False

    def __post_init__(self):
        for name in ("batch_size", "feedback_frequency", "queue_capacity"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.stall_timeout <= 0:
            raise ValueError("stall_timeout must be positive")


@dataclass
class RunMetrics:
    requests: int = 0
    prover_ns: list[int] = field(default_factory=list)  # per request, wall time in the prover thread
    verifier_busy_ns: int = 0  # verifier time excluding idle waits on the queue
    prover_transfer_ns: int = 0  # seal + enqueue + acknowledgment wait
    verifier_transfer_ns: int = 0  # dequeue-to-unsealed, excluding idle wait
    ids_total: int = 0
    batches_total: int = 0
    max_queue_occupancy: int = 0
    baseline_ns: list[int] = field(default_factory=list)  # paired uninstrumented runs, if requested

    @property
    def prover_us_per_req(self) -> float:
        return sum(self.prover_ns) / len(self.prover_ns) / 1e3 if self.prover_ns else 0.0

    @property
    def verifier_us_per_req(self) -> float:
        return self.verifier_busy_ns / self.requests / 1e3 if self.requests else 0.0

    @property
    def transfer_ns(self) -> int:
        return self.prover_transfer_ns + self.verifier_transfer_ns

    @property
    def ns_per_id_transfer(self) -> float:
        return self.transfer_ns / self.ids_total if self.ids_total else 0.0


@dataclass
class Hooks:
    """Attack surface exposed to the adversary harness.

    - memory_for(request): runtime memory for a request (call slots, jump tables)
    - on_transfer: rewrite an indirect transfer destination (return overwrite)
    - post_record(buffer, state): mutate the prover's cached batch
    - in_queue(batch): list of batches actually placed in shared memory
    - fork_at: clone the verifier after this many ingested batches; the clone
      receives every later batch and sends its own acknowledgments
    - on_feedback(fb): acknowledgment as delivered, or None to suppress it
    """

    memory_for: Optional[Callable[[int], Optional[Memory]]] = None
    on_transfer: Optional[Callable[[int], Optional[TransferHook]]] = None
    post_record: Optional[Callable[[list, ProverState], None]] = None
    in_queue: Optional[Callable[[SealedBatch], list]] = None
    fork_at: Optional[int] = None
    on_feedback: Optional[Callable[[SealedBatch], Optional[SealedBatch]]] = None


@dataclass
class Detection:
    kind: str  # ProtocolError subclass name, or "cfg-violation"
    side: str  # "prover" / "verifier"
    batch_no: Optional[int]
    message: str


@dataclass
class RunResult:
    log: list[AttestationRecord]
    metrics: RunMetrics
    cfg: Optional[ControlFlowGraph] = None
    error: Optional[PipelineAborted] = None
    detections: list[Detection] = field(default_factory=list)
    traps: list[int] = field(default_factory=list)  # request indexes that trapped

    @property
    def violations(self) -> list[AttestationRecord]:
        return [r for r in self.log if not r.valid]

    def log_text(self) -> str:
        return "".join(r.to_line() + "\n" for r in self.log)


class _Abort(Exception):
    pass


class _Shared:
    def __init__(self):
        self.lock = threading.Lock()
        self.abort = threading.Event()
        self.stop = threading.Event()  # halt-on-violation: prover stops between requests
        self.error: Optional[PipelineAborted] = None
        self.detections: list[Detection] = []

    def detect(self, d: Detection) -> None:
        with self.lock:
            self.detections.append(d)

    def fail(self, err: PipelineAborted) -> None:
        with self.lock:
            if self.error is None:
                self.error = err
        self.abort.set()


class Trampoline:
    """Prover-side recorder: gates IDs to annotated windows, seals and ships batches."""

    def __init__(self, state: ProverState, queue: BoundedQueue, feedback: FeedbackSlot,
                 shared: _Shared, config: RunConfig, metrics: RunMetrics, hooks: Hooks):
        self.state = state
        self.queue = queue
        self.feedback = feedback
        self.shared = shared
        self.config = config
        self.metrics = metrics
        self.hooks = hooks
        self.in_window = False
        self.ids = 0
        self.blocked_ns = 0  # wall time spent blocked on the queue or on acknowledgments
        self._clock = self.clock if config.timing else (lambda: 0)

    def clock(self) -> int:
        """Prover time: own CPU time plus time spent blocked.

        Counting CPU time rather than wall time keeps the verifier's share of a
        shared core out of the prover's figures, as if each side had its own.
        """
        return time.thread_time_ns() + self.blocked_ns

    def _blocking(self, fn, *args):
        if not self.config.timing:
            return fn(*args)
        w0, c0 = time.perf_counter_ns(), time.thread_time_ns()
        try:
            return fn(*args)
        finally:
            self.blocked_ns += (time.perf_counter_ns() - w0) - (time.thread_time_ns() - c0)

    def record(self, value: int) -> None:
        if value == BEGIN:
            self.in_window = True
        elif value == END:
            self.in_window = False
        elif not self.in_window:
            return
        self.ids += 1
        batch = self.state.record_id(value)
        if batch is not None:
            self._ship(batch)
        elif self.hooks.post_record is not None:
            self.hooks.post_record(self.state.buffer, self.state)
        if value == END:
            batch = self.state.flush()
            if batch is not None:
                self._ship(batch)

    def close_window(self) -> None:
        """Terminate a request that trapped so its recorded IDs still reach the verifier."""
        if self.in_window:
            self.record(END)

    def _ship(self, batch: SealedBatch) -> None:
        t0 = self._clock()
        batches = [batch] if self.hooks.in_queue is None else self.hooks.in_queue(batch)
        for b in batches:
            self._enqueue(b)
        self.metrics.batches_total += 1
        if self.state.awaiting_feedback:
            self.await_feedback()
        self.metrics.prover_transfer_ns += self._clock() - t0

    def _enqueue(self, batch) -> None:
        while True:
            if self.shared.abort.is_set():
                raise _Abort()
            try:
                self._blocking(self.queue.enqueue, batch, _POLL)
                return
            except TimeoutError:
                continue
            except QueueClosed:
                raise _Abort() from None

    def await_feedback(self) -> None:
        deadline = time.monotonic() + self.config.stall_timeout
        while True:
            if self.shared.abort.is_set():
                raise _Abort()
            try:
                fb = self._blocking(self.feedback.take, min(_POLL, max(0.0, deadline - time.monotonic())))
                break
            except TimeoutError:
                if time.monotonic() >= deadline:
                    raise ProverStall(
                        f"no acknowledgment within {self.config.stall_timeout}s after "
                        f"{self.state.unacked} unacknowledged batches",
                        self.state.batch_no,
                    ) from None
            except QueueClosed:
                raise _Abort() from None
        self.state.apply_feedback(fb)


def _discard(value: int) -> None:
    pass


def _fresh_keys(material: Optional[bytes]) -> bytes:
    return material if material is not None else os.urandom(64)


def run_pipeline(
    iprog: InstrumentedProgram,
    cfg: Optional[ControlFlowGraph],
    config: RunConfig,
    workload: Sequence[Sequence[int]],
    *,
    keys: Optional[bytes] = None,
    hooks: Optional[Hooks] = None,
    baseline: Optional[InstrumentedProgram] = None,
) -> RunResult:
    """Attest `workload` (one input vector per request).

    With `cfg=None` the verifier learns a CFG instead of checking one; the
    learned graph is returned in `RunResult.cfg`. Protocol failures stop the
    run; the result then carries `error` and the log written so far.

    With `baseline` (an uninstrumented copy of the program) and timing on,
    every request is first run uninstrumented in the prover thread and timed
    into `metrics.baseline_ns`, giving a paired overhead measurement.
    """
    hooks = hooks or Hooks()
    material = _fresh_keys(keys)
    p_secret, p_key = provision(material)
    v_secret, v_key = provision(material)
    prover = ProverState(p_secret, p_key, config.batch_size, config.feedback_frequency)
    verifier = VerifierState(v_secret, v_key)

    queue = BoundedQueue(config.queue_capacity)
    feedback = FeedbackSlot()
    shared = _Shared()
    metrics = RunMetrics()
    log: list[AttestationRecord] = []
    learner = Learner() if cfg is None else None
    traps: list[int] = []
    # the verifier's figures are its own thread CPU time, which excludes idle waits
    vclock = time.thread_time_ns if config.timing else (lambda: 0)

    def verifier_main():
        checker = StreamVerifier(cfg) if cfg is not None else None
        instances = [verifier]
        busy = 0
        try:
            while True:
                try:
                    batch = queue.dequeue()
                except QueueClosed:
                    break
                t0 = vclock()
                if hooks.fork_at is not None and len(instances) == 1 and verifier.batch_no == hooks.fork_at:
                    instances.append(verifier.fork())
                ids = None
                for k, inst in enumerate(instances):
                    try:
                        got = inst.ingest(batch)
                    except ProtocolError as exc:
                        shared.detect(Detection(type(exc).__name__, "verifier", exc.batch_no, str(exc)))
                        shared.fail(PipelineAborted(f"verifier: {exc}", exc.batch_no, exc))
                        return
                    if k == 0:
                        ids = got
                metrics.verifier_transfer_ns += vclock() - t0
                if checker is not None:
                    records = checker.feed(ids)
                    for r in records:
                        if not r.valid:
                            shared.detect(Detection("cfg-violation", "verifier", verifier.batch_no - 1, r.to_line()))
                            if config.halt_on_violation:
                                shared.stop.set()
                    log.extend(records)
                else:
                    try:
                        learner.feed(ids)
                    except StreamError as exc:
                        shared.fail(PipelineAborted(f"learning: {exc}", verifier.batch_no - 1, exc))
                        return
                if verifier.batch_no % config.feedback_frequency == 0:
                    _send_acks(instances)
                busy += vclock() - t0
            # end of stream: acknowledge the trailing partial window
            if verifier.batch_no % config.feedback_frequency != 0:
                _send_acks(instances)
            if checker is not None:
                log.extend(checker.finish())
        except QueueClosed:
            pass
        except Exception as exc:  # pragma: no cover - surfaced to the caller
            shared.fail(PipelineAborted(f"verifier crashed: {exc!r}", None, exc))
        finally:
            metrics.verifier_busy_ns += busy

    def _send_acks(instances):
        for inst in instances:
            fb = inst.make_feedback()
            if hooks.on_feedback is not None:
                fb = hooks.on_feedback(fb)
            if fb is not None:
                feedback.put(fb)

    trampoline = Trampoline(prover, queue, feedback, shared, config, metrics, hooks)
    pclock = trampoline._clock

    def prover_main():
        try:
            for i, inputs in enumerate(workload):
                if shared.abort.is_set() or shared.stop.is_set():
                    break
                memory = hooks.memory_for(i) if hooks.memory_for else None
                on_transfer = hooks.on_transfer(i) if hooks.on_transfer else None
                if baseline is not None and config.timing:
                    t0 = pclock()
                    try:
                        execute(baseline, inputs, _discard)
                    except Trap:
                        pass
                    metrics.baseline_ns.append(pclock() - t0)
                t0 = pclock()
                try:
                    execute(iprog, inputs, trampoline.record, memory=memory, on_transfer=on_transfer)
                except Trap:
                    traps.append(i)
                    trampoline.close_window()
                metrics.prover_ns.append(pclock() - t0)
                metrics.requests += 1
            queue.close()
            if prover.unacked and not shared.abort.is_set():
                t0 = pclock()
                trampoline.await_feedback()
                metrics.prover_transfer_ns += pclock() - t0
        except ProtocolError as exc:
            shared.detect(Detection(type(exc).__name__, "prover", exc.batch_no, str(exc)))
            shared.fail(PipelineAborted(f"prover: {exc}", exc.batch_no, exc))
        except _Abort:
            pass
        except Exception as exc:  # pragma: no cover
            shared.fail(PipelineAborted(f"prover crashed: {exc!r}", None, exc))
        finally:
            queue.close()

    def unexpected_acks():
        # The prover expects no acknowledgment once its last window is settled;
        # anything still arriving comes from a duplicated verifier.
        fb = feedback.poll()
        if fb is None or shared.error is not None:
            return
        try:
            prover.apply_feedback(fb)
        except ProtocolError as exc:
            shared.detect(Detection(type(exc).__name__, "prover", exc.batch_no, str(exc)))
            shared.fail(PipelineAborted(f"prover: {exc}", exc.batch_no, exc))
        else:
            exc = CounterDesync("acknowledgment without outstanding batches", prover.batch_no)
            shared.detect(Detection(type(exc).__name__, "prover", exc.batch_no, str(exc)))
            shared.fail(PipelineAborted(f"prover: {exc}", exc.batch_no, exc))

    vt = threading.Thread(target=verifier_main, name="verifier", daemon=True)
    vt.start()
    prover_main()
    while vt.is_alive():
        if shared.error is not None:
            queue.abort()
            feedback.abort()
        vt.join(_POLL)
        unexpected_acks()
    unexpected_acks()

    metrics.ids_total = trampoline.ids
    metrics.max_queue_occupancy = queue.max_occupancy
    learned = None
    if learner is not None and shared.error is None:
        try:
            learned = learner.finish()
        except StreamError as exc:
            shared.error = PipelineAborted(f"learning: {exc}", None, exc)
    return RunResult(log, metrics, learned, shared.error, shared.detections, traps)


def gated_trace(iprog: InstrumentedProgram, inputs: Sequence[int], **kwargs) -> list[int]:
    """Values the trampoline would forward for one request (IDs outside windows dropped)."""
    out: list[int] = []
    window = False

    def sink(v):
        nonlocal window
        if v == BEGIN:
            window = True
        elif v == END:
            window = False
        elif not window:
            return
        out.append(v)

    try:
        execute(iprog, inputs, sink, **kwargs)
    except Trap:
        if window:
            out.append(END)
    return out


def run_reference(
    iprog: InstrumentedProgram, cfg: ControlFlowGraph, workload: Sequence[Sequence[int]]
) -> list[AttestationRecord]:
    """Single-threaded, unsealed reference: the log run_pipeline must reproduce."""
    stream: list[int] = []
    for inputs in workload:
        stream.extend(gated_trace(iprog, inputs))
    return verify(cfg, stream)


def learn_reference(iprog: InstrumentedProgram, workload: Sequence[Sequence[int]]) -> ControlFlowGraph:
    learner = Learner()
    for inputs in workload:
        learner.feed(gated_trace(iprog, inputs))
    return learner.finish()


@dataclass
class TransferResult:
    ids: int
    batches: int
    wall_ns: int
    max_queue_occupancy: int

    @property
    def ns_per_id(self) -> float:
        return self.wall_ns / self.ids if self.ids else 0.0


def transfer_benchmark(
    ids: Sequence[int],
    batch_size: int,
    feedback_frequency: int,
    queue_capacity: int = DEFAULT_QUEUE_CAPACITY,
    *,
    keys: Optional[bytes] = None,
    timeout: float = DEFAULT_STALL_TIMEOUT,
) -> TransferResult:
    """Move `ids` from a prover to a verifier thread and time it end to end.

    Only the channel is exercised: caching, hash chain, sealing, the queue,
    unsealing and acknowledgments. No target runs and no CFG is checked.
    """
    material = _fresh_keys(keys)
    prover = ProverState(*provision(material), batch_size, feedback_frequency)
    verifier = VerifierState(*provision(material))
    queue = BoundedQueue(queue_capacity)
    feedback = FeedbackSlot()
    failure: list[BaseException] = []

    def verifier_main():
        try:
            while True:
                try:
                    batch = queue.dequeue()
                except QueueClosed:
                    break
                verifier.ingest(batch)
                if verifier.batch_no % feedback_frequency == 0:
                    feedback.put(verifier.make_feedback())
            if verifier.batch_no % feedback_frequency != 0:
                feedback.put(verifier.make_feedback())
        except BaseException as exc:  # surfaced below
            failure.append(exc)
            feedback.abort()

    def ship(batch):
        queue.enqueue(batch, timeout=timeout)
        if prover.awaiting_feedback:
            prover.apply_feedback(feedback.take(timeout))

    t0 = time.perf_counter_ns()
    vt = threading.Thread(target=verifier_main, name="verifier", daemon=True)
    vt.start()
    try:
        for v in ids:
            batch = prover.record_id(v)
            if batch is not None:
                ship(batch)
        batch = prover.flush()
        if batch is not None:
            ship(batch)
        queue.close()
        if prover.unacked:
            prover.apply_feedback(feedback.take(timeout))
    except QueueClosed:
        pass
    finally:
        queue.abort() if failure else queue.close()
        vt.join(timeout)
    wall = time.perf_counter_ns() - t0
    if failure:
        raise failure[0]
    return TransferResult(len(ids), prover.batch_no, wall, queue.max_occupancy)
