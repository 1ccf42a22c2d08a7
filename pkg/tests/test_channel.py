import itertools
import threading
import time

import pytest

from cfattest.cfg import Edge
from cfattest.channel import (
    BoundedQueue,
    FeedbackSlot,
    Hooks,
    QueueClosed,
    RunConfig,
    gated_trace,
    learn_reference,
    run_pipeline,
    run_reference,
    transfer_benchmark,
)
from cfattest.ids import BEGIN, END
from cfattest.ir import InstrumentedProgram, Memory, Site, emit_masked_id
from cfattest.protocol import ProverStall
from cfattest.workload import Workload, dispatch_driver, prepare, load_program, signing_driver, tiny_workload

KEYS = bytes(range(64))


def _in_thread(fn, *args):
    t = threading.Thread(target=fn, args=args, daemon=True)
    t.start()
    return t


# -- queue ----------------------------------------------------------------------------------


def test_fifo():
    q = BoundedQueue(4)
    for x in "abc":
        q.enqueue(x)
    assert [q.dequeue() for _ in range(3)] == list("abc")


def test_capacity_one_blocks_the_second_enqueue():
    q = BoundedQueue(1)
    q.enqueue(1)
    done = threading.Event()

    def producer():
        q.enqueue(2)
        done.set()

    _in_thread(producer)
    assert not done.wait(0.2)
    assert q.dequeue() == 1
    assert done.wait(2)
    assert q.dequeue() == 2 and q.max_occupancy == 1


def test_close_drains_then_ends():
    q = BoundedQueue(4)
    q.enqueue(1)
    q.close()
    assert q.dequeue() == 1
    with pytest.raises(QueueClosed):
        q.dequeue()
    with pytest.raises(QueueClosed):
        q.enqueue(2)


def test_abort_wakes_a_blocked_producer():
    q = BoundedQueue(1)
    q.enqueue(1)
    errors = []

    def producer():
        try:
            q.enqueue(2)
        except QueueClosed as exc:
            errors.append(exc)

    t = _in_thread(producer)
    time.sleep(0.1)
    q.abort()
    t.join(2)
    assert errors and not t.is_alive()


def test_timeouts():
    q = BoundedQueue(1)
    with pytest.raises(TimeoutError):
        q.dequeue(timeout=0.05)
    q.enqueue(1)
    with pytest.raises(TimeoutError):
        q.enqueue(2, timeout=0.05)
    with pytest.raises(ValueError):
        BoundedQueue(0)


def test_stress_across_threads():
    n = 100_000
    q = BoundedQueue(64)
    got = []

    def consumer():
        while True:
            try:
                got.append(q.dequeue())
            except QueueClosed:
                return

    t = _in_thread(consumer)
    for i in range(n):
        q.enqueue(i)
    q.close()
    t.join(60)
    assert got == list(range(n))
    assert q.enqueued == q.dequeued == n
    assert q.max_occupancy <= 64


def test_feedback_slot():
    slot = FeedbackSlot()
    assert slot.poll() is None
    with pytest.raises(TimeoutError):
        slot.take(0.05)
    slot.put("ack")
    assert slot.take(1) == "ack"
    slot.abort()
    with pytest.raises(QueueClosed):
        slot.take(1)


# -- pipeline -------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def signing():
    iprog = prepare(load_program("builtin:signing"))
    cfg = learn_reference(iprog, signing_driver())
    return iprog, cfg, Workload.signing(12, seed=3)


@pytest.mark.parametrize("bs, freq, cap", list(itertools.product((1, 7, 10_000), (1, 3), (1, 4))))
def test_no_deadlock_and_same_log_as_the_reference(signing, bs, freq, cap):
    iprog, cfg, wl = signing
    box = {}
    t = _in_thread(lambda: box.update(r=run_pipeline(
        iprog, cfg, RunConfig(bs, freq, cap, timing=False), wl, keys=KEYS)))
    t.join(60)
    assert not t.is_alive(), "pipeline deadlocked"
    result = box["r"]
    assert result.error is None
    assert result.log == run_reference(iprog, cfg, wl)
    assert result.metrics.requests == len(wl)
    assert result.metrics.max_queue_occupancy <= cap
    ids = sum(len(gated_trace(iprog, x)) for x in wl)
    assert result.metrics.ids_total == ids
    if bs == 1:
        assert result.metrics.batches_total == ids


def test_learn_mode_matches_the_reference_learner():
    iprog = prepare(load_program("builtin:signing"))
    driver = signing_driver()
    result = run_pipeline(iprog, None, RunConfig(5, 2, 3, timing=False), driver, keys=KEYS)
    assert result.error is None
    assert result.cfg == learn_reference(iprog, driver)
    assert result.log == []


def test_timing_metrics_are_populated(signing):
    iprog, cfg, wl = signing
    base = prepare(load_program("builtin:signing"))
    plain = InstrumentedProgram.uninstrumented(base.program)
    r = run_pipeline(iprog, cfg, RunConfig(100, 2), wl, keys=KEYS, baseline=plain)
    m = r.metrics
    assert len(m.prover_ns) == len(m.baseline_ns) == len(wl)
    assert all(x > 0 for x in m.prover_ns)
    assert m.verifier_busy_ns > 0 and m.ns_per_id_transfer > 0
    assert m.prover_us_per_req > 0 and m.verifier_us_per_req > 0


def test_hijacked_request_yields_exactly_one_violation():
    iprog = prepare(load_program("builtin:dispatch"))
    cfg = learn_reference(iprog, dispatch_driver())
    prog = iprog.program
    wl = [[4242], [1], [1], [4242]]

    def memory_for(i):
        if i != 2:
            return None
        mem = Memory.of(prog)
        mem.jump_tables[0] = [prog.block_address("n3")] * len(mem.jump_tables[0])
        return mem

    r = run_pipeline(iprog, cfg, RunConfig(4, 2, timing=False), wl, keys=KEYS, hooks=Hooks(memory_for=memory_for))
    assert [rec.request for rec in r.violations] == [2]
    n4_entry = next(p.id for p in iprog.points_at("n4") if p.site == Site.BLOCK_ENTRY)
    ijmp = prog.block("n4").terminator
    forged = emit_masked_id(iprog.masked[ijmp.address - prog.base], ijmp.address, prog.block_address("n3"))
    assert r.violations[0].edge == Edge(n4_entry, forged)
    assert r.detections and r.detections[0].kind == "cfg-violation"


def test_halt_on_violation_stops_the_prover():
    iprog = prepare(load_program("builtin:dispatch"))
    cfg = learn_reference(iprog, [[4242]])
    r = run_pipeline(iprog, cfg, RunConfig(1, 1, timing=False, halt_on_violation=True), [[1]] * 50, keys=KEYS)
    assert r.violations
    assert r.metrics.requests < 50


def test_suppressed_feedback_stalls_the_prover(signing):
    iprog, cfg, wl = signing
    hooks = Hooks(on_feedback=lambda fb: None)
    r = run_pipeline(iprog, cfg, RunConfig(64, 2, stall_timeout=0.3, timing=False), wl, keys=KEYS, hooks=hooks)
    assert isinstance(r.error.cause, ProverStall)


def test_traps_close_the_window():
    iprog = prepare(load_program("builtin:signing"))
    cfg = learn_reference(iprog, signing_driver())
    prog = iprog.program

    def memory_for(i):
        mem = Memory.of(prog)
        mem.call_slots[0] = prog.exit_address + 50
        return mem

    wl = Workload.signing(3, seed=1)
    r = run_pipeline(iprog, cfg, RunConfig(16, 2, timing=False), wl, keys=KEYS, hooks=Hooks(memory_for=memory_for))
    assert r.error is None and r.traps
    assert len(r.log) == 3 and all(not rec.valid for rec in r.log)


def test_tiny_workload_no_backlog_smoke():
    iprog = prepare(load_program("builtin:tiny"))
    wl = tiny_workload(2000, seed=0)
    cfg = learn_reference(iprog, wl[:200])
    r = run_pipeline(iprog, cfg, RunConfig(100, 10, 64, timing=False), wl, keys=KEYS)
    assert r.error is None
    assert r.metrics.max_queue_occupancy < 64


def test_gated_trace_drops_values_outside_windows():
    iprog = prepare(load_program("builtin:dispatch"))
    trace = gated_trace(iprog, [1])
    assert trace[0] == BEGIN and trace[-1] == END
    assert trace.count(BEGIN) == trace.count(END) == 1


def test_run_config_validation():
    with pytest.raises(ValueError):
        RunConfig(batch_size=0)
    with pytest.raises(ValueError):
        RunConfig(stall_timeout=0)


# -- transfer benchmark ---------------------------------------------------------------------


@pytest.mark.parametrize("bs, freq", [(1, 1), (10, 3), (1000, 10)])
def test_transfer_benchmark_moves_every_id(bs, freq):
    ids = [(k + 1) << 24 for k in range(500)]
    r = transfer_benchmark(ids, bs, freq, 8, keys=KEYS)
    assert r.ids == 500 and r.batches == -(-500 // bs)
    assert r.max_queue_occupancy <= 8 and r.ns_per_id > 0
