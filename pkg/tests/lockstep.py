"""Single-threaded prover/verifier lockstep driver with optional fault injection."""

import random
from dataclasses import dataclass
from typing import Optional

from cfattest.protocol import ProtocolError, SealedBatch, provision, prover_init, verifier_init

FAULTS = ("alter", "drop", "duplicate", "reorder")


@dataclass
class Outcome:
    checks: int  # mirror equality checks performed
    broken: Optional[str]  # exception class that stopped the run, if any
    accepted_after_fault: int  # batches the verifier accepted after the faulty one


def _alter(batch: SealedBatch, rng: random.Random) -> SealedBatch:
    raw = bytearray(batch.sealed)
    bit = rng.randrange(len(raw) * 8)
    raw[bit // 8] ^= 1 << (bit % 8)
    n = len(batch.ciphertext)
    return SealedBatch(batch.batch_no, bytes(raw[:n]), bytes(raw[n:]))


def run(ids, batch_size, freq, material, fault=None, at=0, rng=None) -> Outcome:
    """Drive both states in lockstep. `fault` is applied to prover batch number `at`."""
    rng = rng or random.Random(0)
    prover = prover_init(*provision(material), batch_size, freq)
    verifier = verifier_init(*provision(material))
    checks = 0
    held = None
    accepted_after = 0

    def deliver(batch):
        nonlocal checks, accepted_after
        verifier.ingest(batch)
        if fault is not None and batch.batch_no > at:
            accepted_after += 1
        if fault is None:
            assert verifier.chain.digest() == prover.chain.digest()
            assert verifier.batch_no == prover.batch_no
            checks += 1

    def ship(batch):
        nonlocal held
        if fault is None or batch.batch_no != at:
            deliver(batch)
            if held is not None:
                deliver(held)
                held = None
        elif fault == "alter":
            deliver(_alter(batch, rng))
        elif fault == "drop":
            pass
        elif fault == "duplicate":
            deliver(batch)
            deliver(batch)
        elif fault == "reorder":
            held = batch
        if prover.awaiting_feedback:
            ack()

    def ack():
        nonlocal checks
        prover.apply_feedback(verifier.make_feedback())
        assert prover.batch_no == verifier.batch_no
        checks += 1

    try:
        for v in ids:
            batch = prover.record_id(v)
            if batch is not None:
                ship(batch)
        batch = prover.flush()
        if batch is not None:
            ship(batch)
        if held is not None:
            deliver(held)
        if prover.unacked:
            ack()
    except ProtocolError as exc:
        return Outcome(checks, type(exc).__name__, accepted_after)
    return Outcome(checks, None, accepted_after)


def batch_count(n_ids: int, batch_size: int) -> int:
    return -(-n_ids // batch_size)


def trial(rng: random.Random):
    """One random scenario: (ids, batch size, frequency, key material)."""
    bs = rng.randint(1, 64)
    freq = rng.randint(1, 8)
    ids = [rng.getrandbits(64) for _ in range(rng.randint(1, 4 * bs + 20))]
    return ids, bs, freq, rng.randbytes(64)


def random_fault(rng: random.Random, n_batches: int):
    kinds = [k for k in FAULTS if k != "reorder" or n_batches > 1]
    kind = rng.choice(kinds)
    at = rng.randrange(n_batches - 1 if kind == "reorder" else n_batches)
    return kind, at
