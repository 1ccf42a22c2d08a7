import pytest
from hypothesis import given, strategies as st

from cfattest.cfg import (
    AttestationRecord,
    CFGError,
    CFGFormatError,
    ControlFlowGraph,
    Edge,
    Learner,
    StreamError,
    deserialize,
    learn,
    read_log,
    serialize,
    verify,
)
from cfattest.channel import gated_trace, learn_reference, run_reference
from cfattest.ids import BEGIN as B, END as E
from cfattest.ir import Site, instrument, layout
from cfattest.workload import dispatch_driver, load_program

from corpus import case
from oracle import OracleModel

ids = st.integers(1, 40)
traces = st.lists(st.lists(ids, max_size=8).map(lambda r: [B, *r, E]), max_size=6)


def _dispatch():
    iprog = instrument(layout(load_program("builtin:dispatch")))
    return iprog, learn_reference(iprog, dispatch_driver())


def _site(iprog, block_id, site):
    return next(p.id for p in iprog.points_at(block_id) if p.site == site)


# -- learn ----------------------------------------------------------------------------------


def test_learn_single_trace():
    g = learn([[B, 1, 2, 3, E]])
    assert g.nodes == {1, 2, 3}
    assert g.edges == {Edge(1, 2), Edge(2, 3)}
    assert g.starts == {1} and g.ends == {3}
    assert not g.allows_empty


def test_learn_is_a_union():
    g = learn([[B, 1, 2, 3, E], [B, 1, 2, 4, E]])
    assert g.edges == {Edge(1, 2), Edge(2, 3), Edge(2, 4)}
    assert g.ends == {3, 4}


def test_self_edges_are_kept():
    assert Edge(5, 5) in learn([[B, 5, 5, 5, E]]).edges


@pytest.mark.parametrize(
    "trace, message",
    [([E], "END without BEGIN"), ([B, 1], "open request"), ([B, B, E], "nested"), ([1, B, E], "outside")],
)
def test_learn_rejects_bad_delimiting(trace, message):
    with pytest.raises(StreamError, match=message):
        learn([trace])


def test_incremental_learner_matches_batch_learning():
    stream = [B, 1, 2, E, B, 1, 3, 2, E, B, E]
    inc = Learner()
    for k in range(0, len(stream), 3):
        inc.feed(stream[k:k + 3])
    assert inc.finish() == learn([stream])
    assert inc.requests == 3


def test_dispatch_branch_edges():
    iprog, g = _dispatch()
    n2_exit = _site(iprog, "n2", Site.BLOCK_EXIT)
    n3, n4 = _site(iprog, "n3", Site.BLOCK_ENTRY), _site(iprog, "n4", Site.BLOCK_ENTRY)
    assert Edge(n2_exit, n3) in g.edges and Edge(n2_exit, n4) in g.edges
    n4_tail = [p.id for p in iprog.points_at("n4")]
    assert not any(Edge(src, n3) in g.edges for src in n4_tail)
    # only the two branch outcomes leave N2
    assert {e.dst for e in g.edges if e.src == n2_exit} == {n3, n4}


def test_graph_invariants_are_enforced():
    with pytest.raises(CFGError):
        ControlFlowGraph(frozenset({1}), frozenset({Edge(1, 2)}))
    with pytest.raises(CFGError):
        ControlFlowGraph(frozenset({1}), starts=frozenset({2}))
    with pytest.raises(CFGError):
        ControlFlowGraph(frozenset({B}))


@given(traces, traces)
def test_learning_is_monotone(t1, t2):
    small, big = learn(t1), learn(t1 + t2)
    assert small <= big
    assert big == small.union(learn(t2))


# -- verify ---------------------------------------------------------------------------------


def test_replayed_trace_is_valid():
    stream = [B, 1, 2, 3, E, B, 1, 2, 4, E]
    assert all(r.valid for r in verify(learn([stream]), stream))


def test_first_mismatch_is_reported_and_scanning_resumes():
    g = learn([[B, 1, 2, 3, E]])
    recs = verify(g, [B, 1, 3, 9, 3, E, B, 1, 2, 3, E])
    assert recs[0] == AttestationRecord(0, False, Edge(1, 3), 1)
    assert recs[1] == AttestationRecord(1, True)


@pytest.mark.parametrize(
    "stream, edge, pos",
    [
        ([B, 2, 3, E], Edge(B, 2), 0),  # bad start
        ([B, 1, 2, E], Edge(2, E), 2),  # bad end
        ([B, E], Edge(B, E), 0),  # empty request never seen offline
        ([B, 1, 7, E], Edge(1, 7), 1),  # unknown node
        ([B, 1, 2], Edge(2, B), 2),  # truncated stream
    ],
)
def test_violation_edges(stream, edge, pos):
    (rec,) = verify(learn([[B, 1, 2, 3, E]]), stream)
    assert not rec.valid and rec.edge == edge and rec.position == pos


def test_empty_request_valid_only_if_learned():
    g = learn([[B, E], [B, 1, E]])
    assert [r.valid for r in verify(g, [B, E, B, 1, E])] == [True, True]


def test_values_outside_requests_are_a_protocol_violation():
    g = learn([[B, 1, E]])
    recs = verify(g, [5, 6, B, 1, E, 7])
    assert [r.request for r in recs] == [None, 0, None]
    assert recs[0].edge == Edge(E, 5) and not recs[0].valid
    assert recs[1].valid


def test_dispatch_hijack_edge():
    iprog, g = _dispatch()
    n3 = _site(iprog, "n3", Site.BLOCK_ENTRY)
    # splice N3 right after N4 is entered in a legal request
    trace = gated_trace(iprog, [1])
    k = trace.index(_site(iprog, "n4", Site.BLOCK_ENTRY))
    forged = trace[:k + 1] + [n3] + trace[k + 1:]
    (rec,) = verify(g, forged)
    assert rec.edge == Edge(trace[k], n3) and rec.position == k


def test_mixed_flow_blindness():
    A, B_, C, D, E_ = 1, 2, 3, 4, 5
    g = learn([[B, A, B_, C, E], [B, D, B_, E_, E]])
    assert g.edges == {Edge(A, B_), Edge(B_, C), Edge(D, B_), Edge(B_, E_)}
    g = ControlFlowGraph(g.nodes, g.edges, g.starts | {A}, g.ends | {E_})
    (rec,) = verify(g, [B, A, B_, E_, E])
    assert rec.valid


@given(traces, st.lists(ids, min_size=1, max_size=10))
def test_detection_reports_the_first_unseen_pair(learned, probe):
    g = learn(learned)
    (rec,) = verify(g, [B, *probe, E])
    expected = None
    if probe[0] not in g.starts:
        expected = (Edge(B, probe[0]), 0)
    else:
        for i in range(1, len(probe)):
            if (probe[i - 1], probe[i]) not in g.edges:
                expected = (Edge(probe[i - 1], probe[i]), i)
                break
        else:
            if probe[-1] not in g.ends:
                expected = (Edge(probe[-1], E), len(probe))
    if expected is None:
        assert rec.valid
    else:
        assert (rec.edge, rec.position) == expected


@pytest.mark.parametrize("seed", range(0, 200, 10))
def test_soundness_on_driver_inputs(seed):
    c = case(seed)
    g = learn_reference(c.iprog, c.inputs)
    assert all(r.valid for r in run_reference(c.iprog, g, c.inputs))


@pytest.mark.parametrize("seed", range(0, 200, 7))
def test_verdicts_match_the_structural_oracle(seed):
    c = case(seed)
    train = c.inputs[:5]
    g = learn_reference(c.iprog, train)
    probe = c.inputs + c.probes
    got = [(r.valid, r.position) for r in run_reference(c.iprog, g, probe)]
    assert got == OracleModel().learn(c.program, train).verdicts(c.program, probe)


# -- file format ----------------------------------------------------------------------------


def test_empty_graph_round_trip():
    data = serialize(ControlFlowGraph())
    assert len(data) == 12 + 32
    assert deserialize(data) == ControlFlowGraph()


def test_dispatch_graph_round_trip_is_deterministic():
    _, g = _dispatch()
    data = serialize(g)
    assert deserialize(data) == g
    assert serialize(deserialize(data)) == data


def test_header_and_length_errors():
    data = serialize(learn([[B, 1, 2, E]]))
    with pytest.raises(CFGFormatError, match="truncated"):
        deserialize(data[:10])
    with pytest.raises(CFGFormatError, match="magic"):
        deserialize(b"XXXX" + data[4:])
    with pytest.raises(CFGFormatError, match="version"):
        deserialize(data[:4] + b"\x02\x00" + data[6:])
    with pytest.raises(CFGFormatError):
        deserialize(data[:-8])


def test_every_single_bit_flip_is_rejected():
    g = learn([[B, 1, 2, 3, E], [B, 1, 3, E], [B, E]])
    data = serialize(g)
    for bit in range(len(data) * 8):
        corrupt = bytearray(data)
        corrupt[bit // 8] ^= 1 << (bit % 8)
        with pytest.raises(CFGFormatError):
            deserialize(bytes(corrupt))


@given(traces)
def test_round_trip_property(t):
    g = learn(t)
    assert deserialize(serialize(g)) == g


# -- log lines ------------------------------------------------------------------------------


def test_log_line_format_and_round_trip():
    rec = AttestationRecord(3, False, Edge(16777216, 2**64 - 2), 4)
    line = rec.to_line()
    assert line.startswith("request=3 verdict=violation edge=")
    assert line.endswith(" pos=4")
    assert AttestationRecord.from_line(line) == rec
    ok = AttestationRecord(0, True)
    assert ok.to_line() == "request=0 verdict=valid edge=- pos=-"
    assert AttestationRecord.from_line(ok.to_line()) == ok


def test_record_invariant():
    with pytest.raises(ValueError):
        AttestationRecord(0, True, Edge(1, 2))
    with pytest.raises(ValueError):
        AttestationRecord(0, False)


def test_read_log_reports_corrupt_lines():
    good = AttestationRecord(0, True).to_line()
    records, bad = read_log([good + "\n", "\n", "garbage\n", good])
    assert len(records) == 2 and bad == [(3, "garbage")]
