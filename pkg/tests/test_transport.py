import struct
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedveca.fed_core import ClientReport, RoundPlan
from fedveca.numerics import RngStream
from fedveca.transport import (
    ClientReportMsg, FrameDecoder, FrameError, Hello, LengthMismatchError, PrevGlobalGrad, RoundAbortError,
    RoundStart, Stop, TruncatedFrameError, UnknownTagError, broadcast_and_collect, decode_frame, decode_stream,
    encode_frame, inproc_transport, open_transport,
)


def random_message(rng: RngStream):
    kind = int(rng.integers(5, 1)[0])
    dim = int(rng.integers(6, 1)[0])
    vec = lambda: rng.normal(dim) * 10 ** float(rng.uniform(1)[0] * 6 - 3)
    if kind == 0:
        return RoundStart(int(rng.integers(1000, 1)[0]), int(rng.integers(50, 1)[0]) + 1, vec())
    if kind == 1:
        return PrevGlobalGrad(int(rng.integers(1000, 1)[0]), vec())
    if kind == 2:
        has = bool(rng.integers(2, 1)[0])
        beta, delta = (float(rng.uniform(1)[0]), float(rng.uniform(1)[0]) * 30) if has else (None, None)
        return ClientReportMsg(ClientReport(
            int(rng.integers(10, 1)[0]), int(rng.integers(50, 1)[0]) + 1, vec(), vec(), vec(),
            float(rng.uniform(1)[0]), beta, delta,
        ))
    if kind == 3:
        return Stop()
    return Hello(int(rng.integers(100, 1)[0]))


def test_stop_frame():
    assert encode_frame(Stop()) == b"\x00\x00\x00\x01\x04"
    assert decode_frame(b"\x00\x00\x00\x01\x04") == Stop()


def test_round_start_fixture():
    # length (1 tag + 4 k + 4 tau + 4 dim + 2*8) = 29, tag 0x01, k=3, tau=7, dim=2, w=[1.0, -0.5]
    fixture = bytes.fromhex(
        "0000001d" "01" "00000003" "00000007" "00000002" "3ff0000000000000" "bfe0000000000000"
    )
    frame = encode_frame(RoundStart(3, 7, np.array([1.0, -0.5])))
    assert len(frame) == 4 + 1 + 12 + 16 == 33
    assert frame == fixture
    assert decode_frame(fixture) == RoundStart(3, 7, np.array([1.0, -0.5]))


def test_client_report_fixture_layout():
    r = ClientReport(1, 2, np.array([0.25]), np.array([0.5]), np.array([2.0]), 1.5, 3.0, 4.0)
    frame = encode_frame(ClientReportMsg(r))
    body = struct.pack(">iidi", 1, 2, 1.5, 1) + struct.pack(">dd", 3.0, 4.0)
    for v in (0.25, 0.5, 2.0):
        body += struct.pack(">id", 1, v)
    assert frame == struct.pack(">IB", 1 + len(body), 3) + body


def test_round_trip_1000_random_messages():
    rng = RngStream(2024)
    for _ in range(1000):
        m = random_message(rng)
        assert decode_frame(encode_frame(m)) == m


def test_concatenated_frames_decode_in_order():
    rng = RngStream(5)
    msgs = [random_message(rng) for _ in range(50)]
    blob = b"".join(encode_frame(m) for m in msgs)
    assert decode_stream(blob) == msgs
    dec, out = FrameDecoder(), []
    for i in range(0, len(blob), 7):  # arbitrary chunking
        out += dec.feed(blob[i:i + 7])
    assert out == msgs and dec.pending == 0


def test_error_variants():
    frame = encode_frame(RoundStart(1, 2, np.ones(3)))
    with pytest.raises(TruncatedFrameError):
        decode_frame(frame[:-1])
    with pytest.raises(TruncatedFrameError):
        decode_frame(frame[:3])
    with pytest.raises(UnknownTagError):
        decode_frame(b"\x00\x00\x00\x01\xff")
    with pytest.raises(LengthMismatchError):
        decode_frame(frame + b"\x00")
    # declared length consistent but payload shorter than the vector it announces
    bad = struct.pack(">IBiii", 13, 1, 0, 2, 5)
    with pytest.raises(LengthMismatchError):
        decode_frame(bad)
    with pytest.raises(TruncatedFrameError):
        decode_stream(frame + frame[:6])


@settings(max_examples=500)
@given(st.binary(max_size=80))
def test_fuzz_never_crashes(data):
    for candidate in (data, struct.pack(">I", len(data)) + data):
        try:
            decode_frame(candidate)
        except FrameError:
            pass


def echo_handler(cid):
    def handle(start, prev):
        g = np.full(len(start.w), float(cid))
        extra = None if prev is None else float(prev.grad[0])
        return ClientReport(cid, start.tau, g, g * start.tau, start.w.copy(), float(start.k), extra, extra)
    return handle


def test_inproc_five_clients_sorted():
    with inproc_transport([echo_handler(i) for i in range(5)]) as tr:
        reps = tr.round(RoundPlan(0, (1, 2, 3, 4, 5), np.zeros(2)))
        assert [r.client_id for r in reps] == list(range(5))
        assert [r.tau_used for r in reps] == [1, 2, 3, 4, 5]
        reps = tr.round(RoundPlan(1, (2,) * 5, np.ones(2), np.array([7.0, 0.0])))
        assert all(r.beta == 7.0 and r.loss_at_start == 1.0 for r in reps)


class SilentEndpoint:
    def __init__(self, cid):
        self.client_id = cid

    def send(self, msg):
        pass

    def recv(self, timeout=None):
        raise TimeoutError(f"no message within {timeout} s")


def test_timeout_names_client():
    tr = inproc_transport([echo_handler(0)])
    try:
        with pytest.raises(RoundAbortError) as exc:
            broadcast_and_collect(RoundPlan(0, (1, 1), np.zeros(1)), tr.endpoints + [SilentEndpoint(1)], timeout=0.1)
        assert exc.value.client_id == 1 and "1" in str(exc.value)
    finally:
        tr.close()


def test_inproc_timeout_with_stalled_client():
    release = threading.Event()

    def stall(start, prev):
        release.wait(5)
        return echo_handler(1)(start, prev)

    tr = inproc_transport([echo_handler(0), stall], timeout=0.1)
    try:
        with pytest.raises(RoundAbortError) as exc:
            tr.round(RoundPlan(0, (1, 1), np.zeros(1)))
        assert exc.value.client_id == 1
    finally:
        release.set()
        tr.close()


def test_client_exception_aborts_round():
    def boom(start, prev):
        raise FloatingPointError("diverged")

    tr = inproc_transport([echo_handler(0), boom])
    try:
        with pytest.raises(RoundAbortError) as exc:
            tr.round(RoundPlan(0, (1, 1), np.zeros(1)))
        assert exc.value.client_id == 1 and "diverged" in str(exc.value)
    finally:
        tr.close()


def test_socket_loopback_matches_inproc():
    plans = [RoundPlan(0, (3, 4), np.array([0.1, 0.2])), RoundPlan(1, (2, 5), np.array([0.3, -0.4]), np.array([1.5, 2.5]))]
    handlers = [echo_handler(0), echo_handler(1)]
    with open_transport("inproc", handlers) as a, open_transport("socket:0", handlers, timeout=10) as b:
        for plan in plans:
            ra, rb = a.round(plan), b.round(plan)
            assert [encode_frame(ClientReportMsg(r)) for r in ra] == [encode_frame(ClientReportMsg(r)) for r in rb]


def test_unknown_transport():
    with pytest.raises(ValueError):
        open_transport("carrier-pigeon", [])
