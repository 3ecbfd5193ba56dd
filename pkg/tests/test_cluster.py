import struct
import threading

import numpy as np
import pytest

from distqn.cluster import (
    HEADER_SIZE,
    CodecError,
    CommLedger,
    InMemoryTransport,
    Message,
    MsgType,
    TcpMasterTransport,
    WorkerFailure,
    average,
    decode_message,
    encode_message,
    ledger_summary,
    partition_data,
    serve_tcp_worker,
)
from distqn.cluster.codec import MASTER_ID, frame_length
from distqn.cluster.transport import CMD_START, control, control_command, thread_cap
from distqn.models import gen_example1

from codec_cases import malformed_frames, random_message


class TestCodec:
    def test_header_size(self):
        assert HEADER_SIZE == 18

    def test_empty_payload(self):
        m = Message(MsgType.CONTROL, 3, 7, ())
        frame = encode_message(m)
        assert len(frame) == 18
        assert decode_message(frame) == m

    def test_broadcast_layout(self):
        m = Message(MsgType.BROADCAST_THETA, 1, MASTER_ID, (np.array([1.0, -2.5, 0.0]),))
        frame = encode_message(m)
        assert len(frame) == 18 + 24
        assert frame[18:26] == struct.pack("<d", 1.0)
        assert frame[:4] == b"DQN1"
        assert decode_message(frame) == m

    def test_bad_magic(self):
        frame = encode_message(Message(MsgType.LOCAL_GRAD, 0, 0, (np.ones(2),)))
        with pytest.raises(CodecError):
            decode_message(b"DQNX" + frame[4:])

    def test_round_trip_fuzz(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            m = random_message(rng)
            frame = encode_message(m)
            assert len(frame) == frame_length(len(m.payload), m.p)
            assert decode_message(frame) == m

    def test_malformed_rejected(self):
        for frame in malformed_frames(np.random.default_rng(1), n_base=20):
            with pytest.raises(CodecError):
                decode_message(frame)

    def test_message_validation(self):
        with pytest.raises(CodecError):
            Message(MsgType.V_VECTOR, 0, 0, (np.ones(2),))
        with pytest.raises(CodecError):
            Message(MsgType.V_VECTOR, 0, 0, (np.ones(2), np.ones(3)))
        with pytest.raises(CodecError):
            Message(MsgType.LOCAL_GRAD, -1, 0, (np.ones(2),))

    def test_bitwise_equality_distinguishes_nan_payloads(self):
        a = Message(MsgType.LOCAL_GRAD, 0, 0, (np.array([np.nan]),))
        assert a == decode_message(encode_message(a))
        assert a != Message(MsgType.LOCAL_GRAD, 0, 0, (np.array([-np.nan]),))

    def test_control_command(self):
        assert control_command(control(CMD_START, 2)) == CMD_START
        assert control_command(Message(MsgType.LOCAL_GRAD, 0, 0, (np.ones(1),))) is None


class TestPartition:
    def test_single_shard_is_permutation(self):
        ds = gen_example1(30, 2, seed=0)
        (sh,) = partition_data(ds, 1, seed=4)
        order = np.lexsort(ds.X.T)
        assert np.array_equal(np.sort(sh.Y), np.sort(ds.Y))
        assert np.array_equal(sh.X[np.lexsort(sh.X.T)], ds.X[order])

    def test_sizes(self):
        shards = partition_data(gen_example1(1000, 2, seed=0), 50, seed=1)
        assert [sh.n for sh in shards] == [20] * 50
        assert [sh.worker_id for sh in shards] == list(range(50))

    def test_rows_preserved(self):
        ds = gen_example1(120, 3, seed=1)
        shards = partition_data(ds, 6, seed=2)
        X = np.vstack([sh.X for sh in shards])
        Y = np.concatenate([sh.Y for sh in shards])
        rows = sorted(map(tuple, np.column_stack([ds.X, ds.Y])))
        assert sorted(map(tuple, np.column_stack([X, Y]))) == rows

    def test_divisibility(self):
        with pytest.raises(ValueError, match="divide"):
            partition_data(gen_example1(7, 2, seed=0), 2)

    def test_average_sums_in_order(self):
        vs = [np.array([1e16]), np.array([1.0]), np.array([-1e16])]
        assert average(vs)[0] == ((1e16 + 1.0) - 1e16) / 3


class TestLedger:
    def test_empty(self):
        led = CommLedger()
        assert led.rounds == 0
        assert ledger_summary(led) == {"rounds": 0, "bytes_per_worker_per_round": [], "max_payload_floats": 0}

    def test_round_grouping(self):
        led = CommLedger()
        led.begin_round("a")
        for m in range(3):
            led.record("down", MsgType.BROADCAST_THETA, m, 4)
        led.begin_round("empty")
        led.begin_round("b")
        for m in range(3):
            led.record("up", MsgType.V_VECTOR, m, 8)
        assert led.rounds == 2
        s = ledger_summary(led)
        assert s["bytes_per_worker_per_round"] == [32, 64]
        assert s["max_payload_floats"] == 8
        assert led.totals_per_worker() == {0: 96, 1: 96, 2: 96}


class Echo:
    def __init__(self, worker_id, fail=False):
        self.worker_id = worker_id
        self.fail = fail

    def handle(self, msg):
        if self.fail:
            raise ArithmeticError("boom")
        v = msg.payload[0] * (self.worker_id + 1)
        return Message(MsgType.LOCAL_GRAD, msg.stage, self.worker_id, (v,))


class TestInMemoryTransport:
    def test_gather_in_worker_order(self):
        with InMemoryTransport([Echo(m) for m in range(4)], max_threads=2) as tr:
            tr.begin_round("x")
            tr.broadcast(Message(MsgType.BROADCAST_THETA, 1, MASTER_ID, (np.ones(3),)))
            replies = tr.gather()
        assert [r.worker_id for r in replies] == [0, 1, 2, 3]
        assert [r.payload[0][0] for r in replies] == [1.0, 2.0, 3.0, 4.0]
        assert tr.ledger.rounds == 1

    def test_worker_failure_surfaces(self):
        with InMemoryTransport([Echo(0), Echo(1, fail=True)]) as tr:
            tr.broadcast(Message(MsgType.BROADCAST_THETA, 1, MASTER_ID, (np.ones(1),)))
            with pytest.raises(WorkerFailure) as err:
                tr.gather()
        assert err.value.worker_id == 1

    def test_ids_must_be_ordered(self):
        with pytest.raises(ValueError):
            InMemoryTransport([Echo(1), Echo(0)])

    def test_thread_cap_env(self, monkeypatch):
        monkeypatch.setenv("DQN_THREADS", "3")
        assert thread_cap() == 3
        monkeypatch.delenv("DQN_THREADS")
        assert thread_cap() is None


def test_tcp_transport_round_trip():
    master = TcpMasterTransport(3, "127.0.0.1", 0, timeout=20)
    host, port = master.address
    handled = {}

    def work(m):
        handled[m] = serve_tcp_worker(Echo(m), host, port)

    threads = [threading.Thread(target=work, args=(m,)) for m in range(3)]
    for t in threads:
        t.start()
    with master:
        master.accept_workers()
        for stage in (1, 2):
            master.begin_round()
            master.broadcast(Message(MsgType.BROADCAST_THETA, stage, MASTER_ID, (np.arange(4.0),)))
            replies = master.gather()
            assert [r.payload[0][1] for r in replies] == [1.0, 2.0, 3.0]
    for t in threads:
        t.join(timeout=10)
    assert handled == {0: 2, 1: 2, 2: 2}
    assert master.ledger.rounds == 2
