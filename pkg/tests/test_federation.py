import hashlib
import socket
import struct
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cdimf import federation as fed
from cdimf.consensus import ConsensusConfig, train
from cdimf.dataio import build_dataset
from cdimf.solver import SolverConfig, train_als
from cdimf.synthetic import make_pair


def test_share_frame_layout():
    """Header 16 bytes + SHARE fields 8+4+8+8+32 + one double."""
    msg = fed.ShareMessage(1, 0, np.array([[2.0]]), bytes(32))
    data = fed.encode_share(msg)
    assert len(data) == 16 + 60 + 8
    assert data[:4] == b"CDFW"
    magic, version, kind, _, body_len = struct.unpack_from("<4sHBBQ", data)
    assert (version, kind, body_len) == (1, fed.SHARE, 68)
    assert data[-8:] == struct.pack("<d", 2.0)


@settings(max_examples=50, deadline=None)
@given(rnd=st.integers(0, 2**64 - 1), domain=st.integers(0, 2**32 - 1),
       payload=arrays(np.float64, st.tuples(st.integers(0, 5), st.integers(1, 4)),
                      elements=st.floats(allow_nan=False, width=64)),
       digest=st.binary(min_size=32, max_size=32))
def test_share_round_trip(rnd, domain, payload, digest):
    back = fed.decode_share(fed.encode_share(fed.ShareMessage(rnd, domain, payload, digest)))
    assert (back.round, back.domain_id, back.alignment_digest) == (rnd, domain, digest)
    assert back.payload.shape == payload.shape
    assert back.payload.tobytes() == payload.astype("<f8").tobytes()


@pytest.mark.parametrize("cut", [0, 3, 15, 16, 40, 83])
def test_truncated_frame(cut):
    data = fed.encode_share(fed.ShareMessage(1, 0, np.array([[2.0]]), bytes(32)))
    with pytest.raises(fed.ProtocolError):
        fed.decode_share(data[:cut])


def test_bad_magic():
    data = bytearray(fed.encode_share(fed.ShareMessage(1, 0, np.zeros((1, 1)), bytes(32))))
    data[:4] = b"XXXX"
    with pytest.raises(fed.ProtocolError):
        fed.decode_share(bytes(data))


def test_digest_is_order_free():
    assert fed.alignment_digest(["b", "a"]) == fed.alignment_digest(["a", "b"])
    assert fed.alignment_digest(["a", "b"]) == hashlib.sha256(b"a\nb").digest()


def test_parse_address(monkeypatch):
    assert fed.parse_address("10.0.0.1:9000") == ("10.0.0.1", 9000)
    monkeypatch.setenv(fed.ENV_ADDRESS, "localhost:1234")
    assert fed.parse_address(None) == ("localhost", 1234)
    monkeypatch.delenv(fed.ENV_ADDRESS)
    with pytest.raises(ValueError):
        fed.parse_address(None)


class RawClient:
    def __init__(self, address):
        self.conn = fed.Connection(socket.create_connection(address, timeout=10))

    def hello(self, domain_id, n, d, digest):
        self.conn.send(fed.encode_hello(fed.Hello(domain_id, n, d, digest)))


def serve_in_thread(agg):
    box = {}

    def run():
        try:
            box["result"] = agg.serve()
        except Exception as e:  # inspected by the test
            box["error"] = e

    t = threading.Thread(target=run, daemon=True)
    t.start()
    return t, box


def test_aggregator_mean_of_two():
    agg = fed.Aggregator(("127.0.0.1", 0), ConsensusConfig(rho=1.0, outer_rounds=1, n_domains=2),
                         timeout=10)
    t, box = serve_in_thread(agg)
    digest = fed.alignment_digest(["x"])
    clients = [RawClient(agg.address) for _ in range(2)]
    for i, c in enumerate(clients):
        c.hello(i, 1, 1, digest)
    for c in clients:
        c.conn.expect(fed.HELLO)
    for i, c in enumerate(clients):
        c.conn.send(fed.encode_share(fed.ShareMessage(1, i, np.array([[1.0 + 2 * i]]), digest)))
    zs = [fed._global_body(c.conn.expect(fed.GLOBAL)).payload for c in clients]
    for c in clients:
        c.conn.send(fed.frame(fed.BYE, struct.pack("<Q", 1)))
    t.join(10)
    assert zs[0].tolist() == [[2.0]] and zs[1].tolist() == [[2.0]]
    assert box["result"].rounds == 1


def test_round_lockstep_violation():
    agg = fed.Aggregator(("127.0.0.1", 0), ConsensusConfig(rho=1.0, outer_rounds=10, n_domains=1),
                         timeout=10)
    t, box = serve_in_thread(agg)
    digest = fed.alignment_digest(["x"])
    c = RawClient(agg.address)
    c.hello(0, 1, 1, digest)
    c.conn.expect(fed.HELLO)
    for rnd in (1, 2, 3):
        c.conn.send(fed.encode_share(fed.ShareMessage(rnd, 0, np.ones((1, 1)), digest)))
        c.conn.expect(fed.GLOBAL)
    c.conn.send(fed.encode_share(fed.ShareMessage(5, 0, np.ones((1, 1)), digest)))
    with pytest.raises(fed.FederationError, match="round 5"):
        c.conn.recv()
    t.join(10)
    assert isinstance(box["error"], fed.ProtocolError)


@pytest.mark.parametrize("case", ["digest", "duplicate"])
def test_registration_rejected(case):
    agg = fed.Aggregator(("127.0.0.1", 0), ConsensusConfig(rho=1.0, n_domains=2), timeout=10)
    t, box = serve_in_thread(agg)
    a, b = RawClient(agg.address), RawClient(agg.address)
    a.hello(0, 1, 1, fed.alignment_digest(["x"]))
    if case == "digest":
        b.hello(1, 1, 1, fed.alignment_digest(["y"]))
    else:
        b.hello(0, 1, 1, fed.alignment_digest(["x"]))
    t.join(10)
    assert isinstance(box["error"], fed.ProtocolError)
    with pytest.raises(fed.FederationError):
        b.conn.recv()


@pytest.fixture(scope="module")
def domains():
    pair = make_pair(n_users=50, n_items=30, rank=3, n_private=4, seed=8)
    shared = set.intersection(*(lg.user_set() for lg in pair.logs))
    return [build_dataset(lg, shared) for lg in pair.logs]


def run_session(domains, scfg, ccfg, seed, capture=None):
    agg = fed.Aggregator(("127.0.0.1", 0), ccfg, timeout=30, capture=capture)
    t, box = serve_in_thread(agg)
    models = [None] * len(domains)
    errors = []

    def work(i):
        try:
            models[i] = fed.run_worker(agg.address, domains[i], scfg, ccfg, seed, domain_id=i,
                                       timeout=30)
        except Exception as e:
            errors.append(e)

    threads = [threading.Thread(target=work, args=(i,)) for i in range(len(domains))]
    for th in threads:
        th.start()
    for th in threads:
        th.join(60)
    t.join(30)
    assert not errors and "error" not in box, (errors, box)
    return models, box["result"]


def test_session_matches_in_process(domains):
    scfg = SolverConfig(d=3)
    ccfg = ConsensusConfig(rho=0.7, aggregation_period=2, outer_rounds=3)
    capture = []
    models, result = run_session(domains, scfg, ccfg, 4, capture)
    ref = train([(d, scfg) for d in domains], ccfg, 4)
    for got, want in zip(models, ref.models):
        assert np.max(np.abs(got.users - want.users)) <= 1e-9
        assert np.max(np.abs(got.items - want.items)) <= 1e-9
    assert np.max(np.abs(result.z - ref.z)) <= 1e-9
    blob = b"".join(capture)
    for d in domains:
        for ident in list(d.user_ids) + list(d.item_ids):
            assert ident.encode() not in blob


def test_rho_zero_worker_only_registers(domains):
    scfg = SolverConfig(d=3)
    ccfg = ConsensusConfig(rho=0.0, outer_rounds=3)
    capture = []
    models, result = run_session(domains, scfg, ccfg, 2, capture)
    kinds = [struct.unpack_from("<4sHBBQ", f)[2] for f in capture]
    assert fed.SHARE not in kinds and fed.GLOBAL not in kinds
    assert result.rounds == 0
    for i, (m, d) in enumerate(zip(models, domains)):
        ref = train_als(d, scfg, 3, 2 + i)
        assert np.array_equal(m.users, ref.users)


def test_identical_workers_agree():
    pair = make_pair(n_users=40, n_items=25, rank=3, seed=1)
    d = build_dataset(pair.logs[0], pair.logs[0].user_set())
    scfg = SolverConfig(d=3)
    ccfg = ConsensusConfig(rho=1.0, outer_rounds=60)
    models, _ = run_session([d, d], scfg, ccfg, 0)
    assert np.max(np.abs(models[0].users - models[1].users)) < 1e-4


def test_aggregator_loss_leaves_checkpoint(tmp_path, domains):
    server = socket.create_server(("127.0.0.1", 0))
    addr = server.getsockname()[:2]

    def fake_aggregator():
        sock, _ = server.accept()
        conn = fed.Connection(sock)
        hello = fed._hello_body(conn.expect(fed.HELLO))
        conn.send(fed.encode_hello(hello))
        conn.expect(fed.SHARE)
        sock.close()  # dies mid-round
        server.close()

    t = threading.Thread(target=fake_aggregator, daemon=True)
    t.start()
    ckpt = tmp_path / "ckpt.npz"
    with pytest.raises(fed.FederationError):
        fed.run_worker(addr, domains[0], SolverConfig(d=3), ConsensusConfig(rho=1.0), 0,
                       timeout=10, checkpoint=ckpt)
    state = fed.load_checkpoint(ckpt)
    assert int(state["round"]) == 1
    assert state["users"].shape == (domains[0].n_users, 3)


def test_worker_without_aggregator():
    s = socket.create_server(("127.0.0.1", 0))
    addr = s.getsockname()[:2]
    s.close()
    pair = make_pair(n_users=10, n_items=10, rank=2, seed=0)
    d = build_dataset(pair.logs[0], pair.logs[0].user_set())
    with pytest.raises(fed.FederationError):
        fed.run_worker(addr, d, SolverConfig(d=2), ConsensusConfig(rho=1.0), 0, timeout=2)
