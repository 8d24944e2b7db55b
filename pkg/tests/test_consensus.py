import numpy as np
import pytest

from cdimf.consensus import (AlignmentError, ConsensusConfig, aggregate, common_alignment,
                             diagnostics_summary, dual_update, primal_residual, prox_identity,
                             prox_l2, train, write_diagnostics)
from cdimf.dataio import build_dataset
from cdimf.solver import SolverConfig, train_als
from cdimf.synthetic import make_pair


class TestProx:
    def test_identity_is_copy(self, rng):
        m = rng.normal(size=(4, 3))
        out = prox_identity(m)
        assert np.array_equal(out, m) and out is not m
        assert not prox_identity(np.zeros((2, 2))).any()

    def test_l2_scalar(self):
        assert prox_l2(np.array([2.0]), 1.0, 1.0)[0] == 1.0

    def test_l2_zero_lambda_bitwise(self, rng):
        m = rng.normal(size=(5, 5))
        assert prox_l2(m, 0.0, 0.3).tobytes() == m.tobytes()

    def test_l2_stationarity(self, rng):
        for _ in range(100):
            m = rng.normal(scale=10, size=(6, 3))
            lg, mu = rng.uniform(0.01, 10), rng.uniform(0.01, 10)
            x = prox_l2(m, lg, mu)
            assert np.max(np.abs(lg * x + (x - m) / mu)) < 1e-12

    def test_l2_bad_mu(self):
        with pytest.raises(ValueError):
            prox_l2(np.ones(2), 1.0, 0.0)


class TestAggregation:
    def test_mean(self):
        z = aggregate([np.array([[1.0]]), np.array([[3.0]])], ConsensusConfig(n_domains=2))
        assert z.tolist() == [[2.0]]

    def test_single_share(self, rng):
        s = rng.normal(size=(3, 2))
        assert np.array_equal(aggregate([s], ConsensusConfig(n_domains=1)), s)

    def test_l2(self):
        cfg = ConsensusConfig(rho=1.0, prox="l2", lambda_g=1.0, n_domains=2)
        z = aggregate([np.array([[1.0]]), np.array([[3.0]])], cfg)
        assert z[0, 0] == pytest.approx(4 / 3, rel=1e-15)

    def test_errors(self):
        with pytest.raises(ValueError):
            aggregate([], ConsensusConfig())
        with pytest.raises(AlignmentError):
            aggregate([np.zeros((2, 2)), np.zeros((3, 2))], ConsensusConfig())

    def test_permutation_equivariant(self, rng):
        shares = [rng.normal(size=(4, 2)) for _ in range(3)]
        cfg = ConsensusConfig(n_domains=3)
        assert np.allclose(aggregate(shares, cfg), aggregate(shares[::-1], cfg), atol=1e-15)


class TestDual:
    def test_examples(self):
        assert dual_update(np.zeros(1), np.ones(1), np.full(1, 2.0))[0] == -1.0
        u = np.array([0.5, -1.0])
        assert np.array_equal(dual_update(u, np.ones(2), np.ones(2)), u)

    def test_elementwise(self, rng):
        u, x, z = (rng.normal(size=(3, 4)) for _ in range(3))
        out = dual_update(u, x, z)
        for idx in np.ndindex(out.shape):
            assert out[idx] == u[idx] + (x[idx] - z[idx])

    def test_residual(self, rng):
        assert primal_residual(np.ones((2, 2)), np.ones((2, 2))) == 0.0
        x = np.zeros((2, 2))
        x[1, 0] = 3.0
        assert primal_residual(x, np.zeros((2, 2))) == 3.0
        a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        assert primal_residual(a, b) == pytest.approx(np.sqrt(((a - b) ** 2).sum()), rel=1e-14)
        with pytest.raises(AlignmentError):
            dual_update(np.zeros(2), np.zeros(3), np.zeros(2))


def datasets(pair):
    shared = set.intersection(*(lg.user_set() for lg in pair.logs))
    return [build_dataset(lg, shared) for lg in pair.logs]


@pytest.fixture(scope="module")
def pair_data():
    return datasets(make_pair(n_users=80, n_items=50, rank=4, n_private=6, seed=2))


def test_rho_zero_is_independent_als(pair_data):
    scfg = SolverConfig(d=4)
    res = train([(d, scfg) for d in pair_data], ConsensusConfig(rho=0.0, outer_rounds=4), seed=7)
    for i, d in enumerate(pair_data):
        ref = train_als(d, scfg, 4, 7 + i)
        assert np.array_equal(res.models[i].users, ref.users)
        assert np.array_equal(res.models[i].items, ref.items)


def test_exchange_algebra(pair_data):
    """After an exchange the duals sum to zero for identity prox (sum of X_i - Z)."""
    scfg = SolverConfig(d=4)
    res = train([(d, scfg) for d in pair_data], ConsensusConfig(rho=1.0, outer_rounds=1), seed=0)
    u0, u1 = res.duals
    assert np.allclose(u0 + u1, 0.0, atol=1e-12)
    # with U starting at zero, the first Z is the plain mean of the shared rows
    x = [m.users[[d.user_index[u] for u in res.alignment]] for m, d in zip(res.models, pair_data)]
    assert np.allclose(res.z, (x[0] + x[1]) / 2, atol=1e-12)


def test_single_domain_shrinks_to_its_own_factors(pair_data):
    d = pair_data[0]
    res = train([(d, SolverConfig(d=4))], ConsensusConfig(rho=1.0, outer_rounds=5, n_domains=1), 0)
    # N=1 with identity prox: Z = X + U, so the residual X - Z = -U stays bounded by duals
    assert res.diagnostics[-1].primal_residuals[0] == pytest.approx(np.linalg.norm(res.duals[0]))


def test_identical_domains_converge(rng):
    pair = make_pair(n_users=60, n_items=40, rank=3, seed=5)
    d = datasets(pair)[0]
    scfg = SolverConfig(d=3)
    res = train([(d, scfg), (d, scfg)], ConsensusConfig(rho=1.0, outer_rounds=25), seed=3)
    r = [np.mean(g.primal_residuals) for g in res.diagnostics]
    assert r[-1] < 0.1 * r[1]


def test_alignment_mismatch():
    pair = make_pair(n_users=30, n_items=20, rank=2, seed=0)
    a = build_dataset(pair.logs[0], {"u00000", "u00001"})
    b = build_dataset(pair.logs[1], {"u00000"})
    with pytest.raises(AlignmentError):
        common_alignment([a, b])


def test_aggregation_period_counts(pair_data):
    seen = []
    cfg = ConsensusConfig(rho=1.0, aggregation_period=3, outer_rounds=2)
    train([(d, SolverConfig(d=4)) for d in pair_data], cfg, 0,
          callback=lambda e, models, ex: seen.append((e, ex)))
    assert seen == [(1, False), (2, False), (3, True), (4, False), (5, False), (6, True)]


def test_divergence_flag(pair_data, monkeypatch):
    from cdimf import consensus

    def explode(*a, **k):
        raise consensus.NonFiniteError("boom")

    monkeypatch.setattr(consensus, "update_items", explode)
    res = train([(d, SolverConfig(d=4)) for d in pair_data], ConsensusConfig(outer_rounds=5), 0)
    assert res.diverged and len(res.diagnostics) == 1 and res.diagnostics[0].diverged


def test_diagnostics_csv(tmp_path, pair_data):
    res = train([(d, SolverConfig(d=4)) for d in pair_data], ConsensusConfig(outer_rounds=2), 0)
    write_diagnostics(res.diagnostics, tmp_path / "d.csv", ["A", "B"])
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0].startswith("round,domain,primal_residual,objective")
    assert len(lines) == 1 + 2 * 2
    assert diagnostics_summary(res, ["A", "B"])["rounds"] == 2
