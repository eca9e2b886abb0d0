import dataclasses
import hashlib
import json

import numpy as np
import pytest

from genfl import seeding
from genfl.data import ClientShard, DataError, apply_split_policy, gen_synthetic, partition_iid_balanced
from genfl.federation import (
    FLConfig,
    LocalUpdate,
    _run_rounds,
    aggregate,
    build_prior,
    checksum,
    client_update,
    load_checkpoint,
    run_genfl,
    run_pfl,
    save_checkpoint,
)
from genfl.snn import GaussianNetParams, SampledWeights, backward, empirical_risk, init_prior_random

from helpers import direct_batch_loop

SIZES = (4, 6, 3)


@pytest.fixture(scope="module")
def setup():
    ds = gen_synthetic(3, 40, 4, 4.0, seed=0)
    shards = partition_iid_balanced(ds, 4, 10, seed=0)
    prior = init_prior_random(SIZES, 0.1, 0)
    return ds, shards, prior


def _cfg(**kw):
    base = dict(num_clients=4, participation=1.0, local_epochs=1, batch_size=8, rounds=2, lr=1e-2, momentum=0.9)
    base.update(kw)
    return FLConfig(**base)


def _params(mu, rho=None):
    mu = np.asarray(mu, float)
    return GaussianNetParams((1, 1), mu, np.zeros_like(mu) if rho is None else np.asarray(rho, float))


class TestConfig:
    @pytest.mark.parametrize("field, value", [
        ("participation", 0.0), ("participation", 1.5), ("num_clients", 0), ("lr", 0.0),
        ("momentum", 1.0), ("rounds", -1), ("kl_penalty", 0.0), ("objective", "f3"), ("mode", "x"),
    ])
    def test_rejects(self, field, value):
        with pytest.raises(ValueError):
            _cfg(**{field: value})

    @pytest.mark.parametrize("K, C, expected", [(100, 0.1, 10), (10, 0.05, 1), (3, 1 / 3, 1), (7, 1.0, 7)])
    def test_clients_per_round(self, K, C, expected):
        assert _cfg(num_clients=K, participation=C).clients_per_round == expected


class TestAggregate:
    def test_identical_updates(self):
        p = _params([1.5, -2.0], [0.1, 0.2])
        out = aggregate([(0, 3, p), (1, 7, p.copy())])
        np.testing.assert_allclose(out.mu, p.mu, rtol=1e-15)
        np.testing.assert_allclose(out.rho, p.rho, rtol=1e-15)

    def test_weighted_mean(self):
        out = aggregate([(0, 1, _params([0.0, 0.0])), (1, 3, _params([4.0, 8.0]))])
        np.testing.assert_allclose(out.mu, [3.0, 6.0])

    def test_order_invariant_bitwise(self):
        rng = np.random.default_rng(0)
        ups = [(k, int(rng.integers(1, 100)), _params(rng.normal(size=2), rng.normal(size=2))) for k in range(6)]
        a = aggregate(ups)
        b = aggregate(ups[::-1])
        assert a.equals(b)

    def test_convex_hull(self):
        rng = np.random.default_rng(1)
        ps = [_params(rng.normal(size=2), rng.normal(size=2)) for _ in range(5)]
        out = aggregate([(k, k + 1, p) for k, p in enumerate(ps)])
        mus = np.stack([p.mu for p in ps])
        assert np.all(out.mu >= mus.min(0) - 1e-12) and np.all(out.mu <= mus.max(0) + 1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            aggregate([])
        with pytest.raises(ValueError):
            aggregate([(0, 1, _params([0.0, 0.0])), (1, 1, init_prior_random((2, 2), 0.1, 0))])


class TestClientUpdate:
    def test_zero_epochs_is_identity(self, setup):
        ds, shards, prior = setup
        out = client_update(shards[0], ds, prior, 100, _cfg(), prior, np.random.default_rng(0), epochs=0)
        assert out.params.equals(prior) and out.steps == 0

    def test_last_minibatch_counts(self, setup):
        ds, _, prior = setup
        shard = ClientShard(0, np.arange(103))
        out = client_update(shard, ds, prior, 103, _cfg(batch_size=25, local_epochs=2), prior, np.random.default_rng(0))
        assert out.steps == 10

    def test_empty_posterior(self, setup):
        ds, _, prior = setup
        shard = ClientShard(0, np.arange(4), posterior=np.empty(0, np.int64))
        with pytest.raises(ValueError, match="empty"):
            client_update(shard, ds, prior, 1, _cfg(), prior, np.random.default_rng(0))

    def test_lowers_full_split_objective(self, setup):
        ds, shards, prior = setup
        shard = shards[0]
        x, y = ds.subset(shard.posterior)

        def full_objective(p):
            sample = SampledWeights(p.sizes, p.mu, np.zeros_like(p.mu))
            return backward(p, sample, x, y, 1e-4, prior, FLConfig().kind, 30).value

        out = client_update(shard, ds, prior, 30, _cfg(local_epochs=20), prior, np.random.default_rng(0))
        assert full_objective(out.params) < full_objective(prior)


class TestRounds:
    def test_zero_rounds_returns_prior(self, setup):
        ds, shards, prior = setup
        model, logs = run_genfl(_cfg(rounds=0), ds, shards, prior)
        assert model.params.equals(prior) and logs == []

    def test_deterministic_and_logged(self, setup, tmp_path):
        ds, shards, prior = setup
        a, logs = run_genfl(_cfg(), ds, shards, prior, log_path=tmp_path / "r.jsonl")
        b, _ = run_genfl(_cfg(), ds, shards, prior)
        assert a.params.equals(b.params)
        lines = [json.loads(l) for l in (tmp_path / "r.jsonl").read_text().splitlines()]
        assert [l["round"] for l in lines] == [0, 1]
        assert lines[-1]["checksum"] == checksum(a.params) == logs[-1].checksum

    def test_threaded_workers_match_serial(self, setup):
        ds, shards, prior = setup
        a, _ = run_genfl(_cfg(), ds, shards, prior)
        b, _ = run_genfl(_cfg(workers=3), ds, shards, prior)
        assert a.params.equals(b.params)

    def test_shard_order_irrelevant_with_full_participation(self, setup):
        ds, shards, prior = setup
        a, _ = run_genfl(_cfg(), ds, shards, prior)
        b, _ = run_genfl(_cfg(), ds, shards[::-1], prior)
        assert a.params.equals(b.params)

    def test_single_client_equals_direct_loop(self, setup):
        ds, shards, prior = setup
        cfg = _cfg(num_clients=1, rounds=3, local_epochs=2)
        model, _ = run_genfl(cfg, ds, shards[:1], prior)
        ref = direct_batch_loop(
            ds, shards[0], prior, seed=cfg.seed, rounds=3, epochs=2, batch_size=cfg.batch_size, lr=cfg.lr,
            momentum=cfg.momentum, kind=cfg.kind, p_min=cfg.p_min, delta=cfg.delta,
        )
        assert model.params.equals(ref)

    def test_client_sampling_is_uniform(self):
        # chi-square goodness of fit of per-client selection counts
        K, rounds = 10, 2000
        cfg = _cfg(num_clients=K, participation=0.3)
        shards = [ClientShard(k, np.arange(1)) for k in range(K)]
        w = _params([0.0, 0.0])
        _, logs = _run_rounds(cfg, shards, w, rounds, seeding.POSTERIOR_UPDATE,
                              lambda s, w, rng: LocalUpdate(w, 0.0, 0), lambda s: 1)
        counts = np.bincount(np.concatenate([l.clients for l in logs]), minlength=K)
        assert all(len(l.clients) == 3 for l in logs)
        expected = rounds * 3 / K
        chi2 = ((counts - expected) ** 2 / expected).sum()
        assert chi2 < 27.88  # 0.999 quantile, 9 degrees of freedom

    def test_nonfinite_detected(self, setup):
        ds, shards, prior = setup
        with pytest.raises(FloatingPointError):
            run_genfl(_cfg(lr=1e6, momentum=0.0, local_epochs=3), ds, shards, prior)

    def test_shard_count_checked(self, setup):
        ds, shards, prior = setup
        with pytest.raises(ValueError):
            run_genfl(_cfg(num_clients=5), ds, shards, prior)


class TestPrior:
    def test_random_prior_has_constant_sigma(self, setup):
        ds, shards, _ = setup
        prior, logs = build_prior(_cfg(prior_mode="random", sigma_prior=0.03), ds, shards, SIZES)
        np.testing.assert_allclose(prior.sigma, 0.03)
        assert logs == []

    def test_learnt_prior_keeps_sigma_and_lowers_error(self):
        ds = gen_synthetic(3, 100, 4, 6.0, seed=1)
        shards = [apply_split_policy(s, "learnt_prior_iid", ds.labels, k)
                  for k, s in enumerate(partition_iid_balanced(ds, 2, 50, seed=0))]
        cfg = _cfg(num_clients=2, prior_rounds=10, prior_epochs=2, prior_lr=0.1, prior_momentum=0.9, dropout=0.0)
        rand, _ = build_prior(dataclasses.replace(cfg, prior_mode="random"), ds, shards, SIZES)
        learnt, logs = build_prior(cfg, ds, shards, SIZES)
        np.testing.assert_array_equal(learnt.rho, rand.rho)
        assert empirical_risk(SIZES, learnt.mu, ds.features, ds.labels) < empirical_risk(
            SIZES, rand.mu, ds.features, ds.labels)
        assert len(logs) == 10


class TestPfl:
    def test_zero_local_epochs_returns_prior(self, setup):
        ds, shards, _ = setup
        res = run_pfl(_cfg(mode="pfl", prior_mode="random", local_epochs=0), ds, shards, SIZES)
        assert all(p.equals(res.prior) for p in res.posteriors.values())

    def test_one_posterior_per_client(self, setup):
        ds, shards, _ = setup
        res = run_pfl(_cfg(mode="pfl", prior_mode="random"), ds, shards, SIZES)
        assert sorted(res.posteriors) == [0, 1, 2, 3]
        assert not res.posteriors[0].equals(res.posteriors[1])

    def test_requires_pfl_mode(self, setup):
        ds, shards, _ = setup
        with pytest.raises(ValueError):
            run_pfl(_cfg(), ds, shards, SIZES)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        p = init_prior_random((5, 7, 3), 0.05, 0)
        save_checkpoint(tmp_path / "c.ckpt", p, 12)
        back = load_checkpoint(tmp_path / "c.ckpt")
        assert back.round == 12 and back.params.equals(p)

    def test_corrupt(self, tmp_path):
        p = init_prior_random((5, 7, 3), 0.05, 0)
        save_checkpoint(tmp_path / "c.ckpt", p)
        raw = (tmp_path / "c.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(raw[:-8])
        (tmp_path / "m.ckpt").write_bytes(b"XXXXXXXX" + raw[8:])
        for name in ("t.ckpt", "m.ckpt"):
            with pytest.raises(DataError):
                load_checkpoint(tmp_path / name)

    def test_checksum_pinned(self):
        # regression pin for the byte layout that the checksum hashes
        p = GaussianNetParams((1, 1), np.array([1.0, -2.0]), np.array([0.5, 0.25]))
        expected = hashlib.sha256(
            np.array([1.0, -2.0]).astype("<f8").tobytes() + np.array([0.5, 0.25]).astype("<f8").tobytes()
        ).hexdigest()[:16]
        assert checksum(p) == expected
