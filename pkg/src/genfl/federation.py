"""GenFL rounds: client sampling, local PAC-Bayes updates, weighted averaging,
and the two-phase personalised pipeline."""

from __future__ import annotations

import hashlib
import json
import math
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from genfl import seeding, snn
from genfl.data import ClientShard, DataError, Dataset
from genfl.pacbayes import ObjectiveKind
from genfl.snn import GaussianNetParams, OptimizerState


@dataclass(frozen=True)
class FLConfig:
    num_clients: int = 100
    participation: float = 0.1
    local_epochs: int = 5
    batch_size: int = 25
    lr: float = 5e-3
    momentum: float = 0.95
    rounds: int = 10
    objective: str = "f1"
    kl_penalty: float = 1.0
    sigma_prior: float = 0.025
    p_min: float = 1e-4
    delta: float = 0.05
    mode: str = "flsob"  # or "pfl"
    prior_mode: str = "learnt"  # or "random"
    seed: int = 0
    prior_rounds: int = 100
    prior_epochs: int = 5
    prior_lr: float = 5e-3
    prior_momentum: float = 0.99
    dropout: float = 0.2
    workers: int = 1

    def __post_init__(self):
        positive = ("num_clients", "batch_size", "lr", "sigma_prior", "prior_lr", "workers")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("local_epochs", "rounds", "prior_rounds", "prior_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not (0.0 < self.participation <= 1.0):
            raise ValueError(f"participation must lie in (0, 1], got {self.participation}")
        for name in ("momentum", "prior_momentum", "dropout"):
            if not (0.0 <= getattr(self, name) < 1.0):
                raise ValueError(f"{name} must lie in [0, 1)")
        if not (0.0 < self.p_min < 1.0 and 0.0 < self.delta < 1.0):
            raise ValueError("p_min and delta must lie in (0, 1)")
        if self.mode not in ("flsob", "pfl"):
            raise ValueError(f"mode must be 'flsob' or 'pfl', got {self.mode!r}")
        if self.prior_mode not in ("random", "learnt"):
            raise ValueError(f"prior_mode must be 'random' or 'learnt', got {self.prior_mode!r}")
        ObjectiveKind(self.objective, self.kl_penalty)

    @property
    def kind(self) -> ObjectiveKind:
        return ObjectiveKind(self.objective, self.kl_penalty)

    @property
    def clients_per_round(self) -> int:
        return max(int(math.floor(self.participation * self.num_clients + 1e-9)), 1)


@dataclass
class RoundLog:
    round: int
    clients: list
    objectives: list
    checksum: str
    duration: float = field(default=0.0, compare=False)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class GlobalModel:
    params: GaussianNetParams
    round: int


class LocalUpdate(NamedTuple):
    params: GaussianNetParams
    objective: float
    steps: int


def checksum(params: GaussianNetParams) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(params.mu, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(params.rho, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def client_update(
    shard: ClientShard,
    ds: Dataset,
    w: GaussianNetParams,
    m_bound: int,
    cfg: FLConfig,
    prior: GaussianNetParams,
    rng,
    epochs: int | None = None,
) -> LocalUpdate:
    """Local PAC-Bayes training on the client's posterior split.

    One reparameterised weight draw per minibatch, one momentum step on
    (mu, rho) per minibatch; ``m_bound`` is the denominator of the objective's
    complexity term. The momentum buffer starts at zero on every call.
    """
    idx = shard.posterior
    if len(idx) == 0:
        raise ValueError(f"client {shard.client_id} has an empty posterior split")
    epochs = cfg.local_epochs if epochs is None else epochs
    x, y = ds.subset(idx)
    kind = cfg.kind
    state = OptimizerState.zeros(w, cfg.lr, cfg.momentum)
    params = w
    value = math.nan
    steps = 0
    for _ in range(epochs):
        for batch in snn.minibatches(rng, len(idx), cfg.batch_size):
            sample = snn.sample_weights(params, rng)
            g = snn.backward(params, sample, x[batch], y[batch], cfg.p_min, prior, kind, m_bound, cfg.delta)
            params, state = snn.sgd_momentum_step(state, params, g.mu, g.rho)
            value = g.value
            steps += 1
    return LocalUpdate(params, value, steps)


def erm_update(shard: ClientShard, ds: Dataset, w: GaussianNetParams, cfg: FLConfig, rng) -> LocalUpdate:
    """Local deterministic ERM on the client's prior split (means only)."""
    x, y = ds.subset(shard.prior)
    if len(y) == 0:
        raise ValueError(f"client {shard.client_id} has an empty prior split")
    params = snn.erm_epochs(
        w, x, y, epochs=cfg.prior_epochs, batch_size=cfg.batch_size, lr=cfg.prior_lr,
        momentum=cfg.prior_momentum, p_min=cfg.p_min, dropout=cfg.dropout, rng=rng,
    )
    loss = snn.empirical_risk(params.sizes, params.mu, x, y, "bounded_ce", cfg.p_min)
    n_batches = -(-len(y) // cfg.batch_size)
    return LocalUpdate(params, loss, cfg.prior_epochs * n_batches)


def aggregate(updates) -> GaussianNetParams:
    """Weighted mean of mu and rho over ``(client_id, m_k, params)`` triples.

    Weights are renormalised over the given clients and the sum runs in
    ascending client id, so input order never changes the result.
    """
    updates = sorted(updates, key=lambda u: u[0])
    if not updates:
        raise ValueError("nothing to aggregate")
    total = float(sum(m for _, m, _ in updates))
    if total <= 0:
        raise ValueError("aggregation weights sum to zero")
    sizes = updates[0][2].sizes
    mu = np.zeros_like(updates[0][2].mu)
    rho = np.zeros_like(updates[0][2].rho)
    for _, m_k, p in updates:
        if p.sizes != sizes:
            raise ValueError(f"shape mismatch: {p.sizes} vs {sizes}")
        weight = m_k / total
        mu += weight * p.mu
        rho += weight * p.rho
    return GaussianNetParams(sizes, mu, rho)


def _run_rounds(cfg, shards, init, rounds, purpose, local_fn, weight_fn, log_path=None):
    K = len(shards)
    if K != cfg.num_clients:
        raise ValueError(f"{K} shards for a {cfg.num_clients}-client configuration")
    n_sel = min(cfg.clients_per_round, K)
    w = init
    logs = []
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for t in range(rounds):
            start = time.perf_counter()
            picker = seeding.stream(cfg.seed, seeding.CLIENT_SAMPLING, purpose, t)
            chosen = sorted(picker.choice(K, n_sel, replace=False).tolist())

            def work(pos, w=w, t=t):
                shard = shards[pos]
                rng = seeding.stream(cfg.seed, purpose, shard.client_id, t)
                return local_fn(shard, w, rng)

            results = list(pool.map(work, chosen)) if pool else [work(p) for p in chosen]
            w = aggregate(
                [(shards[p].client_id, weight_fn(shards[p]), r.params) for p, r in zip(chosen, results)]
            )
            if not w.is_finite():
                raise FloatingPointError(f"non-finite parameters after round {t}")
            entry = RoundLog(
                t, [shards[p].client_id for p in chosen], [float(r.objective) for r in results],
                checksum(w), time.perf_counter() - start,
            )
            logs.append(entry)
            if log_path is not None:
                with open(log_path, "a") as fh:
                    fh.write(entry.to_json() + "\n")
    finally:
        if pool:
            pool.shutdown()
    return w, logs


def run_genfl(cfg: FLConfig, ds: Dataset, shards, prior: GaussianNetParams, m_bound=None, log_path=None):
    """Federated PAC-Bayes training started from (and regularised toward) ``prior``.

    ``m_bound`` defaults to the total posterior-split size over all clients.
    """
    m = sum(s.m for s in shards) if m_bound is None else m_bound

    def local(shard, w, rng):
        return client_update(shard, ds, w, m, cfg, prior, rng)

    w, logs = _run_rounds(cfg, shards, prior, cfg.rounds, seeding.POSTERIOR_UPDATE, local, lambda s: s.m, log_path)
    return GlobalModel(w, cfg.rounds), logs


def run_federated_erm(cfg: FLConfig, ds: Dataset, shards, init: GaussianNetParams, log_path=None):
    """Federated ERM over the prior splits; learns the prior means."""

    def local(shard, w, rng):
        return erm_update(shard, ds, w, cfg, rng)

    return _run_rounds(
        cfg, shards, init, cfg.prior_rounds, seeding.PRIOR_UPDATE, local, lambda s: len(s.prior), log_path
    )


def build_prior(cfg: FLConfig, ds: Dataset, shards, sizes, log_path=None):
    """Random prior, or a prior whose means are learnt by federated ERM."""
    init = snn.init_prior_random(sizes, cfg.sigma_prior, seeding.stream(cfg.seed, seeding.PRIOR_INIT))
    if cfg.prior_mode == "random":
        return init, []
    return run_federated_erm(cfg, ds, shards, init, log_path)


@dataclass
class PflResult:
    prior: GaussianNetParams
    posteriors: dict
    prior_logs: list


def run_pfl(cfg: FLConfig, ds: Dataset, shards, sizes, log_path=None) -> PflResult:
    """Shared prior (phase 1) then per-client personalisation (phase 2).

    Each client personalises from the shared prior with its own posterior
    count ``m_i`` in the objective, on a random stream keyed by client id.
    """
    if cfg.mode != "pfl":
        raise ValueError("run_pfl requires mode='pfl'")
    prior, logs = build_prior(cfg, ds, shards, sizes, log_path)
    posteriors = {}
    for shard in shards:
        rng = seeding.stream(cfg.seed, seeding.PERSONALISE, shard.client_id)
        posteriors[shard.client_id] = client_update(shard, ds, prior, shard.m, cfg, prior, rng).params
    return PflResult(prior, posteriors, logs)


# ------------------------------------------------------------ checkpoints

CHECKPOINT_MAGIC = b"GENFLCK\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: GaussianNetParams, round_index: int = 0):
    """Flat layout: 8-byte magic, version byte, then little-endian fields
    ``round:i64, n_sizes:i64, sizes:i64[n_sizes], mu:f64[P], rho:f64[P]``."""
    header = CHECKPOINT_MAGIC + bytes([CHECKPOINT_VERSION])
    header += struct.pack(f"<qq{len(params.sizes)}q", round_index, len(params.sizes), *params.sizes)
    body = params.mu.astype("<f8").tobytes() + params.rho.astype("<f8").tobytes()
    Path(path).write_bytes(header + body)


def load_checkpoint(path) -> GlobalModel:
    raw = Path(path).read_bytes()
    if len(raw) < 25 or raw[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    if raw[8] != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {raw[8]}")
    round_index, n_sizes = struct.unpack_from("<qq", raw, 9)
    off = 9 + 16
    sizes = struct.unpack_from(f"<{n_sizes}q", raw, off)
    off += 8 * n_sizes
    p = snn.num_params(sizes)
    if len(raw) != off + 16 * p:
        raise DataError(f"{path}: truncated checkpoint")
    vals = np.frombuffer(raw, dtype="<f8", offset=off).astype(np.float64)
    return GlobalModel(GaussianNetParams(sizes, vals[:p], vals[p:]), round_index)
