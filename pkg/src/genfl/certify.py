"""Monte-Carlo risk estimation and PAC-Bayes risk certificates."""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass

import numpy as np

from genfl import pacbayes, seeding, snn
from genfl.data import ClientShard, Dataset
from genfl.snn import GaussianNetParams

# float budget for one stacked forward pass (samples x points x width)
_CHUNK_FLOATS = 4_000_000


class LossKind(str, enum.Enum):
    ZERO_ONE = "zero_one"
    BOUNDED_CE = "bounded_ce"


@dataclass
class McEstimate:
    client_id: int | None
    n: int
    mean: float
    loss_kind: LossKind


@dataclass
class BoundCertificate:
    risk_bound: float
    mc_risk: float
    mc_risk_inverted: float
    kl_div: float
    m: int
    n_mc: int
    delta: float
    delta_prime: float
    loss_kind: LossKind
    client_id: int | None = None

    @property
    def confidence(self) -> float:
        return 1.0 - self.delta - self.delta_prime

    @property
    def kl_over_m(self) -> float:
        return self.kl_div / self.m

    def to_dict(self):
        out = asdict(self)
        out["loss_kind"] = LossKind(self.loss_kind).value
        return out


def sampled_risks(posterior: GaussianNetParams, x, y, n, rng, loss_kind=LossKind.ZERO_ONE, p_min=1e-4):
    """Empirical risk on (x, y) of each of ``n`` independent draws W_i ~ Q.

    Draws are taken in chunks from ``rng``; the sequence of W_i depends only
    on the generator state, never on the chunking.
    """
    loss_kind = LossKind(loss_kind)
    x = np.asarray(x, dtype=np.float64)
    width = max(posterior.sizes[1:])
    chunk = max(1, _CHUNK_FLOATS // max(1, len(y) * width))
    sigma = posterior.sigma
    out = np.empty(n)
    for start in range(0, n, chunk):
        s = min(chunk, n - start)
        w = posterior.mu + sigma * rng.standard_normal((s, len(posterior.mu)))
        logits = snn.forward_stack(posterior.sizes, w, x)
        if loss_kind is LossKind.ZERO_ONE:
            losses = (np.argmax(logits, axis=-1) != y).astype(np.float64)
        else:
            flat = logits.reshape(-1, logits.shape[-1])
            losses = snn.bounded_cross_entropy(flat, np.tile(y, s), p_min)[0].reshape(s, len(y))
        out[start : start + s] = losses.mean(axis=1)
    return out


def client_mc_sampling(
    shard: ClientShard, ds: Dataset, posterior, n_mc, loss_kind=LossKind.ZERO_ONE, rng=None, p_min=1e-4
) -> McEstimate:
    """Average local empirical risk of ``n_mc`` posterior draws on the
    client's bound-accounting (posterior) split."""
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    if len(shard.posterior) == 0:
        raise ValueError(f"client {shard.client_id} has an empty evaluation set")
    x, y = ds.subset(shard.posterior)
    risks = sampled_risks(posterior, x, y, n_mc, np.random.default_rng(rng), loss_kind, p_min)
    return McEstimate(shard.client_id, n_mc, float(risks.mean()), LossKind(loss_kind))


def certificate(mc_risk, kl_div, m, n_mc, delta=0.05, delta_prime=0.01, loss_kind=LossKind.ZERO_ONE, client_id=None):
    """Two nested kl inversions: MC error first, then the PAC-Bayes budget."""
    budget = pacbayes.BoundBudget(kl_div, m, delta, delta_prime, n_mc)
    mc_risk = min(max(mc_risk, 0.0), 1.0)
    mc_inv = pacbayes.kl_inverse(mc_risk, math.log(2.0 / delta_prime) / n_mc)
    bound = pacbayes.bound_mcallester_inverted(mc_inv, budget)
    return BoundCertificate(bound, mc_risk, mc_inv, kl_div, m, n_mc, delta, delta_prime, LossKind(loss_kind), client_id)


def _mc_stream(seed, coupled, client_id):
    if coupled:
        return seeding.stream(seed, seeding.MONTE_CARLO)
    return seeding.stream(seed, seeding.MONTE_CARLO, client_id)


def fed_bound(
    ds: Dataset,
    shards,
    posterior: GaussianNetParams,
    prior: GaussianNetParams,
    n_mc: int,
    *,
    delta=0.05,
    delta_prime=0.01,
    loss_kind=LossKind.ZERO_ONE,
    seed=0,
    coupled=True,
    m=None,
    p_min=1e-4,
):
    """Global certificate for a posterior shared by all clients.

    Clients report MC error estimates; the server averages them with
    weights m_k / m and inverts twice. With ``coupled`` every client replays
    the same weight-draw sequence, so the weighted average equals the MC
    estimate on the pooled data. Returns ``(certificate, estimates)``.
    """
    shards = sorted(shards, key=lambda s: s.client_id)
    total = sum(s.m for s in shards)
    if m is not None and m != total:
        raise ValueError(f"weight accounting: sum of m_k is {total}, expected m={m}")
    estimates = [
        client_mc_sampling(s, ds, posterior, n_mc, loss_kind, _mc_stream(seed, coupled, s.client_id), p_min)
        for s in shards
    ]
    error = 0.0
    for s, est in zip(shards, estimates):
        error += (s.m / total) * est.mean
    kl = pacbayes.gaussian_kl(posterior, prior)
    return certificate(error, kl, total, n_mc, delta, delta_prime, loss_kind), estimates


def personalised_bounds(
    ds: Dataset,
    clients,
    prior: GaussianNetParams,
    n_mc: int,
    *,
    delta=0.05,
    delta_prime=0.01,
    loss_kind=LossKind.ZERO_ONE,
    seed=0,
    coupled=True,
    p_min=1e-4,
):
    """One certificate per ``(shard, posterior)`` pair, each with its own m_i."""
    certs = []
    for shard, post in clients:
        est = client_mc_sampling(shard, ds, post, n_mc, loss_kind, _mc_stream(seed, coupled, shard.client_id), p_min)
        kl = pacbayes.gaussian_kl(post, prior)
        certs.append(certificate(est.mean, kl, shard.m, n_mc, delta, delta_prime, loss_kind, shard.client_id))
    return certs


SUMMARY_METRICS = ("risk_bound", "mc_risk", "mc_risk_inverted", "kl_over_m")


def summarize_certificates(certs, extra=None):
    """``{metric: (min, mean, max)}`` over clients.

    ``extra`` maps further metric names to per-client value lists (for
    example test errors).
    """
    if not certs:
        raise ValueError("no certificates to summarise")
    columns = {name: [getattr(c, name) for c in certs] for name in SUMMARY_METRICS}
    columns.update(extra or {})
    return {name: (min(v), sum(v) / len(v), max(v)) for name, v in columns.items()}


def histogram(values, bins=20):
    """Counts of ``values`` in equal-width bins over [0, 1] (1.0 lands in the last bin)."""
    counts, _ = np.histogram(np.clip(values, 0.0, 1.0), bins=bins, range=(0.0, 1.0))
    return counts.tolist()


def stochastic_error(posterior: GaussianNetParams, x, y, n_samples, rng):
    """Mean 0-1 error over ``n_samples`` posterior draws (stochastic-network error)."""
    return float(sampled_risks(posterior, x, y, n_samples, np.random.default_rng(rng)).mean())
