"""Shared oracles for the test suite."""

import numpy as np

from genfl import seeding
from genfl.pacbayes import Objective, ObjectiveKind
from genfl.snn import GaussianNetParams, SampledWeights, backward, num_params, softplus

GRADCHECK_SIZES = (2, 8, 3)


def objective_at(mu, rho, noise, prior, x, y, kind, m, p_min=1e-4):
    params = GaussianNetParams(prior.sizes, mu, rho)
    sample = SampledWeights(prior.sizes, mu + softplus(rho) * noise, noise)
    return backward(params, sample, x, y, p_min, prior=prior, kind=kind, m=m)


def random_gradcheck_case(rng, tag):
    """A random posterior/prior pair on a 2-8-3 net, a batch and fixed noise."""
    n = num_params(GRADCHECK_SIZES)
    prior = GaussianNetParams(
        GRADCHECK_SIZES, rng.normal(0, 0.5, n), np.log(np.expm1(rng.uniform(0.1, 0.5, n)))
    )
    mu = prior.mu + rng.normal(0, 0.2, n)
    rho = prior.rho + rng.normal(0, 0.3, n)
    noise = rng.standard_normal(n)
    x = rng.normal(0, 1, (16, 2))
    y = rng.integers(0, 3, 16)
    kind = ObjectiveKind(Objective(tag), float(rng.uniform(0.1, 1.0)))
    m = int(rng.integers(50, 5000))
    return mu, rho, noise, prior, x, y, kind, m


def max_relative_gradient_error(case, h=1e-6):
    """Max over mu and rho of ||analytic - central FD||_inf / ||central FD||_inf."""
    mu, rho, noise, prior, x, y, kind, m = case
    g = objective_at(mu, rho, noise, prior, x, y, kind, m)
    worst = 0.0
    for which, analytic in (("mu", g.mu), ("rho", g.rho)):
        numeric = np.empty_like(analytic)
        for i in range(len(numeric)):
            args = {"mu": mu, "rho": rho}
            plus, minus = args[which].copy(), args[which].copy()
            plus[i] += h
            minus[i] -= h
            fp = objective_at(**{**args, which: plus}, noise=noise, prior=prior, x=x, y=y, kind=kind, m=m).value
            fm = objective_at(**{**args, which: minus}, noise=noise, prior=prior, x=x, y=y, kind=kind, m=m).value
            numeric[i] = (fp - fm) / (2 * h)
        scale = max(np.abs(numeric).max(), 1e-12)
        worst = max(worst, np.abs(analytic - numeric).max() / scale)
    return worst


def direct_batch_loop(ds, shard, prior, *, seed, rounds, epochs, batch_size, lr, momentum, kind, p_min, delta):
    """Single-client reference: plain minibatch PAC-Bayes SGD, no federation code.

    Draws from the same keyed stream per round as the federated driver, so
    the two must agree bit for bit when one client participates every round.
    """
    x, y = ds.subset(shard.posterior)
    m = len(y)
    mu, rho = prior.mu.copy(), prior.rho.copy()
    for t in range(rounds):
        rng = seeding.stream(seed, seeding.POSTERIOR_UPDATE, shard.client_id, t)
        v_mu, v_rho = np.zeros_like(mu), np.zeros_like(rho)
        for _ in range(epochs):
            order = rng.permutation(m)
            for start in range(0, m, batch_size):
                idx = order[start : start + batch_size]
                noise = rng.standard_normal(mu.shape)
                params = GaussianNetParams(prior.sizes, mu, rho)
                sample = SampledWeights(prior.sizes, mu + softplus(rho) * noise, noise)
                g = backward(params, sample, x[idx], y[idx], p_min, prior, kind, m, delta)
                v_mu = momentum * v_mu + g.mu
                v_rho = momentum * v_rho + g.rho
                mu = mu - lr * v_mu
                rho = rho - lr * v_rho
    return GaussianNetParams(prior.sizes, mu, rho)
