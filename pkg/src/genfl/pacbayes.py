"""Scalar PAC-Bayes arithmetic: binary kl and its inverse, Gaussian KL,
McAllester-type bounds and the two training objectives built from them."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

NEWTON_ITERS = 10
RESIDUAL_TOL = 1e-8
_UPPER_CLAMP = 1.0 - 1e-15


class Objective(str, enum.Enum):
    F1 = "f1"  # classic (Pinsker) form
    F2 = "f2"  # quadratic form


@dataclass(frozen=True)
class ObjectiveKind:
    tag: Objective = Objective.F1
    kl_penalty: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "tag", Objective(self.tag))
        if not (0.0 < self.kl_penalty <= 1.0):
            raise ValueError(f"kl_penalty must lie in (0, 1], got {self.kl_penalty}")


@dataclass(frozen=True)
class BoundBudget:
    """Everything a bound needs besides the empirical risk."""

    kl_div: float
    m: int
    delta: float = 0.05
    delta_prime: float = 0.01
    n_mc: int = 1

    def __post_init__(self):
        if not math.isfinite(self.kl_div) or self.kl_div < 0:
            raise ValueError(f"kl_div must be finite and >= 0, got {self.kl_div}")
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if not (0 < self.delta < 1 and 0 < self.delta_prime < 1):
            raise ValueError("delta and delta_prime must lie in (0, 1)")
        if self.delta + self.delta_prime >= 1:
            raise ValueError("delta + delta_prime must be < 1")
        if self.n_mc < 1:
            raise ValueError(f"n_mc must be >= 1, got {self.n_mc}")


def _check_prob(name, x):
    if not (0.0 <= x <= 1.0):  # also rejects nan
        raise ValueError(f"{name} must lie in [0, 1], got {x}")


def binary_kl(q: float, p: float) -> float:
    """kl(q || p) between Bernoulli(q) and Bernoulli(p), with 0 ln 0 = 0."""
    _check_prob("q", q)
    _check_prob("p", p)
    if q == p:
        return 0.0
    if p == 0.0 or p == 1.0:
        return math.inf
    out = 0.0
    if q > 0.0:
        out += q * math.log(q / p)
    if q < 1.0:
        out += (1.0 - q) * math.log((1.0 - q) / (1.0 - p))
    return max(out, 0.0)


def _check_inverse_args(q, c):
    _check_prob("q", q)
    if not (c >= 0.0) or math.isnan(c):
        raise ValueError(f"c must be >= 0, got {c}")


def _newton_descend(q, c, p, k_iters):
    lo = math.nextafter(q, 1.0)
    for _ in range(k_iters):
        slope = (1.0 - q) / (1.0 - p) - (q / p if q > 0 else 0.0)
        if slope <= 0.0:
            break
        p -= (binary_kl(q, p) - c) / slope
        p = min(max(p, lo), _UPPER_CLAMP)
    return min(max(p, q), 1.0)


def kl_inverse_newton(q: float, c: float, k_iters: int = NEWTON_ITERS) -> float:
    """Newton approximation of sup{p in [q, 1] : kl(q || p) <= c}.

    Starts from the Pinsker estimate q + sqrt(c / 2) and returns 1 when that
    is already >= 1. The start lies to the right of the root, where kl(q || .)
    is convex and increasing, so the iterates descend monotonically onto it.
    """
    _check_inverse_args(q, c)
    if k_iters < 1:
        raise ValueError("k_iters must be positive")
    if c == 0.0 or q == 1.0:
        return q
    start = q + math.sqrt(c / 2.0)
    if start >= 1.0:
        return 1.0
    return _newton_descend(q, c, start, k_iters)


def kl_inverse_bisect(q: float, c: float, tol: float = 1e-12) -> float:
    """Bisection for kl(q || p) = c on [q, 1]; returns the upper bracket end."""
    _check_inverse_args(q, c)
    if tol <= 0:
        raise ValueError("tol must be positive")
    if c == 0.0 or q == 1.0:
        return q
    lo, hi = q, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if binary_kl(q, mid) > c:
            hi = mid
        else:
            lo = mid
    return hi


def kl_inverse(q: float, c: float) -> float:
    """Residual-checked Newton inverse, falling back to bisection.

    The fallback also covers Newton's early return of 1 when the root is
    below 1. The bisection result is the right end of its bracket, so a few
    further Newton steps from there stay monotone and sharpen the residual
    when the root sits close to 1.
    """
    p = kl_inverse_newton(q, c, NEWTON_ITERS)
    if p == 1.0:
        if q == 1.0 or binary_kl(q, _UPPER_CLAMP) <= c:
            return 1.0  # root indistinguishable from 1 in double precision
    elif abs(binary_kl(q, p) - c) < RESIDUAL_TOL:
        return p
    return _newton_descend(q, c, min(kl_inverse_bisect(q, c, 1e-14), _UPPER_CLAMP), 3)


def log_confidence(m: int, delta: float) -> float:
    """ln(2 sqrt(m) / delta), evaluated without forming sqrt(m)."""
    return math.log(2.0) + 0.5 * math.log(m) - math.log(delta)


def _complexity(b: BoundBudget) -> float:
    return (b.kl_div + log_confidence(b.m, b.delta)) / b.m


def bound_mcallester_inverted(r_hat: float, b: BoundBudget) -> float:
    _check_prob("r_hat", r_hat)
    return kl_inverse(r_hat, _complexity(b))


def bound_pinsker(r_hat: float, b: BoundBudget) -> float:
    _check_prob("r_hat", r_hat)
    return r_hat + math.sqrt(_complexity(b) / 2.0)


def bound_quadratic(r_hat: float, b: BoundBudget) -> float:
    _check_prob("r_hat", r_hat)
    t = _complexity(b) / 2.0
    return (math.sqrt(r_hat + t) + math.sqrt(t)) ** 2


def objective_f1(r_hat_batch: float, b: BoundBudget, kind: ObjectiveKind) -> float:
    if kind.tag is not Objective.F1:
        raise ValueError("objective_f1 requires an F1 ObjectiveKind")
    return objective_and_partials(r_hat_batch, b.kl_div, b.m, b.delta, kind)[0]


def objective_f2(r_hat_batch: float, b: BoundBudget, kind: ObjectiveKind) -> float:
    if kind.tag is not Objective.F2:
        raise ValueError("objective_f2 requires an F2 ObjectiveKind")
    return objective_and_partials(r_hat_batch, b.kl_div, b.m, b.delta, kind)[0]


def objective_and_partials(r_hat, kl_div, m, delta, kind: ObjectiveKind):
    """Training objective value and its partial derivatives.

    Returns ``(value, d/d r_hat, d/d kl_div)``. ``m`` is the global sample
    count when all users share one objective and the user's own count when
    personalising.
    """
    t = (kind.kl_penalty * kl_div + log_confidence(m, delta)) / (2.0 * m)
    dt_dkl = kind.kl_penalty / (2.0 * m)
    root_t = math.sqrt(t)
    if kind.tag is Objective.F1:
        return r_hat + root_t, 1.0, dt_dkl / (2.0 * root_t)
    root_rt = math.sqrt(r_hat + t)
    s = root_rt + root_t
    d_r = s / root_rt
    d_t = s * (1.0 / root_rt + 1.0 / root_t)
    return s * s, d_r, d_t * dt_dkl


def gaussian_kl(post, prior) -> float:
    """KL(post || prior) between diagonal Gaussians.

    Both arguments expose flat ``mu`` and ``sigma`` arrays (e.g.
    :class:`genfl.snn.GaussianNetParams`).
    """
    mu_q, sig_q = np.asarray(post.mu), np.asarray(post.sigma)
    mu_p, sig_p = np.asarray(prior.mu), np.asarray(prior.sigma)
    if mu_q.shape != mu_p.shape or sig_q.shape != sig_p.shape:
        raise ValueError(f"shape mismatch: {mu_q.shape} vs {mu_p.shape}")
    for arr in (mu_q, sig_q, mu_p, sig_p):
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite Gaussian parameters")
    if np.any(sig_q < 0) or np.any(sig_p < 0):
        raise ValueError("standard deviations must be positive")
    if np.any(sig_q == 0) or np.any(sig_p == 0):
        raise FloatingPointError("standard deviation underflowed to zero")
    var_ratio = (sig_q / sig_p) ** 2
    terms = 0.5 * (var_ratio - 1.0 - np.log(var_ratio)) + 0.5 * ((mu_q - mu_p) / sig_p) ** 2
    return float(max(terms.sum(), 0.0))


def gaussian_kl_grads(mu_q, sig_q, mu_p, sig_p):
    """Gradients of the Gaussian KL with respect to the posterior mean and std."""
    inv_var_p = 1.0 / sig_p**2
    return (mu_q - mu_p) * inv_var_p, sig_q * inv_var_p - 1.0 / sig_q
