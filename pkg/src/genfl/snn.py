"""Stochastic MLP over diagonal-Gaussian weights.

Parameters are stored as two flat float64 vectors (``mu`` and ``rho``) with
``sigma = softplus(rho)``; per-layer weight matrices ``[out x in]`` and bias
vectors are views into those vectors. Keeping one flat layout makes
aggregation, momentum updates and checkpointing plain vector arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from genfl import pacbayes
from genfl.pacbayes import ObjectiveKind


def softplus(rho):
    rho = np.asarray(rho, dtype=np.float64)
    out = np.log1p(np.exp(-np.abs(rho))) + np.maximum(rho, 0.0)
    return out if out.ndim else float(out)


def softplus_inverse(sigma):
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(~(sigma > 0)):
        raise ValueError("softplus_inverse requires sigma > 0")
    big = sigma > 20.0
    safe = np.where(big, 1.0, sigma)
    out = np.where(big, sigma + np.log1p(-np.exp(-sigma)), np.log(np.expm1(safe)))
    return out if out.ndim else float(out)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def layer_shapes(sizes):
    return [(n_out, n_in) for n_in, n_out in zip(sizes[:-1], sizes[1:])]


def num_params(sizes) -> int:
    return sum(o * i + o for o, i in layer_shapes(sizes))


def layer_views(sizes, flat):
    """Split a flat parameter vector (or a stack ``[..., P]``) into (W, b) views."""
    views = []
    pos = 0
    lead = flat.shape[:-1]
    for n_out, n_in in layer_shapes(sizes):
        w = flat[..., pos : pos + n_out * n_in].reshape(*lead, n_out, n_in)
        pos += n_out * n_in
        b = flat[..., pos : pos + n_out]
        pos += n_out
        views.append((w, b))
    return views


@dataclass
class GaussianNetParams:
    """Diagonal Gaussian N(mu, diag(softplus(rho)^2)) over all MLP weights."""

    sizes: tuple
    mu: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.rho = np.asarray(self.rho, dtype=np.float64)
        n = num_params(self.sizes)
        if self.mu.shape != (n,) or self.rho.shape != (n,):
            raise ValueError(
                f"expected {n} parameters for sizes {self.sizes}, "
                f"got mu {self.mu.shape} rho {self.rho.shape}"
            )

    @property
    def sigma(self):
        return softplus(self.rho)

    def layers(self):
        return list(zip(layer_views(self.sizes, self.mu), layer_views(self.sizes, self.rho)))

    def copy(self):
        return GaussianNetParams(self.sizes, self.mu.copy(), self.rho.copy())

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.mu)) and np.all(np.isfinite(self.rho)))

    def allclose(self, other, **kw) -> bool:
        return (
            self.sizes == other.sizes
            and np.allclose(self.mu, other.mu, **kw)
            and np.allclose(self.rho, other.rho, **kw)
        )

    def equals(self, other) -> bool:
        return (
            self.sizes == other.sizes
            and np.array_equal(self.mu, other.mu)
            and np.array_equal(self.rho, other.rho)
        )


@dataclass
class SampledWeights:
    sizes: tuple
    w: np.ndarray
    noise: np.ndarray


@dataclass
class OptimizerState:
    lr: float
    momentum: float
    vel_mu: np.ndarray
    vel_rho: np.ndarray

    @classmethod
    def zeros(cls, params: GaussianNetParams, lr: float, momentum: float):
        if lr <= 0 or not (0.0 <= momentum < 1.0):
            raise ValueError("need lr > 0 and momentum in [0, 1)")
        return cls(lr, momentum, np.zeros_like(params.mu), np.zeros_like(params.rho))


def truncated_normal(rng, std, size, bound):
    """Rejection-sample N(0, std^2) restricted to [-bound, bound]."""
    out = rng.normal(0.0, std, size)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, std, int(bad.sum()))
        bad = np.abs(out) > bound
    return out


def init_prior_random(sizes, sigma_prior: float, rng) -> GaussianNetParams:
    """Random prior: truncated-normal means per layer, constant sigma.

    ``rng`` is a numpy Generator or an integer seed.
    """
    if sigma_prior <= 0:
        raise ValueError("sigma_prior must be positive")
    rng = np.random.default_rng(rng)
    mu = np.empty(num_params(sizes))
    pos = 0
    for n_out, n_in in layer_shapes(sizes):
        std = 1.0 / np.sqrt(n_in)
        count = n_out * n_in + n_out
        mu[pos : pos + count] = truncated_normal(rng, std, count, 2.0 * std)
        pos += count
    rho = np.full_like(mu, softplus_inverse(sigma_prior))
    return GaussianNetParams(sizes, mu, rho)


def sample_weights(params: GaussianNetParams, rng) -> SampledWeights:
    """Reparameterised draw W = mu + softplus(rho) * V with V ~ N(0, I)."""
    rng = np.random.default_rng(rng)
    noise = rng.standard_normal(params.mu.shape)
    return SampledWeights(params.sizes, params.mu + params.sigma * noise, noise)


def _as_flat(w):
    if isinstance(w, SampledWeights):
        return w.sizes, w.w
    raise TypeError("expected SampledWeights; use forward_flat for raw vectors")


def forward_flat(sizes, w, x):
    """Logits of the MLP with flat weights ``w`` on inputs ``x`` ([N, d] or [d])."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != sizes[0]:
        raise ValueError(f"input dim {x.shape[-1]} != {sizes[0]}")
    h = x
    views = layer_views(sizes, w)
    for i, (W, b) in enumerate(views):
        h = h @ W.T + b
        if i < len(views) - 1:
            h = np.maximum(h, 0.0)
    return h


def forward(w: SampledWeights, x):
    sizes, flat = _as_flat(w)
    return forward_flat(sizes, flat, x)


def forward_stack(sizes, w_stack, x):
    """Logits for a stack of weight vectors ``[S, P]`` on shared inputs ``[N, d]``.

    Returns ``[S, N, C]``.
    """
    x = np.asarray(x, dtype=np.float64)
    views = layer_views(sizes, w_stack)
    s, n = w_stack.shape[0], x.shape[0]
    W, b = views[0]
    # first layer as one [N, d] x [d, S*out] product
    h = (x @ W.reshape(s * sizes[1], sizes[0]).T).reshape(n, s, sizes[1]).transpose(1, 0, 2)
    h = h + b[:, None, :]
    for W, b in views[1:]:
        np.maximum(h, 0.0, out=h)
        h = np.matmul(h, W.transpose(0, 2, 1)) + b[:, None, :]
    return h


def _log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def bounded_cross_entropy(logits, labels, p_min: float):
    """Cross-entropy with the true-class probability clamped below at ``p_min``.

    ``loss = ln(max(p_y, p_min)) / ln(p_min)`` lies in [0, 1]. Works on one
    logit vector with an int label or on a batch ``[N, C]`` with labels
    ``[N]``. Returns ``(loss, grad_logits)``; the gradient is zero wherever
    the clamp is active.
    """
    if not (0.0 < p_min < 1.0):
        raise ValueError(f"p_min must lie in (0, 1), got {p_min}")
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    z = np.atleast_2d(logits)
    y = np.atleast_1d(np.asarray(labels))
    logp = _log_softmax(z)
    rows = np.arange(len(y))
    log_py = logp[rows, y]
    log_pmin = np.log(p_min)
    active = log_py > log_pmin
    loss = np.where(active, log_py, log_pmin) / log_pmin
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    grad *= (active / -log_pmin)[:, None]
    if single:
        return float(loss[0]), grad[0]
    return loss, grad


def zero_one_loss(logits, labels):
    """1 where argmax(logits) != label; ties go to the lowest class index."""
    logits = np.asarray(logits)
    pred = np.argmax(logits, axis=-1)
    out = (pred != np.asarray(labels)).astype(np.float64)
    return float(out) if out.ndim == 0 else out


def dropout_masks(rng, sizes, n, rate):
    """Inverted-dropout masks for each hidden layer, or None when rate is 0."""
    if rate <= 0:
        return None
    keep = 1.0 - rate
    return [(rng.random((n, h)) < keep) / keep for h in sizes[1:-1]]


def data_loss_and_grad(sizes, w, x, labels, p_min, masks=None):
    """Mean bounded cross-entropy over a batch and its gradient w.r.t. ``w``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None]
        labels = np.atleast_1d(labels)
    views = layer_views(sizes, w)
    acts = [x]
    pre = []
    h = x
    for i, (W, b) in enumerate(views):
        z = h @ W.T + b
        if i < len(views) - 1:
            pre.append(z)
            h = np.maximum(z, 0.0)
            if masks is not None:
                h = h * masks[i]
            acts.append(h)
        else:
            h = z
    losses, delta = bounded_cross_entropy(h, labels, p_min)
    n = x.shape[0]
    delta = delta / n
    grad = np.empty_like(w)
    gviews = layer_views(sizes, grad)
    for i in range(len(views) - 1, -1, -1):
        gW, gb = gviews[i]
        gW[...] = delta.T @ acts[i]
        gb[...] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ views[i][0]) * (pre[i - 1] > 0)
            if masks is not None:
                delta = delta * masks[i - 1]
    return float(losses.mean()), grad


@dataclass
class ObjectiveGrad:
    value: float
    risk: float
    kl: float
    mu: np.ndarray = field(repr=False)
    rho: np.ndarray = field(repr=False)


def backward(
    params: GaussianNetParams,
    sample: SampledWeights,
    x,
    labels,
    p_min: float,
    prior: GaussianNetParams | None = None,
    kind: ObjectiveKind | None = None,
    m: int | None = None,
    delta: float = 0.05,
) -> ObjectiveGrad:
    """Gradient of a PAC-Bayes objective w.r.t. every mu and rho entry.

    The data term is differentiated through the sampled weights with the
    noise held fixed (dW/dmu = 1, dW/drho = V * softplus'(rho)); the KL term
    is differentiated in closed form. Without ``prior`` only the minibatch
    bounded cross-entropy is differentiated.
    """
    if sample.w.shape != params.mu.shape:
        raise ValueError("sample does not match parameter shapes")
    risk, g_w = data_loss_and_grad(params.sizes, sample.w, x, labels, p_min)
    dsig_drho = sigmoid(params.rho)
    if prior is None:
        return ObjectiveGrad(risk, risk, 0.0, g_w, g_w * sample.noise * dsig_drho)
    if prior.mu.shape != params.mu.shape:
        raise ValueError("prior does not match parameter shapes")
    kind = kind or ObjectiveKind()
    sig_q = params.sigma
    kl = pacbayes.gaussian_kl(params, prior)
    value, d_r, d_kl = pacbayes.objective_and_partials(risk, kl, m, delta, kind)
    gkl_mu, gkl_sig = pacbayes.gaussian_kl_grads(params.mu, sig_q, prior.mu, prior.sigma)
    g_mu = d_r * g_w + d_kl * gkl_mu
    g_rho = (d_r * g_w * sample.noise + d_kl * gkl_sig) * dsig_drho
    return ObjectiveGrad(value, risk, kl, g_mu, g_rho)


def sgd_momentum_step(state: OptimizerState, params: GaussianNetParams, grad_mu, grad_rho):
    """Classical momentum: v <- beta v + g, theta <- theta - lr v."""
    if grad_mu.shape != params.mu.shape or grad_rho.shape != params.rho.shape:
        raise ValueError("gradient shapes do not match parameters")
    vel_mu = state.momentum * state.vel_mu + grad_mu
    vel_rho = state.momentum * state.vel_rho + grad_rho
    new = GaussianNetParams(params.sizes, params.mu - state.lr * vel_mu, params.rho - state.lr * vel_rho)
    return new, replace(state, vel_mu=vel_mu, vel_rho=vel_rho)


def minibatches(rng, n, batch_size):
    """Shuffled index batches; the last one keeps its natural (smaller) size."""
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def erm_epochs(params, x, y, *, epochs, batch_size, lr, momentum, p_min, dropout, rng):
    """Deterministic-weight ERM on the means only; rho is left untouched."""
    if len(y) == 0:
        raise ValueError("cannot train on an empty dataset")
    if not (0.0 <= dropout < 1.0):
        raise ValueError("dropout_rate must lie in [0, 1)")
    mu = params.mu.copy()
    vel = np.zeros_like(mu)
    for _ in range(epochs):
        for idx in minibatches(rng, len(y), batch_size):
            masks = dropout_masks(rng, params.sizes, len(idx), dropout)
            _, g = data_loss_and_grad(params.sizes, mu, x[idx], y[idx], p_min, masks)
            vel = momentum * vel + g
            mu = mu - lr * vel
    return GaussianNetParams(params.sizes, mu, params.rho.copy())


def train_prior_erm(
    x,
    y,
    sizes,
    *,
    sigma_prior=0.025,
    dropout_rate=0.2,
    epochs=10,
    batch_size=25,
    lr=5e-3,
    momentum=0.99,
    p_min=1e-4,
    seed=0,
    init=None,
):
    """Single-node prior learning by ERM; see ``federation.run_federated_erm``
    for the multi-client variant."""
    rng = np.random.default_rng(seed)
    start = init if init is not None else init_prior_random(sizes, sigma_prior, rng)
    return erm_epochs(
        start, np.asarray(x), np.asarray(y), epochs=epochs, batch_size=batch_size,
        lr=lr, momentum=momentum, p_min=p_min, dropout=dropout_rate, rng=rng,
    )


def empirical_risk(sizes, w, x, labels, loss="zero_one", p_min=1e-4):
    logits = forward_flat(sizes, w, x)
    if loss == "zero_one":
        return float(zero_one_loss(logits, labels).mean())
    return float(bounded_cross_entropy(logits, labels, p_min)[0].mean())
