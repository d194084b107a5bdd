"""Concrete dropout, Monte-Carlo prediction and the two uncertainty losses.

``CALLS`` counts entries into the variance, regularizer and mask paths so a
run can prove that a configuration never touched them.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, ops

log = logging.getLogger(__name__)

CALLS: Counter = Counter()

DEFAULT_P = 0.1
DEFAULT_TEMPERATURE = 0.1
LOGIT_CLAMP = 20.0
_U_EPS = 1e-12


def logit(p: float) -> float:
    return float(np.log(p) - np.log1p(-p))


@dataclass
class DropoutParams:
    """Per-site dropout logits plus the variational prior settings."""

    logits: np.ndarray
    temperature: float = DEFAULT_TEMPERATURE
    length_scale: float = 1e-2
    tau_inverse: float = 0.0

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.length_scale <= 0:
            raise ValueError("length_scale must be positive")
        if self.tau_inverse < 0:
            raise ValueError("tau_inverse must be nonnegative")
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("dropout logits must be finite")

    @classmethod
    def initial(cls, n_sites: int, p: float = DEFAULT_P, **kw) -> "DropoutParams":
        return cls(np.full(n_sites, logit(p)), **kw)

    @property
    def p(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logits))


class MaskSampler:
    """Uniform noise for ``groups`` stacked Monte-Carlo passes.

    Pass ``t`` draws from its own generator seeded by ``(seed, t)``, so a
    stacked batch of T passes reproduces T separate passes and a sampler
    rebuilt from the same seed replays identical noise.
    """

    def __init__(self, seed: int, groups: int = 1):
        self.seed = int(seed)
        self.groups = int(groups)
        self._rngs = [np.random.default_rng([self.seed, t]) for t in range(self.groups)]

    def uniform(self, shape: Sequence[int]) -> np.ndarray:
        n = shape[0]
        if n % self.groups:
            raise ValueError(f"batch {n} not divisible into {self.groups} passes")
        per = (n // self.groups,) + tuple(shape[1:])
        u = np.concatenate([r.random(per) for r in self._rngs]) if self.groups > 1 \
            else self._rngs[0].random(per)
        return np.clip(u, _U_EPS, 1.0 - _U_EPS)


def concrete_mask(site_logit: Tensor, temperature: float, shape=None, rng=None,
                  u: np.ndarray | None = None) -> Tensor:
    """Relaxed keep-mask 1 - sigmoid((logit p + logit u) / temperature).

    Entries lie in (0, 1) with mean approaching 1 - p as the temperature
    goes to zero. Supply ``u`` to reuse fixed uniform draws.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    CALLS["concrete_mask"] += 1
    if u is None:
        rng = np.random.default_rng() if rng is None else rng
        u = np.clip(rng.random(shape), _U_EPS, 1.0 - _U_EPS)
    noise = np.log(u) - np.log1p(-u)
    z = ops.add(site_logit, noise)
    return ops.sigmoid(ops.scale(z, -1.0 / temperature))


def apply_dropout(x: Tensor, site_logit: Tensor, temperature: float, sampler: MaskSampler) -> Tensor:
    """x * mask / (1 - p): inverted concrete dropout with a mask per unit."""
    mask = concrete_mask(site_logit, temperature, u=sampler.uniform(x.shape))
    inv_keep = ops.add(ops.exp(site_logit), 1.0)  # 1 / (1 - sigmoid(logit))
    return ops.mul(ops.mul(x, mask), inv_keep)


@dataclass
class McPrediction:
    """T sampled class-probability tensors of shape (T, B, D)."""

    samples: np.ndarray
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 3:
            raise ValueError("samples must have shape (T, B, D)")

    @property
    def T(self) -> int:
        return self.samples.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)


def mc_probabilities(logits_fn: Callable[[np.ndarray, MaskSampler], Tensor], x: np.ndarray,
                     T: int, seed: int) -> Tensor:
    """Stack T stochastic passes into one batch; returns softmax samples (T, B, D).

    ``logits_fn(x_stacked, sampler)`` must treat the batch as ``sampler.groups``
    independent passes (per-group normalization statistics).
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    b = x.shape[0]
    xs = np.concatenate([x] * T, axis=0) if T > 1 else x
    logits = logits_fn(xs, MaskSampler(seed, T))
    probs = ops.softmax(logits)
    return ops.reshape(probs, (T, b) + probs.shape[1:])


def mc_predict(logits_fn, x: np.ndarray, T: int, seed: int) -> McPrediction:
    probs = mc_probabilities(logits_fn, x, T, seed)
    return McPrediction(probs.data.copy(), seed=seed)


def predictive_variance(samples, tau_inverse: float = 0.0):
    """Batch mean of sum_D (1/T) sum_t (y_t - ybar)^2, plus tau_inverse * D.

    Accepts an :class:`McPrediction` (returns float) or a (T, B, D) tensor
    (returns a differentiable scalar).
    """
    CALLS["predictive_variance"] += 1
    if isinstance(samples, McPrediction):
        return float(predictive_variance(Tensor(samples.samples), tau_inverse).data)
    t, _, d = samples.shape
    if t < 2:
        raise ValueError("predictive variance needs T >= 2")
    # Shift by the first sample before centring: identical samples then give
    # exact zeros instead of rounding residue from the mean.
    shifted = ops.sub(samples, ops.reshape(ops.take(samples, 0), (1,) + samples.shape[1:]))
    centred = ops.sub(shifted, ops.mean(shifted, axis=0, keepdims=True))
    per_dim = ops.mean(ops.square(centred), axis=0)
    out = ops.mean(ops.sum(per_dim, axis=1))
    if tau_inverse:
        out = ops.add(out, tau_inverse * d)
    return out


def binary_entropy(site_logits: Tensor) -> Tensor:
    """H(p) for p = sigmoid(logit), via softplus so p near 0 or 1 stays finite."""
    p = ops.sigmoid(site_logits)
    return ops.add(ops.mul(p, ops.softplus(ops.neg(site_logits))),
                   ops.mul(ops.sub(1.0, p), ops.softplus(site_logits)))


def mc_regularizer(site_logits: Tensor, weight_sq_norms: Sequence[Tensor],
                   units: Sequence[int], n_data: int, length_scale: float) -> Tensor:
    """(1/N) sum_sites [ l^2 (1-p)/2 * ||M||^2 - K H(p) ].

    ``weight_sq_norms[s]`` is ||M||^2 of the weights consuming site ``s`` and
    ``units[s]`` its input width K. Logits beyond +-LOGIT_CLAMP are clamped
    (no gradient) and reported.
    """
    CALLS["mc_regularizer"] += 1
    if n_data <= 0:
        raise ValueError("dataset size must be positive")
    n_sites = site_logits.shape[0]
    if len(weight_sq_norms) != n_sites or len(units) != n_sites:
        raise ValueError("one weight norm and unit count per site required")
    clamped = int(np.sum(np.abs(site_logits.data) > LOGIT_CLAMP))
    if clamped:
        log.warning("clamped %d dropout logits to +-%g", clamped, LOGIT_CLAMP)
        site_logits = ops.clip(site_logits, -LOGIT_CLAMP, LOGIT_CLAMP)
    keep = ops.sub(1.0, ops.sigmoid(site_logits))
    norms = ops.concat([ops.reshape(m, (1,)) for m in weight_sq_norms], axis=0)
    weight_term = ops.mul(ops.scale(keep, 0.5 * length_scale ** 2), norms)
    ent_term = ops.mul(binary_entropy(site_logits), np.asarray(units, dtype=np.float64))
    return ops.scale(ops.sum(ops.sub(weight_term, ent_term)), 1.0 / n_data)
