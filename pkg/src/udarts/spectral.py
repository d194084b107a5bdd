"""Dominant Hessian eigenvalues by finite-difference HVPs and power iteration."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, fields
from typing import Callable, Sequence

import numpy as np

from .autodiff import NonFiniteError

log = logging.getLogger(__name__)

GradFn = Callable[[np.ndarray], np.ndarray]

DEFAULT_EPS = 1e-3
DEFAULT_ITERS = 20
DEFAULT_TOL = 1e-3
PROBE_SIZE = 256


def hvp(grad_fn: GradFn, x: np.ndarray, v: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """(g(x + e v) - g(x - e v)) / 2e with e = eps / ||v||."""
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ValueError("direction must be nonzero")
    e = eps / norm
    gp = grad_fn(x + e * v)
    gm = grad_fn(x - e * v)
    if not (np.all(np.isfinite(gp)) and np.all(np.isfinite(gm))):
        raise NonFiniteError("non-finite gradient at a perturbed point")
    return (gp - gm) / (2.0 * e)


@dataclass
class EigenEstimate:
    value: float          # signed estimate of the dominant eigenvalue
    magnitude: float      # |lambda| estimate, ||Hv|| at the final iterate
    rayleigh: float       # v^T H v for the final unit iterate
    iterations: int
    residual: float       # ||Hv - rayleigh * v|| for the unit iterate
    converged: bool
    degenerate: bool
    vector: np.ndarray


def power_iteration(matvec: Callable[[np.ndarray], np.ndarray], n: int, iters: int = DEFAULT_ITERS,
                    tol: float = DEFAULT_TOL, rng: np.random.Generator | None = None,
                    v0: np.ndarray | None = None, zero_tol: float = 1e-10) -> EigenEstimate:
    """Power iteration v <- Hv/||Hv|| for the eigenvalue of largest magnitude.

    The magnitude is tracked as ||Hv|| of the unit iterate, which converges
    even when the top of the spectrum is a near +-pair; the sign comes from the
    Rayleigh quotient. Iteration stops once the residual or the relative change
    of the magnitude falls below ``tol``; convergence is declared only on the
    residual.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = rng or np.random.default_rng(0)
    v = rng.standard_normal(n) if v0 is None else np.asarray(v0, dtype=np.float64).copy()
    v /= np.linalg.norm(v)
    zero_runs, prev = 0, None
    mag = ray = res = 0.0
    for it in range(1, iters + 1):
        hv = matvec(v)
        mag = float(np.linalg.norm(hv))
        ray = float(v @ hv)
        if mag <= zero_tol:
            zero_runs += 1
            if zero_runs >= 3:
                log.warning("Hessian-vector product vanished three times; returning 0")
                return EigenEstimate(0.0, 0.0, ray, it, mag, False, True, v)
            v = rng.standard_normal(n)
            v /= np.linalg.norm(v)
            continue
        zero_runs = 0
        value = np.copysign(mag, ray) if ray != 0 else mag
        res = float(np.linalg.norm(hv - ray * v))
        if res < tol or (prev is not None and abs(mag - prev) <= tol * mag):
            return EigenEstimate(float(value), mag, ray, it, res, res < tol, False, v)
        prev = mag
        v = hv / mag
    value = np.copysign(mag, ray) if ray != 0 else mag
    return EigenEstimate(float(value), mag, ray, iters, res, res < tol, False, v)


def lambda_max(grad_fn: GradFn, x: np.ndarray, iters: int = DEFAULT_ITERS, tol: float = DEFAULT_TOL,
               rng: np.random.Generator | None = None, eps: float = DEFAULT_EPS,
               v0: np.ndarray | None = None) -> EigenEstimate:
    """Dominant Hessian eigenvalue of the loss whose gradient is ``grad_fn`` at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    return power_iteration(lambda v: hvp(grad_fn, x, v, eps), x.size, iters, tol, rng, v0)


# -- parameter-dict plumbing --------------------------------------------------

def flatten(params: dict, names: Sequence[str]) -> np.ndarray:
    return np.concatenate([np.ravel(params[k]) for k in names]) if names else np.zeros(0)


def unflatten(vec: np.ndarray, like: dict, names: Sequence[str]) -> dict:
    out, i = {}, 0
    for k in names:
        n = like[k].size
        out[k] = vec[i:i + n].reshape(like[k].shape)
        i += n
    return out


def restricted_grad_fn(loss_grads: Callable[[dict], dict], params: dict, names: Sequence[str]) -> GradFn:
    """Gradient over ``names`` only, other parameters held at ``params``."""
    def fn(vec):
        p = {**params, **unflatten(vec, params, names)}
        g = loss_grads(p)
        return flatten(g, names)
    return fn


@dataclass
class SpectralReport:
    """Dominant-eigenvalue magnitudes |lambda| at one snapshot.

    ``lambda_max_w_valid`` is the w-Hessian of the validation loss, kept next
    to the alpha-Hessian because both readings of "L_valid" are in use.
    """

    epoch: int
    lambda_max_alpha: float
    lambda_max_w: float
    lambda_max_w_valid: float
    iterations_alpha: int
    iterations_w: int
    iterations_w_valid: int
    residual_alpha: float
    residual_w: float
    residual_w_valid: float
    converged_alpha: bool
    converged_w: bool
    converged_w_valid: bool

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> list:
        return [getattr(self, c) for c in self.columns()]


ALPHA_NAMES = ("alpha.normal", "alpha.reduce")


def probe_batch(data, size: int = PROBE_SIZE):
    x, y = data
    return x[:size], y[:size]


TARGETS = ("alpha", "w", "w_valid")


def spectrum(objective, params: dict, train_probe, valid_probe, seed: int, epoch: int = 0,
             iters: int = DEFAULT_ITERS, tol: float = DEFAULT_TOL,
             eps: float = DEFAULT_EPS, targets: Sequence[str] = TARGETS) -> SpectralReport:
    """|lambda_max| of the Hessians of total_valid over alpha and over w, and of
    total_train over w.

    The MC seed is fixed for every gradient evaluation, so each Hessian is that
    of one deterministic function and repeated calls agree bit-exactly.
    Targets left out of ``targets`` are reported as NaN with zero iterations.
    """
    unknown = set(targets) - set(TARGETS)
    if unknown:
        raise ValueError(f"unknown spectral targets {sorted(unknown)}")
    alpha_names = [k for k in ALPHA_NAMES if k in params]
    w_names = list(objective.inner)
    valid = lambda p: objective.valid(p, valid_probe, seed).grads
    train = lambda p: objective.train(p, train_probe, seed).grads
    runs = []
    plan = [(valid, alpha_names), (train, w_names), (valid, w_names)]
    for i, (target, (grads, names)) in enumerate(zip(TARGETS, plan)):
        if target not in targets:
            runs.append(EigenEstimate(np.nan, np.nan, np.nan, 0, np.nan, False, False, np.zeros(0)))
            continue
        if not names:
            runs.append(EigenEstimate(0.0, 0.0, 0.0, 0, 0.0, False, True, np.zeros(0)))
            continue
        fn = restricted_grad_fn(grads, params, names)
        runs.append(lambda_max(fn, flatten(params, names), iters, tol,
                               np.random.default_rng([seed, i]), eps))
    ea, ew, ev = runs
    return SpectralReport(epoch, ea.magnitude, ew.magnitude, ev.magnitude,
                          ea.iterations, ew.iterations, ev.iterations,
                          ea.residual, ew.residual, ev.residual,
                          ea.converged, ew.converged, ev.converged)


def track_spectrum(snapshots: Sequence[tuple[int, dict]], objective, train_probe, valid_probe,
                   seed: int, every_n_epochs: int = 1, **kw) -> list[SpectralReport]:
    """One report per snapshot whose epoch is a multiple of ``every_n_epochs``."""
    if every_n_epochs < 1:
        raise ValueError("every_n_epochs must be >= 1")
    return [spectrum(objective, params, train_probe, valid_probe, seed, epoch, **kw)
            for epoch, params in snapshots if epoch % every_n_epochs == 0]


def reports_to_csv(reports: Sequence[SpectralReport]) -> str:
    buf = io.StringIO()
    buf.write("# udarts spectral report v1\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SpectralReport.columns())
    for r in reports:
        w.writerow([repr(float(v)) if isinstance(v, float) else v for v in r.row()])
    return buf.getvalue()
