"""Bi-level search: composite losses, virtual step, hypergradient, epochs.

Parameters live in one flat ``dict[str, ndarray]``. An *objective* tells the
optimizer which names are inner (network weights ``w``) and which are outer
(architecture logits ``alpha`` plus, when present, the dropout logits), and
evaluates the train/valid losses with gradients for every parameter.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal, NamedTuple, Protocol, Sequence

import numpy as np

from .autodiff import NonFiniteError, Tensor, evaluate, ops, value_and_grad
from .searchspace import Network
from .uncertainty import (DEFAULT_TEMPERATURE, MaskSampler, mc_probabilities, mc_regularizer,
                          predictive_variance)

log = logging.getLogger(__name__)

MODES = ("darts", "darts_cd", "mudarts")
Mode = Literal["darts", "darts_cd", "mudarts"]
DROPOUT = "dropout.logits"


@dataclass(frozen=True)
class BilevelConfig:
    """Optimizer settings; ``xi=None`` means "use ``w_lr``"."""

    w_lr: float = 0.025
    w_momentum: float = 0.9
    w_weight_decay: float = 0.0243
    alpha_lr: float = 0.05
    xi: float | None = None
    order: Literal["first", "second"] = "second"
    fd_scale: float = 0.01

    def __post_init__(self):
        if self.order not in ("first", "second"):
            raise ValueError(f"order must be 'first' or 'second', got {self.order!r}")
        if self.xi is not None and self.xi < 0:
            raise ValueError("xi must be nonnegative")
        if self.fd_scale <= 0:
            raise ValueError("fd_scale must be positive")
        if min(self.w_lr, self.alpha_lr, self.w_weight_decay) < 0 or not 0 <= self.w_momentum < 1:
            raise ValueError("learning rates and weight decay must be >= 0, momentum in [0, 1)")

    @property
    def effective_xi(self) -> float:
        """Virtual-step rate actually used; first order switches it off."""
        if self.order == "first":
            return 0.0
        return self.w_lr if self.xi is None else self.xi


@dataclass
class LossReport:
    ce_train: float = 0.0
    l_mc: float = 0.0
    ce_valid: float = 0.0
    pred_var: float = 0.0
    total_train: float = 0.0
    total_valid: float = 0.0

    FIELDS = ("ce_train", "l_mc", "ce_valid", "pred_var", "total_train", "total_valid")

    def consistent(self, tol: float = 1e-12) -> bool:
        return (abs(self.total_train - (self.ce_train + self.l_mc)) <= tol
                and abs(self.total_valid - (self.ce_valid + self.pred_var)) <= tol)

    @classmethod
    def mean(cls, reports: Sequence["LossReport"]) -> "LossReport":
        if not reports:
            return cls()
        return cls(**{f: float(np.mean([getattr(r, f) for r in reports])) for f in cls.FIELDS})

    def row(self) -> dict:
        return {f: getattr(self, f) for f in self.FIELDS}


class Evaluation(NamedTuple):
    parts: dict
    grads: dict
    aux: dict


class Objective(Protocol):
    inner: tuple[str, ...]
    outer: tuple[str, ...]

    def train(self, params: dict, batch, seed: int) -> Evaluation: ...

    def valid(self, params: dict, batch, seed: int) -> Evaluation: ...


def check_labels(y: np.ndarray, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.size == 0:
        raise ValueError("batch is empty")
    if not np.issubdtype(y.dtype, np.integer) or y.min() < 0 or y.max() >= n_classes:
        raise ValueError(f"labels must be integers in [0, {n_classes})")
    return y


def cross_entropy_logits(logits: Tensor, y: np.ndarray) -> Tensor:
    onehot = np.eye(logits.shape[1])[y]
    return ops.neg(ops.mean(ops.sum(ops.mul(ops.log_softmax(logits), onehot), axis=1)))


def cross_entropy_probs(probs: Tensor, y: np.ndarray) -> Tensor:
    onehot = np.eye(probs.shape[1])[y]
    return ops.neg(ops.mean(ops.log(ops.sum(ops.mul(probs, onehot), axis=1))))


class NetworkObjective:
    """The three search modes over a :class:`Network`.

    * ``darts``: CE only, no dropout sites, deterministic validation.
    * ``darts_cd``: train CE + L_MC; validation CE on the MC predictive mean.
    * ``mudarts``: as ``darts_cd`` plus the predictive variance in validation.
    """

    def __init__(self, net: Network, mode: Mode, n_data: int, *, T: int = 20,
                 temperature: float = DEFAULT_TEMPERATURE, length_scale: float = 1e-2,
                 tau_inverse: float = 0.0):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if (mode == "darts") != (net.n_sites == 0):
            raise ValueError("mode 'darts' needs a network without dropout sites and vice versa")
        if mode != "darts" and T < 2:
            raise ValueError("validation needs T >= 2 MC samples")
        self.net, self.mode, self.n_data, self.T = net, mode, n_data, T
        self.temperature, self.length_scale, self.tau_inverse = temperature, length_scale, tau_inverse
        names = net.weight_names()
        self.inner = tuple(names)
        outer = ["alpha.normal", "alpha.reduce"] if net.has_alpha else []
        if net.n_sites:
            outer.append(DROPOUT)
        self.outer = tuple(outer)
        self.units = [s.units for s in net.sites]

    @property
    def stochastic(self) -> bool:
        return self.mode != "darts"

    def train_terms(self, leaves, batch, seed, stats=None):
        x, y = batch
        y = check_labels(y, self.net.spec.n_classes)
        sampler = MaskSampler(seed) if self.stochastic else None
        logits = self.net.logits(leaves, x, sampler=sampler, temperature=self.temperature,
                                 stats=stats)
        ce = cross_entropy_logits(logits, y)
        if not self.stochastic:
            return ce, None
        reg = mc_regularizer(leaves[DROPOUT], self.net.site_weight_norms(leaves), self.units,
                             self.n_data, self.length_scale)
        return ce, reg

    def train(self, params, batch, seed) -> Evaluation:
        stats: dict = {}

        def loss(leaves):
            ce, reg = self.train_terms(leaves, batch, seed, stats)
            total = ce if reg is None else ops.add(ce, reg)
            return total, {"ce": ce.item(), "reg": 0.0 if reg is None else reg.item()}

        total, grads, aux = value_and_grad(loss, params)
        parts = {"ce_train": aux["ce"], "l_mc": aux["reg"], "total_train": total}
        return Evaluation(parts, grads, {"bn_stats": stats})

    def valid_terms(self, leaves, batch, seed):
        x, y = batch
        y = check_labels(y, self.net.spec.n_classes)
        if not self.stochastic:
            return cross_entropy_logits(self.net.logits(leaves, x), y), None
        probs = mc_probabilities(
            lambda xs, s: self.net.logits(leaves, xs, sampler=s, temperature=self.temperature),
            x, self.T, seed)
        ce = cross_entropy_probs(ops.mean(probs, axis=0), y)
        if self.mode == "darts_cd":
            return ce, None
        return ce, predictive_variance(probs, self.tau_inverse)

    def valid(self, params, batch, seed) -> Evaluation:
        def loss(leaves):
            ce, var = self.valid_terms(leaves, batch, seed)
            total = ce if var is None else ops.add(ce, var)
            return total, {"ce": ce.item(), "var": 0.0 if var is None else var.item()}

        total, grads, aux = value_and_grad(loss, params)
        parts = {"ce_valid": aux["ce"], "pred_var": aux["var"], "total_valid": total}
        return Evaluation(parts, grads, {})


class FunctionObjective:
    """Objective from two scalar functions of the parameter leaves.

    Used for small analytic problems; ``train_fn(leaves, batch)`` and
    ``valid_fn(leaves, batch)`` return scalar tensors. Seeds are ignored.
    """

    def __init__(self, train_fn, valid_fn, inner: Sequence[str], outer: Sequence[str]):
        self.train_fn, self.valid_fn = train_fn, valid_fn
        self.inner, self.outer = tuple(inner), tuple(outer)

    def train(self, params, batch, seed) -> Evaluation:
        total, grads, _ = value_and_grad(lambda lv: self.train_fn(lv, batch), params)
        return Evaluation({"ce_train": total, "l_mc": 0.0, "total_train": total}, grads, {})

    def valid(self, params, batch, seed) -> Evaluation:
        total, grads, _ = value_and_grad(lambda lv: self.valid_fn(lv, batch), params)
        return Evaluation({"ce_valid": total, "pred_var": 0.0, "total_valid": total}, grads, {})


# -- steps -------------------------------------------------------------------

def step_seed(base: int, *path: int) -> int:
    """Deterministic 32-bit seed for one random draw site of a run."""
    return int(np.random.SeedSequence([int(base) & 0xFFFFFFFF, *map(int, path)]).generate_state(1)[0])


def _check_finite(grads: dict, what: str) -> None:
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite {what} gradient for {k}")


def virtual_step(params: dict, objective: Objective, batch, cfg: BilevelConfig, seed: int,
                 train_eval: Evaluation | None = None) -> tuple[dict, Evaluation]:
    """w' = w - xi * grad_w(total_train); returns a new dict, ``params`` untouched."""
    xi = cfg.effective_xi
    ev = train_eval or objective.train(params, batch, seed)
    _check_finite({k: ev.grads[k] for k in objective.inner}, "train")
    out = dict(params)
    if xi:
        for k in objective.inner:
            out[k] = params[k] - xi * ev.grads[k]
    return out, ev


@dataclass
class ArchGradient:
    grads: dict
    valid: Evaluation
    train: Evaluation
    eps: float = 0.0
    second_order_skipped: bool = False


def arch_gradient(params: dict, objective: Objective, train_batch, valid_batch,
                  cfg: BilevelConfig, seed: int) -> ArchGradient:
    """Hypergradient over the outer variables.

    First-order part: grad of total_valid at (alpha, w'). Second-order part:
    -xi * [grad_outer total_train(w+) - grad_outer total_train(w-)] / (2 eps),
    with w+- = w +- eps * grad_w total_valid(alpha, w') and
    eps = fd_scale / ||grad_w total_valid||. Both w+- evaluations share the
    same MC seed.
    """
    train_seed, valid_seed, fd_seed = (step_seed(seed, r) for r in (0, 1, 2))
    w_virtual, train_ev = virtual_step(params, objective, train_batch, cfg, train_seed)
    val_ev = objective.valid(w_virtual, valid_batch, valid_seed)
    _check_finite(val_ev.grads, "valid")
    grads = {k: val_ev.grads[k].copy() for k in objective.outer}
    xi = cfg.effective_xi
    result = ArchGradient(grads, val_ev, train_ev)
    if not xi:
        return result
    v = {k: val_ev.grads[k] for k in objective.inner}
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in v.values())))
    if norm == 0.0:
        log.warning("zero validation gradient w.r.t. w; second-order term skipped")
        result.second_order_skipped = True
        return result
    eps = cfg.fd_scale / norm
    plus, minus = dict(params), dict(params)
    for k in objective.inner:
        plus[k] = params[k] + eps * v[k]
        minus[k] = params[k] - eps * v[k]
    gp = objective.train(plus, train_batch, fd_seed).grads
    gm = objective.train(minus, train_batch, fd_seed).grads
    for k in objective.outer:
        grads[k] = grads[k] - xi * (gp[k] - gm[k]) / (2.0 * eps)
    _check_finite(grads, "hyper")
    result.eps = eps
    return result


@dataclass
class SearchState:
    params: dict
    momentum: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    epoch: int = 0
    step: int = 0

    def copy(self) -> "SearchState":
        return SearchState({k: v.copy() for k, v in self.params.items()},
                           {k: v.copy() for k, v in self.momentum.items()},
                           {k: (a.copy(), b.copy()) for k, (a, b) in self.buffers.items()},
                           self.epoch, self.step)


def sgd_momentum(params: dict, grads: dict, momentum: dict, names: Sequence[str], lr: float,
                 mu: float, weight_decay: float, decay_names: set) -> None:
    """In-place heavy-ball SGD: buf = mu*buf + g (+ wd*w); w -= lr*buf."""
    for k in names:
        g = grads[k] + weight_decay * params[k] if k in decay_names else grads[k]
        buf = momentum.get(k)
        buf = g if buf is None else mu * buf + g
        momentum[k] = buf
        params[k] = params[k] - lr * buf


def search_step(state: SearchState, objective: Objective, train_batch, valid_batch,
                cfg: BilevelConfig, seed: int) -> LossReport:
    """(1) outer step along the hypergradient; (2) SGD-momentum inner step."""
    hg = arch_gradient(state.params, objective, train_batch, valid_batch, cfg, step_seed(seed, 0))
    for k in objective.outer:
        state.params[k] = state.params[k] - cfg.alpha_lr * hg.grads[k]
    ev = objective.train(state.params, train_batch, step_seed(seed, 1))
    _check_finite(ev.grads, "train")
    inner = list(objective.inner) + ([DROPOUT] if DROPOUT in objective.outer else [])
    sgd_momentum(state.params, ev.grads, state.momentum, inner, cfg.w_lr, cfg.w_momentum,
                 cfg.w_weight_decay, set(objective.inner))
    net = getattr(objective, "net", None)
    if net is not None and ev.aux.get("bn_stats"):
        state.buffers = net.update_buffers(state.buffers, ev.aux["bn_stats"])
    state.step += 1
    return LossReport(ce_train=ev.parts["ce_train"], l_mc=ev.parts["l_mc"],
                      total_train=ev.parts["total_train"],
                      ce_valid=hg.valid.parts["ce_valid"], pred_var=hg.valid.parts["pred_var"],
                      total_valid=hg.valid.parts["total_valid"])


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def search_epoch(state: SearchState, objective: Objective, train, valid, cfg: BilevelConfig,
                 batch_size: int, seed: int) -> tuple[SearchState, list[LossReport]]:
    """One pass over the train split, pairing each batch with a valid batch."""
    xt, yt = train
    xv, yv = valid
    rng = np.random.default_rng(step_seed(seed, state.epoch, 0xE))
    tb = batches(len(yt), batch_size, rng)
    vb = batches(len(yv), batch_size, rng)
    reports = []
    for i, idx in enumerate(tb):
        jdx = vb[i % len(vb)]
        reports.append(search_step(state, objective, (xt[idx], yt[idx]), (xv[jdx], yv[jdx]), cfg,
                                   step_seed(seed, state.epoch, i)))
    state.epoch += 1
    return state, reports


def evaluate_losses(params: dict, objective: Objective, train, valid, seed: int) -> LossReport:
    """Full-batch loss values (no update), for epoch-level logging."""
    tr = evaluate(lambda lv: objective.train_terms(lv, train, step_seed(seed, 0)), params)
    va = evaluate(lambda lv: objective.valid_terms(lv, valid, step_seed(seed, 1)), params)
    ce_t, reg = (float(t.item()) if t is not None else 0.0 for t in tr)
    ce_v, var = (float(t.item()) if t is not None else 0.0 for t in va)
    return LossReport(ce_t, reg, ce_v, var, ce_t + reg, ce_v + var)


# -- reference loop ----------------------------------------------------------

def reference_darts_step(net: Network, params: dict, momentum: dict, buffers: dict,
                         train_batch, valid_batch, cfg: BilevelConfig, seed: int):
    """Plain second-order DARTS step written directly against the network.

    Kept independent of :class:`NetworkObjective` so the ``darts`` mode can be
    checked against it; it never touches the uncertainty module.
    """
    weights = net.weight_names()
    alphas = ["alpha.normal", "alpha.reduce"]
    xi = cfg.effective_xi

    def ce(batch):
        x, y = batch
        return lambda lv: cross_entropy_logits(net.logits(lv, x), y)

    # virtual step
    _, g, _ = value_and_grad(ce(train_batch), params)
    virtual = dict(params)
    if xi:
        for k in weights:
            virtual[k] = params[k] - xi * g[k]
    _, gv, _ = value_and_grad(ce(valid_batch), virtual)
    d_alpha = {k: gv[k].copy() for k in alphas}
    if xi:
        norm = float(np.sqrt(sum(float(np.sum(gv[k] * gv[k])) for k in weights)))
        if norm > 0:
            eps = cfg.fd_scale / norm
            plus = {**params, **{k: params[k] + eps * gv[k] for k in weights}}
            minus = {**params, **{k: params[k] - eps * gv[k] for k in weights}}
            _, gp, _ = value_and_grad(ce(train_batch), plus)
            _, gm, _ = value_and_grad(ce(train_batch), minus)
            for k in alphas:
                d_alpha[k] = d_alpha[k] - xi * (gp[k] - gm[k]) / (2.0 * eps)
    params = dict(params)
    for k in alphas:
        params[k] = params[k] - cfg.alpha_lr * d_alpha[k]
    stats: dict = {}
    x, y = train_batch
    _, g, _ = value_and_grad(lambda lv: cross_entropy_logits(net.logits(lv, x, stats=stats), y), params)
    momentum = dict(momentum)
    for k in weights:
        d = g[k] + cfg.w_weight_decay * params[k]
        momentum[k] = d if k not in momentum else cfg.w_momentum * momentum[k] + d
        params[k] = params[k] - cfg.w_lr * momentum[k]
    return params, momentum, net.update_buffers(buffers, stats)


__all__ = [
    "ArchGradient", "BilevelConfig", "Evaluation", "FunctionObjective", "LossReport", "MODES",
    "NetworkObjective",
    "SearchState", "arch_gradient", "batches", "cross_entropy_logits", "cross_entropy_probs",
    "evaluate_losses", "reference_darts_step", "search_epoch", "search_step", "step_seed",
    "virtual_step",
]
