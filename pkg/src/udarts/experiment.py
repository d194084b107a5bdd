"""Experiment runner behind the CLI subcommands.

Every run writes into ``<out>/<mode>/seed_<seed>/``. Artifacts are pure
functions of (config, seed): CSV floats use ``repr``, JSON is key-sorted, and
wall-clock information goes only to ``run.log``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, ops
from .bilevel import (DROPOUT, LossReport, NetworkObjective, SearchState, batches, evaluate_losses,
                      search_epoch, sgd_momentum, step_seed)
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig
from .harness import Dataset, add_input_noise, generate, load_csv, load_idx, perturb_params, split
from .linoracle import lemma_report
from .searchspace import DiscreteArchitecture, Network, discretize
from .spectral import SpectralReport, probe_batch, reports_to_csv, spectrum
from .uncertainty import McPrediction, mc_probabilities, predictive_variance

log = logging.getLogger("udarts")

LOSS_HEADER = "# udarts loss report v1"
TRAIN_HEADER = "# udarts final-training report v1"
EVAL_HEADER = "# udarts evaluation report v1"
SWEEP_HEADER = "# udarts noise sweep v1"

# fixed sub-streams of a run seed (see bilevel.step_seed)
_S_EVAL, _S_SPECTRAL, _S_FINAL, _S_PERTURB, _S_SWEEP = 0xE0, 0x5C, 0xF1, 0xE7, 0x5E


# -- data and model construction ---------------------------------------------

@dataclass(frozen=True)
class Splits:
    train: Dataset
    valid: Dataset

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.train.x.shape[1:])


def load_data(cfg: ExperimentConfig) -> Splits:
    """Dataset per config; the split is fixed by ``dataset.seed``, not the run seed."""
    d = cfg.dataset
    if d.source == "idx":
        data = load_idx(*d.paths, classes=d.classes)
        if data.x.ndim == 3:  # (N, H, W) -> one channel
            data = Dataset(data.x[:, None], data.y, data.classes)
    elif d.source == "csv":
        data = load_csv(d.paths[0], classes=d.classes)
    else:
        data = generate(d.source, d.n, d.noise, d.seed, d.classes)
    if data.classes != d.classes:
        raise ConfigError(f"dataset.classes: config says {d.classes}, data has {data.classes}")
    tr, va = split(data, d.split_fraction, d.seed)
    return Splits(tr, va)


def build_network(cfg: ExperimentConfig, input_shape, arch: DiscreteArchitecture | None = None) -> Network:
    try:
        spec = cfg.network_spec(input_shape)
        return Network(spec, arch=arch)
    except ValueError as err:
        raise ConfigError(f"network: {err}") from None


def build_objective(cfg: ExperimentConfig, net: Network, n_data: int) -> NetworkObjective:
    u = cfg.uncertainty
    return NetworkObjective(net, cfg.mode, n_data, T=u.T, temperature=u.temperature,
                            length_scale=u.length_scale, tau_inverse=u.tau_inverse)


def run_dir(out, mode: str, seed: int) -> Path:
    return Path(out) / mode / f"seed_{seed}"


# -- report writers -------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_csv(path: Path, header: str, columns: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO()
    buf.write(header + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    path.write_text(buf.getvalue())


def write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _json_float(x: float):
    """JSON-safe float: infinities become the strings "Infinity" / "-Infinity"."""
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return x


class RunLog:
    """Timestamped log lines kept out of the reproducible artifacts."""

    def __init__(self, path: Path):
        self.path = path
        self.fh = open(path, "a")

    def __call__(self, msg: str) -> None:
        line = f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {msg}"
        self.fh.write(line + "\n")
        self.fh.flush()
        log.info(msg)

    def close(self) -> None:
        self.fh.close()


# -- measurements -------------------------------------------------------------

def mc_valid_variance(objective: NetworkObjective, params: dict, x: np.ndarray, T: int, seed: int) -> float:
    """Predictive variance of the search network on ``x`` (batch-statistics BN).

    Measured for every stochastic mode alike, independent of whether the
    variance is part of that mode's loss; 0 for the deterministic mode.
    """
    if not objective.stochastic:
        return 0.0
    leaves = {k: Tensor(v) for k, v in params.items()}
    probs = mc_probabilities(
        lambda xs, s: objective.net.logits(leaves, xs, sampler=s, temperature=objective.temperature),
        x, T, seed)
    return float(predictive_variance(McPrediction(probs.data)))


def predict(net: Network, params: dict, buffers: dict, x: np.ndarray, T: int, seed: int,
            temperature: float) -> np.ndarray:
    """Inference-mode class probabilities, shape (T, B, D); T = 1 without dropout."""
    leaves = {k: Tensor(v) for k, v in params.items()}
    if net.n_sites == 0:
        return ops.softmax(net.logits(leaves, x, running=buffers)).data[None]
    probs = mc_probabilities(
        lambda xs, s: net.logits(leaves, xs, sampler=s, temperature=temperature, running=buffers),
        x, T, seed)
    return probs.data


def score(probs: np.ndarray, y: np.ndarray) -> dict:
    mean = probs.mean(axis=0)
    acc = float(np.mean(np.argmax(mean, axis=1) == y))
    nll = float(-np.mean(np.log(np.clip(mean[np.arange(len(y)), y], 1e-300, None))))
    var = float(predictive_variance(McPrediction(probs))) if probs.shape[0] > 1 else 0.0
    return {"accuracy": acc, "nll": nll, "pred_var": var}


# -- search -----------------------------------------------------------------------

LOSS_COLUMNS = ["epoch", *LossReport.FIELDS, "mc_var_valid"]


def spectral_epochs(epochs: int, every: int) -> list[int]:
    marks = set() if every == 0 else set(range(0, epochs + 1, every))
    marks.add(epochs)
    return sorted(marks)


def search(cfg: ExperimentConfig, seed: int, out) -> Path:
    """Bi-level search for one seed; returns the run directory."""
    data = load_data(cfg)
    rd = run_dir(out, cfg.mode, seed)
    rd.mkdir(parents=True, exist_ok=True)
    runlog = RunLog(rd / "run.log")
    try:
        runlog(f"search mode={cfg.mode} seed={seed}")
        (rd / "config.json").write_text(cfg.canonical_json())
        net = build_network(cfg, data.input_shape)
        obj = build_objective(cfg, net, len(data.train))
        params = net.init_params(np.random.default_rng(seed), p=cfg.uncertainty.init_p)
        state = SearchState(params, buffers=net.init_buffers())
        bcfg = cfg.bilevel.build()
        s = cfg.search
        eval_seed = step_seed(seed, _S_EVAL)
        marks = spectral_epochs(s.epochs, s.spectral_every)
        rows = []

        def record():
            rep = evaluate_losses(state.params, obj, data.train.arrays, data.valid.arrays, eval_seed)
            var = mc_valid_variance(obj, state.params, data.valid.x, cfg.uncertainty.eval_T, eval_seed)
            rows.append([state.epoch, *rep.row().values(), var])
            if state.epoch in marks:
                snapshot(cfg, state, seed, rd / "checkpoints" / f"epoch_{state.epoch:03d}")
            runlog(f"epoch {state.epoch}: total_valid={rep.total_valid:.6g} mc_var_valid={var:.6g}")

        record()
        for _ in range(s.epochs):
            search_epoch(state, obj, data.train.arrays, data.valid.arrays, bcfg, s.batch_size, seed)
            record()
        write_csv(rd / "losses.csv", LOSS_HEADER, LOSS_COLUMNS, rows)
        save_checkpoint(_ckpt(cfg, state, seed, "search"), rd / "checkpoint")
        arch = discretize(state.params, net.spec.n_nodes, cfg.network.k, net.catalog)
        (rd / "architecture.json").write_text(arch.to_json() + "\n")
        spectra(cfg, seed, out, runlog=runlog)
        runlog("search done")
    finally:
        runlog.close()
    return rd


def _ckpt(cfg, state: SearchState, seed: int, kind: str, meta=None) -> Checkpoint:
    return Checkpoint(mode=cfg.mode, kind=kind, seed=seed, epoch=state.epoch, step=state.step,
                      config_hash=cfg.model_hash(kind), params=state.params,
                      momentum=state.momentum, buffers=state.buffers, meta=meta or {})


def snapshot(cfg, state: SearchState, seed: int, path: Path) -> None:
    save_checkpoint(_ckpt(cfg, state, seed, "search"), path)


def _expected_shapes(net: Network) -> dict:
    return {k: v.shape for k, v in net.init_params(np.random.default_rng(0)).items()}


def spectra(cfg: ExperimentConfig, seed: int, out, runlog: Callable | None = None) -> Path:
    """λ_max trajectory from the search snapshots into ``spectra.csv``."""
    rd = run_dir(out, cfg.mode, seed)
    snaps = sorted((rd / "checkpoints").glob("epoch_*")) if (rd / "checkpoints").is_dir() else []
    if not snaps:
        raise CheckpointError(f"missing checkpoint: no search snapshots under {rd / 'checkpoints'}")
    data = load_data(cfg)
    net = build_network(cfg, data.input_shape)
    obj = build_objective(cfg, net, len(data.train))
    shapes = _expected_shapes(net)
    s = cfg.search
    tp = probe_batch(data.train.arrays, s.probe_size)
    vp = probe_batch(data.valid.arrays, s.probe_size)
    reports: list[SpectralReport] = []
    for path in snaps:
        ck = load_checkpoint(path, cfg.model_hash("search"), shapes)
        rep = spectrum(obj, ck.params, tp, vp, step_seed(seed, _S_SPECTRAL), ck.epoch,
                       s.spectral_iters, s.spectral_tol, s.spectral_eps, targets=s.spectral_targets)
        reports.append(rep)
        if runlog:
            runlog(f"spectrum epoch {ck.epoch}: lambda_alpha={rep.lambda_max_alpha:.6g}")
    (rd / "spectra.csv").write_text(reports_to_csv(reports))
    return rd


# -- final training and evaluation -------------------------------------------

def _load_arch(rd: Path) -> DiscreteArchitecture:
    path = rd / "architecture.json"
    if not path.is_file():
        raise CheckpointError(f"missing checkpoint: {path} not found (run 'search' first)")
    return DiscreteArchitecture.from_json(path.read_text())


TRAIN_COLUMNS = ["epoch", "ce_train", "l_mc", "total_train", "valid_accuracy"]


def train_final(cfg: ExperimentConfig, seed: int, out) -> Path:
    """Retrain the discretized architecture from scratch on the train split."""
    rd = run_dir(out, cfg.mode, seed)
    arch = _load_arch(rd)
    data = load_data(cfg)
    net = build_network(cfg, data.input_shape, arch)
    obj = build_objective(cfg, net, len(data.train))
    t = cfg.train
    state = SearchState(net.init_params(np.random.default_rng(step_seed(seed, _S_FINAL)),
                                        p=cfg.uncertainty.init_p),
                        buffers=net.init_buffers())
    names = list(obj.inner) + ([DROPOUT] if DROPOUT in state.params else [])
    xt, yt = data.train.arrays
    eval_seed = step_seed(seed, _S_EVAL)
    rows = []
    for epoch in range(t.epochs + 1):
        if epoch:
            rng = np.random.default_rng(step_seed(seed, _S_FINAL, epoch))
            parts = []
            for i, idx in enumerate(batches(len(yt), t.batch_size, rng)):
                ev = obj.train(state.params, (xt[idx], yt[idx]), step_seed(seed, _S_FINAL, epoch, i))
                sgd_momentum(state.params, ev.grads, state.momentum, names, t.lr, t.momentum,
                             t.weight_decay, set(obj.inner))
                state.buffers = net.update_buffers(state.buffers, ev.aux["bn_stats"])
                state.step += 1
                parts.append(ev.parts)
            state.epoch = epoch
            ce, reg, tot = (float(np.mean([p[k] for p in parts])) for k in ("ce_train", "l_mc", "total_train"))
        else:
            ce = reg = tot = math.nan
        probs = predict(net, state.params, state.buffers, data.valid.x, cfg.uncertainty.eval_T,
                        eval_seed, cfg.uncertainty.temperature)
        acc = float(np.mean(np.argmax(probs.mean(0), 1) == data.valid.y))
        rows.append([epoch, ce, reg, tot, acc])
    write_csv(rd / "final_training.csv", TRAIN_HEADER, TRAIN_COLUMNS, rows)
    meta = {"architecture": json.loads(arch.to_json())}
    save_checkpoint(_ckpt(cfg, state, seed, "final", meta), rd / "final")
    return rd


def _load_final(cfg: ExperimentConfig, seed: int, out, data: Splits):
    rd = run_dir(out, cfg.mode, seed)
    arch = _load_arch(rd)
    net = build_network(cfg, data.input_shape, arch)
    ck = load_checkpoint(rd / "final", cfg.model_hash("final"), _expected_shapes(net))
    if ck.kind != "final":
        raise CheckpointError(f"{rd / 'final'}: expected a final checkpoint, found {ck.kind!r}")
    return rd, net, ck


def _perturbed(cfg, net: Network, params: dict, x: np.ndarray, snr_db, sigma, rng_in, rng_par):
    if snr_db is not None:
        x = add_input_noise(x, snr_db, rng_in)
    if sigma:
        params = perturb_params(params, sigma, rng_par, names=net.weight_names())
    return params, x


EVAL_COLUMNS = ["accuracy", "nll", "pred_var", "n", "T", "input_snr_db", "param_sigma"]


def evaluate(cfg: ExperimentConfig, seed: int, out) -> Path:
    """Accuracy, NLL and predictive variance of the final model on the valid split."""
    data = load_data(cfg)
    rd, net, ck = _load_final(cfg, seed, out, data)
    e = cfg.evaluate
    params, x = _perturbed(cfg, net, ck.params, data.valid.x, e.input_snr_db, e.param_sigma,
                           np.random.default_rng(step_seed(seed, _S_PERTURB, 0)),
                           np.random.default_rng(step_seed(seed, _S_PERTURB, 1)))
    T = cfg.uncertainty.eval_T
    probs = predict(net, params, ck.buffers, x, T, step_seed(seed, _S_EVAL), cfg.uncertainty.temperature)
    m = score(probs, data.valid.y)
    snr = "" if e.input_snr_db is None else e.input_snr_db
    sigma = "" if e.param_sigma is None else e.param_sigma
    write_csv(rd / "evaluate.csv", EVAL_HEADER, EVAL_COLUMNS,
              [[m["accuracy"], m["nll"], m["pred_var"], len(data.valid), probs.shape[0], snr, sigma]])
    write_json(rd / "evaluate.json", {**m, "n": len(data.valid), "T": int(probs.shape[0]),
                                      "input_snr_db": None if e.input_snr_db is None else _json_float(e.input_snr_db),
                                      "param_sigma": e.param_sigma, "mode": cfg.mode, "seed": seed})
    return rd


SWEEP_COLUMNS = ["snr_db", "param_sigma", "repetitions", "accuracy_mean", "accuracy_std",
                 "pred_var_mean", "pred_var_std"]


def noise_sweep(cfg: ExperimentConfig, seed: int, out) -> Path:
    """SNR x parameter-sigma grid on the final model; mean and std over repetitions.

    Every cell of the grid uses the same MC seed per repetition, so clean and
    noisy evaluations are paired.
    """
    data = load_data(cfg)
    rd, net, ck = _load_final(cfg, seed, out, data)
    nz = cfg.noise
    T = cfg.uncertainty.eval_T
    rows = []
    for i, snr in enumerate(nz.snr_db):
        for j, sigma in enumerate(nz.param_sigma):
            accs, vars_ = [], []
            for r in range(nz.repetitions):
                params, x = _perturbed(cfg, net, ck.params, data.valid.x, snr, sigma,
                                       np.random.default_rng(step_seed(seed, _S_SWEEP, i, r)),
                                       np.random.default_rng(step_seed(seed, _S_SWEEP, 1000 + j, r)))
                m = score(predict(net, params, ck.buffers, x, T, step_seed(seed, _S_SWEEP, 0xFF, r),
                                  cfg.uncertainty.temperature), data.valid.y)
                accs.append(m["accuracy"])
                vars_.append(m["pred_var"])
            rows.append([snr, sigma, nz.repetitions, float(np.mean(accs)), float(np.std(accs)),
                         float(np.mean(vars_)), float(np.std(vars_))])
    write_csv(rd / "noise_sweep.csv", SWEEP_HEADER, SWEEP_COLUMNS, rows)
    return rd


# -- lemma verification -------------------------------------------------------

def verify_lemmas(cfg: ExperimentConfig, out) -> tuple[Path, bool]:
    """linoracle report as JSON; returns (path, all gated checks passed)."""
    lm = cfg.lemmas
    rep = lemma_report(lm["seed"], lm["n_lemma1"], lm["n_lemma3"], lm["n_jensen"])
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "lemmas.json"
    write_json(path, rep)
    return path, bool(rep["gated_pass"])


# -- multi-seed dispatch --------------------------------------------------------

RUNNERS = {"search": search, "train-final": train_final, "evaluate": evaluate,
           "spectra": spectra, "noise-sweep": noise_sweep}


def worker_count(n_tasks: int) -> int:
    raw = os.environ.get("UDARTS_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"UDARTS_THREADS: expected a positive integer, got {raw!r}") from None
    if cap < 1:
        raise ConfigError(f"UDARTS_THREADS: expected a positive integer, got {raw!r}")
    return max(1, min(cap, n_tasks))


def _call(args):
    name, cfg_json, seed, out = args
    cfg = ExperimentConfig.model_validate_json(cfg_json)
    return str(RUNNERS[name](cfg, seed, out))


def run_seeds(name: str, cfg: ExperimentConfig, seeds: Sequence[int], out) -> list[Path]:
    """Run one subcommand per seed, in parallel processes up to UDARTS_THREADS."""
    workers = worker_count(len(seeds))
    if workers == 1:
        return [RUNNERS[name](cfg, s, out) for s in seeds]
    tasks = [(name, cfg.model_dump_json(), s, str(out)) for s in seeds]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return [Path(p) for p in pool.map(_call, tasks)]
