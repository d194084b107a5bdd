"""Experiment configuration: one JSON document, validated with pydantic."""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .bilevel import BilevelConfig
from .searchspace import NetworkSpec


_SEARCH_SECTIONS = {"mode", "dataset", "network", "bilevel", "uncertainty", "search"}
HASHED_SECTIONS = {"search": _SEARCH_SECTIONS, "final": _SEARCH_SECTIONS | {"train"}}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, ser_json_inf_nan="strings")


class DatasetConfig(_Section):
    source: Literal["two_moons", "blobs", "spirals", "idx", "csv"] = "two_moons"
    n: int = Field(200, ge=1)
    noise: float = Field(0.2, ge=0.0)
    seed: int = 0
    classes: int = Field(2, ge=2)
    split_fraction: float = Field(0.5, gt=0.0, lt=1.0)
    # idx: [images, labels]; csv: [path]
    paths: list[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check(self):
        if self.source == "idx" and len(self.paths) != 2:
            raise ValueError("source 'idx' needs paths [images, labels]")
        if self.source == "csv" and len(self.paths) != 1:
            raise ValueError("source 'csv' needs exactly one path")
        if self.source in ("two_moons", "blobs", "spirals") and self.n < 4 * self.classes:
            raise ValueError(f"n must be at least 4 * classes = {4 * self.classes}")
        if self.source == "two_moons" and self.classes != 2:
            raise ValueError("two_moons has exactly 2 classes")
        return self


class NetworkConfig(_Section):
    n_cells: int = Field(2, ge=1)
    channels: int = Field(4, ge=1)
    n_nodes: int = Field(2, ge=1)
    reduction_positions: Optional[list[int]] = [1]
    lift_hw: int = Field(2, ge=1)
    stem_multiplier: int = Field(2, ge=1)
    k: int = Field(2, ge=1, le=2)  # node 0 has only two inputs


class BilevelSection(_Section):
    w_lr: float = Field(0.025, ge=0.0)
    w_momentum: float = Field(0.9, ge=0.0, lt=1.0)
    w_weight_decay: float = Field(0.0243, ge=0.0)
    alpha_lr: float = Field(0.05, ge=0.0)
    xi: Optional[float] = Field(None, ge=0.0)
    order: Literal["first", "second"] = "second"
    fd_scale: float = Field(0.01, gt=0.0)

    def build(self) -> BilevelConfig:
        return BilevelConfig(**self.model_dump())


class UncertaintyConfig(_Section):
    T: int = Field(8, ge=2)
    eval_T: int = Field(20, ge=2)
    temperature: float = Field(0.1, gt=0.0)
    tau_inverse: float = Field(0.0, ge=0.0)
    length_scale: float = Field(1e-2, gt=0.0)
    init_p: float = Field(0.1, gt=0.0, lt=1.0)


class SearchConfig(_Section):
    epochs: int = Field(25, ge=0)
    batch_size: int = Field(32, ge=1)
    # spectra at multiples of this (0: final epoch only); the final epoch is always included
    spectral_every: int = Field(5, ge=0)
    spectral_targets: list[Literal["alpha", "w", "w_valid"]] = ["alpha", "w", "w_valid"]
    probe_size: int = Field(256, ge=1)
    spectral_iters: int = Field(20, ge=1)
    spectral_tol: float = Field(1e-3, gt=0.0)
    spectral_eps: float = Field(1e-3, gt=0.0)


class TrainConfig(_Section):
    epochs: int = Field(25, ge=0)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(0.025, ge=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(3e-4, ge=0.0)


class NoiseConfig(_Section):
    snr_db: list[float] = Field(default_factory=lambda: [math.inf, 20.0, 10.0, 0.0])
    param_sigma: list[float] = Field(default_factory=lambda: [0.0, 0.01, 0.05, 0.1])
    repetitions: int = Field(5, ge=5)

    @field_validator("snr_db")
    @classmethod
    def _snr(cls, v):
        if not v or any(math.isnan(x) or x == -math.inf for x in v):
            raise ValueError("snr_db needs at least one value, none NaN or -inf")
        return v

    @field_validator("param_sigma")
    @classmethod
    def _sigma(cls, v):
        if not v or any(not math.isfinite(x) or x < 0 for x in v):
            raise ValueError("param_sigma values must be finite and >= 0")
        return v


class EvaluateConfig(_Section):
    """Optional single perturbation applied by ``evaluate``."""
    input_snr_db: Optional[float] = None
    param_sigma: Optional[float] = Field(None, ge=0.0)


class ExperimentConfig(_Section):
    mode: Literal["darts", "darts_cd", "mudarts"] = "mudarts"
    seeds: list[int] = Field(default_factory=lambda: list(range(10)))
    output_dir: str = "runs"
    dataset: DatasetConfig = DatasetConfig()
    network: NetworkConfig = NetworkConfig()
    bilevel: BilevelSection = BilevelSection()
    uncertainty: UncertaintyConfig = UncertaintyConfig()
    search: SearchConfig = SearchConfig()
    train: TrainConfig = TrainConfig()
    evaluate: EvaluateConfig = EvaluateConfig()
    noise: NoiseConfig = NoiseConfig()
    lemmas: dict = Field(default_factory=lambda: {"seed": 0, "n_lemma1": 100, "n_lemma3": 200,
                                                  "n_jensen": 10000})

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if not v:
            raise ValueError("at least one seed is required")
        if len(set(v)) != len(v):
            raise ValueError("seeds must be distinct")
        if any(s < 0 for s in v):
            raise ValueError("seeds must be non-negative")
        return v

    @field_validator("lemmas")
    @classmethod
    def _lemmas(cls, v):
        allowed = {"seed", "n_lemma1", "n_lemma3", "n_jensen"}
        extra = set(v) - allowed
        if extra:
            raise ValueError(f"unknown keys {sorted(extra)}")
        if any(not isinstance(x, int) or x < 0 for x in v.values()):
            raise ValueError("values must be non-negative integers")
        return {"seed": 0, "n_lemma1": 100, "n_lemma3": 200, "n_jensen": 10000, **v}

    def network_spec(self, input_shape: tuple[int, ...]) -> NetworkSpec:
        n = self.network
        return NetworkSpec(n_cells=n.n_cells, channels=n.channels, n_nodes=n.n_nodes,
                           reduction_positions=n.reduction_positions, n_classes=self.dataset.classes,
                           input_shape=tuple(input_shape), dropout=self.mode != "darts",
                           lift_hw=n.lift_hw, stem_multiplier=n.stem_multiplier)

    def as_json_dict(self, include=None) -> dict:
        # strict JSON: infinities travel as the strings "Infinity" / "-Infinity"
        return json.loads(self.model_dump_json(include=include))

    def canonical_json(self) -> str:
        return json.dumps(self.as_json_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"

    def model_hash(self, kind: str = "search") -> str:
        """Hash of the sections that determine a checkpoint of ``kind``.

        Output location, the seed list and the evaluation-only sections are
        left out, so a checkpoint stays valid when only those change; the
        retraining section only enters the hash of final checkpoints.
        """
        if kind not in HASHED_SECTIONS:
            raise ValueError(f"unknown checkpoint kind {kind!r}")
        doc = self.as_json_dict(include=HASHED_SECTIONS[kind])
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()
        return hashlib.sha256(blob).hexdigest()


def _format(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        msg = e["msg"].removeprefix("Value error, ")
        lines.append(f"{loc}: {msg}")
    return "; ".join(lines)


def parse_config(doc: dict) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.model_validate(doc)
    except ValidationError as err:
        raise ConfigError(_format(err)) from None
    try:
        cfg.network_spec((2,))
        cfg.bilevel.build()
    except ValueError as err:
        raise ConfigError(f"network: {err}") from None
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON at line {err.lineno} column {err.colno}: {err.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return parse_config(doc)
