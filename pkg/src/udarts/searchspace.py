"""DARTS cells with softmax-mixed candidate ops and concrete-dropout sites.

A :class:`Network` is a static plan (parameter shapes, dropout sites, cell
wiring). Its forward pass is rebuilt on every call from a dict of leaf
tensors, so the same plan serves training, virtual steps, finite-difference
probes and stacked Monte-Carlo passes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Tensor, ops
from .uncertainty import DEFAULT_P, MaskSampler, apply_dropout, logit

OPS = (
    "sep_conv_3x3", "sep_conv_5x5", "dil_conv_3x3", "dil_conv_5x5",
    "max_pool_3x3", "avg_pool_3x3", "identity", "zero",
)
ALPHA_INIT_SCALE = 1e-3
BN_MOMENTUM = 0.9


@dataclass(frozen=True)
class OpCatalog:
    """Ordered candidate ops; column ``i`` of every alpha row binds to ``ops[i]``."""

    ops: tuple[str, ...] = OPS

    def __post_init__(self):
        unknown = [o for o in self.ops if o not in OPS]
        if unknown:
            raise ValueError(f"unknown candidate ops: {unknown}")
        if len(set(self.ops)) != len(self.ops) or not self.ops:
            raise ValueError("catalog must list distinct ops")

    def __len__(self) -> int:
        return len(self.ops)

    def index(self, name: str) -> int:
        return self.ops.index(name)


@dataclass(frozen=True)
class CellGraph:
    n_nodes: int
    kind: str = "normal"

    def __post_init__(self):
        if self.kind not in ("normal", "reduction"):
            raise ValueError(f"bad cell kind {self.kind!r}")
        if self.n_nodes < 1:
            raise ValueError("need at least one intermediate node")

    @property
    def edges(self) -> list[tuple[int, int]]:
        """(i, j) pairs; states 0 and 1 are the cell inputs, j >= 2 intermediates."""
        return [(i, j + 2) for j in range(self.n_nodes) for i in range(j + 2)]

    def incoming(self, node: int) -> list[int]:
        """Edge indices entering intermediate node ``node`` (0-based)."""
        start = sum(k + 2 for k in range(node))
        return list(range(start, start + node + 2))


def n_edges(n_nodes: int) -> int:
    return sum(j + 2 for j in range(n_nodes))


def default_reductions(n_cells: int) -> tuple[int, ...]:
    return tuple(sorted({p for p in (n_cells // 3, 2 * n_cells // 3) if 0 < p < n_cells}))


@dataclass(frozen=True)
class NetworkSpec:
    """Shape of the searchable network.

    ``input_shape`` is ``(F,)`` for tabular data, lifted by a learned linear
    stem onto a ``lift_hw`` x ``lift_hw`` grid, or ``(C, H, W)`` for images.
    """

    n_cells: int = 4
    channels: int = 8
    n_nodes: int = 4
    reduction_positions: tuple[int, ...] | None = None
    n_classes: int = 2
    input_shape: tuple[int, ...] = (3, 8, 8)
    dropout: bool = True
    lift_hw: int = 4
    stem_multiplier: int = 2

    def __post_init__(self):
        if self.reduction_positions is None:
            object.__setattr__(self, "reduction_positions", default_reductions(self.n_cells))
        object.__setattr__(self, "reduction_positions", tuple(self.reduction_positions))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        if self.n_cells < 1 or self.channels < 1 or self.n_classes < 2:
            raise ValueError("n_cells, channels must be positive and n_classes >= 2")
        for r in self.reduction_positions:
            if not 0 < r < self.n_cells:
                raise ValueError(f"reduction position {r} not strictly inside (0, {self.n_cells})")
        if len(set(self.reduction_positions)) != len(self.reduction_positions):
            raise ValueError("duplicate reduction positions")
        if len(self.input_shape) not in (1, 3):
            raise ValueError("input_shape must be (F,) or (C, H, W)")
        if self.reduction_positions and self.channels % 2:
            raise ValueError("channels must be even when reductions are present")
        h = self.lift_hw if len(self.input_shape) == 1 else self.input_shape[1]
        w = self.lift_hw if len(self.input_shape) == 1 else self.input_shape[2]
        for _ in self.reduction_positions:
            if h % 2 or w % 2:
                raise ValueError(f"spatial size {h}x{w} cannot be halved at a reduction cell")
            h, w = h // 2, w // 2


@dataclass(frozen=True)
class Site:
    name: str
    units: int          # K: channels entering the site
    weight: str         # parameter consuming the dropped units (||M||^2)


@dataclass
class DiscreteArchitecture:
    """Per cell kind, per intermediate node: the retained (edge, op) pairs."""

    normal: list[list[tuple[int, str]]]
    reduction: list[list[tuple[int, str]]]
    k: int = 2

    def __post_init__(self):
        for nodes in (self.normal, self.reduction):
            for pairs in nodes:
                if len(pairs) != self.k:
                    raise ValueError(f"each node needs exactly {self.k} entries")
                if any(op == "zero" for _, op in pairs):
                    raise ValueError("zero op cannot be retained")

    def to_json(self) -> str:
        doc = {"k": self.k,
               "normal": [[[e, o] for e, o in pairs] for pairs in self.normal],
               "reduction": [[[e, o] for e, o in pairs] for pairs in self.reduction]}
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DiscreteArchitecture":
        doc = json.loads(text)
        conv = lambda nodes: [[(int(e), str(o)) for e, o in pairs] for pairs in nodes]
        return cls(conv(doc["normal"]), conv(doc["reduction"]), int(doc["k"]))


# -- forward context ---------------------------------------------------------

class _Ctx:
    def __init__(self, leaves, sampler, temperature, running, stats, trace):
        self.leaves = leaves
        self.sampler = sampler
        self.groups = sampler.groups if sampler is not None else 1
        self.temperature = temperature
        self.running = running
        self.stats = stats
        self.trace = trace
        self.site_logits = leaves.get("dropout.logits")
        self.site_index: dict[str, int] = {}

    def bn(self, name: str, x: Tensor) -> Tensor:
        running = self.running.get(name) if self.running is not None else None
        if self.running is not None and running is None:
            raise KeyError(f"no running statistics for {name}")
        out, mu, var = ops.batch_norm(x, self.leaves[name + ".g"], self.leaves[name + ".b"],
                                      groups=self.groups, running=running)
        if self.stats is not None and running is None:
            self.stats[name] = (mu, var)
        return out

    def dropout(self, site: str, x: Tensor) -> Tensor:
        if self.sampler is None or self.site_logits is None:
            return x
        idx = self.site_index[site]
        return apply_dropout(x, ops.take(self.site_logits, idx), self.temperature, self.sampler)


# -- candidate ops -----------------------------------------------------------

class _Planner:
    def __init__(self, dropout: bool):
        self.shapes: dict[str, tuple[tuple[int, ...], tuple[int, int] | None]] = {}
        self.bns: list[tuple[str, int]] = []
        self.sites: list[Site] = []
        self.dropout = dropout

    def param(self, name, shape, fans):
        self.shapes[name] = (tuple(shape), fans)

    def bn(self, name, c):
        self.shapes[name + ".g"] = ((c,), None)
        self.shapes[name + ".b"] = ((c,), None)
        self.bns.append((name, c))

    def site(self, name, units, weight):
        if self.dropout:
            self.sites.append(Site(name, units, weight))


def _plan_op(pl: _Planner, prefix: str, op: str, c: int, stride: int) -> None:
    if op.startswith("sep_conv"):
        k = int(op[-1])
        for r in (1, 2):
            pl.site(f"{prefix}.cd{r}", c, f"{prefix}.dw{r}")
            pl.param(f"{prefix}.dw{r}", (c, k, k), (k * k, k * k))
            pl.param(f"{prefix}.pw{r}", (c, c, 1, 1), (c, c))
            pl.bn(f"{prefix}.bn{r}", c)
    elif op.startswith("dil_conv"):
        k = int(op[-1])
        pl.site(f"{prefix}.cd1", c, f"{prefix}.dw1")
        pl.param(f"{prefix}.dw1", (c, k, k), (k * k, k * k))
        pl.param(f"{prefix}.pw1", (c, c, 1, 1), (c, c))
        pl.bn(f"{prefix}.bn1", c)
    elif op == "identity" and stride == 2:
        _plan_factorized_reduce(pl, prefix, c, c)


def _plan_factorized_reduce(pl: _Planner, prefix: str, c_in: int, c_out: int) -> None:
    if c_out % 2:
        raise ValueError("factorized reduce needs an even channel count")
    pl.param(f"{prefix}.fr1", (c_out // 2, c_in, 1, 1), (c_in, c_out // 2))
    pl.param(f"{prefix}.fr2", (c_out // 2, c_in, 1, 1), (c_in, c_out // 2))
    pl.bn(f"{prefix}.bn", c_out)


def _strided(x: Tensor, stride: int) -> Tensor:
    return ops.subsample(x, stride) if stride > 1 else x


def _factorized_reduce(ctx: _Ctx, prefix: str, x: Tensor) -> Tensor:
    x = ops.relu(x)
    a = ops.conv2d(ops.subsample(x, 2, 0), ctx.leaves[f"{prefix}.fr1"])
    b = ops.conv2d(ops.subsample(x, 2, 1), ctx.leaves[f"{prefix}.fr2"])
    return ctx.bn(f"{prefix}.bn", ops.concat([a, b], axis=1))


def _apply_op(ctx: _Ctx, prefix: str, op: str, x: Tensor, stride: int) -> Tensor:
    lv = ctx.leaves
    if op.startswith("sep_conv") or op.startswith("dil_conv"):
        dil = 2 if op.startswith("dil") else 1
        reps = (1, 2) if op.startswith("sep") else (1,)
        h = x
        for r in reps:
            h = ctx.dropout(f"{prefix}.cd{r}", ops.relu(h))
            h = ops.depthwise_conv2d(h, lv[f"{prefix}.dw{r}"], dilation=dil)
            if r == 1:
                h = _strided(h, stride)
            h = ctx.bn(f"{prefix}.bn{r}", ops.conv2d(h, lv[f"{prefix}.pw{r}"]))
        return h
    if op == "max_pool_3x3":
        return _strided(ops.max_pool3(x), stride)
    if op == "avg_pool_3x3":
        return _strided(ops.avg_pool3(x), stride)
    if op == "identity":
        return x if stride == 1 else _factorized_reduce(ctx, prefix, x)
    if op == "zero":
        return ops.zeros_like(x, stride)
    raise ValueError(f"unknown op {op!r}")


# -- network -----------------------------------------------------------------

@dataclass
class _CellPlan:
    index: int
    reduction: bool
    reduction_prev: bool
    c: int
    # per edge: list of op names evaluated on that edge
    edge_ops: list[list[str]] = field(default_factory=list)
    # per node: list of (edge, op) for discrete cells, None for mixed cells
    chosen: list[list[tuple[int, str]]] | None = None


class Network:
    """Stacked DARTS cells; mixed (``arch=None``) or discretized."""

    def __init__(self, spec: NetworkSpec, catalog: OpCatalog | None = None,
                 arch: DiscreteArchitecture | None = None):
        self.spec = spec
        self.catalog = catalog or OpCatalog()
        self.arch = arch
        self.graph = CellGraph(spec.n_nodes)
        self.n_edges = n_edges(spec.n_nodes)
        if arch is not None:
            for nodes in (arch.normal, arch.reduction):
                if len(nodes) != spec.n_nodes:
                    raise ValueError("architecture node count does not match spec")
                for j, pairs in enumerate(nodes):
                    for e, op in pairs:
                        if e not in self.graph.incoming(j):
                            raise ValueError(f"edge {e} does not enter node {j}")
                        if op not in self.catalog.ops:
                            raise ValueError(f"op {op!r} not in catalog")
        self._plan()

    # planning
    def _plan(self) -> None:
        spec = self.spec
        pl = _Planner(spec.dropout)
        c_stem = spec.stem_multiplier * spec.channels
        if len(spec.input_shape) == 1:
            hw = spec.lift_hw
            pl.param("stem.w", (spec.input_shape[0], c_stem * hw * hw),
                     (spec.input_shape[0], c_stem * hw * hw))
        else:
            cin = spec.input_shape[0]
            pl.param("stem.w", (c_stem, cin, 3, 3), (cin * 9, c_stem * 9))
        pl.bn("stem.bn", c_stem)
        c_pp, c_p, c = c_stem, c_stem, spec.channels
        self.cells: list[_CellPlan] = []
        reduction_prev = False
        for idx in range(spec.n_cells):
            reduction = idx in spec.reduction_positions
            if reduction:
                c *= 2
            cell = _CellPlan(idx, reduction, reduction_prev, c)
            pre = f"cell{idx}"
            if reduction_prev:
                _plan_factorized_reduce(pl, f"{pre}.pre0", c_pp, c)
            else:
                pl.param(f"{pre}.pre0.w", (c, c_pp, 1, 1), (c_pp, c))
                pl.bn(f"{pre}.pre0.bn", c)
            pl.param(f"{pre}.pre1.w", (c, c_p, 1, 1), (c_p, c))
            pl.bn(f"{pre}.pre1.bn", c)
            if self.arch is None:
                ops_here = [o for o in self.catalog.ops]
                cell.edge_ops = [list(ops_here) for _ in range(self.n_edges)]
            else:
                nodes = self.arch.reduction if reduction else self.arch.normal
                cell.chosen = [list(p) for p in nodes]
                cell.edge_ops = [[] for _ in range(self.n_edges)]
                for pairs in nodes:
                    for e, op in pairs:
                        if op not in cell.edge_ops[e]:
                            cell.edge_ops[e].append(op)
            for e, (i, _) in enumerate(self.graph.edges):
                stride = 2 if reduction and i < 2 else 1
                for op in cell.edge_ops[e]:
                    _plan_op(pl, f"{pre}.e{e}.{op}", op, c, stride)
            self.cells.append(cell)
            reduction_prev = reduction
            c_pp, c_p = c_p, spec.n_nodes * c
        self.feature_width = c_p
        pl.site("head.cd", c_p, "head.w")
        pl.param("head.w", (c_p, spec.n_classes), (c_p, spec.n_classes))
        pl.shapes["head.b"] = ((spec.n_classes,), None)
        self._shapes = pl.shapes
        self.bn_names = [n for n, _ in pl.bns]
        self._bn_channels = dict(pl.bns)
        self.sites = pl.sites

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    @property
    def has_alpha(self) -> bool:
        return self.arch is None

    def weight_names(self) -> list[str]:
        return list(self._shapes)

    def init_params(self, rng: np.random.Generator, p: float = DEFAULT_P) -> dict[str, np.ndarray]:
        """Fresh weights (Glorot-uniform), small alphas, dropout logits at ``p``."""
        params = {}
        for name, (shape, fans) in self._shapes.items():
            if fans is None:
                params[name] = np.ones(shape) if name.endswith(".g") else np.zeros(shape)
            else:
                bound = np.sqrt(6.0 / (fans[0] + fans[1]))
                params[name] = rng.uniform(-bound, bound, size=shape)
        if self.has_alpha:
            for kind in ("normal", "reduce"):
                params[f"alpha.{kind}"] = ALPHA_INIT_SCALE * rng.standard_normal(
                    (self.n_edges, len(self.catalog)))
        if self.n_sites:
            params["dropout.logits"] = np.full(self.n_sites, logit(p))
        return params

    def init_buffers(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {n: (np.zeros(c), np.ones(c)) for n, c in self._bn_channels.items()}

    def check_params(self, params: dict[str, np.ndarray]) -> None:
        for name, (shape, _) in self._shapes.items():
            if name not in params:
                raise KeyError(f"missing parameter {name}")
            if params[name].shape != shape:
                raise ValueError(f"{name} has shape {params[name].shape}, expected {shape}")

    # forward
    def logits(self, leaves: dict[str, Tensor], x: np.ndarray, *,
               sampler: MaskSampler | None = None, temperature: float = 0.1,
               running: dict | None = None, stats: dict | None = None,
               trace: dict | None = None) -> Tensor:
        """Class logits for ``x``.

        ``sampler=None`` switches dropout off. ``running`` selects inference
        batch norm; otherwise batch statistics are used (and reported into
        ``stats`` when given).
        """
        spec = self.spec
        ctx = _Ctx(leaves, sampler, temperature, running, stats, trace)
        ctx.site_index = {s.name: i for i, s in enumerate(self.sites)}
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != spec.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} does not match {spec.input_shape}")
        xt = Tensor(x)
        if len(spec.input_shape) == 1:
            hw = spec.lift_hw
            h = ops.matmul(xt, leaves["stem.w"])
            h = ops.reshape(h, (x.shape[0], -1, hw, hw))
        else:
            h = ops.conv2d(xt, leaves["stem.w"])
        s0 = s1 = ctx.bn("stem.bn", h)
        for cell in self.cells:
            s0, s1 = s1, self._cell(ctx, cell, s0, s1)
        feat = ops.mean(s1, axis=(2, 3))
        feat = ctx.dropout("head.cd", feat)
        return ops.add(ops.matmul(feat, leaves["head.w"]), leaves["head.b"])

    def _cell(self, ctx: _Ctx, cell: _CellPlan, s0: Tensor, s1: Tensor) -> Tensor:
        pre = f"cell{cell.index}"
        lv = ctx.leaves
        if cell.reduction_prev:
            s0 = _factorized_reduce(ctx, f"{pre}.pre0", s0)
        else:
            s0 = ctx.bn(f"{pre}.pre0.bn", ops.conv2d(ops.relu(s0), lv[f"{pre}.pre0.w"]))
        s1 = ctx.bn(f"{pre}.pre1.bn", ops.conv2d(ops.relu(s1), lv[f"{pre}.pre1.w"]))
        states = [s0, s1]
        edges = self.graph.edges
        weights = None
        if cell.chosen is None:
            weights = ops.softmax(lv["alpha.reduce" if cell.reduction else "alpha.normal"])
        for j in range(self.spec.n_nodes):
            terms = []
            if cell.chosen is None:
                for e in self.graph.incoming(j):
                    terms.append(self._mixed(ctx, f"{pre}.e{e}", states[edges[e][0]],
                                             ops.take(weights, e), cell, e))
            else:
                for e, op in cell.chosen[j]:
                    stride = 2 if cell.reduction and edges[e][0] < 2 else 1
                    terms.append(_apply_op(ctx, f"{pre}.e{e}.{op}", op, states[edges[e][0]], stride))
            node = terms[0]
            for t in terms[1:]:
                node = ops.add(node, t)
            states.append(node)
        if ctx.trace is not None:
            ctx.trace[pre] = {"s0": s0.data, "s1": s1.data, "nodes": [s.data for s in states[2:]]}
        return ops.concat(states[2:], axis=1)

    def _mixed(self, ctx: _Ctx, prefix: str, x: Tensor, row: Tensor, cell: _CellPlan, e: int) -> Tensor:
        stride = 2 if cell.reduction and self.graph.edges[e][0] < 2 else 1
        return mixed_op_forward(ctx, prefix, x, row, self.catalog, stride)

    def update_buffers(self, buffers: dict, stats: dict) -> dict:
        out = dict(buffers)
        for name, (mu, var) in stats.items():
            rm, rv = buffers[name]
            out[name] = (BN_MOMENTUM * rm + (1 - BN_MOMENTUM) * mu,
                         BN_MOMENTUM * rv + (1 - BN_MOMENTUM) * var)
        return out

    def site_weight_norms(self, leaves: dict[str, Tensor]) -> list[Tensor]:
        return [ops.sum(ops.square(leaves[s.weight])) for s in self.sites]


def mixed_op_forward(ctx: _Ctx, prefix: str, x: Tensor, alpha_row_weights: Tensor,
                     catalog: OpCatalog, stride: int = 1) -> Tensor:
    """sum_o softmax(alpha)_o * o(x); ``alpha_row_weights`` is already softmaxed."""
    if alpha_row_weights.shape != (len(catalog),):
        raise ValueError("alpha row length does not match catalog")
    outs, keep = [], []
    for k, op in enumerate(catalog.ops):
        if op == "zero":
            continue
        outs.append(_apply_op(ctx, f"{prefix}.{op}", op, x, stride))
        keep.append(k)
    shapes = {o.shape for o in outs}
    if len(shapes) > 1:
        raise ValueError(f"candidate outputs disagree in shape: {shapes}")
    if not outs:
        return ops.zeros_like(x, stride)
    if len(keep) == len(catalog):
        w = alpha_row_weights
    else:
        w = ops.take(alpha_row_weights, keep)
    return ops.weighted_sum(w, outs)


def mixed_op(x: Tensor, alpha_row: Tensor, catalog: OpCatalog,
             leaves: dict[str, Tensor] | None = None, prefix: str = "op") -> Tensor:
    """Standalone mixed edge with no dropout; alpha_row holds raw logits."""
    ctx = _Ctx(leaves or {}, None, 0.1, None, None, None)
    return mixed_op_forward(ctx, prefix, x, ops.softmax(alpha_row), catalog)


def plan_edge_params(catalog: OpCatalog, c: int, prefix: str = "op") -> dict[str, tuple]:
    pl = _Planner(False)
    for op in catalog.ops:
        _plan_op(pl, f"{prefix}.{op}", op, c, 1)
    return pl.shapes


def discretize(alpha: dict[str, np.ndarray] | np.ndarray, n_nodes: int, k: int = 2,
               catalog: OpCatalog | None = None) -> DiscreteArchitecture | list:
    """Keep, per node, the k incoming edges whose strongest op weighs most.

    Each edge is represented by its best non-``zero`` op (softmax weight);
    the k best edges are kept, so retained pairs sit on distinct edges. Ties
    go to the lower edge index, then the lower op index. Accepts the ``{"alpha.normal", "alpha.reduce"}`` dict (returns a
    DiscreteArchitecture) or one alpha matrix (returns the node list).
    """
    catalog = catalog or OpCatalog()
    if isinstance(alpha, dict):
        return DiscreteArchitecture(
            _discretize_one(alpha["alpha.normal"], n_nodes, k, catalog),
            _discretize_one(alpha["alpha.reduce"], n_nodes, k, catalog), k)
    return _discretize_one(alpha, n_nodes, k, catalog)


def _softmax_rows(a: np.ndarray) -> np.ndarray:
    z = np.exp(a - a.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def _discretize_one(alpha: np.ndarray, n_nodes: int, k: int, catalog: OpCatalog):
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (n_edges(n_nodes), len(catalog)):
        raise ValueError(f"alpha shape {alpha.shape} does not match {n_nodes} nodes")
    if not np.all(np.isfinite(alpha)):
        raise ValueError("alpha must be finite")
    weights = _softmax_rows(alpha)
    graph = CellGraph(n_nodes)
    usable = [i for i, o in enumerate(catalog.ops) if o != "zero"]
    out = []
    for j in range(n_nodes):
        incoming = graph.incoming(j)
        if k > len(incoming) or not usable:
            raise ValueError(f"k={k} exceeds the {len(incoming)} usable incoming edges of node {j}")
        best = []
        for e in incoming:
            o = min(usable, key=lambda i: (-weights[e, i], i))
            best.append((-weights[e, o], e, o))
        best.sort()
        out.append([(e, catalog.ops[o]) for _, e, o in best[:k]])
    return out


def saturated_alpha(arch_nodes: Sequence[Sequence[tuple[int, str]]], n_nodes: int,
                    catalog: OpCatalog, big: float = 1e6) -> np.ndarray:
    """Alpha logits that make a mixed cell reproduce a discrete one.

    Only valid when each node keeps at most one op per edge; unused edges
    saturate onto ``zero``.
    """
    a = np.full((n_edges(n_nodes), len(catalog)), -big)
    a[:, catalog.index("zero")] = big
    for pairs in arch_nodes:
        for e, op in pairs:
            a[e, :] = -big
            a[e, catalog.index(op)] = big
    return a


def iter_edges(n_nodes: int) -> Iterable[tuple[int, int, int]]:
    for e, (i, j) in enumerate(CellGraph(n_nodes).edges):
        yield e, i, j
