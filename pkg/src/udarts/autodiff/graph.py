from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, TapeError, Tensor


class Graph:
    """A named-parameter computation rebuilt on every forward pass.

    ``fn(params, inputs)`` receives dicts of leaf tensors and returns a dict
    of output tensors. ``input_shapes`` may declare expected shapes, with
    ``None`` marking a free extent (typically the batch axis).
    """

    def __init__(self, fn: Callable[[dict, dict], Mapping[str, Tensor]],
                 params: Mapping[str, np.ndarray],
                 input_shapes: Mapping[str, tuple] | None = None):
        self.fn = fn
        self.params = dict(params)
        self.input_shapes = dict(input_shapes or {})
        self._tape: Tape | None = None
        self._leaves: dict[str, Tensor] = {}
        self._outputs: dict[str, Tensor] = {}

    def _check_inputs(self, inputs: Mapping[str, np.ndarray]) -> None:
        for name, want in self.input_shapes.items():
            if name not in inputs:
                raise ValueError(f"missing input {name!r}")
            got = np.shape(inputs[name])
            if len(got) != len(want) or any(w is not None and w != g for w, g in zip(want, got)):
                raise ValueError(f"input {name!r} has shape {got}, expected {want}")

    def forward(self, inputs: Mapping[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
        inputs = dict(inputs or {})
        self._check_inputs(inputs)
        self._leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in self.params.items()}
        in_t = {k: Tensor(v, name=k) for k, v in inputs.items()}
        with Tape() as tape:
            outputs = dict(self.fn(self._leaves, in_t))
        self._tape = tape
        self._outputs = outputs
        return {k: v.data for k, v in outputs.items()}

    def backward(self, seed=None, output: str | None = None) -> dict[str, np.ndarray]:
        """Gradients of one output w.r.t. every parameter (zeros when unused)."""
        if self._tape is None:
            raise TapeError("backward called before forward")
        if output is None:
            if len(self._outputs) != 1:
                raise TapeError("several outputs; name the one to differentiate")
            output = next(iter(self._outputs))
        root = self._outputs[output]
        names = list(self._leaves)
        grads = self._tape.backward(root, seed, [self._leaves[n] for n in names])
        return dict(zip(names, grads))


def value_and_grad(fn: Callable[[dict], Tensor | tuple], params: Mapping[str, np.ndarray],
                   wrt=None):
    """Evaluate scalar ``fn(leaves)`` and its gradient w.r.t. ``wrt`` names.

    ``fn`` may return ``(loss, aux)``; aux is passed through untouched with
    any tensors converted to arrays.
    """
    names = list(params) if wrt is None else list(wrt)
    wanted = set(names)
    leaves = {k: Tensor(v, requires_grad=k in wanted, name=k) for k, v in params.items()}
    with Tape() as tape:
        res = fn(leaves)
    loss, aux = (res if isinstance(res, tuple) else (res, None))
    if loss.data.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    grads = tape.backward(loss, np.ones_like(loss.data), [leaves[n] for n in names])
    return float(loss.data), dict(zip(names, grads)), aux


def evaluate(fn: Callable[[dict], Tensor | tuple], params: Mapping[str, np.ndarray]):
    """Run ``fn`` without recording a tape."""
    leaves = {k: Tensor(v, name=k) for k, v in params.items()}
    return fn(leaves)
