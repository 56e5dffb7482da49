"""GRU cells, sequence runners and the embedding lookup.

Gate convention::

    z  = sigmoid(x Wz + h Uz + bz)
    r  = sigmoid(x Wr + h Ur + br)
    h~ = tanh(x Wh + (r * h) Uh + bh)
    h' = z * h + (1 - z) * h~
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, EmptySequenceError, TokenIndexError
from .numerics import Tensor, add, gather_rows, matmul, mul, select, sigmoid, stack, sub, tanh

GATE_NAMES = ("Wz", "Wr", "Wh", "Uz", "Ur", "Uh", "bz", "br", "bh")


@dataclass(frozen=True)
class GruCellParams:
    Wz: Tensor
    Wr: Tensor
    Wh: Tensor
    Uz: Tensor
    Ur: Tensor
    Uh: Tensor
    bz: Tensor
    br: Tensor
    bh: Tensor

    def __post_init__(self):
        d, h = self.Wz.shape
        for name in GATE_NAMES:
            t = getattr(self, name)
            want = (d, h) if name[0] == "W" else (h, h) if name[0] == "U" else (h,)
            if t.shape != want:
                raise ConfigError(f"GRU parameter {name} has shape {t.shape}, expected {want}")

    @property
    def input_dim(self) -> int:
        return self.Wz.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.Wz.shape[1]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{n}": getattr(self, n) for n in GATE_NAMES}

    @classmethod
    def from_named(cls, tensors: Mapping[str, Tensor], prefix: str) -> "GruCellParams":
        return cls(**{n: tensors[f"{prefix}.{n}"] for n in GATE_NAMES})


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_gru(rng: np.random.Generator, input_dim: int, hidden_dim: int) -> GruCellParams:
    """Glorot-uniform matrices, zero biases.  Draw order is Wz, Wr, Wh, Uz, Ur, Uh."""
    mats = {}
    for n in ("Wz", "Wr", "Wh"):
        mats[n] = Tensor(glorot(rng, input_dim, hidden_dim), requires_grad=True)
    for n in ("Uz", "Ur", "Uh"):
        mats[n] = Tensor(glorot(rng, hidden_dim, hidden_dim), requires_grad=True)
    for n in ("bz", "br", "bh"):
        mats[n] = Tensor(np.zeros(hidden_dim), requires_grad=True)
    return GruCellParams(**mats)


def gru_step(params: GruCellParams, x: Tensor, h_prev: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise DimensionError(f"gru_step: input {x.shape} does not match input_dim {params.input_dim}")
    if h_prev.shape != (x.shape[0], params.hidden_dim):
        raise DimensionError(
            f"gru_step: hidden state {h_prev.shape}, expected {(x.shape[0], params.hidden_dim)}")
    z = sigmoid(add(add(matmul(x, params.Wz), matmul(h_prev, params.Uz)), params.bz))
    r = sigmoid(add(add(matmul(x, params.Wr), matmul(h_prev, params.Ur)), params.br))
    cand = tanh(add(add(matmul(x, params.Wh), matmul(mul(r, h_prev), params.Uh)), params.bh))
    return add(mul(z, h_prev), mul(sub(1.0, z), cand))


def _fold(params: GruCellParams, steps: Sequence[Tensor], h0: Tensor) -> list[Tensor]:
    states = []
    h = h0
    for x in steps:
        h = gru_step(params, x, h)
        states.append(h)
    return states


def _time_steps(inputs: Tensor) -> list[Tensor]:
    if inputs.ndim != 3:
        raise DimensionError(f"expected a [batch x time x features] tensor, got {inputs.shape}")
    if inputs.shape[1] == 0:
        raise EmptySequenceError("recurrent input has no time steps")
    return [select(inputs, t, axis=1) for t in range(inputs.shape[1])]


def gru_run(params: GruCellParams, inputs: Tensor, h0: Tensor) -> tuple[Tensor, Tensor]:
    """Run one GRU left to right over ``inputs`` [b x T x d].

    Returns the stacked states [b x T x hidden] and the final state.
    """
    states = _fold(params, _time_steps(inputs), h0)
    return stack(states, axis=1), states[-1]


def stacked_gru_run(layers: Sequence[GruCellParams], inputs: Tensor,
                    h0_per_layer: Sequence[Tensor]) -> tuple[Tensor, list[Tensor]]:
    if len(layers) != len(h0_per_layer):
        raise ConfigError(f"{len(layers)} layers but {len(h0_per_layer)} initial states")
    width = inputs.shape[-1]
    for i, layer in enumerate(layers):
        if layer.input_dim != width:
            raise ConfigError(f"layer {i} expects input width {layer.input_dim}, receives {width}")
        width = layer.hidden_dim
    steps = _time_steps(inputs)
    finals = []
    for layer, h0 in zip(layers, h0_per_layer):
        steps = _fold(layer, steps, h0)
        finals.append(steps[-1])
    return stack(steps, axis=1), finals


@dataclass(frozen=True)
class EmbeddingTable:
    matrix: Tensor
    trainable: bool = True

    @property
    def vocab_size(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def embed(table: EmbeddingTable, ids) -> Tensor:
    """Look up rows for an integer id array of shape [b x T] (or [b])."""
    ids = np.asarray(ids, dtype=np.int64)
    bad = np.argwhere((ids < 0) | (ids >= table.vocab_size))
    if bad.size:
        pos = tuple(int(i) for i in bad[0])
        raise TokenIndexError(
            f"token id {int(ids[pos])} at position {pos} outside vocabulary of size {table.vocab_size}")
    source = table.matrix if table.trainable else Tensor._wrap(table.matrix.data)
    return gather_rows(source, ids)
