"""Teacher-forced training with Adam, plus the binary checkpoint format.

Checkpoint layout (little endian)::

    b"VSCK" | u32 version (1) | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 rank | rank x u32 dims | float32 data
    u32 JSON length | UTF-8 JSON metadata (model config, train config, vocab ref, Adam step)

Adam moments, when saved, are stored as extra tensors named ``adam.m/<param>``
and ``adam.v/<param>``.  Parameters and moments are kept float32-representable
during training, so a save/load round trip is lossless.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import TrainingInstance, Vocabulary
from .errors import ConfigError, FormatError, NonFiniteError
from .model import Batch, ModelConfig, ModelParameters, batch_loss, storage_round
from .numerics import Tape, Tensor, make_rng

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"VSCK"
CHECKPOINT_VERSION = 1
ADAM_M, ADAM_V = "adam.m/", "adam.v/"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 1
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0 or self.checkpoint_every < 0:
            raise ConfigError("epochs and checkpoint_every must be non-negative")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls({k: np.zeros(p.shape) for k, p in params.items()},
                   {k: np.zeros(p.shape) for k, p in params.items()}, 0)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState,
              cfg: TrainConfig) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update.  Inputs are left untouched."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    t = state.t + 1
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        step = cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        new_params[name] = Tensor(p.data - step, requires_grad=p.requires_grad)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v, t)


def make_batches(instances: Sequence[TrainingInstance], batch_size: int,
                 rng: np.random.Generator | None = None) -> list[Batch]:
    """Bucket by image-window length, shuffle within buckets, then shuffle
    batch order.  Without ``rng`` the original order is kept."""
    buckets: dict[int, list[TrainingInstance]] = {}
    for inst in instances:
        buckets.setdefault(inst.window_len, []).append(inst)
    batches = []
    for length in sorted(buckets):
        items = buckets[length]
        if rng is not None:
            items = [items[i] for i in rng.permutation(len(items))]
        for i in range(0, len(items), batch_size):
            batches.append(Batch.of(items[i:i + batch_size]))
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def evaluate_loss(params: ModelParameters, instances: Sequence[TrainingInstance],
                  batch_size: int = 32) -> float:
    """Mask-weighted mean loss with dropout off."""
    total = weight = 0.0
    for batch in make_batches(instances, batch_size):
        total += batch_loss(params, batch).item() * batch.token_count
        weight += batch.token_count
    return total / weight


class Trainer:
    """Holds parameters, Adam state and the dropout/shuffle RNG."""

    def __init__(self, params: ModelParameters, cfg: TrainConfig, state: AdamState | None = None):
        self.params = params
        self.cfg = cfg
        self.state = state if state is not None else AdamState.zeros(params.trainable())
        self.rng = make_rng(cfg.seed, stream=1)
        self.epoch = 0

    def train_step(self, batch: Batch) -> float:
        trainable = self.params.trainable()
        with Tape() as tape:
            loss = batch_loss(self.params, batch, training=True, rng=self.rng)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteError(f"training loss is {value} at epoch {self.epoch + 1}")
        grads = tape.gradient(loss, trainable)
        updated, state = adam_step(trainable, grads, self.state, self.cfg)
        self.params = self.params.replace(
            {k: Tensor(storage_round(p.data), requires_grad=True) for k, p in updated.items()})
        self.state = AdamState({k: storage_round(a) for k, a in state.m.items()},
                               {k: storage_round(a) for k, a in state.v.items()}, state.t)
        return value

    def train_epoch(self, instances: Sequence[TrainingInstance]) -> float:
        """One pass in seed-determined batch order; returns the token-weighted
        mean of the batch losses."""
        if not instances:
            raise ConfigError("cannot train on an empty dataset")
        total = weight = 0.0
        for batch in make_batches(instances, self.cfg.batch_size, self.rng):
            total += self.train_step(batch) * batch.token_count
            weight += batch.token_count
        self.epoch += 1
        return total / weight

    def fit(self, instances: Sequence[TrainingInstance], epochs: int | None = None,
            on_epoch: Callable[[int, float], None] | None = None,
            stop_below: float | None = None) -> list[float]:
        """Run up to ``epochs`` epochs, stopping early once an epoch's loss is
        below ``stop_below``."""
        trace = []
        for _ in range(self.cfg.epochs if epochs is None else epochs):
            loss = self.train_epoch(instances)
            trace.append(loss)
            log.info("epoch %d loss %.6f", self.epoch, loss)
            if on_epoch is not None:
                on_epoch(self.epoch, loss)
            if stop_below is not None and loss < stop_below:
                break
        return trace


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def vocab_ref(vocab: Vocabulary) -> dict:
    digest = hashlib.sha256("\n".join(vocab.tokens).encode("utf-8")).hexdigest()
    return {"size": len(vocab), "sha256": digest}


@dataclass
class Checkpoint:
    params: ModelParameters
    adam_state: AdamState | None
    train_config: TrainConfig | None
    meta: dict

    @property
    def config(self) -> ModelConfig:
        return self.params.config


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.asarray(arr, dtype="<f4").tobytes()


def save_checkpoint(path, params: ModelParameters, adam_state: AdamState | None = None,
                    vocab: Vocabulary | None = None, train_config: TrainConfig | None = None,
                    extra: Mapping | None = None) -> None:
    tensors = [(k, t.data) for k, t in params.tensors.items()]
    if adam_state is not None:
        tensors += [(ADAM_M + k, a) for k, a in adam_state.m.items()]
        tensors += [(ADAM_V + k, a) for k, a in adam_state.v.items()]
    meta = {
        "model": params.config.to_dict(),
        "train": train_config.to_dict() if train_config is not None else None,
        "adam_step": adam_state.t if adam_state is not None else None,
        "vocab": vocab_ref(vocab) if vocab is not None else None,
    }
    if extra:
        meta.update(extra)
    body = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    body += [_pack_tensor(k, a) for k, a in tensors]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    body.append(struct.pack("<I", len(blob)) + blob)
    Path(path).write_bytes(b"".join(body))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}", self.path, self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path, vocab: Vocabulary | None = None) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)", path, 0)
    version, count = r.unpack("<II", "header")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", path, 4)
    arrays = {}
    for _ in range(count):
        (n,) = r.unpack("<H", "tensor name length")
        name = r.take(n, "tensor name").decode("utf-8")
        (rank,) = r.unpack("<B", "tensor rank")
        dims = r.unpack(f"<{rank}I", "tensor dims")
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(4 * size, f"data of {name}"), dtype="<f4")
        arrays[name] = data.astype(np.float64).reshape(dims)
    (n,) = r.unpack("<I", "metadata length")
    try:
        meta = json.loads(r.take(n, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("checkpoint metadata is not valid JSON", path, r.pos - n) from None
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after checkpoint metadata", path, r.pos)

    config = ModelConfig.from_dict(meta["model"])
    if vocab is not None:
        if len(vocab) != config.vocab_size:
            raise ConfigError(f"checkpoint vocab size {config.vocab_size} != vocabulary size {len(vocab)}")
        ref = meta.get("vocab")
        if ref is not None and ref["sha256"] != vocab_ref(vocab)["sha256"]:
            raise ConfigError("vocabulary does not match the one the checkpoint was trained with")
    params = ModelParameters(config, {k: Tensor(a, requires_grad=True) for k, a in arrays.items()
                                      if not k.startswith(("adam.m/", "adam.v/"))})
    state = None
    if meta.get("adam_step") is not None:
        state = AdamState({k[len(ADAM_M):]: a for k, a in arrays.items() if k.startswith(ADAM_M)},
                          {k[len(ADAM_V):]: a for k, a in arrays.items() if k.startswith(ADAM_V)},
                          int(meta["adam_step"]))
    train_cfg = TrainConfig.from_dict(meta["train"]) if meta.get("train") else None
    return Checkpoint(params, state, train_cfg, meta)
