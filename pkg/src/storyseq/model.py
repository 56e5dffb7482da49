"""Dual-encoder storytelling model.

An image-window encoder (two stacked GRUs) and a previous-sentence encoder
(one GRU) each produce a final state; decoder layer ``i`` starts from
``concat(image layer i final, sentence final)`` and predicts the current
sentence one token at a time through an affine projection onto the
vocabulary.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import START_ID, TrainingInstance
from .errors import ConfigError, DataContractError, DimensionError
from .numerics import (GradcheckReport, Tensor, add, concat, cross_entropy, dropout, gradcheck_report,
                       make_rng, matmul, reshape, select, softmax, stack)
from .recurrent import (GATE_NAMES, EmbeddingTable, GruCellParams, embed, glorot, gru_run,
                        gru_step, init_gru, stacked_gru_run)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    feature_dim: int = 4096
    embed_dim: int = 300
    img_hidden: int = 1024
    sent_hidden: int = 512
    dec_hidden: int = 1536
    img_layers: int = 2
    dec_layers: int = 2
    max_sentence_len: int = 20
    window: int = 3
    dropout_in: float = 0.3
    dropout_pre_softmax: float = 0.5
    train_embeddings: bool = True

    def __post_init__(self):
        if self.dec_hidden != self.img_hidden + self.sent_hidden:
            raise ConfigError(
                f"dec_hidden ({self.dec_hidden}) must equal img_hidden + sent_hidden "
                f"({self.img_hidden} + {self.sent_hidden})")
        if self.img_layers != 2 or self.dec_layers != 2:
            raise ConfigError("image encoder and decoder are fixed at two GRU layers")
        for name in ("feature_dim", "embed_dim", "img_hidden", "sent_hidden", "window",
                     "max_sentence_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.vocab_size < 5:
            raise ConfigError(f"vocab_size must exceed the 4 control tokens, got {self.vocab_size}")
        for name in ("dropout_in", "dropout_pre_softmax"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {getattr(self, name)}")

    @classmethod
    def toy(cls, vocab_size: int, **overrides) -> "ModelConfig":
        dims = dict(feature_dim=16, embed_dim=8, img_hidden=8, sent_hidden=4, dec_hidden=12)
        dims.update(overrides)
        return cls(vocab_size=vocab_size, **dims)

    @property
    def seq_len(self) -> int:
        return self.max_sentence_len + 2

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def parameter_names(config: ModelConfig) -> list[str]:
    names = ["embedding"]
    for i in range(config.img_layers):
        names += [f"img_enc.{i}.{g}" for g in GATE_NAMES]
    names += [f"sent_enc.{g}" for g in GATE_NAMES]
    for i in range(config.dec_layers):
        names += [f"dec.{i}.{g}" for g in GATE_NAMES]
    return names + ["out.W", "out.b"]


def parameter_shapes(config: ModelConfig) -> dict[str, tuple]:
    shapes = {"embedding": (config.vocab_size, config.embed_dim)}

    def gru(prefix, d, h):
        for g in ("Wz", "Wr", "Wh"):
            shapes[f"{prefix}.{g}"] = (d, h)
        for g in ("Uz", "Ur", "Uh"):
            shapes[f"{prefix}.{g}"] = (h, h)
        for g in ("bz", "br", "bh"):
            shapes[f"{prefix}.{g}"] = (h,)

    gru("img_enc.0", config.feature_dim, config.img_hidden)
    gru("img_enc.1", config.img_hidden, config.img_hidden)
    gru("sent_enc", config.embed_dim, config.sent_hidden)
    gru("dec.0", config.embed_dim, config.dec_hidden)
    gru("dec.1", config.dec_hidden, config.dec_hidden)
    shapes["out.W"] = (config.dec_hidden, config.vocab_size)
    shapes["out.b"] = (config.vocab_size,)
    return shapes


class ModelParameters:
    """Named parameter tensors plus the config that fixes their shapes."""

    def __init__(self, config: ModelConfig, tensors: Mapping[str, Tensor]):
        shapes = parameter_shapes(config)
        missing = set(shapes) - set(tensors)
        extra = set(tensors) - set(shapes)
        if missing or extra:
            raise ConfigError(f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, shape in shapes.items():
            if tensors[name].shape != shape:
                raise ConfigError(f"{name} has shape {tensors[name].shape}, config implies {shape}")
        self.config = config
        self.tensors = {name: tensors[name] for name in parameter_names(config)}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def replace(self, tensors: Mapping[str, Tensor]) -> "ModelParameters":
        return ModelParameters(self.config, {**self.tensors, **tensors})

    @property
    def embedding(self) -> EmbeddingTable:
        return EmbeddingTable(self.tensors["embedding"], trainable=self.config.train_embeddings)

    def gru(self, prefix: str) -> GruCellParams:
        return GruCellParams.from_named(self.tensors, prefix)

    def trainable(self) -> dict[str, Tensor]:
        if self.config.train_embeddings:
            return dict(self.tensors)
        return {k: v for k, v in self.tensors.items() if k != "embedding"}


def storage_round(a: np.ndarray) -> np.ndarray:
    """Round to the nearest float32 value, kept as float64."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def init_params(config: ModelConfig, seed: int = 0,
                embedding: EmbeddingTable | np.ndarray | None = None) -> ModelParameters:
    """Glorot-uniform weights, zero biases, all values float32-representable."""
    rng = make_rng(seed)
    tensors: dict[str, Tensor] = {}
    if embedding is None:
        tensors["embedding"] = Tensor(rng.uniform(-0.05, 0.05, (config.vocab_size, config.embed_dim)))
    else:
        mat = embedding.matrix.data if isinstance(embedding, EmbeddingTable) else np.asarray(embedding)
        if mat.shape != (config.vocab_size, config.embed_dim):
            raise ConfigError(f"embedding matrix {mat.shape} does not match "
                              f"({config.vocab_size}, {config.embed_dim})")
        tensors["embedding"] = Tensor(mat)
    for prefix, d, h in (("img_enc.0", config.feature_dim, config.img_hidden),
                         ("img_enc.1", config.img_hidden, config.img_hidden),
                         ("sent_enc", config.embed_dim, config.sent_hidden),
                         ("dec.0", config.embed_dim, config.dec_hidden),
                         ("dec.1", config.dec_hidden, config.dec_hidden)):
        tensors.update(init_gru(rng, d, h).named(prefix))
    tensors["out.W"] = Tensor(glorot(rng, config.dec_hidden, config.vocab_size))
    tensors["out.b"] = Tensor(np.zeros(config.vocab_size))
    tensors = {k: Tensor(storage_round(v.data), requires_grad=True) for k, v in tensors.items()}
    return ModelParameters(config, tensors)


def zero_params(config: ModelConfig) -> ModelParameters:
    shapes = parameter_shapes(config)
    return ModelParameters(config, {k: Tensor(np.zeros(s), requires_grad=True) for k, s in shapes.items()})


# --------------------------------------------------------------------------
# forward pass
# --------------------------------------------------------------------------

def _as_tensor3(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.ndim == 2:
        t = reshape(t, (1,) + t.shape)
    return t


def encode_images(params: ModelParameters, window_features, training: bool = False,
                  rng: np.random.Generator | None = None) -> list[Tensor]:
    """Final state of each image-encoder layer for a [b x T_w x feature_dim] window."""
    cfg = params.config
    feats = _as_tensor3(window_features)
    if feats.shape[2] != cfg.feature_dim:
        raise DimensionError(f"image features have dim {feats.shape[2]}, model expects {cfg.feature_dim}")
    if feats.shape[1] > cfg.window:
        raise DataContractError(f"image window of {feats.shape[1]} exceeds configured window {cfg.window}")
    feats = dropout(feats, cfg.dropout_in, rng, training)
    layers = [params.gru(f"img_enc.{i}") for i in range(cfg.img_layers)]
    b = feats.shape[0]
    h0 = [Tensor._wrap(np.zeros((b, cfg.img_hidden))) for _ in layers]
    _, finals = stacked_gru_run(layers, feats, h0)
    return finals


def encode_prev_sentence(params: ModelParameters, prev_ids, training: bool = False,
                         rng: np.random.Generator | None = None) -> Tensor:
    cfg = params.config
    ids = np.atleast_2d(np.asarray(prev_ids, dtype=np.int64))
    x = dropout(embed(params.embedding, ids), cfg.dropout_in, rng, training)
    h0 = Tensor._wrap(np.zeros((ids.shape[0], cfg.sent_hidden)))
    _, final = gru_run(params.gru("sent_enc"), x, h0)
    return final


def init_decoder_state(img_states: Sequence[Tensor], sent_state: Tensor,
                       dec_hidden: int | None = None) -> list[Tensor]:
    """Decoder layer ``i`` starts at ``concat(img_states[i], sent_state)``."""
    out = []
    for i, h in enumerate(img_states):
        if h.ndim != 2 or sent_state.ndim != 2 or h.shape[0] != sent_state.shape[0]:
            raise ConfigError(f"image state {i} {h.shape} and sentence state {sent_state.shape} "
                              "do not share a batch dimension")
        width = h.shape[1] + sent_state.shape[1]
        if dec_hidden is not None and width != dec_hidden:
            raise ConfigError(f"decoder layer {i}: {h.shape[1]} + {sent_state.shape[1]} = {width}, "
                              f"decoder expects {dec_hidden}")
        out.append(concat(h, sent_state))
    return out


def _project(params: ModelParameters, top: Tensor) -> Tensor:
    return add(matmul(top, params["out.W"]), params["out.b"])


def decode_teacher_forced(params: ModelParameters, init_states: Sequence[Tensor], current_ids,
                          training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Logits [b x (L-1) x V]: slot ``t`` predicts ``current_ids[:, t+1]``
    after consuming ``current_ids[:, :t+1]``."""
    cfg = params.config
    ids = np.atleast_2d(np.asarray(current_ids, dtype=np.int64))
    if np.any(ids[:, 0] != START_ID):
        raise DataContractError("current sentence must begin with <START>")
    x = dropout(embed(params.embedding, ids[:, :-1]), cfg.dropout_in, rng, training)
    layers = [params.gru(f"dec.{i}") for i in range(cfg.dec_layers)]
    top, _ = stacked_gru_run(layers, x, init_states)
    logits = []
    for t in range(top.shape[1]):
        h = dropout(select(top, t, axis=1), cfg.dropout_pre_softmax, rng, training)
        logits.append(_project(params, h))
    return stack(logits, axis=1)


def decode_step(params: ModelParameters, states: Sequence[Tensor], token_id) -> tuple[list[Tensor], Tensor]:
    """One inference-mode decoder step; returns new states and [b x V] probabilities."""
    cfg = params.config
    ids = np.atleast_1d(np.asarray(token_id, dtype=np.int64))
    x = embed(params.embedding, ids)
    new_states = []
    for i, h in enumerate(states):
        x = gru_step(params.gru(f"dec.{i}"), x, h)
        new_states.append(x)
    return new_states, softmax(_project(params, x))


def sequence_loss(logits: Tensor, targets, mask) -> Tensor:
    b, t, v = logits.shape
    probs = softmax(reshape(logits, (b * t, v)))
    return cross_entropy(probs, np.asarray(targets).reshape(-1), np.asarray(mask).reshape(-1))


@dataclass
class Batch:
    features: np.ndarray   # [b x T_w x feature_dim]
    prev_ids: np.ndarray   # [b x L]
    curr_ids: np.ndarray   # [b x L]
    mask: np.ndarray       # [b x (L-1)]

    @classmethod
    def of(cls, instances: Sequence[TrainingInstance]) -> "Batch":
        lens = {inst.window_len for inst in instances}
        if len(lens) != 1:
            raise DataContractError(f"batch mixes image window lengths {sorted(lens)}")
        return cls(np.stack([i.window_features for i in instances]),
                   np.stack([i.prev_ids for i in instances]),
                   np.stack([i.curr_ids for i in instances]),
                   np.stack([i.loss_mask for i in instances]))

    @property
    def token_count(self) -> float:
        return float(self.mask.sum())


def batch_loss(params: ModelParameters, batch: Batch, training: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
    """Masked cross-entropy of the teacher-forced decoder on ``batch``."""
    img = encode_images(params, batch.features, training, rng)
    sent = encode_prev_sentence(params, batch.prev_ids, training, rng)
    states = init_decoder_state(img, sent, params.config.dec_hidden)
    logits = decode_teacher_forced(params, states, batch.curr_ids, training, rng)
    return sequence_loss(logits, batch.curr_ids[:, 1:], batch.mask)


def gradcheck_config(dims: int = 6, max_len: int = 4) -> ModelConfig:
    """Every width at most ``dims``; decoder width ``dims`` split between encoders."""
    if dims < 2:
        raise ConfigError(f"gradcheck dims must be >= 2, got {dims}")
    sent = dims // 2
    return ModelConfig(vocab_size=dims + 4, feature_dim=dims, embed_dim=dims, img_hidden=dims - sent,
                       sent_hidden=sent, dec_hidden=dims, max_sentence_len=max_len, window=3,
                       dropout_in=0.0, dropout_pre_softmax=0.0)


def gradcheck_model(dims: int = 6, seed: int = 0, eps: float = 1e-5, samples: int | None = None,
                    max_len: int = 4) -> GradcheckReport:
    """Gradient check of the full model on a random 2-instance batch, dropout off."""
    from .data import encode_ids

    cfg = gradcheck_config(dims, max_len)
    params = init_params(cfg, seed)
    rng = make_rng(seed, stream=2)
    words = np.arange(4, cfg.vocab_size)
    prev = [encode_ids(rng.choice(words, size=k), max_len) for k in (max_len, 1)]
    curr = [encode_ids(rng.choice(words, size=k), max_len) for k in (2, max_len)]
    instances = [TrainingInstance(rng.standard_normal((2, cfg.feature_dim)), p, c)
                 for p, c in zip(prev, curr)]
    batch = Batch.of(instances)

    def f(tensors):
        return batch_loss(ModelParameters(cfg, tensors), batch)

    return gradcheck_report(f, params.tensors, eps=eps, samples=samples, rng=rng)
