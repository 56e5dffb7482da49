"""Vocabulary, sentence encoding, training instances and file formats.

File formats
------------
stories (JSON Lines)
    ``{"story_id": str, "image_ids": [5 x str], "sentences": [5 x str]}``
features (binary, little endian)
    ``b"VSF1"``, u32 count, u32 dim, then per record: u16 id length, UTF-8 id,
    ``dim`` float32 values.
embeddings (text)
    one token per line followed by ``embed_dim`` space separated reals.
vocabulary (JSON)
    ``{"tokens": [...]}``; a token's index is its position.
"""

from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataContractError, FeatureLookupError, FormatError
from .numerics import Tensor, make_rng
from .recurrent import EmbeddingTable

NULL, START, END, UNK = "<NULL>", "<START>", "<END>", "<UNK>"
RESERVED = (NULL, START, END, UNK)
NULL_ID, START_ID, END_ID, UNK_ID = 0, 1, 2, 3

STORY_LEN = 5
FEATURE_MAGIC = b"VSF1"


# --------------------------------------------------------------------------
# vocabulary
# --------------------------------------------------------------------------

class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise ConfigError(f"vocabulary must start with {list(RESERVED)}, got {tokens[:4]}")
        index = {}
        for i, tok in enumerate(tokens):
            if tok in index:
                raise ConfigError(f"duplicate vocabulary token {tok!r}")
            index[tok] = i
        self.tokens = tokens
        self.index = index

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __contains__(self, token):
        return token in self.index

    def id_of(self, token: str) -> int:
        if token in RESERVED:
            return UNK_ID
        return self.index.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        return self.tokens[idx]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"tokens": self.tokens}, ensure_ascii=False) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise FormatError(f"vocabulary is not valid JSON: {e.msg}", path, e.pos) from None
        if not isinstance(obj, dict) or not isinstance(obj.get("tokens"), list):
            raise FormatError('vocabulary file needs a "tokens" list', path)
        return cls(obj["tokens"])


def tokenize(sentence: str) -> list[str]:
    return sentence.split()


def build_vocab(sentences: Iterable[str], min_freq: int = 4) -> Vocabulary:
    """Reserved tokens followed by every token seen at least ``min_freq``
    times, most frequent first, ties in lexicographic order."""
    if min_freq < 1:
        raise ConfigError(f"min_freq must be >= 1, got {min_freq}")
    counts = Counter()
    n = 0
    for s in sentences:
        counts.update(t for t in tokenize(s) if t not in RESERVED)
        n += 1
    if n == 0:
        raise ConfigError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED) + kept)


def encode_sentence(vocab: Vocabulary, sentence: str | Sequence[str], max_len: int = 20) -> np.ndarray:
    """START, up to ``max_len`` token ids, END, NULL padding: ``max_len + 2`` slots."""
    toks = tokenize(sentence) if isinstance(sentence, str) else list(sentence)
    toks = toks[:max_len]
    ids = np.full(max_len + 2, NULL_ID, dtype=np.int64)
    ids[0] = START_ID
    ids[1:1 + len(toks)] = [vocab.id_of(t) for t in toks]
    ids[1 + len(toks)] = END_ID
    return ids


def encode_ids(token_ids: Sequence[int], max_len: int = 20) -> np.ndarray:
    """Same layout as :func:`encode_sentence` for already-mapped ids."""
    toks = list(token_ids)[:max_len]
    ids = np.full(max_len + 2, NULL_ID, dtype=np.int64)
    ids[0] = START_ID
    ids[1:1 + len(toks)] = toks
    ids[1 + len(toks)] = END_ID
    return ids


def loss_mask(ids: np.ndarray) -> np.ndarray:
    """1 for each prediction slot up to and including the END prediction."""
    end = int(np.flatnonzero(ids == END_ID)[0])
    mask = np.zeros(len(ids) - 1)
    mask[:end] = 1.0
    return mask


def decode_ids(vocab: Vocabulary, ids: Sequence[int]) -> str:
    """Words between START and END, control tokens other than UNK dropped."""
    out = []
    for i in ids:
        i = int(i)
        if i == END_ID:
            break
        if i in (NULL_ID, START_ID):
            continue
        out.append(vocab.token_of(i))
    return " ".join(out)


# --------------------------------------------------------------------------
# stories and instances
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class StorySample:
    story_id: str
    image_ids: tuple[str, ...]
    sentences: tuple[str, ...]

    def __post_init__(self):
        if len(self.image_ids) != STORY_LEN or len(self.sentences) != STORY_LEN:
            raise DataContractError(
                f"story {self.story_id!r} needs {STORY_LEN} images and {STORY_LEN} sentences, "
                f"got {len(self.image_ids)} and {len(self.sentences)}")

    def to_json(self) -> dict:
        return {"story_id": self.story_id, "image_ids": list(self.image_ids),
                "sentences": list(self.sentences)}


def read_stories(path) -> list[StorySample]:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                samples.append(StorySample(str(obj["story_id"]), tuple(obj["image_ids"]),
                                           tuple(obj["sentences"])))
            except (json.JSONDecodeError, KeyError, TypeError, DataContractError) as e:
                raise FormatError(f"bad story record: {e}", path, f"line {lineno}") from None
    return samples


def write_stories(path, samples: Iterable[StorySample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), ensure_ascii=False) + "\n")


def make_windows(n_images: int = STORY_LEN, window: int = 3) -> list[list[int]]:
    if window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    return [list(range(max(0, t - window + 1), t + 1)) for t in range(n_images)]


@dataclass
class TrainingInstance:
    window_features: np.ndarray  # [T_w x feature_dim]
    prev_ids: np.ndarray         # [max_len + 2]
    curr_ids: np.ndarray         # [max_len + 2]
    loss_mask: np.ndarray = field(default=None)  # [max_len + 1]

    def __post_init__(self):
        if self.loss_mask is None:
            self.loss_mask = loss_mask(self.curr_ids)

    @property
    def window_len(self) -> int:
        return self.window_features.shape[0]


def build_instances(sample: StorySample, vocab: Vocabulary, features: Mapping[str, np.ndarray],
                    window: int = 3, max_len: int = 20) -> list[TrainingInstance]:
    for img in sample.image_ids:
        if img not in features:
            raise FeatureLookupError(f"no features for image id {img!r} (story {sample.story_id!r})")
    vecs = [np.asarray(features[i], dtype=np.float64) for i in sample.image_ids]
    encoded = [encode_sentence(vocab, s, max_len) for s in sample.sentences]
    empty = encode_sentence(vocab, "", max_len)
    out = []
    for t, idx in enumerate(make_windows(STORY_LEN, window)):
        out.append(TrainingInstance(
            window_features=np.stack([vecs[i] for i in idx]),
            prev_ids=encoded[t - 1] if t > 0 else empty,
            curr_ids=encoded[t],
        ))
    return out


def split_dataset(samples: Sequence, ratios: Sequence[float] = (0.8, 0.1, 0.1),
                  seed: int = 0) -> tuple[list, list, list]:
    """Story-level shuffled split.  Sizes use largest remainders; every part
    gets at least one story."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three non-negative values summing to 1, got {ratios}")
    n = len(samples)
    if n < 3:
        raise ConfigError(f"need at least 3 samples to split, got {n}")
    raw = [r * n for r in ratios]
    sizes = [int(np.floor(x)) for x in raw]
    for i in sorted(range(3), key=lambda i: (-(raw[i] - sizes[i]), i))[: n - sum(sizes)]:
        sizes[i] += 1
    for i in range(3):
        while sizes[i] == 0:
            sizes[int(np.argmax(sizes))] -= 1
            sizes[i] += 1
    order = make_rng(seed).permutation(n)
    shuffled = [samples[i] for i in order]
    a, b = sizes[0], sizes[0] + sizes[1]
    return shuffled[:a], shuffled[a:b], shuffled[b:]


# --------------------------------------------------------------------------
# feature files
# --------------------------------------------------------------------------

def write_features(path, features: Mapping[str, np.ndarray]) -> None:
    items = list(features.items())
    dims = {np.asarray(v).reshape(-1).shape[0] for _, v in items}
    if len(dims) > 1:
        raise ConfigError(f"feature vectors have mixed dimensions {sorted(dims)}")
    dim = dims.pop() if dims else 0
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<II", len(items), dim))
        for key, vec in items:
            raw = key.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ConfigError(f"image id too long: {key[:40]!r}...")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(np.asarray(vec, dtype="<f4").reshape(-1).tobytes())


def read_features(path, expected_dim: int | None = None) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != FEATURE_MAGIC:
        raise FormatError("bad feature file magic", path, 0)
    if len(buf) < 12:
        raise FormatError("truncated feature header", path, len(buf))
    count, dim = struct.unpack_from("<II", buf, 4)
    if expected_dim is not None and dim != expected_dim:
        raise ConfigError(f"{path}: features have dim {dim}, model expects {expected_dim}")
    pos = 12
    out = {}
    for _ in range(count):
        if pos + 2 > len(buf):
            raise FormatError("truncated record header", path, pos)
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + n + 4 * dim > len(buf):
            raise FormatError("truncated record", path, pos)
        try:
            key = buf[pos:pos + n].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("image id is not UTF-8", path, pos) from None
        pos += n
        out[key] = np.frombuffer(buf, dtype="<f4", count=dim, offset=pos).astype(np.float64)
        pos += 4 * dim
    if pos != len(buf):
        raise FormatError("trailing bytes after last record", path, pos)
    return out


def synth_features(seed: int, ids: Sequence[str], dim: int) -> dict[str, np.ndarray]:
    """Deterministic pseudo-random unit vectors, rounded to float32."""
    rng = make_rng(seed)
    out = {}
    for key in ids:
        v = rng.standard_normal(dim)
        v = (v / np.linalg.norm(v)).astype(np.float32)
        out[key] = v.astype(np.float64)
    return out


# --------------------------------------------------------------------------
# embeddings
# --------------------------------------------------------------------------

def load_embeddings(path, vocab: Vocabulary, embed_dim: int, seed: int = 0,
                    trainable: bool = True) -> EmbeddingTable:
    """Copy pretrained rows for vocabulary tokens; the rest (control tokens
    included) are drawn uniformly from +-0.05."""
    rng = make_rng(seed)
    matrix = rng.uniform(-0.05, 0.05, size=(len(vocab), embed_dim))
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split(" ")
            if not parts or not parts[0]:
                continue
            if len(parts) - 1 != embed_dim:
                raise ConfigError(
                    f"{path} line {lineno}: {len(parts) - 1} values, expected embed_dim {embed_dim}")
            tok = parts[0]
            if tok in vocab.index and tok not in RESERVED:
                try:
                    matrix[vocab.index[tok]] = [float(x) for x in parts[1:]]
                except ValueError:
                    raise FormatError("non-numeric embedding value", path, f"line {lineno}") from None
    return EmbeddingTable(Tensor(matrix, requires_grad=True), trainable=trainable)


# --------------------------------------------------------------------------
# synthetic corpus
# --------------------------------------------------------------------------

SYNTH_WORDS = ("we", "went", "to", "the", "beach", "park", "dog", "saw", "a", "big",
               "happy", "day", "ran", "home", "friends", "cake")


def synth_stories(seed: int, n_stories: int, min_count: int = 4,
                  lengths: tuple[int, int] = (4, 7)) -> list[StorySample]:
    """Random stories whose words each occur at least ``min_count`` times
    (as far as the corpus size allows)."""
    if n_stories < 1:
        raise ConfigError("n_stories must be >= 1")
    rng = make_rng(seed)
    sent_lens = rng.integers(lengths[0], lengths[1] + 1, size=n_stories * STORY_LEN)
    total = int(sent_lens.sum())
    n_words = max(1, min(len(SYNTH_WORDS), total // min_count))
    pool = list(SYNTH_WORDS[:n_words])
    stream = pool * min_count
    stream += [pool[i] for i in rng.integers(0, n_words, size=max(0, total - len(stream)))]
    stream = [stream[i] for i in rng.permutation(len(stream))][:total]
    samples = []
    pos = 0
    for s in range(n_stories):
        sents = []
        for k in range(STORY_LEN):
            n = int(sent_lens[s * STORY_LEN + k])
            sents.append(" ".join(stream[pos:pos + n]))
            pos += n
        sid = f"synth-{s:04d}"
        samples.append(StorySample(sid, tuple(f"{sid}-img{k}" for k in range(STORY_LEN)), tuple(sents)))
    return samples
