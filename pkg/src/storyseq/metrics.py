"""Corpus BLEU-1..4 and a METEOR variant with exact and stem matching.

METEOR here has no synonym stage, so scores are comparable to but not the
same as the reference METEOR scorer.  Stems come from the original Porter
algorithm (case preserved).

Alignment objective, in priority order: most exact (surface-equal) matches,
then most matches overall (stem-equal), then fewest chunks.  The chunk
minimisation is an exact search, memoised over (position, used reference
words, previous match).
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping, Sequence

from nltk.stem.porter import PorterStemmer

from .errors import AlignmentError, ConfigError, FormatError

_PORTER = PorterStemmer(mode=PorterStemmer.ORIGINAL_ALGORITHM)


@lru_cache(maxsize=65536)
def stem(word: str) -> str:
    return _PORTER.stem(word, to_lowercase=False)


def _tokens(s) -> list[str]:
    return s.split() if isinstance(s, str) else list(s)


# --------------------------------------------------------------------------
# BLEU
# --------------------------------------------------------------------------

def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(generated: Sequence, references: Sequence, max_n: int = 4) -> tuple[list[float], list[float]]:
    """Corpus BLEU with one reference per generated sentence.

    Returns ``(cumulative, precisions)`` for orders 1..max_n.  An order with
    no generated n-grams has precision 0.
    """
    if len(generated) != len(references):
        raise ConfigError(f"{len(generated)} generated sentences but {len(references)} references")
    if not generated:
        raise ConfigError("cannot score an empty corpus")
    matched = [0] * max_n
    total = [0] * max_n
    c_len = r_len = 0
    for gen, ref in zip(generated, references):
        g, r = _tokens(gen), _tokens(ref)
        c_len += len(g)
        r_len += len(r)
        for n in range(1, max_n + 1):
            gc, rc = ngrams(g, n), ngrams(r, n)
            matched[n - 1] += sum(min(c, rc[k]) for k, c in gc.items())
            total[n - 1] += sum(gc.values())
    precisions = [m / t if t else 0.0 for m, t in zip(matched, total)]
    if c_len == 0:
        bp = 0.0
    else:
        bp = min(1.0, math.exp(1.0 - r_len / c_len))
    cumulative = []
    for n in range(1, max_n + 1):
        ps = precisions[:n]
        if min(ps) == 0.0:
            cumulative.append(0.0)
        else:
            cumulative.append(bp * math.exp(math.fsum(math.log(p) for p in ps) / n))
    return cumulative, precisions


# --------------------------------------------------------------------------
# METEOR
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Alignment:
    matches: int
    exact: int
    chunks: int


def align(gen: Sequence[str], ref: Sequence[str]) -> Alignment:
    n = len(gen)
    gstem = [stem(w) for w in gen]
    rstem = [stem(w) for w in ref]

    # exact and total match counts are fixed by word/stem multiplicities
    gw, rw = Counter(gen), Counter(ref)
    gs, rs = Counter(gstem), Counter(rstem)
    exact_target = {w: min(gw[w], rw[w]) for w in gw if w in rw}
    class_target = {s: min(gs[s], rs[s]) for s in gs if s in rs}
    n_matches = sum(class_target.values())
    n_exact = sum(exact_target.values())
    if n_matches == 0:
        return Alignment(0, 0, 0)

    type_mask = {w: sum(1 << j for j, x in enumerate(ref) if x == w) for w in exact_target}
    class_mask = {s: sum(1 << j for j, x in enumerate(rstem) if x == s) for s in class_target}
    # gen words still to come, per type/class, from position i on
    type_left = [Counter(gen[i:]) for i in range(n + 1)]
    class_left = [Counter(gstem[i:]) for i in range(n + 1)]
    cands = [[j for j, s in enumerate(rstem) if s == gstem[i]] for i in range(n)]

    def feasible(i, used, exact):
        for w, target in exact_target.items():
            if target - bin(exact & type_mask[w]).count("1") > type_left[i][w]:
                return False
        for s, target in class_target.items():
            if target - bin(used & class_mask[s]).count("1") > class_left[i][s]:
                return False
        return True

    NEG = -10 ** 9

    @lru_cache(maxsize=None)
    def best(i, used, exact, prev):
        if not feasible(i, used, exact):
            return NEG
        if i == n:
            return 0
        result = best(i + 1, used, exact, -1)
        for j in cands[i]:
            bit = 1 << j
            if used & bit:
                continue
            link = 1 if prev >= 0 and j == prev + 1 else 0
            e = exact | bit if gen[i] == ref[j] else exact
            v = best(i + 1, used | bit, e, j)
            if v != NEG:
                result = max(result, v + link)
        return result

    links = best(0, 0, 0, -1)
    best.cache_clear()
    return Alignment(n_matches, n_exact, n_matches - links)


def meteor_lite(generated, reference) -> float:
    gen, ref = _tokens(generated), _tokens(reference)
    if not gen or not ref:
        return 0.0
    a = align(gen, ref)
    if a.matches == 0:
        return 0.0
    p = a.matches / len(gen)
    r = a.matches / len(ref)
    f = 10.0 * p * r / (r + 9.0 * p)
    penalty = 0.5 * (a.chunks / a.matches) ** 3
    return f * (1.0 - penalty)


# --------------------------------------------------------------------------
# corpus report
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ScoreReport:
    bleu_cumulative: tuple[float, ...]
    bleu_precisions: tuple[float, ...]
    meteor: float
    sentence_count: int

    def to_json(self) -> dict:
        """Scores on a 0-100 scale."""
        return {"bleu": [100.0 * x for x in self.bleu_cumulative],
                "precisions": [100.0 * x for x in self.bleu_precisions],
                "meteor": 100.0 * self.meteor,
                "sentences": self.sentence_count}

    def summary(self) -> str:
        b = "/".join(f"{100 * x:.1f}" for x in self.bleu_cumulative)
        return f"BLEU {b}  METEOR {100 * self.meteor:.1f}  ({self.sentence_count} sentences)"


def score_stories(generated: Mapping[str, Sequence[str]],
                  references: Mapping[str, Sequence[str]]) -> ScoreReport:
    """Pair sentences by story id and position."""
    for sid in generated:
        if sid not in references:
            raise AlignmentError(f"generated story {sid!r} has no reference")
    for sid in references:
        if sid not in generated:
            raise AlignmentError(f"reference story {sid!r} was not generated")
    gens, refs = [], []
    for sid in sorted(generated):
        g, r = list(generated[sid]), list(references[sid])
        if len(g) != len(r):
            raise AlignmentError(f"story {sid!r}: {len(g)} generated vs {len(r)} reference sentences")
        gens += g
        refs += r
    cumulative, precisions = bleu(gens, refs)
    meteor = math.fsum(meteor_lite(g, r) for g, r in zip(gens, refs)) / len(gens)
    return ScoreReport(tuple(cumulative), tuple(precisions), meteor, len(gens))


def read_story_texts(path, prefer: Sequence[str]) -> dict[str, list[str]]:
    """story_id -> sentences, taken from the first key in ``prefer`` present."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                key = next(k for k in prefer if k in obj)
                sid = str(obj["story_id"])
                out[sid] = [str(s) for s in obj[key]]
            except (json.JSONDecodeError, KeyError, StopIteration, TypeError):
                raise FormatError(f"record needs story_id and one of {list(prefer)}", path,
                                  f"line {lineno}") from None
    return out


def score_corpus(generated_path, reference_path) -> ScoreReport:
    generated = read_story_texts(generated_path, ("generated", "sentences"))
    references = read_story_texts(reference_path, ("sentences", "reference"))
    return score_stories(generated, references)
