"""Greedy sentence decoding and sentence-by-sentence story generation."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import (END_ID, NULL_ID, START_ID, STORY_LEN, UNK_ID, StorySample, Vocabulary,
                   decode_ids, encode_ids, make_windows)
from .errors import DataContractError, FeatureLookupError
from .model import ModelParameters, decode_step, encode_images, encode_prev_sentence, init_decoder_state


def generate_sentence(params: ModelParameters, window_features, prev_ids,
                      allow_unk: bool = True) -> np.ndarray:
    """Greedy decode one sentence; returns it in the ``max_len + 2`` slot layout.

    Ties go to the lowest token id.  NULL and START are never emitted; with
    ``allow_unk=False`` neither is UNK.
    """
    cfg = params.config
    img = encode_images(params, window_features)
    sent = encode_prev_sentence(params, prev_ids)
    states = init_decoder_state(img, sent, cfg.dec_hidden)
    banned = [NULL_ID, START_ID] + ([] if allow_unk else [UNK_ID])
    token = START_ID
    emitted: list[int] = []
    while len(emitted) < cfg.max_sentence_len:
        states, probs = decode_step(params, states, token)
        row = probs.data[0].copy()
        row[banned] = -np.inf
        token = int(np.argmax(row))
        if token == END_ID:
            break
        emitted.append(token)
    return encode_ids(emitted, cfg.max_sentence_len)


def generate_story(params: ModelParameters, image_features, window: int | None = None,
                   allow_unk: bool = True) -> list[np.ndarray]:
    """Five encoded sentences; each generated sentence conditions the next."""
    feats = np.asarray(image_features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] != STORY_LEN:
        raise DataContractError(f"a story needs exactly {STORY_LEN} image feature vectors, got shape {feats.shape}")
    cfg = params.config
    window = cfg.window if window is None else window
    prev = encode_ids([], cfg.max_sentence_len)
    story = []
    for idx in make_windows(STORY_LEN, window):
        sentence = generate_sentence(params, feats[idx][None], prev, allow_unk)
        story.append(sentence)
        prev = sentence
    return story


def story_features(sample: StorySample, features: Mapping[str, np.ndarray]) -> np.ndarray:
    for img in sample.image_ids:
        if img not in features:
            raise FeatureLookupError(f"no features for image id {img!r} (story {sample.story_id!r})")
    return np.stack([features[i] for i in sample.image_ids])


def generate_records(params: ModelParameters, vocab: Vocabulary, samples: Sequence[StorySample],
                     features: Mapping[str, np.ndarray], allow_unk: bool = True,
                     jobs: int = 1, with_reference: bool = True) -> list[dict]:
    """Output records in input order, whatever ``jobs`` is."""
    def one(sample):
        story = generate_story(params, story_features(sample, features), allow_unk=allow_unk)
        rec = {"story_id": sample.story_id, "generated": [decode_ids(vocab, s) for s in story]}
        if with_reference:
            rec["reference"] = list(sample.sentences)
        return rec

    if jobs <= 1:
        return [one(s) for s in samples]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, samples))


def write_records(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
