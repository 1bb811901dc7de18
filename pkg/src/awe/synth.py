"""Synthetic multilingual corpora with feature-structured phone acoustics.

Each (feature, value) pair owns a random prototype vector; a phone is one
value per feature and sounds like the sum of its values' prototypes. Phones
that share more feature values therefore sound more alike, which is what
lets a feature-based written encoder generalise to unseen phones.
"""

from __future__ import annotations

import itertools
import json
import string
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from awe.corpus import AcousticSegment, Corpus, FeatureTable

_GRAPHEME_ALPHABET = string.ascii_lowercase + string.digits


@dataclass
class SyntheticSpec:
    n_languages: int = 2
    phones_per_language: int = 10
    unique_phone_fraction: float = 0.0
    words_per_language: int = 60
    tokens_per_word: int = 15
    frame_dim: int = 13
    frames_per_phone_range: tuple[int, int] = (2, 5)
    noise_sigma: float = 0.3
    seed: int = 0
    n_features: int = 6
    values_per_feature: int = 3
    word_length_range: tuple[int, int] = (2, 6)
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    language_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.frames_per_phone_range = tuple(self.frames_per_phone_range)
        self.word_length_range = tuple(self.word_length_range)
        self.split_fractions = tuple(self.split_fractions)
        for name in ("n_languages", "phones_per_language", "words_per_language", "tokens_per_word",
                     "frame_dim", "n_features", "values_per_feature"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 <= self.unique_phone_fraction <= 1:
            raise ValueError("unique_phone_fraction must lie in [0, 1]")
        lo, hi = self.frames_per_phone_range
        if not 1 <= lo <= hi:
            raise ValueError("frames_per_phone_range must satisfy 1 <= lo <= hi")
        lo, hi = self.word_length_range
        if not 1 <= lo <= hi:
            raise ValueError("word_length_range must satisfy 1 <= lo <= hi")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.language_names and len(self.language_names) != self.n_languages:
            raise ValueError("language_names must name every language")
        if self.words_per_language < 2:
            raise ValueError("words_per_language must be >= 2")

    @property
    def languages(self) -> list[str]:
        return list(self.language_names) or [f"L{i}" for i in range(self.n_languages)]

    @classmethod
    def from_json(cls, text: str) -> "SyntheticSpec":
        raw = json.loads(text)
        if not isinstance(raw, dict):
            raise ValueError("synthetic spec must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {unknown}")
        return cls(**raw)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class SyntheticWorld:
    corpus: Corpus
    prototypes: dict[str, np.ndarray]      # phone -> acoustic prototype
    value_vectors: dict[tuple[str, str], np.ndarray]
    unique_phones: dict[str, list[str]]    # language -> phones used only there


def _feature_inventory(spec: SyntheticSpec):
    feats = [f"f{i}" for i in range(spec.n_features)]
    return [(f, f"v{j}") for f in feats for j in range(spec.values_per_feature)]


def _n_unique(spec: SyntheticSpec) -> int:
    return int(round(spec.unique_phone_fraction * spec.phones_per_language))


def synth_generate(spec: SyntheticSpec) -> SyntheticWorld:
    rng = np.random.default_rng(spec.seed)
    pairs = _feature_inventory(spec)
    n_combos = spec.values_per_feature ** spec.n_features
    n_unique = _n_unique(spec)
    n_shared = spec.phones_per_language - n_unique
    needed = n_shared + spec.n_languages * n_unique
    if needed > n_combos:
        raise ValueError(f"spec needs {needed} distinct phones but only {n_combos} "
                         f"feature combinations exist")

    scale = 1.0 / np.sqrt(spec.n_features)
    value_vectors = {p: rng.normal(size=spec.frame_dim) * scale for p in pairs}

    # phones are distinct value combinations, drawn without replacement
    chosen = rng.choice(n_combos, size=needed, replace=False)
    combos = []
    for code in chosen:
        digits = []
        for _ in range(spec.n_features):
            code, d = divmod(int(code), spec.values_per_feature)
            digits.append(d)
        combos.append(tuple((f"f{i}", f"v{d}") for i, d in enumerate(digits)))
    names = [f"p{i:03d}" for i in range(needed)]
    table = FeatureTable.from_rows(sorted(zip(names, combos), key=lambda r: r[0]))
    prototypes = {n: sum(value_vectors[v] for v in c) for n, c in zip(names, combos)}

    shared = names[:n_shared]
    langs = spec.languages
    lexicons, unique_phones, splits = {}, {}, {"train": {}, "dev": {}, "test": {}}
    for li, lang in enumerate(langs):
        own = names[n_shared + li * n_unique: n_shared + (li + 1) * n_unique]
        unique_phones[lang] = list(own)
        inventory = shared + own
        graphemes = _grapheme_map(inventory, rng)
        lex = _words(spec, inventory, graphemes, rng)
        lexicons[lang] = lex
        tokens = _render(spec, lang, lex, prototypes, rng)
        for split, segs in _split(spec, tokens, rng).items():
            splits[split][lang] = segs
    corpus = Corpus(lexicons, splits, table)
    return SyntheticWorld(corpus, prototypes, value_vectors, unique_phones)


def _grapheme_map(inventory, rng) -> dict[str, str]:
    # each language spells with its own random two-letter graphemes
    combos = ["".join(c) for c in itertools.product(_GRAPHEME_ALPHABET, repeat=2)]
    picks = rng.choice(len(combos), size=len(inventory), replace=False)
    return {p: combos[i] for p, i in zip(inventory, picks)}


def _words(spec, inventory, graphemes, rng) -> dict[str, tuple[str, ...]]:
    lo, hi = spec.word_length_range
    lex, seen = {}, set()
    attempts = 0
    while len(lex) < spec.words_per_language:
        attempts += 1
        if attempts > 1000 * spec.words_per_language:
            raise ValueError("cannot draw enough distinct words; widen word_length_range or add phones")
        length = int(rng.integers(lo, hi + 1))
        pron = tuple(inventory[i] for i in rng.integers(0, len(inventory), size=length))
        if pron in seen:
            continue
        seen.add(pron)
        lex["".join(graphemes[p] for p in pron)] = pron
    return lex


def _render(spec, lang, lex, prototypes, rng) -> list[AcousticSegment]:
    lo, hi = spec.frames_per_phone_range
    segs = []
    for wi, (word, pron) in enumerate(lex.items()):
        for k in range(spec.tokens_per_word):
            rows = []
            for p in pron:
                n = int(rng.integers(lo, hi + 1))
                rows.append(np.repeat(prototypes[p][None, :], n, axis=0))
            frames = np.concatenate(rows)
            if spec.noise_sigma > 0:
                frames = frames + rng.normal(scale=spec.noise_sigma, size=frames.shape)
            segs.append(AcousticSegment(f"{lang}_{wi:04d}_{k:03d}", lang, word, frames.astype(np.float32)))
    return segs


def _split(spec, tokens, rng) -> dict[str, list[AcousticSegment]]:
    order = rng.permutation(len(tokens))
    n = len(tokens)
    n_train = int(round(spec.split_fractions[0] * n))
    n_dev = int(round(spec.split_fractions[1] * n))
    assign = np.empty(n, dtype=np.int8)
    assign[order[:n_train]] = 0
    assign[order[n_train:n_train + n_dev]] = 1
    assign[order[n_train + n_dev:]] = 2
    # every word must keep at least one training token
    by_word: dict[str, list[int]] = {}
    for i, s in enumerate(tokens):
        by_word.setdefault(s.word, []).append(i)
    for idx in by_word.values():
        if not any(assign[i] == 0 for i in idx):
            assign[idx[0]] = 0
    names = ("train", "dev", "test")
    return {names[k]: [s for i, s in enumerate(tokens) if assign[i] == k] for k in range(3)}


def subsample_tokens(segments: list[AcousticSegment], fraction: float, seed: int) -> list[AcousticSegment]:
    """Keep about ``fraction`` of the tokens (at least two words), preserving order."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    n = max(2, int(round(fraction * len(segments))))
    keep = np.sort(rng.choice(len(segments), size=min(n, len(segments)), replace=False))
    out = [segments[i] for i in keep]
    if len({s.word for s in out}) < 2:
        extra = next(s for s in segments if s.word != out[0].word)
        out.append(extra)
    return out
