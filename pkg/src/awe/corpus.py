"""Segments, lexicons, feature tables, on-disk formats, filtering and per-language batching.

On-disk layout of a corpus directory::

    <lang>.lex            word<TAB>phone phone ...        (one file per language)
    features.tsv          phone<TAB>feature=value,...     (optional)
    <split>/<lang>/manifest.jsonl  {"id","lang","word","n_frames","dim","offset"} per line
    <split>/<lang>/frames.bin      little-endian f32, row-major, rows of a segment contiguous
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TRAIN_MIN_FRAMES, TRAIN_MAX_FRAMES, TRAIN_MIN_COUNT = 25, 500, 3
EVAL_MIN_FRAMES, EVAL_MAX_FRAMES = 50, 500


class CorpusError(ValueError):
    """Malformed or inconsistent corpus data."""


@dataclass
class AcousticSegment:
    id: str
    language: str
    word: str
    frames: np.ndarray

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise CorpusError(f"segment {self.id}: frames must be a non-empty T x D matrix")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class FeatureTable:
    """Ordered (feature, value) dimensions and each phone's active pairs."""

    pairs: list[tuple[str, str]] = field(default_factory=list)
    phones: dict[str, tuple[tuple[str, str], ...]] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.pairs)) != len(self.pairs):
            raise CorpusError("duplicate (feature, value) pairs in feature table")
        known = set(self.pairs)
        for phone, active in self.phones.items():
            if not active:
                raise CorpusError(f"phone {phone!r} has no active features")
            missing = [p for p in active if p not in known]
            if missing:
                raise CorpusError(f"phone {phone!r} uses undeclared feature values {missing}")

    @property
    def dim(self) -> int:
        return len(self.pairs)

    @property
    def labels(self) -> list[str]:
        return [f"{f}={v}" for f, v in self.pairs]

    def __contains__(self, phone: str) -> bool:
        return phone in self.phones

    @classmethod
    def from_rows(cls, rows) -> "FeatureTable":
        """Build from (phone, [(feature, value), ...]) rows; dimension order is first appearance."""
        pairs, seen, phones = [], set(), {}
        for phone, active in rows:
            if phone in phones:
                raise CorpusError(f"phone {phone!r} listed twice in feature table")
            active = tuple(active)
            if len(set(active)) != len(active):
                raise CorpusError(f"phone {phone!r} repeats a feature value")
            for pair in active:
                if pair not in seen:
                    seen.add(pair)
                    pairs.append(pair)
            phones[phone] = active
        return cls(pairs, phones)


Lexicon = dict  # word -> tuple of phone symbols, one per language


@dataclass
class Corpus:
    """Per-language lexicons and segments for each split, plus an optional feature table."""

    lexicons: dict[str, Lexicon] = field(default_factory=dict)
    splits: dict[str, dict[str, list[AcousticSegment]]] = field(default_factory=dict)
    features: FeatureTable | None = None

    @property
    def languages(self) -> list[str]:
        return sorted(self.lexicons)

    def segments(self, split: str, language: str) -> list[AcousticSegment]:
        return self.splits.get(split, {}).get(language, [])

    def phone_inventory(self, languages=None) -> list[str]:
        """Phones used by the given languages' lexicons, in first-appearance order."""
        seen: dict[str, None] = {}
        for lang in languages if languages is not None else self.languages:
            for pron in self.lexicons[lang].values():
                for p in pron:
                    seen.setdefault(p, None)
        return list(seen)

    def validate(self, need_features: bool = False) -> None:
        for split, by_lang in self.splits.items():
            for lang, segs in by_lang.items():
                lex = self.lexicons.get(lang)
                if lex is None:
                    raise CorpusError(f"no lexicon for language {lang!r}")
                for s in segs:
                    if s.word not in lex:
                        raise CorpusError(f"word {s.word!r} (segment {s.id}) missing from {lang} lexicon")
        if need_features:
            if self.features is None:
                raise CorpusError("feature front-end requires a feature table")
            for lang, lex in self.lexicons.items():
                for word, pron in lex.items():
                    for p in pron:
                        if p not in self.features:
                            raise CorpusError(f"phone {p!r} in {lang} word {word!r} has no feature-table row")


# ----------------------------------------------------------------- file formats

class AccessLog:
    """Records every corpus file opened, so tests can audit data isolation."""

    def __init__(self):
        self.reads: list[str] = []

    def record(self, path) -> None:
        self.reads.append(str(path))


def read_lexicon(path, log: AccessLog | None = None) -> Lexicon:
    if log is not None:
        log.record(path)
    lex: Lexicon = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[1].split():
                raise CorpusError(f"{path}:{lineno}: expected 'word<TAB>phone phone ...'")
            word, phones = parts[0], tuple(parts[1].split())
            if word in lex:
                raise CorpusError(f"{path}:{lineno}: word {word!r} has more than one pronunciation")
            lex[word] = phones
    return lex


def write_lexicon(path, lex: Lexicon) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for word, phones in lex.items():
            fh.write(f"{word}\t{' '.join(phones)}\n")


def read_feature_table(path, log: AccessLog | None = None) -> FeatureTable:
    if log is not None:
        log.record(path)
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise CorpusError(f"{path}:{lineno}: expected 'phone<TAB>feature=value,...'")
            active = []
            for item in parts[1].split(","):
                if item.count("=") != 1:
                    raise CorpusError(f"{path}:{lineno}: malformed feature value {item!r}")
                f, v = item.split("=")
                active.append((f.strip(), v.strip()))
            rows.append((parts[0], active))
    return FeatureTable.from_rows(rows)


def write_feature_table(path, table: FeatureTable) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for phone, active in table.phones.items():
            fh.write(f"{phone}\t{','.join(f'{f}={v}' for f, v in active)}\n")


def write_segments(directory, segments) -> None:
    """Write one manifest + frame blob pair."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    offset = 0
    with open(directory / "manifest.jsonl", "w", encoding="utf-8") as man, \
            open(directory / "frames.bin", "wb") as blob:
        for s in segments:
            frames = np.ascontiguousarray(s.frames, dtype="<f4")
            man.write(json.dumps({"id": s.id, "lang": s.language, "word": s.word,
                                  "n_frames": int(frames.shape[0]), "dim": int(frames.shape[1]),
                                  "offset": offset}) + "\n")
            blob.write(frames.tobytes())
            offset += frames.nbytes


_MANIFEST_KEYS = {"id", "lang", "word", "n_frames", "dim", "offset"}


def read_segments(directory, log: AccessLog | None = None) -> list[AcousticSegment]:
    """Load the segments of one manifest + frames.bin pair."""
    directory = Path(directory)
    manifest, blob_path = directory / "manifest.jsonl", directory / "frames.bin"
    if log is not None:
        log.record(manifest)
    entries = []
    with open(manifest, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{manifest}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict) or set(rec) != _MANIFEST_KEYS:
                raise CorpusError(f"{manifest}:{lineno}: expected keys {sorted(_MANIFEST_KEYS)}")
            if not all(isinstance(rec[k], int) and not isinstance(rec[k], bool) and rec[k] >= 0
                       for k in ("n_frames", "dim", "offset")):
                raise CorpusError(f"{manifest}:{lineno}: n_frames, dim, offset must be non-negative integers")
            entries.append(rec)
    if not entries:
        return []
    if log is not None:
        log.record(blob_path)
    size = blob_path.stat().st_size if blob_path.exists() else 0
    blob = np.memmap(blob_path, dtype="<f4", mode="r") if size else np.zeros(0, "<f4")
    out, seen_ids = [], set()
    for e in entries:
        if e["id"] in seen_ids:
            raise CorpusError(f"duplicate segment id {e['id']!r}")
        seen_ids.add(e["id"])
        if e["offset"] % 4:
            raise CorpusError(f"segment {e['id']}: offset {e['offset']} is not a multiple of 4")
        start = e["offset"] // 4
        count = e["n_frames"] * e["dim"]
        if start + count > blob.size:
            raise CorpusError(f"segment {e['id']}: frames extend beyond end of {blob_path}")
        frames = np.array(blob[start:start + count], dtype=np.float32).reshape(e["n_frames"], e["dim"])
        if not np.all(np.isfinite(frames)):
            raise CorpusError(f"segment {e['id']}: non-finite frames")
        out.append(AcousticSegment(e["id"], e["lang"], e["word"], frames))
    return out


def write_corpus(directory, corpus: Corpus) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for lang, lex in corpus.lexicons.items():
        write_lexicon(directory / f"{lang}.lex", lex)
    if corpus.features is not None:
        write_feature_table(directory / "features.tsv", corpus.features)
    for split, by_lang in corpus.splits.items():
        for lang in sorted(by_lang):
            write_segments(directory / split / lang, by_lang[lang])


def load_corpus(directory, splits=("train", "dev", "test"), languages=None,
                log: AccessLog | None = None, validate: bool = True) -> Corpus:
    """Load lexicons, feature table and the requested splits of a corpus directory.

    ``languages`` restricts whose segment files are opened at all; lexicons
    are always read since they carry no acoustic data.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise CorpusError(f"corpus directory {directory} does not exist")
    lexicons = {p.stem: read_lexicon(p, log) for p in sorted(directory.glob("*.lex"))}
    feat_path = directory / "features.tsv"
    features = read_feature_table(feat_path, log) if feat_path.exists() else None
    corpus = Corpus(lexicons, {}, features)
    for split in splits:
        by_lang = {}
        split_dir = directory / split
        lang_dirs = sorted(d for d in split_dir.iterdir() if d.is_dir()) if split_dir.is_dir() else []
        for d in lang_dirs:
            if languages is not None and d.name not in languages:
                continue
            segs = read_segments(d, log)
            for s in segs:
                if s.language != d.name:
                    raise CorpusError(f"segment {s.id} has language {s.language!r} but lives under {d}")
            by_lang[d.name] = segs
        corpus.splits[split] = by_lang
    if validate:
        corpus.validate()
    return corpus


# ----------------------------------------------------------------- filtering

def filter_training(segments: list[AcousticSegment], min_frames: int = TRAIN_MIN_FRAMES,
                    max_frames: int = TRAIN_MAX_FRAMES, min_count: int = TRAIN_MIN_COUNT):
    """Keep segments of min..max frames whose word has >= min_count raw training tokens.

    Word counts are taken on the input before the duration filter.
    """
    counts = Counter(s.word for s in segments)
    return [s for s in segments
            if min_frames <= s.n_frames <= max_frames and counts[s.word] >= min_count]


def filter_eval(segments: list[AcousticSegment], min_frames: int = EVAL_MIN_FRAMES,
                max_frames: int = EVAL_MAX_FRAMES):
    return [s for s in segments if min_frames <= s.n_frames <= max_frames]


# ----------------------------------------------------------------- batching

@dataclass
class Batch:
    language: str
    segments: list[AcousticSegment]

    @property
    def words(self) -> list[str]:
        return [s.word for s in self.segments]


def _repair(chunks: list[list], rng: np.random.Generator) -> None:
    """Swap rows between chunks until every chunk has >= 2 distinct words."""
    for i, chunk in enumerate(chunks):
        if len({s.word for s in chunk}) >= 2:
            continue
        word = chunk[0].word
        order = [j for j in rng.permutation(len(chunks)) if j != i]
        fixed = False
        for j in order:
            other = chunks[j]
            for k, s in enumerate(other):
                if s.word == word:
                    continue
                # donor must keep two distinct words after giving s away
                rest = {o.word for n, o in enumerate(other) if n != k} | {word}
                if len(rest) >= 2:
                    chunk[-1], other[k] = s, chunk[-1]
                    fixed = True
                    break
            if fixed:
                break
        if not fixed:
            raise CorpusError(f"cannot form a batch with two distinct words for word {word!r}")


def make_batches(per_language: dict[str, list[AcousticSegment]], batch_size: int = 256,
                 seed: int = 0, epoch: int = 0) -> list[Batch]:
    """Single-language batches, shuffled by (seed, epoch), languages interleaved.

    Each language contributes ceil(n / batch_size) batches. A final chunk of
    a single segment is merged into its predecessor so that every batch has
    at least two rows; any batch with only one distinct word is repaired by
    swapping rows with another batch of the same language.
    """
    if batch_size < 2:
        raise ValueError("batch_size must be at least 2")
    rng = np.random.default_rng([seed, epoch])
    batches: list[Batch] = []
    for lang in sorted(per_language):
        segs = per_language[lang]
        if not segs:
            continue
        if len({s.word for s in segs}) < 2:
            raise CorpusError(f"language {lang!r} has fewer than 2 distinct words after filtering")
        order = rng.permutation(len(segs))
        shuffled = [segs[i] for i in order]
        n = math.ceil(len(shuffled) / batch_size)
        chunks = [shuffled[i * batch_size:(i + 1) * batch_size] for i in range(n)]
        if len(chunks) > 1 and len(chunks[-1]) < 2:
            chunks[-2].extend(chunks.pop())
        _repair(chunks, rng)
        batches.extend(Batch(lang, c) for c in chunks)
    schedule = rng.permutation(len(batches))
    return [batches[i] for i in schedule]
