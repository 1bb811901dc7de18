"""Command-line entry point: ``awe synth|train|finetune|eval|embed|neighbors``.

Exit codes: 0 success, 1 usage error, 2 data or model error. With ``--json``
errors go to stderr as a single JSON line.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import struct
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from awe.checkpoint import Checkpoint, CheckpointError
from awe.corpus import AccessLog, CorpusError, load_corpus, write_corpus
from awe.encoders import ModelConfig, UnknownSymbolError
from awe.metrics import (MetricRow, NoPositivePairs, acoustic_pairs, crossview_pairs, pairwise_cosine, score,
                         write_pr_curve, write_report)
from awe.objective import ZeroNormError
from awe.synth import SyntheticSpec, synth_generate
from awe.trainer import (EXACT_PAIR_LIMIT, Experiment, Setting, TrainConfig, TrainingError, adapt_vocabulary,
                         embed_segments, embed_words, run_experiment)

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
EMBED_MAGIC = b"AWEE"
EMBED_VERSION = 1

_DATA_ERRORS = (CorpusError, CheckpointError, UnknownSymbolError, NoPositivePairs, ZeroNormError,
                TrainingError, KeyError, OSError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ----------------------------------------------------------------- config

_EXPERIMENT_KEYS = {"corpus", "setting", "target", "languages", "output", "train_fraction",
                    "init_checkpoint", "apply_filters", "model"}


def parse_experiment(raw: dict, base: Path | None = None) -> Experiment:
    """Build an Experiment from a run-file object.

    TrainConfig fields sit at the top level, ModelConfig fields under
    ``"model"``; anything else is rejected. Relative paths resolve against ``base``.
    """
    if not isinstance(raw, dict):
        raise UsageError("experiment config must be a JSON object")
    train_keys = TrainConfig.field_names()
    unknown = sorted(set(raw) - _EXPERIMENT_KEYS - train_keys)
    if unknown:
        raise UsageError(f"unknown config keys: {unknown}")
    if "corpus" not in raw:
        raise UsageError("config needs a 'corpus' path")
    model_raw = raw.get("model", {})
    if not isinstance(model_raw, dict):
        raise UsageError("'model' must be a JSON object")
    model_keys = {f.name for f in fields(ModelConfig)}
    bad = sorted(set(model_raw) - model_keys)
    if bad:
        raise UsageError(f"unknown model config keys: {bad}")

    def path(v):
        if v is None:
            return None
        p = Path(v)
        return str(p if p.is_absolute() or base is None else base / p)

    try:
        tc = TrainConfig(**{k: v for k, v in raw.items() if k in train_keys})
        mc = ModelConfig(**{**model_raw, "front_end": tc.front_end})
        setting = Setting(raw.get("setting", "single"))
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return Experiment(corpus=path(raw["corpus"]), setting=setting, target=raw.get("target"),
                      languages=raw.get("languages"), output=path(raw.get("output", "runs/out")),
                      train=tc, model=mc, train_fraction=float(raw.get("train_fraction", 1.0)),
                      init_checkpoint=path(raw.get("init_checkpoint")),
                      apply_filters=bool(raw.get("apply_filters", False)))


def load_experiment(path) -> Experiment:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    return parse_experiment(raw, path.parent)


# ----------------------------------------------------------------- embeddings file

def write_embeddings(path, rows: list[dict], matrix: np.ndarray) -> None:
    """b"AWEE" | u32 version | u64 header length | JSON header | f32 LE rows."""
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    header = json.dumps({"dim": int(matrix.shape[1]), "rows": rows}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(EMBED_MAGIC + struct.pack("<IQ", EMBED_VERSION, len(header)) + header + matrix.tobytes())


def read_embeddings(path) -> tuple[list[dict], np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != EMBED_MAGIC:
        raise CorpusError(f"{path}: not an embeddings file")
    _, hlen = struct.unpack("<IQ", data[4:16])
    header = json.loads(data[16:16 + hlen])
    mat = np.frombuffer(data, dtype="<f4", offset=16 + hlen).reshape(len(header["rows"]), header["dim"])
    return header["rows"], mat.astype(np.float32)


# ----------------------------------------------------------------- helpers

def _load_model(ckpt_path):
    return Checkpoint.load(ckpt_path).build_model()


def _split_data(corpus_dir, split, languages):
    langs = set(languages) if languages else None
    corpus = load_corpus(corpus_dir, splits=(split,), languages=langs)
    sets = corpus.splits.get(split, {})
    if languages:
        missing = [l for l in languages if l not in sets]
        if missing:
            raise CorpusError(f"no {split} data for language(s) {missing}")
    return corpus, {l: s for l, s in sorted(sets.items()) if s}


def _embed_language(model, corpus, lang, segments, seed):
    adapted, _ = adapt_vocabulary(model, corpus.lexicons[lang], corpus.features, seed)
    emb = embed_segments(adapted, segments)
    labels = [s.word for s in segments]
    written = embed_words(adapted, corpus.lexicons[lang], labels)
    return emb, labels, written


def _languages(arg):
    return [x for x in arg.split(",") if x] if arg else None


# ----------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    try:
        spec = SyntheticSpec.from_json(Path(args.spec).read_text(encoding="utf-8"))
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid synthetic spec: {exc}") from None
    world = synth_generate(spec)
    write_corpus(args.out, world.corpus)
    load_corpus(args.out)  # the written corpus must validate
    return EXIT_OK


def cmd_train(args) -> int:
    exp = load_experiment(args.config)
    if args.output:
        exp.output = args.output
    if exp.setting == Setting.FINETUNE and exp.init_checkpoint is None:
        raise UsageError("finetune setting needs init_checkpoint (or use the finetune command)")
    log = AccessLog()
    result = run_experiment(exp, log)
    if args.access_log:
        Path(args.access_log).write_text("\n".join(log.reads) + "\n", encoding="utf-8")
    print(json.dumps({"best_dev_crossview_ap": result.best_dev_ap, "epochs": len(result.history) - 1,
                      "output": str(exp.output)}))
    return EXIT_OK


def cmd_finetune(args) -> int:
    exp = load_experiment(args.config)
    exp.setting = Setting.FINETUNE
    exp.init_checkpoint = args.init
    if exp.target is None:
        raise UsageError("finetune needs a target language in the config")
    if args.output:
        exp.output = args.output
    Checkpoint.load(args.init)  # fail fast on a corrupt checkpoint
    result = run_experiment(exp)
    print(json.dumps({"best_dev_crossview_ap": result.best_dev_ap, "epochs": len(result.history) - 1,
                      "output": str(exp.output)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = sorted(set(metrics) - {"acoustic", "crossview"})
    if bad or not metrics:
        raise UsageError(f"unknown metric(s) {bad}; choose from acoustic, crossview")
    model = _load_model(args.ckpt)
    corpus, sets = _split_data(args.corpus, args.split, _languages(args.languages))
    if not sets:
        raise CorpusError(f"no {args.split} segments found")
    rows: list[MetricRow] = []
    per_metric: dict[str, list[float]] = {m: [] for m in metrics}
    for lang, segs in sets.items():
        emb, labels, written = _embed_language(model, corpus, lang, segs, args.seed)
        for m in metrics:
            pairs = acoustic_pairs(emb, labels) if m == "acoustic" else crossview_pairs(emb, labels, written)
            row = score(pairs, f"{lang}/{m}_ap", args.max_pairs, args.seed)
            rows.append(row)
            per_metric[m].append(row.value)
            if args.pr_dir:
                Path(args.pr_dir).mkdir(parents=True, exist_ok=True)
                write_pr_curve(Path(args.pr_dir) / f"{lang}_{m}.csv", pairs)
    if len(sets) > 1:
        for m in metrics:
            sub = [r for r in rows if r.metric.endswith(f"/{m}_ap")]
            rows.append(MetricRow(f"mean/{m}_ap", float(np.mean(per_metric[m])), sum(r.n_pairs for r in sub),
                                  sum(r.n_pos for r in sub), all(r.exact for r in sub)))
    if args.out:
        write_report(args.out, rows)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["metric", "value", "n_pairs", "n_pos", "exact"])
        for r in rows:
            w.writerow([r.metric, repr(float(r.value)), r.n_pairs, r.n_pos, str(r.exact).lower()])
    return EXIT_OK


def _index(model, corpus, sets, seed):
    rows, mats = [], []
    for lang, segs in sets.items():
        emb, labels, written = _embed_language(model, corpus, lang, segs, seed)
        rows += [{"kind": "segment", "id": s.id, "language": lang, "word": s.word} for s in segs]
        mats.append(emb)
        words = list(written)
        rows += [{"kind": "word", "id": w, "language": lang, "word": w} for w in words]
        mats.append(np.stack([written[w] for w in words]))
    return rows, np.concatenate(mats)


def cmd_embed(args) -> int:
    model = _load_model(args.ckpt)
    corpus, sets = _split_data(args.corpus, args.split, _languages(args.languages))
    if not sets:
        raise CorpusError(f"no {args.split} segments found")
    rows, mat = _index(model, corpus, sets, args.seed)
    write_embeddings(args.out, rows, mat)
    print(json.dumps({"rows": len(rows), "dim": int(mat.shape[1]), "out": str(args.out)}))
    return EXIT_OK


def cmd_neighbors(args) -> int:
    if args.k < 1:
        raise UsageError("--k must be >= 1")
    model = _load_model(args.ckpt)
    corpus, sets = _split_data(args.corpus, args.split, _languages(args.languages))
    rows, mat = _index(model, corpus, sets, args.seed)
    hits = [i for i, r in enumerate(rows) if r["id"] == args.query]
    if not hits:
        raise KeyError(f"query {args.query!r} matches no segment id or word in the index")
    q = hits[0]
    dist = pairwise_cosine(mat[q:q + 1], mat)[0]
    order = np.argsort(dist, kind="stable")[:args.k]
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["rank", "kind", "id", "language", "word", "distance"])
    for rank, i in enumerate(order, 1):
        r = rows[i]
        w.writerow([rank, r["kind"], r["id"], r["language"], r["word"], repr(float(dist[i]))])
    return EXIT_OK


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="awe", description="Multilingual acoustic word embeddings")
    p.add_argument("--json", action="store_true", help="machine-readable errors on stderr")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train in the single or unseen setting")
    s.add_argument("--config", required=True)
    s.add_argument("--output", help="override the config's output directory")
    s.add_argument("--access-log", help="write every data file opened, one per line")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("finetune", help="fine-tune a multilingual checkpoint on a target language")
    s.add_argument("--config", required=True)
    s.add_argument("--from", dest="init", required=True)
    s.add_argument("--output")
    s.set_defaults(func=cmd_finetune)

    def data_args(s):
        s.add_argument("--ckpt", required=True)
        s.add_argument("--corpus", required=True)
        s.add_argument("--split", default="test")
        s.add_argument("--languages", help="comma-separated subset")
        s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("eval", help="word discrimination report")
    data_args(s)
    s.add_argument("--metrics", default="acoustic,crossview")
    s.add_argument("--out", help="report CSV path (default stdout)")
    s.add_argument("--pr-dir", help="also write precision-recall curves here")
    s.add_argument("--max-pairs", type=int, default=EXACT_PAIR_LIMIT)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("embed", help="write segment and word embeddings")
    data_args(s)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("neighbors", help="nearest neighbours of a word or segment")
    data_args(s)
    s.add_argument("--query", required=True)
    s.add_argument("--k", type=int, default=10)
    s.set_defaults(func=cmd_neighbors)
    return p


def _fail(code: int, kind: str, message: str, as_json: bool) -> int:
    if as_json:
        sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    else:
        sys.stderr.write(f"awe: {kind}: {message}\n")
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    as_json = "--json" in argv
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required")
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc), as_json)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc), as_json)
    except _DATA_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        return _fail(EXIT_DATA, type(exc).__name__, str(msg), as_json)
    except ValueError as exc:
        return _fail(EXIT_DATA, type(exc).__name__, str(exc), as_json)


if __name__ == "__main__":
    sys.exit(main())
