"""Training for the single / unseen / fine-tune settings.

The learning rate starts at ``initial_lr`` and is divided by ``decay_factor``
whenever the dev cross-view AP has not strictly improved on the best value
for ``patience_epochs`` consecutive epochs; training stops once the rate
falls below ``stop_lr``. The returned checkpoint is the best-dev one.
"""

from __future__ import annotations

import copy
import csv
import enum
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from awe import tensor as T
from awe.checkpoint import Checkpoint
from awe.corpus import (AcousticSegment, Corpus, FeatureTable, filter_eval, filter_training, load_corpus,
                        make_batches)
from awe.encoders import ModelConfig, MultiViewModel
from awe.metrics import acoustic_pairs, crossview_pairs, score
from awe.objective import LossConfig, multiview_loss
from awe.tensor import AdamState

log = logging.getLogger(__name__)

EXACT_PAIR_LIMIT = 10_000_000
METRICS_HEADER = ["epoch", "loss", "lr", "dev_crossview_ap", "dev_acoustic_ap", "seconds"]


class TrainingError(RuntimeError):
    pass


class Setting(str, enum.Enum):
    SINGLE = "single"
    UNSEEN = "unseen"
    FINETUNE = "finetune"


@dataclass
class TrainConfig:
    batch_size: int = 256
    initial_lr: float = 5e-4
    decay_factor: float = 10.0
    patience_epochs: int = 5
    stop_lr: float = 1e-8
    margin: float = 0.4
    k_negatives: int = 20
    front_end: str = "phone"
    seed: int = 0
    max_epochs: int = 500
    log_timing: bool = True
    eval_batch_size: int = 512

    def __post_init__(self):
        for f in ("batch_size", "initial_lr", "decay_factor", "patience_epochs", "stop_lr", "margin",
                  "k_negatives", "max_epochs", "eval_batch_size"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        if self.stop_lr >= self.initial_lr:
            raise ValueError("stop_lr must be below initial_lr")
        if self.decay_factor <= 1:
            raise ValueError("decay_factor must exceed 1")

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.margin, self.k_negatives)

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


class LRSchedule:
    """Patience-based decay on a dev score, with a stopping threshold."""

    def __init__(self, initial_lr: float, decay_factor: float = 10.0, patience: int = 5,
                 stop_lr: float = 1e-8, best: float = -math.inf):
        self.lr = initial_lr
        self.decay_factor = decay_factor
        self.patience = patience
        self.stop_lr = stop_lr
        self.best = best
        self.bad_epochs = 0
        self.decays = 0

    @property
    def stopped(self) -> bool:
        return self.lr < self.stop_lr

    def update(self, score: float) -> bool:
        """Record one epoch's dev score. Returns True if this is a new best."""
        if score > self.best:
            self.best = score
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.lr /= self.decay_factor
            self.decays += 1
            self.bad_epochs = 0
        return False


@dataclass
class EpochRecord:
    epoch: int
    loss: float | None
    lr: float
    dev_crossview_ap: float
    dev_acoustic_ap: float
    seconds: float | None

    def row(self) -> list[str]:
        fmt = lambda x: "" if x is None else repr(float(x))
        return [str(self.epoch), fmt(self.loss), fmt(self.lr), fmt(self.dev_crossview_ap),
                fmt(self.dev_acoustic_ap), fmt(self.seconds)]


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[EpochRecord] = field(default_factory=list)

    @property
    def best_dev_ap(self) -> float:
        return self.checkpoint.state["best_dev_ap"]


def write_metrics(path, history: list[EpochRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for rec in history:
            w.writerow(rec.row())


# ----------------------------------------------------------------- model construction

def new_model(model_cfg: ModelConfig, symbols: list[str], seed: int,
              features: FeatureTable | None = None, dtype=np.float32) -> MultiViewModel:
    return MultiViewModel(model_cfg, symbols, np.random.default_rng([seed, 0]), features, dtype)


def written_symbols(front_end: str, lexicons: dict[str, dict]) -> list[str]:
    """Vocabulary of the written view: characters of the orthography, or phones."""
    seen: dict[str, None] = {}
    for lang in sorted(lexicons):
        for word, pron in lexicons[lang].items():
            for s in (word if front_end == "char" else pron):
                seen.setdefault(s, None)
    return list(seen)


# ----------------------------------------------------------------- evaluation

def embed_segments(model: MultiViewModel, segments: list[AcousticSegment], batch_size: int = 512) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(segments), batch_size):
            chunk = segments[i:i + batch_size]
            out.append(model.embed_acoustic([s.frames for s in chunk]).data)
    return np.concatenate(out).astype(np.float64)


def embed_words(model: MultiViewModel, lexicon: dict, words, batch_size: int = 512) -> dict[str, np.ndarray]:
    words = list(dict.fromkeys(words))
    out = {}
    with T.no_grad():
        for i in range(0, len(words), batch_size):
            chunk = words[i:i + batch_size]
            emb = model.embed_written([model.written_units(w, lexicon[w]) for w in chunk]).data
            out.update({w: e.astype(np.float64) for w, e in zip(chunk, emb)})
    return out


@dataclass
class LanguageScores:
    crossview_ap: float
    acoustic_ap: float | None


def evaluate_language(model: MultiViewModel, lexicon: dict, segments: list[AcousticSegment],
                      seed: int = 0, batch_size: int = 512) -> LanguageScores:
    labels = [s.word for s in segments]
    emb = embed_segments(model, segments, batch_size)
    written = embed_words(model, lexicon, labels, batch_size)
    cv = score(crossview_pairs(emb, labels, written), "crossview", EXACT_PAIR_LIMIT, seed).value
    try:
        ac = score(acoustic_pairs(emb, labels), "acoustic", EXACT_PAIR_LIMIT, seed).value
    except ValueError:
        ac = None  # no repeated word among the dev segments
    return LanguageScores(cv, ac)


def evaluate(model: MultiViewModel, lexicons: dict, sets: dict[str, list[AcousticSegment]],
             seed: int = 0, batch_size: int = 512) -> tuple[float, float]:
    """Unweighted mean over languages of (cross-view AP, acoustic AP)."""
    cvs, acs = [], []
    for lang in sorted(sets):
        if not sets[lang]:
            continue
        s = evaluate_language(model, lexicons[lang], sets[lang], seed, batch_size)
        cvs.append(s.crossview_ap)
        if s.acoustic_ap is not None:
            acs.append(s.acoustic_ap)
    if not cvs:
        raise TrainingError("no dev data to evaluate")
    return float(np.mean(cvs)), float(np.mean(acs)) if acs else float("nan")


# ----------------------------------------------------------------- training

def train(model: MultiViewModel, lexicons: dict, train_sets: dict[str, list[AcousticSegment]],
          dev_sets: dict[str, list[AcousticSegment]], config: TrainConfig,
          metrics_path=None, checkpoint_path=None,
          dev_score: Callable[[MultiViewModel], tuple[float, float]] | None = None) -> TrainResult:
    """Train ``model`` in place; return the best-dev checkpoint and the epoch log.

    Epoch 0 is the untrained model's evaluation and seeds the best score.
    ``dev_score`` overrides the dev evaluation (tests use it to script AP
    sequences).
    """
    if dev_score is None:
        dev_score = lambda m: evaluate(m, lexicons, dev_sets, config.seed, config.eval_batch_size)
    params = model.parameters()
    states = [AdamState.for_param(p) for p in params]
    lcfg = config.loss

    cv, ac = dev_score(model)
    sched = LRSchedule(config.initial_lr, config.decay_factor, config.patience_epochs, config.stop_lr, best=cv)
    history = [EpochRecord(0, None, sched.lr, cv, ac, 0.0 if config.log_timing else None)]
    best = _snapshot(model, states, sched, 0, cv)
    if checkpoint_path is not None:
        best.save(checkpoint_path)
    has_data = any(train_sets.values())

    epoch = 0
    while has_data and not sched.stopped and epoch < config.max_epochs:
        epoch += 1
        start = time.perf_counter()
        lr = sched.lr
        drop_rng = np.random.default_rng([config.seed, epoch, 1])
        total = 0.0
        for batch in make_batches(train_sets, config.batch_size, config.seed, epoch):
            lex = lexicons[batch.language]
            f = model.embed_acoustic([s.frames for s in batch.segments], training=True, rng=drop_rng)
            g = model.embed_written([model.written_units(w, lex[w]) for w in batch.words], training=True)
            loss = multiview_loss(f, g, batch.words, lcfg)
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch language {batch.language}")
            T.backward(loss, params)
            T.adam_step(params, states, lr)
            total += float(loss.data)
        cv, ac = dev_score(model)
        improved = sched.update(cv)
        seconds = time.perf_counter() - start if config.log_timing else None
        history.append(EpochRecord(epoch, total, lr, cv, ac, seconds))
        log.info("epoch %d loss %.4f lr %.2e dev cv %.4f ac %.4f", epoch, total, lr, cv, ac)
        if improved:
            best = _snapshot(model, states, sched, epoch, cv)
            if checkpoint_path is not None:
                best.save(checkpoint_path)
        if metrics_path is not None:
            write_metrics(metrics_path, history)
    if metrics_path is not None:
        write_metrics(metrics_path, history)
    return TrainResult(best, history)


def _snapshot(model, states, sched: LRSchedule, epoch: int, dev_ap: float) -> Checkpoint:
    return Checkpoint.from_model(model, states, {
        "epoch": epoch, "lr": sched.lr, "best_dev_ap": dev_ap, "bad_epochs": sched.bad_epochs})


# ----------------------------------------------------------------- adaptation / fine-tuning

def adapt_vocabulary(model: MultiViewModel, lexicon: dict, features: FeatureTable | None = None,
                     seed: int = 0) -> tuple[MultiViewModel, int]:
    """Return a copy of ``model`` able to embed every word of ``lexicon``, plus the new-row count.

    Phone/char front-ends append a Normal(0, 0.1) row per unseen symbol.
    The feature front-end composes unseen phones from their feature values;
    only feature values never seen before get fresh random rows.
    Existing rows are preserved exactly.
    """
    model = copy.deepcopy(model)
    rng = np.random.default_rng([seed, 7])
    front = model.front_end
    kind = model.config.front_end
    needed: dict[str, None] = {}
    for word, pron in lexicon.items():
        for s in (word if kind == "char" else pron):
            needed.setdefault(s, None)
    missing = [s for s in needed if s not in front.index]
    if not missing:
        return model, 0
    if kind in ("phone", "char"):
        table = front.table.table
        fresh = rng.normal(0.0, 0.1, size=(len(missing), table.shape[1])).astype(table.dtype)
        table.data = np.vstack([table.data, fresh])
        table.zero_grad()
        for s in missing:
            front.index[s] = len(front.symbols)
            front.symbols.append(s)
        return model, len(missing)
    if features is None:
        raise ValueError("feature front-end adaptation needs a feature table")
    absent = [p for p in missing if p not in features.phones]
    if absent:
        raise KeyError(f"phone {absent[0]!r} is absent from the feature table")
    new_values = []
    for p in missing:
        for f, v in features.phones[p]:
            lab = f"{f}={v}"
            if lab not in front.feature_values and lab not in new_values:
                new_values.append(lab)
    if new_values:
        table = front.value_table.table
        fresh = rng.normal(0.0, 0.1, size=(len(new_values), table.shape[1])).astype(table.dtype)
        table.data = np.vstack([table.data, fresh])
        table.zero_grad()
        front.feature_values.extend(new_values)
        front.feature_map = np.hstack([front.feature_map,
                                       np.zeros((front.feature_map.shape[0], len(new_values)), np.int8)])
    front.add_phones(missing, features)
    return model, len(new_values)


def finetune(checkpoint: Checkpoint, lexicon_name: str, lexicons: dict, train_set: list[AcousticSegment],
             dev_set: list[AcousticSegment], config: TrainConfig, features: FeatureTable | None = None,
             metrics_path=None, checkpoint_path=None) -> TrainResult:
    """Adapt the vocabulary to the target language, then train on its data alone.

    Optimizer moments are reset and the learning rate restarts at
    ``initial_lr``. With no target training data this returns the adapted
    (i.e. unseen-setting) model.
    """
    model = checkpoint.build_model()
    model, _ = adapt_vocabulary(model, lexicons[lexicon_name], features, config.seed)
    train_sets = {lexicon_name: list(train_set)} if train_set else {}
    dev_sets = {lexicon_name: list(dev_set)}
    return train(model, lexicons, train_sets, dev_sets, config, metrics_path, checkpoint_path)


# ----------------------------------------------------------------- settings

@dataclass
class Experiment:
    """One run of a setting on a corpus directory."""

    corpus: str
    setting: Setting = Setting.SINGLE
    target: str | None = None
    languages: list[str] | None = None  # training languages; default: all (minus target when unseen)
    output: str = "runs/out"
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train_fraction: float = 1.0
    init_checkpoint: str | None = None
    apply_filters: bool = False  # duration/frequency filters for real corpora


def plan_languages(exp: Experiment, all_languages: list[str]) -> list[str]:
    if exp.setting == Setting.SINGLE:
        if exp.target is None:
            return list(exp.languages or all_languages)
        return [exp.target]
    if exp.target is None:
        raise ValueError(f"{exp.setting.value} setting needs a target language")
    if exp.target not in all_languages:
        raise ValueError(f"target language {exp.target!r} not in corpus")
    if exp.setting == Setting.UNSEEN:
        pool = exp.languages or all_languages
        return [l for l in pool if l != exp.target]
    return [exp.target]


def run_experiment(exp: Experiment, access_log=None) -> TrainResult:
    """Load exactly the data the setting allows, train, and write outputs.

    UNSEEN never opens the target language's train/dev segment files.
    """
    from awe.synth import subsample_tokens

    out = Path(exp.output)
    out.mkdir(parents=True, exist_ok=True)
    lex_only = load_corpus(exp.corpus, splits=(), log=access_log)
    langs = plan_languages(exp, lex_only.languages)
    corpus: Corpus = load_corpus(exp.corpus, splits=("train", "dev"), languages=set(langs), log=access_log)
    need_features = exp.model.front_end == "feature"
    corpus.validate(need_features=need_features)
    train_sets = {l: corpus.segments("train", l) for l in langs}
    if exp.train_fraction < 1.0:
        train_sets = {l: subsample_tokens(s, exp.train_fraction, exp.train.seed) if s else s
                      for l, s in train_sets.items()}
    dev_sets = {l: corpus.segments("dev", l) for l in langs}
    if exp.apply_filters:
        train_sets = {l: filter_training(s) for l, s in train_sets.items()}
        dev_sets = {l: filter_eval(s) for l, s in dev_sets.items()}
    model_cfg = ModelConfig(**{**asdict(exp.model), "front_end": exp.train.front_end})

    if exp.setting == Setting.FINETUNE:
        if exp.init_checkpoint is None:
            raise ValueError("finetune setting needs an initial checkpoint")
        ckpt = Checkpoint.load(exp.init_checkpoint)
        result = finetune(ckpt, exp.target, corpus.lexicons, train_sets[exp.target], dev_sets[exp.target],
                          exp.train, corpus.features, out / "metrics.csv", out / "best.ckpt")
    else:
        symbols = written_symbols(model_cfg.front_end, {l: corpus.lexicons[l] for l in langs})
        model = new_model(model_cfg, symbols, exp.train.seed, corpus.features)
        result = train(model, corpus.lexicons, train_sets, dev_sets, exp.train,
                       out / "metrics.csv", out / "best.ckpt")
    result.checkpoint.save(out / "best.ckpt")
    return result
