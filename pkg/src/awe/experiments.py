"""Desk-scale synthetic experiments shared by the scripts and the acceptance tests.

All runs use small models (see the config helpers below) so that each
finishes in seconds to a minute on one CPU core.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from awe.baselines import downsample_embeddings
from awe.checkpoint import Checkpoint
from awe.encoders import ModelConfig
from awe.metrics import acoustic_ap, pairwise_cosine
from awe.synth import SyntheticSpec, SyntheticWorld, subsample_tokens, synth_generate
from awe.trainer import (TrainConfig, TrainResult, adapt_vocabulary, evaluate_language, finetune, new_model,
                         train, written_symbols)

TARGET = "L4"
SOURCES = ["L0", "L1", "L2", "L3"]


def model_config(front_end="phone", hidden=48, layers=2, symbol_dim=16, frame_dim=13) -> ModelConfig:
    return ModelConfig(input_dim=frame_dim, hidden_size=hidden, acoustic_layers=layers,
                       dropout=0.4, symbol_dim=symbol_dim, front_end=front_end)


def train_config(front_end="phone", seed=0, epochs=20, batch_size=64) -> TrainConfig:
    return TrainConfig(batch_size=batch_size, max_epochs=epochs, seed=seed, front_end=front_end,
                       log_timing=False)


def baseline_ap(segments) -> float:
    return acoustic_ap(downsample_embeddings(segments), [s.word for s in segments])


def _fit(world: SyntheticWorld, langs, mcfg: ModelConfig, tcfg: TrainConfig) -> TrainResult:
    c = world.corpus
    lex = {l: c.lexicons[l] for l in langs}
    model = new_model(mcfg, written_symbols(mcfg.front_end, lex), tcfg.seed, c.features)
    return train(model, c.lexicons, {l: c.splits["train"][l] for l in langs},
                 {l: c.splits["dev"][l] for l in langs}, tcfg)


# ----------------------------------------------------------------- single language

def single_language_spec(seed=0) -> SyntheticSpec:
    # 15 tokens per word split 80/10/10 leaves 12 training tokens per word
    return SyntheticSpec(n_languages=1, phones_per_language=10, words_per_language=60, tokens_per_word=15,
                         frame_dim=13, noise_sigma=0.3, frames_per_phone_range=(2, 5), seed=seed)


@dataclass
class SingleLanguageResult:
    acoustic_ap: float
    crossview_ap: float
    baseline_ap: float
    epochs: int
    seconds: float


def run_single_language(seed=0, epochs=50) -> SingleLanguageResult:
    t0 = time.perf_counter()
    world = synth_generate(single_language_spec(seed))
    c = world.corpus
    res = _fit(world, ["L0"], model_config(hidden=64, layers=4), train_config(seed=seed, epochs=epochs))
    test = c.splits["test"]["L0"]
    s = evaluate_language(res.checkpoint.build_model(), c.lexicons["L0"], test)
    return SingleLanguageResult(s.acoustic_ap, s.crossview_ap, baseline_ap(test), len(res.history) - 1,
                                time.perf_counter() - t0)


# ----------------------------------------------------------------- multilingual transfer

def transfer_spec(seed=0) -> SyntheticSpec:
    return SyntheticSpec(n_languages=5, phones_per_language=10, unique_phone_fraction=0.3, words_per_language=60,
                         tokens_per_word=15, frame_dim=13, noise_sigma=0.6, frames_per_phone_range=(1, 6),
                         seed=seed)


def train_multilingual(world: SyntheticWorld, front_end: str, seed: int, epochs=20) -> Checkpoint:
    return _fit(world, SOURCES, model_config(front_end), train_config(front_end, seed, epochs)).checkpoint


@dataclass
class UnseenResult:
    seed: int
    front_end: str
    acoustic_ap: float
    crossview_ap: float
    baseline_ap: float


def evaluate_unseen(world: SyntheticWorld, ckpt: Checkpoint, front_end: str, seed: int) -> UnseenResult:
    c = world.corpus
    model, _ = adapt_vocabulary(ckpt.build_model(), c.lexicons[TARGET], c.features, seed)
    test = c.splits["test"][TARGET]
    s = evaluate_language(model, c.lexicons[TARGET], test)
    return UnseenResult(seed, front_end, s.acoustic_ap, s.crossview_ap, baseline_ap(test))


@dataclass
class FinetuneResult:
    seed: int
    budget: str
    fraction: float
    finetuned_ap: float
    single_ap: float


BUDGETS = {"small": 0.1, "medium": 0.5}


def run_finetune_budgets(world: SyntheticWorld, ckpt: Checkpoint, seed: int, epochs=20) -> list[FinetuneResult]:
    """Fine-tune ``ckpt`` and train from scratch on the same target subsets; compare test acoustic AP."""
    c = world.corpus
    lex, test, dev = c.lexicons[TARGET], c.splits["test"][TARGET], c.splits["dev"][TARGET]
    front_end = ckpt.config.front_end
    tcfg = train_config(front_end, seed, epochs)
    out = []
    for name, frac in BUDGETS.items():
        sub = subsample_tokens(c.splits["train"][TARGET], frac, seed)
        ft = finetune(ckpt, TARGET, c.lexicons, sub, dev, tcfg, c.features)
        ft_ap = evaluate_language(ft.checkpoint.build_model(), lex, test).acoustic_ap
        model = new_model(model_config(front_end), written_symbols(front_end, {TARGET: lex}), seed, c.features)
        single = train(model, c.lexicons, {TARGET: sub}, {TARGET: dev}, tcfg)
        single_ap = evaluate_language(single.checkpoint.build_model(), lex, test).acoustic_ap
        out.append(FinetuneResult(seed, name, frac, ft_ap, single_ap))
    return out


# ----------------------------------------------------------------- unseen phones

def unseen_phone_spec(seed=0) -> SyntheticSpec:
    return SyntheticSpec(n_languages=2, phones_per_language=10, unique_phone_fraction=0.3, words_per_language=40,
                         tokens_per_word=10, seed=seed)


@dataclass
class UnseenPhoneTrial:
    seed: int
    front_end: str
    phone: str
    hit: bool
    chance: float  # share of seen phones at the minimal Hamming distance


def hamming(a, b) -> int:
    return sum(x != y for x, y in zip(a, b))


def run_unseen_phone(seed: int, front_end: str, epochs=8) -> UnseenPhoneTrial | None:
    """Train on L0, compose a vector for an L1-only phone, and check its nearest seen phone.

    Returns None when no L1-only phone is made entirely of feature values seen in L0.
    """
    world = synth_generate(unseen_phone_spec(seed))
    c = world.corpus
    feats = c.features
    seen = sorted({p for pron in c.lexicons["L0"].values() for p in pron})
    seen_values = {fv for p in seen for fv in feats.phones[p]}
    candidates = [p for p in world.unique_phones["L1"] if set(feats.phones[p]) <= seen_values]
    if not candidates:
        return None
    query = candidates[0]
    ham = np.array([hamming(feats.phones[query], feats.phones[s]) for s in seen])
    res = _fit(world, ["L0"], model_config(front_end, hidden=32, layers=1, symbol_dim=64),
               train_config(front_end, seed, epochs))
    model, _ = adapt_vocabulary(res.checkpoint.build_model(), c.lexicons["L1"], feats, seed)
    vecs = model.front_end.vectors().data
    idx = model.front_end.index
    dist = pairwise_cosine(vecs[[idx[query]]], vecs[[idx[s] for s in seen]])[0]
    hit = bool(ham[int(np.argmin(dist))] == ham.min())
    return UnseenPhoneTrial(seed, front_end, query, hit, float(np.mean(ham == ham.min())))
