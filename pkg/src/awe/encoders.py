"""Acoustic encoder f and written encoder g with char / phone / feature front-ends."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from awe import tensor as T
from awe.corpus import FeatureTable
from awe.layers import BGRUStack, EmbeddingTable, Module, PaddedBatch
from awe.tensor import Tensor

FRONT_ENDS = ("char", "phone", "feature")


class UnknownSymbolError(KeyError):
    def __str__(self):
        return str(self.args[0])


@dataclass
class ModelConfig:
    input_dim: int = 117
    hidden_size: int = 512
    acoustic_layers: int = 4
    written_layers: int = 1
    dropout: float = 0.4
    symbol_dim: int = 64
    front_end: str = "phone"

    def __post_init__(self):
        if self.front_end not in FRONT_ENDS:
            raise ValueError(f"front_end must be one of {FRONT_ENDS}, got {self.front_end!r}")

    @property
    def embedding_dim(self) -> int:
        return 2 * self.hidden_size


def phone_to_feature_vector(phone: str, table: FeatureTable) -> np.ndarray:
    """Multi-hot vector over the table's (feature, value) dimensions, in file order."""
    if phone not in table.phones:
        raise UnknownSymbolError(f"phone {phone!r} is not in the feature table")
    index = {pair: i for i, pair in enumerate(table.pairs)}
    vec = np.zeros(table.dim, dtype=np.int8)
    for pair in table.phones[phone]:
        vec[index[pair]] = 1
    return vec


# ----------------------------------------------------------------- front-ends

class SymbolFrontEnd(Module):
    """One learned vector per symbol (phone or character)."""

    def __init__(self, kind: str, symbols: list[str], dim: int, rng, dtype=np.float32):
        self.kind = kind
        self.symbols = list(symbols)
        self.index = {s: i for i, s in enumerate(self.symbols)}
        if len(self.index) != len(self.symbols):
            raise ValueError(f"duplicate symbols in {kind} vocabulary")
        self.table = EmbeddingTable(len(self.symbols), dim, rng, f"written.{kind}_embedding", dtype=dtype)

    @property
    def dim(self) -> int:
        return self.table.dim

    def ids(self, seq) -> list[int]:
        try:
            return [self.index[s] for s in seq]
        except KeyError as exc:
            raise UnknownSymbolError(
                f"{self.kind} {exc.args[0]!r} is not in the model vocabulary; "
                f"call adapt_vocabulary before embedding it") from None

    def vectors(self) -> Tensor:
        return self.table.table

    def __call__(self, id_matrix: np.ndarray) -> Tensor:
        return T.gather_rows(self.table.table, id_matrix)


class FeatureFrontEnd(Module):
    """Phone vector = sum of the embeddings of its active feature values (bias-free linear map)."""

    kind = "feature"

    def __init__(self, phones: list[str], table: FeatureTable, dim: int, rng, dtype=np.float32):
        self.feature_values = list(table.labels)
        self.value_table = EmbeddingTable(len(self.feature_values), dim, rng,
                                          "written.feature_embedding", dtype=dtype)
        self.symbols: list[str] = []
        self.index: dict[str, int] = {}
        self.feature_map = np.zeros((0, len(self.feature_values)), dtype=np.int8)
        self.add_phones(phones, table)

    @property
    def dim(self) -> int:
        return self.value_table.dim

    def add_phones(self, phones, table: FeatureTable) -> None:
        col = {lab: i for i, lab in enumerate(self.feature_values)}
        rows = []
        for p in phones:
            if p in self.index:
                continue
            if p not in table.phones:
                raise UnknownSymbolError(f"phone {p!r} has no feature-table row")
            row = np.zeros(len(self.feature_values), dtype=np.int8)
            for f, v in table.phones[p]:
                row[col[f"{f}={v}"]] = 1
            self.index[p] = len(self.symbols)
            self.symbols.append(p)
            rows.append(row)
        if rows:
            self.feature_map = np.vstack([self.feature_map, np.stack(rows)])

    def ids(self, seq) -> list[int]:
        try:
            return [self.index[s] for s in seq]
        except KeyError as exc:
            raise UnknownSymbolError(
                f"phone {exc.args[0]!r} is missing from the feature map; "
                f"call adapt_vocabulary with a feature table covering it") from None

    def vectors(self) -> Tensor:
        phi = T.Tensor(self.feature_map.astype(self.value_table.table.dtype), requires_grad=False)
        return T.matmul(phi, self.value_table.table)

    def __call__(self, id_matrix: np.ndarray) -> Tensor:
        return T.gather_rows(self.vectors(), id_matrix)


# ----------------------------------------------------------------- encoders

class AcousticEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        self.input_dim = cfg.input_dim
        self.stack = BGRUStack(cfg.input_dim, cfg.hidden_size, cfg.acoustic_layers, rng,
                               "acoustic", dropout_rate=cfg.dropout, dtype=dtype)


def embed_acoustic(encoder: AcousticEncoder, segments, training: bool = False, rng=None) -> Tensor:
    """Embed a list of T_i x D frame matrices (or a ready PaddedBatch); returns (B, 2H)."""
    dtype = encoder.stack.layers[0][0].W_z.dtype
    if isinstance(segments, PaddedBatch):
        batch = segments
    else:
        for s in segments:
            if s.ndim != 2 or s.shape[1] != encoder.input_dim:
                raise ValueError(f"acoustic encoder expects frames of width {encoder.input_dim}, got {s.shape}")
        batch = PaddedBatch.from_sequences(segments, dtype=dtype, width=encoder.input_dim)
    if batch.data.shape[2] != encoder.input_dim:
        raise ValueError(f"acoustic encoder expects frames of width {encoder.input_dim}, got {batch.data.shape[2]}")
    _, final = encoder.stack(batch, training, rng)
    return final


class WrittenEncoder(Module):
    def __init__(self, cfg: ModelConfig, front_end, rng, dtype=np.float32):
        if front_end.dim != cfg.symbol_dim:
            raise ValueError("front-end width must equal the written stack input width")
        self.front_end = front_end
        self.stack = BGRUStack(cfg.symbol_dim, cfg.hidden_size, cfg.written_layers, rng,
                               "written", dropout_rate=0.0, dtype=dtype)


def embed_written(encoder: WrittenEncoder, sequences, training: bool = False, rng=None) -> Tensor:
    """Embed symbol sequences (phone lists or strings of characters); returns (B, 2H)."""
    if not sequences:
        raise ValueError("no sequences to embed")
    ids = [encoder.front_end.ids(seq) for seq in sequences]
    lengths = np.array([len(s) for s in ids])
    if lengths.min() < 1:
        raise ValueError("written sequences must be non-empty")
    id_matrix = np.zeros((len(ids), lengths.max()), dtype=np.intp)
    for i, s in enumerate(ids):
        id_matrix[i, : len(s)] = s
    x = encoder.front_end(id_matrix)
    _, final = encoder.stack(PaddedBatch(x, lengths), training, rng)
    return final


class MultiViewModel(Module):
    """Jointly trained acoustic (f) and written (g) encoders."""

    def __init__(self, cfg: ModelConfig, symbols: list[str], rng: np.random.Generator,
                 feature_table: FeatureTable | None = None, dtype=np.float32):
        self.config = cfg
        self.acoustic = AcousticEncoder(cfg, rng, dtype)
        if cfg.front_end == "feature":
            if feature_table is None:
                raise ValueError("feature front-end needs a feature table")
            front = FeatureFrontEnd(symbols, feature_table, cfg.symbol_dim, rng, dtype)
        else:
            front = SymbolFrontEnd(cfg.front_end, symbols, cfg.symbol_dim, rng, dtype)
        self.written = WrittenEncoder(cfg, front, rng, dtype)

    @property
    def front_end(self):
        return self.written.front_end

    def written_units(self, word: str, pronunciation) -> list[str]:
        """The symbol sequence fed to g for a word: its characters or its phones."""
        return list(word) if self.config.front_end == "char" else list(pronunciation)

    def embed_acoustic(self, frames, training=False, rng=None) -> Tensor:
        return embed_acoustic(self.acoustic, frames, training, rng)

    def embed_written(self, sequences, training=False, rng=None) -> Tensor:
        return embed_written(self.written, sequences, training, rng)

    def describe(self) -> dict:
        return {"config": asdict(self.config), "symbols": list(self.front_end.symbols)}

