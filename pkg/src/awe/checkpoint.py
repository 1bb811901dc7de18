"""Single-file checkpoints.

Layout: b"AWEF" | u32 version | u64 header length | UTF-8 JSON header | tensor blobs.
The header carries the architecture, symbol id maps, training state and a
tensor directory (name, shape, dtype, offset, nbytes) with offsets relative
to the start of the blob section. All integers and blobs are little-endian.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from awe.corpus import FeatureTable
from awe.encoders import ModelConfig, MultiViewModel
from awe.tensor import AdamState

MAGIC = b"AWEF"
VERSION = 1
_DTYPES = {"f32": "<f4", "f64": "<f8"}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    symbols: list[str]
    tensors: dict[str, np.ndarray]
    feature_values: list[str] | None = None
    feature_map: dict[str, list[str]] | None = None  # phone -> active feature-value labels
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)  # "m/<name>", "v/<name>"
    state: dict = field(default_factory=dict)  # lr, epoch, best_dev_ap, step_count, ...

    # ------------------------------------------------------------ model conversion

    @classmethod
    def from_model(cls, model: MultiViewModel, optimizer_states: list[AdamState] | None = None,
                   state: dict | None = None) -> "Checkpoint":
        params = model.parameters()
        tensors = {p.name: p.data.copy() for p in params}
        opt = {}
        st = dict(state or {})
        if optimizer_states:
            for p, s in zip(params, optimizer_states):
                opt[f"m/{p.name}"] = s.m.copy()
                opt[f"v/{p.name}"] = s.v.copy()
            st["step_count"] = optimizer_states[0].step_count
        front = model.front_end
        fv = fmap = None
        if model.config.front_end == "feature":
            fv = list(front.feature_values)
            fmap = {p: [fv[j] for j in np.flatnonzero(front.feature_map[i])]
                    for i, p in enumerate(front.symbols)}
        return cls(ModelConfig(**asdict(model.config)), list(front.symbols), tensors, fv, fmap, opt, st)

    def build_model(self) -> MultiViewModel:
        """Instantiate a model whose parameters are exact copies of the stored tensors."""
        table = None
        if self.config.front_end == "feature":
            rows = [(p, [tuple(lab.split("=", 1)) for lab in labs]) for p, labs in self.feature_map.items()]
            table = FeatureTable.from_rows(rows)
            # declared value order wins over first appearance (some values may be unused)
            pairs = [tuple(lab.split("=", 1)) for lab in self.feature_values]
            table = FeatureTable(pairs, table.phones)
        dtype = next(iter(self.tensors.values())).dtype if self.tensors else np.float32
        model = MultiViewModel(self.config, self.symbols, np.random.default_rng(0), table, dtype=dtype)
        params = model.named_parameters()
        if set(params) != set(self.tensors):
            missing = sorted(set(params) ^ set(self.tensors))
            raise CheckpointError(f"checkpoint tensors do not match the architecture: {missing[:5]}")
        for name, p in params.items():
            arr = self.tensors[name]
            if arr.shape != p.shape:
                raise CheckpointError(f"tensor {name}: stored shape {arr.shape} but model expects {p.shape}")
            p.data = arr.copy()
            p.zero_grad()
        return model

    def optimizer_states(self, model: MultiViewModel) -> list[AdamState] | None:
        if not self.optimizer:
            return None
        return [AdamState(self.optimizer[f"m/{p.name}"].copy(), self.optimizer[f"v/{p.name}"].copy(),
                          int(self.state.get("step_count", 0))) for p in model.parameters()]

    # ------------------------------------------------------------ serialization

    def to_bytes(self) -> bytes:
        directory, blobs, offset = [], [], 0
        for group, arrays in (("param", self.tensors), ("optim", self.optimizer)):
            for name, arr in arrays.items():
                kind = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}.get(arr.dtype)
                if kind is None:
                    raise CheckpointError(f"tensor {name}: unsupported dtype {arr.dtype}")
                raw = np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes()
                directory.append({"group": group, "name": name, "shape": list(arr.shape),
                                  "dtype": kind, "offset": offset, "nbytes": len(raw)})
                blobs.append(raw)
                offset += len(raw)
        header = {
            "format_version": VERSION,
            "architecture": asdict(self.config),
            "id_maps": {"symbols": self.symbols, "feature_values": self.feature_values,
                        "feature_map": self.feature_map},
            "training_state": self.state,
            "tensors": directory,
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes + b"".join(blobs)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < 16:
            raise CheckpointError("magic: file too short to be a checkpoint")
        if data[:4] != MAGIC:
            raise CheckpointError(f"magic: expected {MAGIC!r}, found {data[:4]!r}")
        version, hlen = struct.unpack("<IQ", data[4:16])
        if version != VERSION:
            raise CheckpointError(f"version: unsupported checkpoint version {version}")
        if 16 + hlen > len(data):
            raise CheckpointError("header: length exceeds file size")
        try:
            header = json.loads(data[16:16 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"header: not valid JSON ({exc})") from None
        try:
            config = ModelConfig(**header["architecture"])
            ids = header["id_maps"]
            entries = header["tensors"]
            state = header["training_state"]
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"header: missing or malformed field {exc}") from None
        base = 16 + hlen
        tensors, optim = {}, {}
        for e in entries:
            dtype = _DTYPES.get(e.get("dtype"))
            if dtype is None:
                raise CheckpointError(f"dtype: tensor {e.get('name')} has unknown dtype {e.get('dtype')!r}")
            shape = tuple(e["shape"])
            expected = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize
            if e["nbytes"] != expected:
                raise CheckpointError(f"shape: tensor {e['name']} declares {e['nbytes']} bytes "
                                      f"but shape {shape} needs {expected}")
            start = base + e["offset"]
            if e["offset"] < 0 or start + e["nbytes"] > len(data):
                raise CheckpointError(f"bounds: tensor {e['name']} extends beyond end of file")
            arr = np.frombuffer(data, dtype=dtype, count=expected // np.dtype(dtype).itemsize,
                                offset=start).reshape(shape)
            arr = arr.astype(arr.dtype.newbyteorder("="))
            (tensors if e["group"] == "param" else optim)[e["name"]] = arr
        return cls(config, list(ids["symbols"]), tensors, ids.get("feature_values"),
                   ids.get("feature_map"), optim, state)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    ckpt.save(path)


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.load(path)
