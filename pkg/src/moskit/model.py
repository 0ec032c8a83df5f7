"""Scoring model: fused features -> aggregation -> four independent heads.

Aggregations:
  MLP      mean-pool over time, heads on the pooled vector
  BLSTM_h  mean-pool first, feed the pooled vector as a length-1 sequence to
           the BLSTM, heads on its final hidden state
  BLSTM_t  BLSTM over the frame sequence, masked mean-pool its outputs, heads

Checkpoints are binary: magic "MCK1" | u32 header length | JSON header
(config, norm stats, named parameter shapes, training metadata) | f64
little-endian parameter blobs in header order | u32 CRC32 of the blob bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    EmbeddingSequence,
    EmbeddingStore,
    Manifest,
    NormStats,
    Utterance,
    align_and_fuse,
    apply_norm,
    canonical_encoder_order,
    derive_rng,
)
from .errors import ConfigError, DataFormatError
from .losses import LossConfig
from .metrics import AXES
from .nn import (
    Affine,
    Blstm,
    MaskedMeanPool,
    ParamTensor,
    SequenceBatch,
)

AGGREGATIONS = ("MLP", "BLSTM_h", "BLSTM_t")
CHECKPOINT_MAGIC = b"MCK1"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    encoders: tuple[str, ...]
    aggregation: str = "MLP"
    blstm_hidden: int = 256  # ignored for MLP aggregation
    head_hidden: tuple[int, ...] = (128,)
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        self.encoders = tuple(self.encoders)
        self.head_hidden = tuple(self.head_hidden)
        if not self.encoders:
            raise ConfigError("encoders must be a nonempty subset")
        if len(set(self.encoders)) != len(self.encoders):
            raise ConfigError("duplicate encoder ids in config")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(
                f"unknown aggregation {self.aggregation!r}, expected one of {AGGREGATIONS}"
            )
        if self.blstm_hidden < 1:
            raise ConfigError("blstm_hidden must be positive")
        if any(h < 1 for h in self.head_hidden):
            raise ConfigError("head_hidden sizes must be positive")
        if isinstance(self.loss, dict):
            self.loss = LossConfig.from_dict(self.loss)

    def to_dict(self) -> dict:
        return {
            "encoders": list(self.encoders),
            "aggregation": self.aggregation,
            "blstm_hidden": self.blstm_hidden,
            "head_hidden": list(self.head_hidden),
            "loss": self.loss.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - {f.name for f in cls.__dataclass_fields__.values()}
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class Head:
    """Per-axis regressor: tanh hidden layers, then a scalar affine output."""

    def __init__(self, name: str, din: int, hidden: tuple[int, ...], rng) -> None:
        self.layers: list[Affine] = []
        prev = din
        for i, h in enumerate(hidden):
            self.layers.append(Affine(f"{name}.h{i}", prev, h, rng))
            prev = h
        self.out = Affine(f"{name}.out", prev, 1, rng)
        self._acts: list[np.ndarray] = []

    @property
    def params(self) -> list[ParamTensor]:
        ps = []
        for layer in self.layers:
            ps.extend(layer.params)
        ps.extend(self.out.params)
        return ps

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._acts = []
        for layer in self.layers:
            x = np.tanh(layer.forward(x))
            self._acts.append(x)
        return self.out.forward(x)[:, 0]

    def backward(self, dscalar: np.ndarray) -> np.ndarray:
        dx = self.out.backward(dscalar[:, None])
        for layer, act in zip(reversed(self.layers), reversed(self._acts)):
            dx = layer.backward(dx * (1.0 - act * act))
        return dx


class ScoringModel:
    """A built model: parameters plus the norm stats it was fitted with."""

    def __init__(self, config: ModelConfig, norm_stats: NormStats) -> None:
        for enc in config.encoders:
            if enc not in norm_stats.per_encoder:
                raise ConfigError(f"norm stats missing encoder {enc!r}")
        self.config = config
        self.norm_stats = norm_stats
        self.input_dim = sum(
            norm_stats.per_encoder[e][0].shape[0]
            for e in canonical_encoder_order(config.encoders)
        )
        self.train_meta: dict = {}

        rng = derive_rng(config.seed, "model_init")
        self.pool = MaskedMeanPool()
        self.blstm: Blstm | None = None
        if config.aggregation == "MLP":
            head_in = self.input_dim
        else:
            self.blstm = Blstm("blstm", self.input_dim, config.blstm_hidden, rng)
            head_in = 2 * config.blstm_hidden
        self.heads = {
            axis: Head(f"head.{axis}", head_in, config.head_hidden, rng)
            for axis in AXES
        }
        self._cache: dict = {}

    def parameters(self) -> list[ParamTensor]:
        ps: list[ParamTensor] = []
        if self.blstm is not None:
            ps.extend(self.blstm.params)
        for axis in AXES:
            ps.extend(self.heads[axis].params)
        return ps

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def forward(self, batch: SequenceBatch) -> np.ndarray:
        if batch.dims != self.input_dim:
            raise ConfigError(
                f"model expects fused dim {self.input_dim}, got {batch.dims}"
            )
        agg = self.config.aggregation
        if agg == "MLP":
            vec = self.pool.forward(batch)
        elif agg == "BLSTM_h":
            pooled = self.pool.forward(batch)
            one = SequenceBatch(
                pooled[:, None, :], np.ones((batch.batch, 1), dtype=bool)
            )
            _, vec = self.blstm.forward(one)
            self._cache["one_frames"] = 1
        else:  # BLSTM_t
            outputs, _ = self.blstm.forward(batch)
            out_batch = SequenceBatch(outputs, batch.mask)
            vec = self.pool.forward(out_batch)
            self._cache["out_shape"] = outputs.shape
        preds = np.column_stack([self.heads[axis].forward(vec) for axis in AXES])
        return preds

    def backward(self, dpred: np.ndarray) -> None:
        """Accumulate parameter gradients given dloss/dpred of shape (B, 4)."""
        dvec = None
        for a, axis in enumerate(AXES):
            d = self.heads[axis].backward(dpred[:, a])
            dvec = d if dvec is None else dvec + d
        agg = self.config.aggregation
        if agg == "MLP":
            self.pool.backward(dvec)
        elif agg == "BLSTM_h":
            nb = dvec.shape[0]
            d_outputs = np.zeros((nb, 1, 2 * self.config.blstm_hidden))
            dx = self.blstm.backward(d_outputs, dvec)
            self.pool.backward(dx[:, 0, :])
        else:
            d_outputs = self.pool.backward(dvec)
            d_final = np.zeros((dvec.shape[0], 2 * self.config.blstm_hidden))
            self.blstm.backward(d_outputs, d_final)

    def predict(self, batch: SequenceBatch) -> np.ndarray:
        return self.forward(batch)


def build_model(config: ModelConfig, norm_stats: NormStats) -> ScoringModel:
    return ScoringModel(config, norm_stats)


def head_independence_check(model: ScoringModel, seed: int = 0) -> bool:
    """True iff axis-k gradients never touch axis-j head parameters (j != k),
    while shared aggregation parameters receive gradient from every axis."""
    rng = derive_rng(seed, "head_independence")
    nb, nt = 3, 4
    data = rng.normal(size=(nb, nt, model.input_dim))
    batch = SequenceBatch(data, np.ones((nb, nt), dtype=bool))
    head_params = {axis: {p.name for p in model.heads[axis].params} for axis in AXES}
    shared = [p for p in model.parameters() if not any(
        p.name in names for names in head_params.values()
    )]
    for k, axis_k in enumerate(AXES):
        model.zero_grad()
        model.forward(batch)
        dpred = np.zeros((nb, len(AXES)))
        dpred[:, k] = 1.0
        model.backward(dpred)
        for axis_j in AXES:
            if axis_j == axis_k:
                continue
            for p in model.heads[axis_j].params:
                if np.any(p.grad != 0.0):
                    return False
        # the shared trunk, where present, must see gradient from this axis
        # (individual tensors may be dark, e.g. recurrence matrices on a
        # length-1 sequence where the previous hidden state is zero)
        if shared and not any(np.any(p.grad != 0.0) for p in shared):
            return False
    return True


def save_checkpoint(model: ScoringModel, path) -> None:
    params = model.parameters()
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "norm_stats": model.norm_stats.to_dict(),
        "params": [{"name": p.name, "shape": list(p.shape)} for p in params],
        "train_meta": model.train_meta,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    blob = b"".join(
        np.ascontiguousarray(p.value, dtype="<f8").tobytes() for p in params
    )
    Path(path).write_bytes(
        CHECKPOINT_MAGIC
        + struct.pack("<I", len(header_bytes))
        + header_bytes
        + blob
        + struct.pack("<I", zlib.crc32(blob))
    )


def fuse_utterance(
    utt: Utterance,
    store: EmbeddingStore,
    encoders: tuple[str, ...],
    norm_stats: NormStats,
) -> EmbeddingSequence:
    """Normalize each requested stream, then align and concatenate them."""
    streams = [apply_norm(store.get(utt, enc), norm_stats) for enc in encoders]
    return align_and_fuse(streams)


def predict_manifest(
    model: ScoringModel,
    manifest: Manifest,
    store: EmbeddingStore | None = None,
    batch_size: int = 32,
) -> tuple[list[str], np.ndarray]:
    """Full-length (uncropped) predictions for every manifest entry."""
    store = store or EmbeddingStore(manifest)
    utt_ids = [u.utt_id for u in manifest.entries]
    preds = np.empty((len(manifest.entries), len(AXES)))
    for start in range(0, len(manifest.entries), batch_size):
        chunk = manifest.entries[start : start + batch_size]
        fused = [
            fuse_utterance(u, store, model.config.encoders, model.norm_stats).values
            for u in chunk
        ]
        preds[start : start + len(chunk)] = model.predict(
            SequenceBatch.from_sequences(fused)
        )
    return utt_ids, preds


def load_checkpoint(path, expect_config: ModelConfig | None = None) -> ScoringModel:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: bad checkpoint magic")
    (hlen,) = struct.unpack("<I", blob[4:8])
    try:
        header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataFormatError(f"{path}: bad checkpoint header: {exc}") from exc
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise DataFormatError(
            f"{path}: unsupported checkpoint version {header.get('format_version')}"
        )
    config = ModelConfig.from_dict(header["config"])
    if expect_config is not None:
        if config.to_dict() != expect_config.to_dict():
            raise DataFormatError(
                f"{path}: checkpoint config (aggregation={config.aggregation!r}, "
                f"encoders={list(config.encoders)}) does not match the expected "
                f"config (aggregation={expect_config.aggregation!r}, "
                f"encoders={list(expect_config.encoders)})"
            )
    norm_stats = NormStats.from_dict(header["norm_stats"])
    model = build_model(config, norm_stats)
    model.train_meta = header.get("train_meta", {})

    params = model.parameters()
    declared = header["params"]
    if len(declared) != len(params):
        raise DataFormatError(
            f"{path}: checkpoint declares {len(declared)} parameters, "
            f"architecture has {len(params)}"
        )
    off = 8 + hlen
    for p, meta in zip(params, declared):
        if meta["name"] != p.name or tuple(meta["shape"]) != p.shape:
            raise DataFormatError(
                f"{path}: parameter mismatch: file has {meta['name']}{meta['shape']}, "
                f"architecture expects {p.name}{list(p.shape)}"
            )
        nbytes = int(np.prod(p.shape)) * 8
        chunk = blob[off : off + nbytes]
        if len(chunk) != nbytes:
            raise DataFormatError(f"{path}: truncated blob for parameter {p.name}")
        p.value[...] = np.frombuffer(chunk, dtype="<f8").reshape(p.shape)
        off += nbytes
    if off + 4 != len(blob):
        raise DataFormatError(f"{path}: checkpoint blob length mismatch")
    (crc,) = struct.unpack("<I", blob[off:])
    if zlib.crc32(blob[8 + hlen : off]) != crc:
        raise DataFormatError(f"{path}: checkpoint CRC mismatch")
    return model
