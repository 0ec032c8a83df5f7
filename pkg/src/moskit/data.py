"""Manifest and embedding I/O, stratified splitting, fusion, cropping, and a
synthetic corpus generator for desk-scale verification.

Embedding files are MEB1: little-endian binary with header
  magic "MEB1" | u16 format_version=1 | u16 id_len | encoder_id utf-8 |
  f32 frame_rate_hz | u32 dims | u32 frames
followed by frames*dims f32 row-major payload and a u32 CRC32 of the payload.
"""

from __future__ import annotations

import json
import math
import struct
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, DomainError
from .metrics import AXES

MEB1_MAGIC = b"MEB1"
MEB1_VERSION = 1
CANONICAL_ENCODERS = ("wavlm", "muq", "m2d")
DEFAULT_SCORE_RANGE = (1.0, 10.0)


def canonical_encoder_order(encoder_ids) -> list[str]:
    """wavlm, muq, m2d first (that order), then the rest lexicographic."""
    ids = list(encoder_ids)
    known = [e for e in CANONICAL_ENCODERS if e in ids]
    rest = sorted(e for e in ids if e not in CANONICAL_ENCODERS)
    return known + rest


def derive_rng(*components) -> np.random.Generator:
    """Deterministic generator from mixed int/str components (strings CRC'd)."""
    entropy = []
    for c in components:
        if isinstance(c, str):
            entropy.append(zlib.crc32(c.encode("utf-8")))
        else:
            entropy.append(int(c))
    return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass(frozen=True)
class AxisScores:
    """The four per-clip quality axes: production quality/complexity,
    content enjoyment/usefulness."""

    pq: float
    pc: float
    ce: float
    cu: float

    def as_array(self) -> np.ndarray:
        return np.array([self.pq, self.pc, self.ce, self.cu], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "AxisScores":
        v = np.asarray(a, dtype=np.float64)
        if v.shape != (4,):
            raise ConfigError(f"axis scores need 4 values, got shape {v.shape}")
        return cls(*(float(x) for x in v))


@dataclass
class Utterance:
    utt_id: str
    system_id: str
    scores: AxisScores | None
    embedding_paths: dict[str, str]
    duration_s: float


@dataclass
class Manifest:
    entries: list[Utterance] = field(default_factory=list)
    score_range: tuple[float, float] = DEFAULT_SCORE_RANGE
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.entries)

    def by_id(self) -> dict[str, Utterance]:
        return {u.utt_id: u for u in self.entries}

    def encoders(self) -> list[str]:
        ids: set[str] = set()
        for u in self.entries:
            ids.update(u.embedding_paths)
        return canonical_encoder_order(ids)

    def labels_matrix(self) -> np.ndarray:
        rows = []
        for u in self.entries:
            if u.scores is None:
                raise DataFormatError(f"utterance {u.utt_id!r} has no labels")
            rows.append(u.scores.as_array())
        return np.array(rows)

    def system_ids(self) -> list[str]:
        return [u.system_id for u in self.entries]

    def embedding_path(self, utt: Utterance, encoder: str) -> Path:
        try:
            rel = utt.embedding_paths[encoder]
        except KeyError:
            raise DataFormatError(
                f"utterance {utt.utt_id!r} has no embedding for encoder {encoder!r}"
            ) from None
        return (self.root / rel).resolve()

    def validate(self, check_files: bool = True) -> None:
        seen: set[str] = set()
        lo, hi = self.score_range
        for u in self.entries:
            if u.utt_id in seen:
                raise DataFormatError(f"duplicate utt_id {u.utt_id!r}")
            seen.add(u.utt_id)
            if u.scores is not None:
                for axis in AXES:
                    v = getattr(u.scores, axis)
                    if not (lo <= v <= hi):
                        raise DataFormatError(
                            f"{u.utt_id!r}: score {axis}={v} outside range [{lo}, {hi}]"
                        )
            if check_files:
                for enc in u.embedding_paths:
                    path = self.embedding_path(u, enc)
                    if not path.is_file():
                        raise DataFormatError(
                            f"{u.utt_id!r}: missing embedding file {path}"
                        )

    def save(self, path) -> None:
        path = Path(path)
        lines = [
            json.dumps(
                {"manifest_version": 1, "score_range": list(self.score_range)}
            )
        ]
        for u in self.entries:
            rec: dict = {"utt_id": u.utt_id, "system_id": u.system_id}
            if u.scores is not None:
                for axis in AXES:
                    rec[axis] = getattr(u.scores, axis)
            rec["duration_s"] = u.duration_s
            for enc in canonical_encoder_order(u.embedding_paths):
                rec[f"emb.{enc}"] = u.embedding_paths[enc]
            lines.append(json.dumps(rec))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        self.root = path.parent

    @classmethod
    def load(cls, path, check_files: bool = True) -> "Manifest":
        path = Path(path)
        if not path.is_file():
            raise DataFormatError(f"manifest not found: {path}")
        manifest = cls(root=path.parent)
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}:{lineno}: bad JSON: {exc}") from exc
            if "utt_id" not in rec:
                if "manifest_version" not in rec:
                    raise DataFormatError(f"{path}:{lineno}: record without utt_id")
                if rec["manifest_version"] != 1:
                    raise DataFormatError(
                        f"{path}:{lineno}: unsupported manifest version "
                        f"{rec['manifest_version']}"
                    )
                if "score_range" in rec:
                    lo, hi = rec["score_range"]
                    manifest.score_range = (float(lo), float(hi))
                continue
            scores = None
            if all(axis in rec for axis in AXES):
                scores = AxisScores(*(float(rec[axis]) for axis in AXES))
            emb = {
                key[4:]: value
                for key, value in rec.items()
                if key.startswith("emb.")
            }
            try:
                manifest.entries.append(
                    Utterance(
                        utt_id=rec["utt_id"],
                        system_id=rec["system_id"],
                        scores=scores,
                        embedding_paths=emb,
                        duration_s=float(rec["duration_s"]),
                    )
                )
            except KeyError as exc:
                raise DataFormatError(f"{path}:{lineno}: missing field {exc}") from exc
        manifest.validate(check_files=check_files)
        return manifest


@dataclass
class EmbeddingSequence:
    """One encoder's frame-level features for one clip."""

    encoder_id: str
    frame_rate_hz: float
    values: np.ndarray  # frames x dims; f32 as stored, f64 once normalized/fused

    def __post_init__(self) -> None:
        self.values = np.atleast_2d(np.asarray(self.values))
        if self.frame_rate_hz <= 0:
            raise ConfigError(f"frame rate must be positive, got {self.frame_rate_hz}")
        if self.values.shape[0] < 1:
            raise DomainError("embedding sequence needs at least one frame")
        if not np.all(np.isfinite(self.values)):
            raise DataFormatError(
                f"non-finite values in embedding for {self.encoder_id!r}"
            )

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def dims(self) -> int:
        return self.values.shape[1]

    @property
    def duration_s(self) -> float:
        return self.frames / self.frame_rate_hz


def write_embedding(seq: EmbeddingSequence, path) -> None:
    path = Path(path)
    payload = np.ascontiguousarray(seq.values, dtype=np.float32).tobytes()
    enc = seq.encoder_id.encode("utf-8")
    header = (
        MEB1_MAGIC
        + struct.pack("<H", MEB1_VERSION)
        + struct.pack("<H", len(enc))
        + enc
        + struct.pack("<f", seq.frame_rate_hz)
        + struct.pack("<II", seq.dims, seq.frames)
    )
    path.write_bytes(header + payload + struct.pack("<I", zlib.crc32(payload)))


def read_embedding(path) -> EmbeddingSequence:
    path = Path(path)
    blob = path.read_bytes()

    def need(offset: int, count: int, what: str) -> bytes:
        if offset + count > len(blob):
            raise DataFormatError(
                f"{path}: truncated {what} at byte offset {min(len(blob), offset)}"
            )
        return blob[offset : offset + count]

    if need(0, 4, "magic") != MEB1_MAGIC:
        raise DataFormatError(f"{path}: bad magic at byte offset 0")
    (version,) = struct.unpack("<H", need(4, 2, "version"))
    if version != MEB1_VERSION:
        raise DataFormatError(f"{path}: unsupported format version {version} at byte offset 4")
    (id_len,) = struct.unpack("<H", need(6, 2, "encoder id length"))
    off = 8
    try:
        encoder_id = need(off, id_len, "encoder id").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataFormatError(f"{path}: bad encoder id at byte offset {off}") from exc
    off += id_len
    (frame_rate,) = struct.unpack("<f", need(off, 4, "frame rate"))
    off += 4
    dims, frames = struct.unpack("<II", need(off, 8, "dims/frames"))
    off += 8
    if dims < 1 or frames < 1:
        raise DataFormatError(f"{path}: empty payload declared at byte offset {off - 8}")
    payload_len = frames * dims * 4
    payload = need(off, payload_len, "payload")
    crc_off = off + payload_len
    (crc,) = struct.unpack("<I", need(crc_off, 4, "crc"))
    if crc_off + 4 != len(blob):
        raise DataFormatError(f"{path}: trailing bytes at byte offset {crc_off + 4}")
    if zlib.crc32(payload) != crc:
        raise DataFormatError(f"{path}: payload CRC mismatch at byte offset {crc_off}")
    values = np.frombuffer(payload, dtype="<f4").reshape(frames, dims)
    return EmbeddingSequence(
        encoder_id=encoder_id, frame_rate_hz=float(frame_rate), values=values.copy()
    )


class EmbeddingStore:
    """Loads MEB1 files referenced by a manifest, caching by absolute path."""

    def __init__(self, manifest: Manifest) -> None:
        self.manifest = manifest
        self._cache: dict[Path, EmbeddingSequence] = {}

    def get(self, utt: Utterance, encoder: str) -> EmbeddingSequence:
        path = self.manifest.embedding_path(utt, encoder)
        if path not in self._cache:
            seq = read_embedding(path)
            if seq.dims < 1:
                raise DataFormatError(f"{path}: empty embedding")
            self._cache[path] = seq
        return self._cache[path]


def stratified_split(
    manifest: Manifest, train_fraction: float = 0.8, seed: int = 0
) -> tuple[Manifest, Manifest]:
    """Per-system split with ceil(train_fraction * n) entries going to train."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    strata: dict[str, list[Utterance]] = {}
    for u in manifest.entries:
        strata.setdefault(u.system_id, []).append(u)
    rng = derive_rng(seed, "stratified_split")
    train_ids: set[str] = set()
    for system_id in sorted(strata):
        members = strata[system_id]
        if len(members) == 1:
            warnings.warn(
                f"stratum {system_id!r} has a single utterance; assigned to train",
                stacklevel=2,
            )
        k = math.ceil(train_fraction * len(members))
        perm = rng.permutation(len(members))
        train_ids.update(members[i].utt_id for i in perm[:k])
    train = Manifest(
        entries=[u for u in manifest.entries if u.utt_id in train_ids],
        score_range=manifest.score_range,
        root=manifest.root,
    )
    dev = Manifest(
        entries=[u for u in manifest.entries if u.utt_id not in train_ids],
        score_range=manifest.score_range,
        root=manifest.root,
    )
    return train, dev


@dataclass
class NormStats:
    """Per-encoder, per-dimension mean/std fitted on the training split."""

    per_encoder: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            enc: {"mean": mean.tolist(), "std": std.tolist()}
            for enc, (mean, std) in sorted(self.per_encoder.items())
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        stats = cls()
        for enc, ms in d.items():
            stats.per_encoder[enc] = (
                np.asarray(ms["mean"], dtype=np.float64),
                np.asarray(ms["std"], dtype=np.float64),
            )
        return stats

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "NormStats":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def fit_norm(
    manifest: Manifest, encoders: list[str], store: EmbeddingStore | None = None
) -> NormStats:
    """Population mean/std per encoder dimension over all training frames."""
    store = store or EmbeddingStore(manifest)
    stats = NormStats()
    for enc in encoders:
        total = 0
        s1: np.ndarray | None = None
        s2: np.ndarray | None = None
        for utt in manifest.entries:
            v = store.get(utt, enc).values.astype(np.float64)
            if s1 is None:
                s1 = np.zeros(v.shape[1])
                s2 = np.zeros(v.shape[1])
            s1 += v.sum(axis=0)
            s2 += (v**2).sum(axis=0)
            total += v.shape[0]
        if s1 is None or total < 2:
            raise DomainError(f"need at least 2 frames to fit stats for {enc!r}")
        mean = s1 / total
        var = np.maximum(s2 / total - mean**2, 0.0)
        std = np.sqrt(var)
        floored = std < 1e-6
        if floored.any():
            warnings.warn(
                f"{enc!r}: {int(floored.sum())} zero-variance dimension(s), std floored",
                stacklevel=2,
            )
            std = np.where(floored, 1e-6, std)
        stats.per_encoder[enc] = (mean, std)
    return stats


def apply_norm(seq: EmbeddingSequence, stats: NormStats) -> EmbeddingSequence:
    if seq.encoder_id not in stats.per_encoder:
        raise ConfigError(f"no normalization stats for encoder {seq.encoder_id!r}")
    mean, std = stats.per_encoder[seq.encoder_id]
    if mean.shape[0] != seq.dims:
        raise ConfigError(
            f"stats dims {mean.shape[0]} do not match embedding dims {seq.dims}"
        )
    values = (seq.values.astype(np.float64) - mean) / std
    return EmbeddingSequence(
        encoder_id=seq.encoder_id, frame_rate_hz=seq.frame_rate_hz, values=values
    )


def align_and_fuse(seqs: list[EmbeddingSequence]) -> EmbeddingSequence:
    """Interpolate every stream onto the lowest-rate grid, then concatenate
    features in canonical encoder order."""
    if not seqs:
        raise DomainError("cannot fuse an empty sequence list")
    order = canonical_encoder_order([s.encoder_id for s in seqs])
    if len(order) != len(seqs):
        raise ConfigError("duplicate encoder ids in fusion input")
    by_id = {s.encoder_id: s for s in seqs}
    seqs = [by_id[e] for e in order]
    target = min(seqs, key=lambda s: (s.frame_rate_hz, s.frames))
    nt = target.frames
    parts = []
    for s in seqs:
        v = s.values.astype(np.float64)
        if s is target:
            parts.append(v)
            continue
        # target frame k sits at source position k * (src_rate / tgt_rate);
        # the ratio form keeps equal-rate streams exactly on-grid
        pos = np.arange(nt) * (s.frame_rate_hz / target.frame_rate_hz)
        pos = np.clip(pos, 0.0, s.frames - 1)
        i0 = np.floor(pos).astype(np.intp)
        i1 = np.minimum(i0 + 1, s.frames - 1)
        w = (pos - i0)[:, None]
        parts.append((1.0 - w) * v[i0] + w * v[i1])
    return EmbeddingSequence(
        encoder_id="fused:" + "+".join(order),
        frame_rate_hz=target.frame_rate_hz,
        values=np.concatenate(parts, axis=1),
    )


def random_crop(
    seq: EmbeddingSequence, max_seconds: float = 10.0, rng: np.random.Generator | None = None
) -> EmbeddingSequence:
    """Uniform-start contiguous window of floor(max_seconds * rate) frames."""
    if max_seconds <= 0:
        raise ConfigError(f"max_seconds must be positive, got {max_seconds}")
    if seq.duration_s <= max_seconds:
        return seq
    window = int(math.floor(max_seconds * seq.frame_rate_hz))
    if window >= seq.frames:
        return seq
    rng = rng or np.random.default_rng()
    start = int(rng.integers(0, seq.frames - window + 1))
    return EmbeddingSequence(
        encoder_id=seq.encoder_id,
        frame_rate_hz=seq.frame_rate_hz,
        values=seq.values[start : start + window],
    )


@dataclass
class SynthSpec:
    """Synthetic corpus: bounded latents per system/utterance drive both the
    pseudo-embeddings and, through a known affine map, the axis labels."""

    n_systems: int = 40
    utts_per_system: int = 25
    encoder_dims: tuple[int, ...] = (16, 24)
    noise_std: float = 0.0
    seed: int = 0
    frame_rates: tuple[float, ...] | None = None
    duration_range: tuple[float, float] = (4.0, 14.0)
    jitter_std: float = 0.1
    score_range: tuple[float, float] = DEFAULT_SCORE_RANGE

    def __post_init__(self) -> None:
        if self.n_systems < 1 or self.utts_per_system < 1:
            raise ConfigError("corpus spec must be positive")
        if not self.encoder_dims or any(d < 1 for d in self.encoder_dims):
            raise ConfigError("encoder dims must be positive")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.frame_rates is None:
            self.frame_rates = tuple(25.0 * (i + 1) for i in range(len(self.encoder_dims)))
        if len(self.frame_rates) != len(self.encoder_dims):
            raise ConfigError("frame_rates must match encoder_dims")

    @property
    def encoder_ids(self) -> list[str]:
        return [f"synth{i}" for i in range(len(self.encoder_dims))]


def synth_corpus(spec: SynthSpec, out_dir) -> tuple[Manifest, dict]:
    """Write MEB1 files + manifest + generating map; return (manifest, map).

    Labels are computed from the *re-loaded* f32 payloads so they are an exact
    affine function of the bytes on disk (the OLS learnability oracle).
    """
    out = Path(out_dir)
    (out / "embeddings").mkdir(parents=True, exist_ok=True)
    dims_total = sum(spec.encoder_dims)
    lo, hi = spec.score_range
    mid = (lo + hi) / 2.0
    # weight directions are scaled to the realized pooled latents so the
    # noiseless scores span most of the range yet can never reach the clip
    span = 0.85 * (hi - lo) / 2.0

    slices = []
    offset = 0
    for d in spec.encoder_dims:
        slices.append(slice(offset, offset + d))
        offset += d

    # pass 1: latents, durations, embedding files, exact pooled vectors
    rows = []
    for s in range(spec.n_systems):
        system_id = f"sys{s:03d}"
        center = derive_rng(spec.seed, "system", s).uniform(-0.8, 0.8, size=dims_total)
        for k in range(spec.utts_per_system):
            utt_id = f"{system_id}_u{k:03d}"
            rng = derive_rng(spec.seed, "utt", s, k)
            u = center + rng.uniform(-0.2, 0.2, size=dims_total)
            duration = float(rng.uniform(*spec.duration_range))
            paths = {}
            pooled_parts = []
            for enc, rate, sl in zip(spec.encoder_ids, spec.frame_rates, slices):
                frames = max(1, int(round(duration * rate)))
                jitter = rng.normal(0.0, spec.jitter_std, size=(frames, sl.stop - sl.start))
                jitter -= jitter.mean(axis=0)
                values = (u[sl][None, :] + jitter).astype(np.float32)
                rel = f"embeddings/{utt_id}.{enc}.meb1"
                write_embedding(
                    EmbeddingSequence(encoder_id=enc, frame_rate_hz=rate, values=values),
                    out / rel,
                )
                paths[enc] = rel
                pooled_parts.append(
                    read_embedding(out / rel).values.astype(np.float64).mean(axis=0)
                )
            rows.append((utt_id, system_id, duration, paths, np.concatenate(pooled_parts)))

    map_rng = derive_rng(spec.seed, "genmap")
    pooled_all = np.array([r[4] for r in rows])
    weights = {}
    for axis in AXES:
        direction = map_rng.uniform(-1.0, 1.0, size=dims_total)
        peak = float(np.max(np.abs(pooled_all @ direction)))
        weights[axis] = direction * (span / peak)

    # pass 2: labels as an exact affine function of the stored payloads
    manifest = Manifest(score_range=spec.score_range, root=out)
    noise_rng = derive_rng(spec.seed, "label_noise")
    for utt_id, system_id, duration, paths, pooled in rows:
        scores = {}
        for axis in AXES:
            raw = mid + float(weights[axis] @ pooled)
            if spec.noise_std > 0:
                raw += float(noise_rng.normal(0.0, spec.noise_std))
            scores[axis] = float(np.clip(raw, lo, hi))
        manifest.entries.append(
            Utterance(
                utt_id=utt_id,
                system_id=system_id,
                scores=AxisScores(**scores),
                embedding_paths=paths,
                duration_s=duration,
            )
        )

    genmap = {
        "encoders": spec.encoder_ids,
        "encoder_dims": list(spec.encoder_dims),
        "frame_rates": list(spec.frame_rates),
        "bias": mid,
        "weights": {axis: weights[axis].tolist() for axis in AXES},
        "noise_std": spec.noise_std,
        "seed": spec.seed,
        "score_range": [lo, hi],
    }
    (out / "genmap.json").write_text(json.dumps(genmap, indent=2), encoding="utf-8")
    manifest.save(out / "manifest.jsonl")
    return manifest, genmap
