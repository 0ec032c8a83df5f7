"""Mini-batch training with Adam, per-epoch dev evaluation, early stopping,
deterministic replay, and the configuration-grid runner."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import EmbeddingStore, Manifest, derive_rng, fit_norm, random_crop
from .ensemble import Leaderboard, LeaderboardRow
from .errors import ConfigError, MoskitError, TrainingError
from .losses import LOSS_KINDS, LossConfig, axis_mean_loss
from .metrics import MetricReport, evaluate
from .model import (
    ModelConfig,
    ScoringModel,
    build_model,
    fuse_utterance,
    predict_manifest,
    save_checkpoint,
)
from .nn import AdamState, SequenceBatch, adam_step


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int | None = None  # default 32 for MLP, 16 for BLSTM aggregations
    max_epochs: int = 10
    patience: int = 2
    crop_seconds: float = 10.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size is not None and self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (pairwise losses need pairs)")
        if self.crop_seconds <= 0:
            raise ConfigError("crop_seconds must be positive")

    def resolve_batch_size(self, aggregation: str) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 32 if aggregation == "MLP" else 16

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "crop_seconds": self.crop_seconds,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in cls.__dataclass_fields__.values()}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_loss: float
    dev_report: MetricReport


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0

    def to_dict(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "stopped_epoch": self.stopped_epoch,
            "epochs": [
                {
                    "epoch": e.epoch,
                    "train_loss": e.train_loss,
                    "dev_loss": e.dev_loss,
                    "dev_report": e.dev_report.to_dict(),
                }
                for e in self.epochs
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHistory":
        hist = cls(best_epoch=d["best_epoch"], stopped_epoch=d["stopped_epoch"])
        for e in d["epochs"]:
            hist.epochs.append(
                EpochRecord(
                    epoch=e["epoch"],
                    train_loss=e["train_loss"],
                    dev_loss=e["dev_loss"],
                    dev_report=MetricReport.from_dict(e["dev_report"]),
                )
            )
        return hist


def dataset_fingerprint(manifest: Manifest) -> str:
    payload = [
        {
            "utt_id": u.utt_id,
            "system_id": u.system_id,
            "scores": None if u.scores is None else u.scores.as_array().tolist(),
            "duration_s": u.duration_s,
        }
        for u in manifest.entries
    ]
    return hashlib.sha256(json.dumps(payload).encode("utf-8")).hexdigest()


def _batch_indices(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Chunk an index permutation; a trailing singleton merges into the
    previous batch so every batch can form pairs."""
    batches = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_manifest: Manifest,
    dev_manifest: Manifest,
    dev_scorer=None,
) -> tuple[ScoringModel, TrainHistory]:
    """Train and return the best-dev-loss model plus the per-epoch history.

    dev_scorer(model, epoch) -> float replaces the default development-set
    loss when given; it exists so early-stopping behavior can be driven by a
    controlled loss sequence.
    """
    if len(train_manifest) < 2:
        raise ConfigError("training needs at least 2 labeled samples")
    if len(dev_manifest) < 1:
        raise ConfigError("dev set must be nonempty")
    batch_size = train_config.resolve_batch_size(model_config.aggregation)

    train_store = EmbeddingStore(train_manifest)
    dev_store = EmbeddingStore(dev_manifest)
    norm = fit_norm(train_manifest, list(model_config.encoders), train_store)
    model = build_model(model_config, norm)

    fused_train = {
        u.utt_id: fuse_utterance(u, train_store, model_config.encoders, norm)
        for u in train_manifest.entries
    }
    train_labels = train_manifest.labels_matrix()
    dev_labels = dev_manifest.labels_matrix()
    dev_systems = dev_manifest.system_ids()

    adam = AdamState(lr=train_config.lr)
    history = TrainHistory()
    best_loss = np.inf
    best_values: list[np.ndarray] | None = None
    bad_streak = 0
    entries = train_manifest.entries

    for epoch in range(1, train_config.max_epochs + 1):
        order = derive_rng(train_config.seed, "shuffle", epoch).permutation(len(entries))
        epoch_losses = []
        for bi, batch_idx in enumerate(_batch_indices(order, batch_size)):
            seqs = []
            for i in batch_idx:
                utt = entries[i]
                crop_rng = derive_rng(train_config.seed, "crop", epoch, utt.utt_id)
                seqs.append(
                    random_crop(
                        fused_train[utt.utt_id], train_config.crop_seconds, crop_rng
                    ).values
                )
            batch = SequenceBatch.from_sequences(seqs)
            preds = model.forward(batch)
            loss, dpred = axis_mean_loss(
                preds, train_labels[batch_idx], model_config.loss
            )
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite training loss at epoch {epoch}, batch {bi}"
                )
            model.zero_grad()
            model.backward(dpred)
            adam_step(model.parameters(), adam)
            epoch_losses.append(loss)
        train_loss = float(np.mean(epoch_losses))

        # row-independent forward: a larger eval batch only amortizes overhead
        _, dev_preds = predict_manifest(model, dev_manifest, dev_store, batch_size=32)
        dev_report = evaluate(dev_preds, dev_labels, dev_systems)
        if dev_scorer is not None:
            dev_loss = float(dev_scorer(model, epoch))
        else:
            dev_loss, _ = axis_mean_loss(dev_preds, dev_labels, model_config.loss)
        if not np.isfinite(dev_loss):
            raise TrainingError(f"non-finite dev loss at epoch {epoch}")

        history.epochs.append(EpochRecord(epoch, train_loss, float(dev_loss), dev_report))
        if dev_loss < best_loss:
            best_loss = dev_loss
            history.best_epoch = epoch
            best_values = [p.value.copy() for p in model.parameters()]
            bad_streak = 0
        else:
            bad_streak += 1
        history.stopped_epoch = epoch
        if bad_streak >= train_config.patience:
            break

    if best_values is not None:
        for p, v in zip(model.parameters(), best_values):
            p.value[...] = v
    model.train_meta = {
        "epochs_run": history.stopped_epoch,
        "best_epoch": history.best_epoch,
        "best_dev_loss": float(best_loss),
        "dataset_fingerprint": dataset_fingerprint(train_manifest),
    }
    return model, history


@dataclass(frozen=True)
class GridCell:
    encoders: tuple[str, ...]
    aggregation: str
    loss_kind: str


def standard_grid(encoder_ids: list[str]) -> list[GridCell]:
    """The 16-cell grid: 4 losses x 4 feature/downstream variants.

    Variants: MLP on the reduced encoder set (full set minus its second
    canonical encoder), then MLP / BLSTM_h / BLSTM_t on the full set.
    """
    from .data import canonical_encoder_order

    full = tuple(canonical_encoder_order(encoder_ids))
    if len(full) >= 2:
        reduced = full[:1] + full[2:]
    else:
        reduced = full
    variants = [("MLP", reduced), ("MLP", full), ("BLSTM_h", full), ("BLSTM_t", full)]
    return [
        GridCell(encoders=encs, aggregation=agg, loss_kind=kind)
        for kind in LOSS_KINDS
        for agg, encs in variants
    ]


def run_ablation_grid(
    cells: list[GridCell],
    train_manifest: Manifest,
    dev_manifest: Manifest,
    eval_manifests: dict[str, Manifest],
    train_config: TrainConfig,
    out_dir,
    blstm_hidden: int = 256,
    head_hidden: tuple[int, ...] = (128,),
) -> Leaderboard:
    """Train every cell independently and emit one leaderboard row per cell.

    Per-cell failures are recorded on the row; the grid keeps going. Rows are
    ordered by grid index, not completion order.
    """
    if not cells:
        raise ConfigError("grid must be nonempty")
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    rows = []
    for idx, cell in enumerate(cells):
        model_id = (
            f"{idx:02d}-{cell.aggregation}-{cell.loss_kind}-{'+'.join(cell.encoders)}"
        )
        config = ModelConfig(
            encoders=cell.encoders,
            aggregation=cell.aggregation,
            blstm_hidden=blstm_hidden,
            head_hidden=head_hidden,
            loss=LossConfig(kind=cell.loss_kind),
            seed=int(derive_rng(train_config.seed, "cell", idx).integers(0, 2**31)),
        )
        try:
            model, _ = train(config, train_config, train_manifest, dev_manifest)
        except MoskitError as exc:
            rows.append(
                LeaderboardRow(
                    model_id=model_id,
                    checkpoint=None,
                    dev_srcc=None,
                    pam_srcc=None,
                    reports={},
                    error=str(exc),
                )
            )
            continue
        ckpt_rel = f"checkpoints/{model_id}.mck"
        save_checkpoint(model, out / ckpt_rel)
        reports = {}
        sets = {"dev": dev_manifest, **eval_manifests}
        for name, manifest in sets.items():
            _, preds = predict_manifest(model, manifest)
            reports[name] = evaluate(
                preds, manifest.labels_matrix(), manifest.system_ids()
            )
        dev_srcc = reports["dev"].get("composite", "utterance", "srcc")
        pam_srcc = (
            reports["pam"].get("composite", "utterance", "srcc")
            if "pam" in reports
            else None
        )
        rows.append(
            LeaderboardRow(
                model_id=model_id,
                checkpoint=ckpt_rel,
                dev_srcc=dev_srcc,
                pam_srcc=pam_srcc,
                reports=reports,
            )
        )
    return Leaderboard(rows=rows, root=out)
