"""Model ranking, ensemble member selection, and prediction averaging.

Member predictions are always combined as unweighted per-axis means, summed
in ascending model_id order so results are bit-reproducible. (Averaging N
copies of one model reproduces it bit-exactly when N is a power of two and
to within one ulp otherwise.)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, SelectionError
from .metrics import MetricReport, evaluate
from .model import load_checkpoint, predict_manifest

RANK_KEYS = ("dev_srcc", "pam_srcc")


@dataclass
class LeaderboardRow:
    model_id: str
    checkpoint: str | None
    dev_srcc: float | None
    pam_srcc: float | None
    reports: dict[str, MetricReport] = field(default_factory=dict)
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "checkpoint": self.checkpoint,
            "dev_srcc": self.dev_srcc,
            "pam_srcc": self.pam_srcc,
            "reports": {name: r.to_dict() for name, r in self.reports.items()},
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LeaderboardRow":
        return cls(
            model_id=d["model_id"],
            checkpoint=d.get("checkpoint"),
            dev_srcc=d.get("dev_srcc"),
            pam_srcc=d.get("pam_srcc"),
            reports={
                name: MetricReport.from_dict(r)
                for name, r in d.get("reports", {}).items()
            },
            error=d.get("error"),
        )


@dataclass
class Leaderboard:
    """Rows plus the directory their (relative) checkpoint paths resolve from."""

    rows: list[LeaderboardRow] = field(default_factory=list)
    root: Path = field(default_factory=Path)

    def __post_init__(self) -> None:
        ids = [r.model_id for r in self.rows]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate model_ids in leaderboard")

    def by_id(self) -> dict[str, LeaderboardRow]:
        return {r.model_id: r for r in self.rows}

    def checkpoint_path(self, row: LeaderboardRow) -> Path:
        if row.checkpoint is None:
            raise DataFormatError(f"member {row.model_id!r} has no checkpoint")
        return self.root / row.checkpoint

    def to_json(self) -> str:
        return json.dumps({"rows": [r.to_dict() for r in self.rows]}, indent=2)

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(self.to_json(), encoding="utf-8")
        self.root = path.parent

    @classmethod
    def load(cls, path) -> "Leaderboard":
        path = Path(path)
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
            return cls(
                rows=[LeaderboardRow.from_dict(r) for r in d["rows"]],
                root=path.parent,
            )
        except (json.JSONDecodeError, KeyError) as exc:
            raise DataFormatError(f"bad leaderboard file {path}: {exc}") from exc


def rank_models(leaderboard: Leaderboard, key: str) -> list[str]:
    """Model ids descending by the given SRCC key; ties break by ascending id."""
    if key not in RANK_KEYS:
        raise ConfigError(f"unknown ranking key {key!r}, expected one of {RANK_KEYS}")
    for row in leaderboard.rows:
        if getattr(row, key) is None:
            raise ConfigError(f"model {row.model_id!r} has no {key} value")
    return [
        r.model_id
        for r in sorted(leaderboard.rows, key=lambda r: (-getattr(r, key), r.model_id))
    ]


@dataclass
class EnsembleSpec:
    strategy: str
    members: tuple[str, ...]

    def __post_init__(self) -> None:
        self.members = tuple(self.members)
        if not self.members:
            raise SelectionError("ensemble must have at least one member")

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "members": list(self.members)}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleSpec":
        return cls(strategy=d["strategy"], members=tuple(d["members"]))

    @classmethod
    def load(cls, path) -> "EnsembleSpec":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except (json.JSONDecodeError, KeyError) as exc:
            raise DataFormatError(f"bad ensemble spec {path}: {exc}") from exc


def _check_members(leaderboard: Leaderboard, members) -> None:
    known = set(r.model_id for r in leaderboard.rows)
    missing = [m for m in members if m not in known]
    if missing:
        raise ConfigError(f"ensemble members not on the leaderboard: {missing}")


def select_topk(leaderboard: Leaderboard, key: str, k: int) -> EnsembleSpec:
    if k < 1:
        raise SelectionError("k must be >= 1")
    ranked = rank_models(leaderboard, key)
    members = tuple(sorted(ranked[:k]))
    return EnsembleSpec(strategy=f"top{k}_{key.removesuffix('_srcc')}", members=members)


def select_intersection(leaderboard: Leaderboard, k_dev: int, k_pam: int) -> EnsembleSpec:
    """Members present in both the dev top-k_dev and the pam top-k_pam."""
    if k_dev < 1 or k_pam < 1:
        raise SelectionError("k_dev and k_pam must be >= 1")
    top_dev = set(rank_models(leaderboard, "dev_srcc")[:k_dev])
    top_pam = set(rank_models(leaderboard, "pam_srcc")[:k_pam])
    members = tuple(sorted(top_dev & top_pam))
    if not members:
        raise SelectionError(
            f"intersection of dev top-{k_dev} and pam top-{k_pam} is empty; "
            "increase k_dev/k_pam"
        )
    return EnsembleSpec(strategy=f"intersection_{k_dev}_{k_pam}", members=members)


def select_all(leaderboard: Leaderboard) -> EnsembleSpec:
    members = tuple(sorted(r.model_id for r in leaderboard.rows if r.error is None))
    if not members:
        raise SelectionError("leaderboard has no usable models")
    return EnsembleSpec(strategy="all", members=members)


def select_explicit(leaderboard: Leaderboard, members, name: str = "explicit") -> EnsembleSpec:
    _check_members(leaderboard, members)
    return EnsembleSpec(strategy=name, members=tuple(sorted(members)))


def ensemble_predict(
    spec: EnsembleSpec, leaderboard: Leaderboard, manifest
) -> tuple[list[str], np.ndarray]:
    """Unweighted per-axis mean of member predictions, in model_id order.

    A member that fails to load aborts the whole prediction; members are never
    silently dropped.
    """
    _check_members(leaderboard, spec.members)
    by_id = leaderboard.by_id()
    total = None
    utt_ids: list[str] | None = None
    for model_id in sorted(spec.members):
        row = by_id[model_id]
        model = load_checkpoint(leaderboard.checkpoint_path(row))
        ids, preds = predict_manifest(model, manifest)
        if utt_ids is None:
            utt_ids = ids
            total = preds
        else:
            total += preds
    return utt_ids, total / len(spec.members)


STANDARD_STRATEGIES = (
    "Submitted",
    "All models",
    "PAM top 8",
    "PAM top 4",
    "Dev top 8",
    "PAM top 1",
)


def standard_strategies(submitted: tuple[int, int] = (12, 12)) -> list[tuple[str, object]]:
    """The six comparison rows: the intersection-selected submission, the full
    average, PAM top 8/4/1, and dev top 8. Each entry is (name, builder) where
    builder(leaderboard) -> EnsembleSpec, so selection runs lazily per row."""
    return [
        ("Submitted", lambda lb: select_intersection(lb, *submitted)),
        ("All models", select_all),
        ("PAM top 8", lambda lb: select_topk(lb, "pam_srcc", 8)),
        ("PAM top 4", lambda lb: select_topk(lb, "pam_srcc", 4)),
        ("Dev top 8", lambda lb: select_topk(lb, "dev_srcc", 8)),
        ("PAM top 1", lambda lb: select_topk(lb, "pam_srcc", 1)),
    ]


def compare_strategies(
    leaderboard: Leaderboard,
    eval_manifest,
    strategies: list[tuple[str, object]],
) -> list[dict]:
    """One row per (name, builder) strategy: members plus the full MetricReport
    on the eval set. Selection errors are recorded on the row instead of
    aborting the table."""
    if len(strategies) < 2:
        raise ConfigError("need at least 2 strategies to compare")
    labels = eval_manifest.labels_matrix()
    systems = eval_manifest.system_ids()
    rows = []
    for name, builder in strategies:
        try:
            spec = builder(leaderboard) if callable(builder) else builder
            _, preds = ensemble_predict(spec, leaderboard, eval_manifest)
            report = evaluate(preds, labels, systems)
            rows.append(
                {
                    "strategy": name,
                    "members": list(spec.members),
                    "report": report.to_dict(),
                }
            )
        except (SelectionError, ConfigError, DataFormatError) as exc:
            rows.append({"strategy": name, "members": [], "error": str(exc)})
    return rows
