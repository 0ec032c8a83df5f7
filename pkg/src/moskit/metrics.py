"""Evaluation protocol: MSE, Pearson, Spearman, Kendall tau-b at utterance
and system level, per axis and for the composite (mean of the four axes)."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError, DomainError

AXES = ("pq", "pc", "ce", "cu")
REPORT_AXES = AXES + ("composite",)
LEVELS = ("utterance", "system")
METRIC_NAMES = ("mse", "lcc", "srcc", "ktau")


def _vec(name: str, x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ConfigError(f"{name} must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise DomainError(f"non-finite values in {name}")
    return v


def _paired(pred, label) -> tuple[np.ndarray, np.ndarray]:
    p = _vec("pred", pred)
    l = _vec("label", label)
    if p.shape != l.shape:
        raise ConfigError(f"pred/label length mismatch: {p.shape} vs {l.shape}")
    return p, l


def mse(pred, label) -> float:
    p, l = _paired(pred, label)
    if p.size < 1:
        raise DomainError("mse needs at least 1 sample")
    return float(((p - l) ** 2).mean())


def pearson_lcc(x, y) -> float:
    """Sample Pearson correlation with population (1/N) moments."""
    a, b = _paired(x, y)
    if a.size < 2:
        raise DomainError("pearson needs at least 2 samples")
    ca, cb = a - a.mean(), b - b.mean()
    va = float((ca**2).mean())
    vb = float((cb**2).mean())
    if va == 0.0 or vb == 0.0:
        raise DomainError("pearson undefined for a constant vector")
    return float((ca * cb).mean() / math.sqrt(va * vb))


def fractional_ranks(x) -> np.ndarray:
    """1-based ranks with ties assigned the mean of their positions."""
    v = _vec("x", x)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    sorted_v = v[order]
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        # positions i..j (0-based) share the averaged 1-based rank
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_srcc(x, y) -> float:
    """Pearson correlation of fractional ranks (tie-aware)."""
    a, b = _paired(x, y)
    if a.size < 2:
        raise DomainError("spearman needs at least 2 samples")
    return pearson_lcc(fractional_ranks(a), fractional_ranks(b))


def kendall_tau_b(x, y) -> float:
    """Tie-corrected Kendall tau: (C - D) / sqrt((C+D+Tx)(C+D+Ty))."""
    a, b = _paired(x, y)
    n = a.size
    if n < 2:
        raise DomainError("kendall tau needs at least 2 samples")
    iu, ju = np.triu_indices(n, k=1)
    sx = np.sign(a[iu] - a[ju])
    sy = np.sign(b[iu] - b[ju])
    prod = sx * sy
    c = int((prod > 0).sum())
    d = int((prod < 0).sum())
    tx = int(((sx == 0) & (sy != 0)).sum())
    ty = int(((sy == 0) & (sx != 0)).sum())
    if c + d + tx == 0 or c + d + ty == 0:
        raise DomainError("kendall tau undefined: all pairs tied in one vector")
    return (c - d) / math.sqrt((c + d + tx) * (c + d + ty))


def composite_score(axes) -> float:
    """Arithmetic mean of the four axis values."""
    v = _vec("axes", axes)
    if v.size != len(AXES):
        raise ConfigError(f"expected {len(AXES)} axis values, got {v.size}")
    return float(v.mean())


def composite_column(matrix: np.ndarray) -> np.ndarray:
    """Row-wise composite for an (N x 4) axis matrix."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != len(AXES):
        raise ConfigError(f"expected (N x {len(AXES)}) matrix, got {m.shape}")
    return m.mean(axis=1)


def system_level(
    preds: np.ndarray, labels: np.ndarray, system_ids: list[str]
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Unweighted per-system means of predictions and labels.

    Returns (sys_preds, sys_labels, system_order) with systems in sorted id
    order for deterministic downstream metrics.
    """
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if len(system_ids) != preds.shape[0] or preds.shape != labels.shape:
        raise ConfigError("system ids and score matrices must align")
    groups: dict[str, list[int]] = {}
    for i, sid in enumerate(system_ids):
        groups.setdefault(sid, []).append(i)
    order = sorted(groups)
    sys_preds = np.empty((len(order), preds.shape[1]))
    sys_labels = np.empty_like(sys_preds)
    kept = []
    for k, sid in enumerate(order):
        idx = groups[sid]
        if not idx:
            warnings.warn(f"system {sid!r} has no utterances, excluded", stacklevel=2)
            continue
        sys_preds[len(kept)] = preds[idx].mean(axis=0)
        sys_labels[len(kept)] = labels[idx].mean(axis=0)
        kept.append(sid)
    return sys_preds[: len(kept)], sys_labels[: len(kept)], kept


@dataclass
class MetricReport:
    """5 axes x 2 levels x 4 metrics grid; None marks an undefined cell."""

    cells: dict[tuple[str, str, str], float | None] = field(default_factory=dict)

    def get(self, axis: str, level: str, metric: str) -> float | None:
        return self.cells[(axis, level, metric)]

    def set(self, axis: str, level: str, metric: str, value: float | None) -> None:
        self.cells[(axis, level, metric)] = value

    def to_dict(self) -> dict:
        return {
            f"{axis}/{level}/{metric}": self.cells.get((axis, level, metric))
            for axis in REPORT_AXES
            for level in LEVELS
            for metric in METRIC_NAMES
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        report = cls()
        for key, value in d.items():
            parts = key.split("/")
            if len(parts) != 3:
                raise DataFormatError(f"bad metric report key {key!r}")
            report.cells[(parts[0], parts[1], parts[2])] = value
        return report

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"bad metric report JSON: {exc}") from exc
        return cls.from_dict(d)

    def to_text(self) -> str:
        """Human-readable table rendering."""
        lines = []
        header = f"{'axis':<10}{'level':<11}" + "".join(f"{m:>12}" for m in METRIC_NAMES)
        lines.append(header)
        lines.append("-" * len(header))
        for axis in REPORT_AXES:
            for level in LEVELS:
                row = f"{axis:<10}{level:<11}"
                for metric in METRIC_NAMES:
                    v = self.cells.get((axis, level, metric))
                    row += f"{'undef':>12}" if v is None else f"{v:>12.6f}"
                lines.append(row)
        return "\n".join(lines)


_METRIC_FNS = {
    "mse": mse,
    "lcc": pearson_lcc,
    "srcc": spearman_srcc,
    "ktau": kendall_tau_b,
}


def evaluate(
    preds: np.ndarray, labels: np.ndarray, system_ids: list[str]
) -> MetricReport:
    """Fill the full metric grid; degenerate cells come back as None."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.ndim != 2 or preds.shape[1] != len(AXES) or preds.shape != labels.shape:
        raise ConfigError(
            f"expected matching (N x {len(AXES)}) matrices, got {preds.shape} vs {labels.shape}"
        )
    if len(system_ids) != preds.shape[0]:
        raise ConfigError("system ids must align with score rows")

    utt_p = np.column_stack([preds, composite_column(preds)])
    utt_l = np.column_stack([labels, composite_column(labels)])
    sys_p4, sys_l4, _ = system_level(preds, labels, system_ids)
    sys_p = np.column_stack([sys_p4, composite_column(sys_p4)])
    sys_l = np.column_stack([sys_l4, composite_column(sys_l4)])

    report = MetricReport()
    for a, axis in enumerate(REPORT_AXES):
        for level, (pm, lm) in (("utterance", (utt_p, utt_l)), ("system", (sys_p, sys_l))):
            for metric, fn in _METRIC_FNS.items():
                try:
                    report.set(axis, level, metric, fn(pm[:, a], lm[:, a]))
                except DomainError:
                    report.set(axis, level, metric, None)
    return report
