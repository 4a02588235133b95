"""Utterance- and system-level LCC / SRCC / KTAU / MSE.

Correlations on degenerate input (fewer than two points, or zero variance on
either side) are reported as ``None`` and printed as ``undefined``; MSE is
always defined.
"""

from __future__ import annotations

import dataclasses
from collections import defaultdict
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateInput

UNDEFINED = "undefined"


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    if len(x) < 2:
        raise DegenerateInput("need at least two points")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DegenerateInput("zero variance input")
    return x, y


def lcc(x, y):
    """Pearson linear correlation."""
    x, y = _pair(x, y)
    dx, dy = x - x.mean(), y - y.mean()
    denom = np.sqrt((dx @ dx) * (dy @ dy))
    if not denom > 0 or not np.isfinite(denom):
        raise DegenerateInput("variance underflows")
    r = (dx @ dy) / denom
    return float(np.clip(r, -1.0, 1.0))


def srcc(x, y):
    """Spearman correlation: Pearson on average (fractional) ranks."""
    x, y = _pair(x, y)
    return lcc(rankdata(x), rankdata(y))


def ktau(x, y, chunk=256):
    """Kendall's tau-b, counted pairwise in row chunks."""
    x, y = _pair(x, y)
    n = len(x)
    s = 0.0
    ties_x = ties_y = 0
    for start in range(0, n, chunk):
        sx = np.sign(x[start : start + chunk, None] - x[None, :])
        sy = np.sign(y[start : start + chunk, None] - y[None, :])
        # only pairs i < j
        upper = np.arange(start, start + len(sx))[:, None] < np.arange(n)[None, :]
        s += float((sx * sy)[upper].sum())
        ties_x += int(((sx == 0) & upper).sum())
        ties_y += int(((sy == 0) & upper).sum())
    n0 = n * (n - 1) / 2
    return float(np.clip(s / np.sqrt((n0 - ties_x) * (n0 - ties_y)), -1.0, 1.0))


def mse(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape or len(x) == 0:
        raise ValueError("mse needs equal, nonzero lengths")
    return float(np.mean((x - y) ** 2))


@dataclasses.dataclass(frozen=True)
class PredictionRow:
    utterance_id: str
    system_id: str
    predicted: float
    target: float


@dataclasses.dataclass
class PredictionSet:
    rows: list

    @classmethod
    def from_arrays(cls, ids, system_ids, predicted, target):
        return cls(
            [PredictionRow(u, s, float(p), float(t)) for u, s, p, t in zip(ids, system_ids, predicted, target)]
        )

    @property
    def predicted(self):
        return np.array([r.predicted for r in self.rows])

    @property
    def target(self):
        return np.array([r.target for r in self.rows])

    def __len__(self):
        return len(self.rows)


@dataclasses.dataclass
class MetricReport:
    level: str
    lcc: Optional[float]
    srcc: Optional[float]
    ktau: Optional[float]
    mse: float
    n: int = 0

    def as_dict(self):
        return dataclasses.asdict(self)


def system_level(preds: PredictionSet) -> PredictionSet:
    """One row per system holding mean prediction and mean target (sorted by system)."""
    groups = defaultdict(list)
    for r in preds.rows:
        groups[r.system_id].append(r)
    rows = []
    for sys_id in sorted(groups):
        members = groups[sys_id]
        rows.append(
            PredictionRow(
                sys_id,
                sys_id,
                float(np.mean([r.predicted for r in members])),
                float(np.mean([r.target for r in members])),
            )
        )
    return PredictionSet(rows)


def _safe(fn, x, y):
    try:
        return fn(x, y)
    except DegenerateInput:
        return None


def metric_report(preds: PredictionSet, level="utterance") -> MetricReport:
    p, t = preds.predicted, preds.target
    return MetricReport(level, _safe(lcc, p, t), _safe(srcc, p, t), _safe(ktau, p, t), mse(p, t), len(p))


def report_levels(preds: PredictionSet, system=True):
    reports = [metric_report(preds, "utterance")]
    if system:
        reports.append(metric_report(system_level(preds), "system"))
    return reports


def _fmt(v):
    return UNDEFINED if v is None else f"{v:.3f}"


def format_reports(reports, title=""):
    """Plain-text table in LCC, SRCC, KTAU, MSE column order."""
    lines = []
    if title:
        lines.append(title)
    lines.append(f"{'level':<10} {'LCC':>9} {'SRCC':>9} {'KTAU':>9} {'MSE':>9} {'n':>6}")
    for r in reports:
        lines.append(f"{r.level:<10} {_fmt(r.lcc):>9} {_fmt(r.srcc):>9} {_fmt(r.ktau):>9} {_fmt(r.mse):>9} {r.n:>6}")
    return "\n".join(lines)


def write_predictions(preds: PredictionSet, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("utterance_id|system_id|predicted|target\n")
        for r in preds.rows:
            fh.write(f"{r.utterance_id}|{r.system_id}|{r.predicted!r}|{r.target!r}\n")
    return path


def predictions_for(model, backend, utts, batch_size=16):
    from .model import predict

    p = predict(model, backend, utts, batch_size)
    return PredictionSet.from_arrays([u.id for u in utts], [u.system_id for u in utts], p, [u.mos for u in utts])


def evaluate(checkpoint, manifest, split="test", system=True, backend=None, codebook_sha256=None, batch_size=16):
    """Inference-path evaluation of a checkpoint on one split of a manifest.

    ``checkpoint`` is a path or a ``(model, backend)`` pair. ``split=None``
    uses every entry, which is the usual choice for zero-shot corpora.
    Returns ``(reports, prediction_set)``.
    """
    from .model import load_checkpoint

    if isinstance(checkpoint, tuple):
        model, backend = checkpoint
    else:
        model, backend, _ = load_checkpoint(checkpoint, inference_only=True, backend=backend, codebook_sha256=codebook_sha256)
    manifest.load_audio()
    utts = manifest.entries if split is None else manifest.split(split)
    if not utts:
        raise DegenerateInput(f"no utterances in split {split!r}")
    preds = predictions_for(model, backend, utts, batch_size)
    return report_levels(preds, system), preds
