"""Correlation metrics, group-wise evaluation, and quality-gated voting."""
from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError, UndefinedCorrelationError

REPORT_FIELDS = ["condition", "set", "scorer", "metric", "value", "groups_used", "groups_dropped"]


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1)
    if len(pred) != len(gt):
        raise ContractError(f"length mismatch: {len(pred)} vs {len(gt)}")
    if len(pred) < 2:
        raise ContractError("correlation needs at least two points")
    return pred, gt


def _pearson(x, y):
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(xc @ xc), np.sqrt(yc @ yc)
    if sx == 0 or sy == 0:
        raise UndefinedCorrelationError("correlation of a constant vector is undefined")
    return float(np.clip(xc @ yc / (sx * sy), -1.0, 1.0))


def lcc(pred, gt) -> float:
    """Pearson linear correlation."""
    return _pearson(*_pair(pred, gt))


def srocc(pred, gt) -> float:
    """Spearman rank correlation; ties share their average rank."""
    pred, gt = _pair(pred, gt)
    return _pearson(rankdata(pred, method="average"), rankdata(gt, method="average"))


# ---------------------------------------------------------------- group protocol

@dataclass
class GroupMetrics:
    srocc: float
    lcc: float
    used: int
    dropped: int


def evaluate_groups(groups: Sequence, scorer: Callable) -> GroupMetrics:
    """Per-group SROCC/LCC against gt-scores, averaged without weights.

    ``scorer(members)`` returns one score per member.  Groups on which either
    metric is undefined (constant scores or gt) are left out and counted.
    """
    s_vals, l_vals, dropped = [], [], 0
    for g in groups:
        members = g.members if hasattr(g, "members") else g
        gt = [m.gt_score for m in members]
        if any(v is None for v in gt):
            raise ContractError("evaluate_groups needs gt-scores on every member")
        pred = scorer(members)
        try:
            s, l_ = srocc(pred, gt), lcc(pred, gt)
        except UndefinedCorrelationError:
            dropped += 1
            continue
        s_vals.append(s)
        l_vals.append(l_)
    if not s_vals:
        return GroupMetrics(float("nan"), float("nan"), 0, dropped)
    return GroupMetrics(float(np.mean(s_vals)), float(np.mean(l_vals)), len(s_vals), dropped)


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)  # dicts keyed by REPORT_FIELDS

    def add(self, condition: str, set_name: str, scorer: str, m: GroupMetrics):
        for metric, value in (("SROCC", m.srocc), ("LCC", m.lcc)):
            self.rows.append(dict(condition=condition, set=set_name, scorer=scorer, metric=metric,
                                  value=value, groups_used=m.used, groups_dropped=m.dropped))

    def add_value(self, condition: str, set_name: str, scorer: str, metric: str, value: float,
                  used: int = 0, dropped: int = 0):
        self.rows.append(dict(condition=condition, set=set_name, scorer=scorer, metric=metric,
                              value=value, groups_used=used, groups_dropped=dropped))

    def get(self, set_name: str, scorer: str, metric: str = "SROCC", condition: str | None = None) -> float:
        for r in self.rows:
            if (r["set"], r["scorer"], r["metric"]) == (set_name, scorer, metric) and \
                    (condition is None or r["condition"] == condition):
                return r["value"]
        raise KeyError((condition, set_name, scorer, metric))

    @classmethod
    def from_csv(cls, path) -> "MetricReport":
        with open(path, newline="") as fh:
            rows = [dict(r, value=float(r["value"]), groups_used=int(r["groups_used"]),
                         groups_dropped=int(r["groups_dropped"])) for r in csv.DictReader(fh)]
        return cls(rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({**r, "value": f"{r['value']:.6f}"})
        return buf.getvalue()

    def to_text(self) -> str:
        """Metrics down the side, scorers across, one block per condition."""
        lines = []
        for cond in dict.fromkeys(r["condition"] for r in self.rows):
            rows = [r for r in self.rows if r["condition"] == cond]
            scorers = list(dict.fromkeys(r["scorer"] for r in rows))
            lines.append(f"[{cond}]")
            lines.append(f"{'metric':<8}{'set':<10}" + "".join(f"{s:>12}" for s in scorers))
            for metric in dict.fromkeys(r["metric"] for r in rows):
                for set_name in dict.fromkeys(r["set"] for r in rows if r["metric"] == metric):
                    cells = []
                    for s in scorers:
                        hit = [r for r in rows if (r["metric"], r["set"], r["scorer"]) == (metric, set_name, s)]
                        cells.append(f"{hit[0]['value']:>12.3f}" if hit else f"{'-':>12}")
                    lines.append(f"{metric:<8}{set_name:<10}" + "".join(cells))
            lines.append("")
        return "\n".join(lines)


def emit_report(report: MetricReport, path) -> tuple:
    """Write ``<path>.csv`` and ``<path>.txt``; returns both paths."""
    from pathlib import Path
    from .dataio import atomic_write

    base = Path(path)
    csv_path, txt_path = base.with_suffix(".csv"), base.with_suffix(".txt")
    atomic_write(csv_path, report.to_csv())
    atomic_write(txt_path, report.to_text())
    return csv_path, txt_path


# ---------------------------------------------------------------- sequences and gating

@dataclass
class SequenceSample:
    frames: list          # LabeledSample, gt-scored
    label: int
    preds: np.ndarray     # recognizer output per frame
    confs: np.ndarray

    def __post_init__(self):
        if len(self.frames) < 3:
            raise ContractError("a sequence needs at least three frames")


def qshr(sequences: Sequence[SequenceSample], scorer: Callable) -> float:
    """Share of sequences whose top-scored frame has the top gt-score (ties hit)."""
    if not sequences:
        return float("nan")
    hits = 0
    for seq in sequences:
        scores = np.asarray(scorer(seq), dtype=np.float64)
        gt = np.array([f.gt_score for f in seq.frames])
        hits += gt[int(np.argmax(scores))] == gt.max()
    return hits / len(sequences)


def gated_vote(sequence: SequenceSample, scorer: Callable, th: float) -> int:
    """Majority vote over frames scoring at least ``th``.

    Ties go to the label with the higher mean confidence, then the smaller
    label.  With every frame discarded, the single best-scored frame decides.
    """
    scores = np.asarray(scorer(sequence), dtype=np.float64)
    keep = np.flatnonzero(scores >= th)
    if len(keep) == 0:
        return int(sequence.preds[int(np.argmax(scores))])
    votes = Counter(int(sequence.preds[i]) for i in keep)
    top = max(votes.values())
    tied = [lab for lab, n in votes.items() if n == top]
    if len(tied) == 1:
        return tied[0]

    def mean_conf(lab):
        idx = [i for i in keep if sequence.preds[i] == lab]
        return float(np.mean(sequence.confs[idx]))
    return min(tied, key=lambda lab: (-mean_conf(lab), lab))


def sra(sequences: Sequence[SequenceSample], scorer: Callable, th: float) -> float:
    """Sequence-level recognition accuracy of ``gated_vote``."""
    if not sequences:
        return float("nan")
    return float(np.mean([gated_vote(s, scorer, th) == s.label for s in sequences]))
