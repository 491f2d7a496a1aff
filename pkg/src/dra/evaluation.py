"""Scoring test sets, AUC, and multi-run aggregation."""

from __future__ import annotations

import csv
import json
import warnings
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DataError
from .model import DRAModel
from .protocols import SplitResult

RESULT_COLUMNS = ("dataset", "subset", "protocol", "shots", "preset", "seed", "auc", "seconds")
SUMMARY_COLUMNS = ("dataset", "subset", "protocol", "shots", "preset", "mean_auc", "std_auc", "n_runs")


@dataclass
class ScoredExample:
    id: str
    label: int
    score: float
    anomaly_class: str | None = None
    head_scores: list[dict[str, float]] = field(default_factory=list)


def score_dataset(model: DRAModel, split: SplitResult, scales: Sequence[float] | None = None,
                  batch_size: int = 64) -> list[ScoredExample]:
    """Composite score for every test image of ``split``."""
    if split.catalog is None:
        raise DataError("split has no catalog attached")
    if scales is not None and tuple(scales) != model.scales:
        raise DataError(f"model was built for scales {model.scales}, not {tuple(scales)}")
    ids = split.test_ids
    labels = split.test_labels
    images = split.catalog.load_many(ids)
    scores, breakdown = model.score(images, batch_size)
    return [ScoredExample(i, int(y), float(s), split.anomaly_class.get(i) if y else None, hs.per_scale)
            for i, y, s, hs in zip(ids, labels, scores, breakdown)]


def auc(scored) -> float:
    """ROC AUC by the rank-sum statistic; tied scores count one half.

    Accepts a list of :class:`ScoredExample` or a ``(labels, scores)`` pair.
    """
    if isinstance(scored, tuple) and len(scored) == 2:
        labels, scores = (np.asarray(a) for a in scored)
    else:
        labels = np.asarray([s.label for s in scored])
        scores = np.asarray([s.score for s in scored], dtype=np.float64)
    labels = labels.astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC is undefined without both positive and negative samples")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class RunReport:
    dataset: str
    protocol: str
    shots: int
    seed: int
    preset: str
    auc: float
    seconds: float | None = None
    subset: str = ""
    config_hash: str = ""

    def __post_init__(self):
        if not 0.0 <= self.auc <= 1.0:
            raise DataError(f"AUC {self.auc} outside [0, 1]")

    def row(self, timing: bool = True) -> dict:
        d = asdict(self)
        d["auc"] = f"{self.auc:.6f}"
        d["seconds"] = f"{self.seconds:.2f}" if timing and self.seconds is not None else ""
        return {k: d[k] for k in RESULT_COLUMNS}


@dataclass
class GroupSummary:
    dataset: str
    subset: str
    protocol: str
    shots: int
    preset: str
    mean_auc: float
    std_auc: float
    n_runs: int

    @property
    def low_replication(self) -> bool:
        return self.n_runs < 2


def aggregate_runs(reports: Iterable[RunReport], over_subsets: bool = False) -> list[GroupSummary]:
    """Mean and population std of AUC per (dataset, subset, protocol, shots, preset).

    With ``over_subsets`` the AUCs of each seed are first averaged uniformly
    over subsets, giving one dataset-level row per group.
    """
    reports = list(reports)
    if over_subsets:
        per_seed = defaultdict(list)
        for r in reports:
            per_seed[(r.dataset, r.protocol, r.shots, r.preset, r.seed)].append(r.auc)
        reports = [RunReport(d, p, sh, seed, pr, float(np.mean(v)))
                   for (d, p, sh, pr, seed), v in per_seed.items()]
    groups = defaultdict(list)
    for r in reports:
        groups[(r.dataset, r.subset, r.protocol, r.shots, r.preset)].append(r.auc)
    out = []
    for key in sorted(groups):
        aucs = np.asarray(groups[key], dtype=np.float64)
        if aucs.size == 0:
            warnings.warn(f"no runs for group {key}; skipped")
            continue
        if aucs.size == 1:
            warnings.warn(f"group {key} has a single run; std reported as 0")
        out.append(GroupSummary(*key, float(aucs.mean()), float(aucs.std()), int(aucs.size)))
    return out


def write_results(reports: Iterable[RunReport], path: str | Path, timing: bool = True) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerow(r.row(timing))


def read_results(path: str | Path) -> list[RunReport]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(RunReport(row["dataset"], row["protocol"], int(row["shots"]), int(row["seed"]),
                                 row["preset"], float(row["auc"]),
                                 float(row["seconds"]) if row["seconds"] else None, row["subset"]))
    return out


def write_summary(summaries: Iterable[GroupSummary], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for s in summaries:
            d = asdict(s)
            d["mean_auc"] = f"{s.mean_auc:.6f}"
            d["std_auc"] = f"{s.std_auc:.6f}"
            w.writerow(d)


def write_scores(scored: Iterable[ScoredExample], path: str | Path) -> None:
    """One row per test image with composite and per-head, per-scale scores."""
    scored = list(scored)
    head_cols = []
    if scored:
        for k, scale in enumerate(scored[0].head_scores):
            head_cols += [f"{h}@{k}" for h in scale]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "class", "score", *head_cols])
        for s in scored:
            heads = [f"{v:.8g}" for scale in s.head_scores for v in scale.values()]
            w.writerow([s.id, s.label, s.anomaly_class or "", f"{s.score:.8g}", *heads])


def write_report_json(report: RunReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(asdict(report), indent=1, sort_keys=True) + "\n")


def plot_score_distribution(scored: Sequence[ScoredExample], path: str | Path, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3))
    normal = [s.score for s in scored if s.label == 0]
    classes = sorted({s.anomaly_class or "anomaly" for s in scored if s.label == 1})
    ax.hist(normal, bins=30, alpha=0.6, label="normal")
    for c in classes:
        ax.hist([s.score for s in scored if s.label == 1 and (s.anomaly_class or "anomaly") == c],
                bins=30, alpha=0.5, label=c)
    ax.set_xlabel("anomaly score")
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
