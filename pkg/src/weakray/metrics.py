"""Multi-label classification evaluation: per-class AUROC.

AUROC is computed with the rank statistic (ties contribute one half),
which equals the trapezoidal area under the ROC curve.  A brute-force
pairwise oracle is kept alongside as an independent check.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "UndefinedMetricError",
    "RocInput",
    "auroc",
    "auroc_bruteforce_oracle",
    "ClassificationReport",
    "classification_report",
]


class UndefinedMetricError(ValueError):
    """The metric is undefined for this input (e.g. one-class labels)."""


@dataclass
class RocInput:
    """Scores and binary labels for one class."""

    scores: np.ndarray
    labels: np.ndarray
    class_name: str = ""

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise ValueError(
                f"scores {self.scores.shape} and labels {self.labels.shape} must be equal 1-D"
            )

    @property
    def is_defined(self) -> bool:
        pos = int(self.labels.sum())
        return 0 < pos < self.labels.size


def _validate(scores, labels, name: str):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"{name}: scores and labels must be equal-length 1-D arrays")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError(f"{name}: labels must be binary")
    pos = int(labels.sum())
    neg = labels.size - pos
    if pos == 0 or neg == 0:
        raise UndefinedMetricError(
            f"{name}: undefined with {pos} positives and {neg} negatives"
        )
    return scores, labels.astype(bool), pos, neg


def auroc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative,
    ties counting one half.  Average ranks make tie handling exact.
    """
    scores, mask, pos, neg = _validate(scores, labels, "auroc")
    ranks = rankdata(scores, method="average")
    return float((ranks[mask].sum() - pos * (pos + 1) / 2.0) / (pos * neg))


def auroc_bruteforce_oracle(scores, labels) -> float:
    """Direct pairwise count over all positive-negative pairs."""
    scores, mask, pos, neg = _validate(scores, labels, "auroc_bruteforce_oracle")
    sp = scores[mask][:, None]
    sn = scores[~mask][None, :]
    wins = (sp > sn).sum() + 0.5 * (sp == sn).sum()
    return float(wins / (pos * neg))


@dataclass
class ClassificationReport:
    """Per-class AUROC table; None marks classes where it is undefined."""

    class_names: tuple
    aurocs: tuple  # float or None per class

    @property
    def macro_auroc(self) -> float:
        defined = [a for a in self.aurocs if a is not None]
        return float(np.mean(defined)) if defined else float("nan")

    @property
    def undefined_classes(self) -> tuple:
        return tuple(n for n, a in zip(self.class_names, self.aurocs) if a is None)

    def to_csv(self, stream) -> None:
        stream.write("class,auroc\n")
        for name, a in zip(self.class_names, self.aurocs):
            stream.write(f"{name},{'undefined' if a is None else repr(a)}\n")
        stream.write(f"macro,{self.macro_auroc!r}\n")

    def to_text(self) -> str:
        width = max(len(n) for n in self.class_names) + 2
        out = io.StringIO()
        out.write("class".ljust(width) + "auroc\n")
        for name, a in zip(self.class_names, self.aurocs):
            cell = "undefined" if a is None else f"{a:.4f}"
            out.write(name.ljust(width) + cell + "\n")
        out.write("macro".ljust(width) + f"{self.macro_auroc:.4f}\n")
        return out.getvalue()


def classification_report(scores, labels, class_names) -> ClassificationReport:
    """Per-class AUROC plus the macro average over defined classes."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError(
            f"classification_report: scores {scores.shape} and labels {labels.shape} "
            "must be matching (n, C) arrays"
        )
    if scores.shape[1] != len(class_names):
        raise ValueError(
            f"classification_report: {scores.shape[1]} score columns but "
            f"{len(class_names)} class names"
        )
    values = []
    for ci in range(scores.shape[1]):
        try:
            values.append(auroc(scores[:, ci], labels[:, ci]))
        except UndefinedMetricError:
            values.append(None)
    return ClassificationReport(tuple(class_names), tuple(values))
