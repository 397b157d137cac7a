"""Classification metrics, cross-task aggregation, feature export, and 2-D
projection of learned features.

AUC is computed exactly by pair counting (via average ranks), so it is
invariant under any strictly increasing transform of the scores and needs no
binning tolerance. Threshold metrics that would divide by zero return ``None``
and render as ``n/a`` rather than being coerced to 0.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from .data import TASKS, Dataset
from .nnet import FeatureExtractor, ModelBundle

DATASET_ROLES = ("local_test", "external_test")


class MetricError(ValueError):
    """Invalid metric input (single-class labels, nonpositive values, ...)."""


class MissingCellError(ValueError):
    """A report was requested for cells that have no trained run."""


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability that a random positive outscores a random negative.

    Ties count 0.5. Equivalent to trapezoidal ROC integration; computed from
    average ranks in O(n log n).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError(f"scores and labels must be equal-length 1-D, got {scores.shape} vs {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise MetricError("labels must be 0 or 1")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError(f"AUC needs both classes; got {n_pos} positives and {n_neg} negatives")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    # average rank within tie groups
    boundaries = np.r_[True, sorted_scores[1:] != sorted_scores[:-1]]
    group_id = np.cumsum(boundaries) - 1
    positions = np.arange(1, len(scores) + 1, dtype=np.float64)
    group_sum = np.bincount(group_id, weights=positions)
    group_count = np.bincount(group_id)
    ranks = np.empty_like(scores)
    ranks[order] = (group_sum / group_count)[group_id]
    rank_sum_pos = ranks[labels == 1].sum()
    return float((rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass(frozen=True)
class ThresholdMetrics:
    precision: Optional[float]
    recall: Optional[float]
    specificity: Optional[float]


def threshold_metrics(
    scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5
) -> ThresholdMetrics:
    """Precision/recall/specificity at a probability threshold.

    Scores at or above the threshold predict positive. Ratios with a zero
    denominator are reported as ``None`` (undefined), never as 0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    predictions = scores >= threshold
    actual_pos = labels == 1
    tp = int(np.sum(predictions & actual_pos))
    fp = int(np.sum(predictions & ~actual_pos))
    fn = int(np.sum(~predictions & actual_pos))
    tn = int(np.sum(~predictions & ~actual_pos))

    def ratio(num: int, den: int) -> Optional[float]:
        return num / den if den > 0 else None

    return ThresholdMetrics(
        precision=ratio(tp, tp + fp),
        recall=ratio(tp, tp + fn),
        specificity=ratio(tn, tn + fp),
    )


def geometric_mean(values: Sequence[float]) -> float:
    """n-th root of the product of positive values."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise MetricError("geometric mean of an empty sequence is undefined")
    if (values <= 0).any():
        raise MetricError("geometric mean requires strictly positive values")
    return float(np.exp(np.mean(np.log(values))))


def score_task(bundle: ModelBundle, dataset: Dataset, task: str) -> tuple[np.ndarray, np.ndarray]:
    """Sigmoid head scores and labels for a dataset's task-labelled records."""
    subset = dataset.labelled(task)
    if len(subset) == 0:
        raise MetricError(f"no labelled records for task {task!r} in {dataset.name!r}")
    head = bundle.heads.get(task)
    if head is None:
        raise MetricError(f"bundle has no head for task {task!r}")
    images = subset.pixel_stack()
    outputs = []
    bundle.extractor.eval()
    with torch.no_grad():
        for start in range(0, len(images), 256):
            feats = bundle.extractor(torch.from_numpy(images[start : start + 256]))
            outputs.append(torch.sigmoid(head(feats)))
    scores = torch.cat(outputs).numpy().astype(np.float64)
    return scores, subset.labels(task)


def export_features(extractor: FeatureExtractor, dataset: Dataset, path: str | Path) -> Path:
    """Write one CSV row per image: id, task labels, and feature values.

    Rows follow dataset order and floats are formatted with 9 significant
    digits, so re-export with identical weights is byte-identical.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dim = extractor.feature_dim
    images = dataset.pixel_stack()
    features = np.zeros((0, dim), dtype=np.float32)
    if len(dataset) > 0:
        chunks = []
        extractor.eval()
        with torch.no_grad():
            for start in range(0, len(images), 256):
                chunks.append(extractor(torch.from_numpy(images[start : start + 256])).numpy())
        features = np.concatenate(chunks)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_id", "view_label", "ab_label", "pe_label"] + [f"f{i}" for i in range(dim)])
        for rec, row in zip(dataset, features):
            labels = ["" if v is None else v for v in (rec.view_label, rec.ab_label, rec.pe_label)]
            writer.writerow([rec.image_id, *labels, *(format(float(v), ".9g") for v in row)])
    return path


def project_2d(
    features: np.ndarray,
    method: str = "pca",
    seed: int = 0,
    perplexity: float = 30.0,
) -> np.ndarray:
    """Project (N, D) features to 2-D by PCA or t-SNE.

    PCA returns the top-2 principal components with each component's sign
    fixed so its largest-magnitude loading is positive. t-SNE runs seeded with
    the given perplexity (clamped below (N-1)/3 where necessary).
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 3:
        raise MetricError(f"projection needs at least 3 feature rows, got shape {features.shape}")
    if method == "pca":
        if features.shape[1] < 2:
            raise MetricError("PCA projection needs at least 2 feature dimensions")
        centered = features - features.mean(axis=0)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        components = vt[:2].copy()
        for row in components:
            if row[np.argmax(np.abs(row))] < 0:
                row *= -1.0
        return centered @ components.T
    if method == "tsne":
        from sklearn.manifold import TSNE

        effective = min(perplexity, (features.shape[0] - 1) / 3.0)
        tsne = TSNE(n_components=2, perplexity=effective, random_state=seed, init="pca")
        return np.asarray(tsne.fit_transform(features), dtype=np.float64)
    raise MetricError(f"unknown projection method {method!r}; expected 'pca' or 'tsne'")


@dataclass(frozen=True)
class ReportCell:
    """Metrics of one (task, pretraining, protocol, dataset) combination."""

    task: str
    pretraining: str
    protocol: str
    dataset: str
    auc: float
    precision: Optional[float] = None
    recall: Optional[float] = None
    specificity: Optional[float] = None


@dataclass
class EvalReport:
    """Per-cell metrics plus cross-task geometric-mean rows."""

    cells: tuple[ReportCell, ...]
    mean_aucs: dict[tuple[str, str, str], float] = field(default_factory=dict)
    tasks: tuple[str, ...] = TASKS

    def to_records(self) -> list[dict]:
        records = [
            {
                "task": c.task,
                "pretraining": c.pretraining,
                "protocol": c.protocol,
                "dataset": c.dataset,
                "auc": c.auc,
                "precision": c.precision,
                "recall": c.recall,
                "specificity": c.specificity,
            }
            for c in self.cells
        ]
        for (pretraining, protocol, dataset), value in sorted(self.mean_aucs.items()):
            records.append(
                {
                    "task": "mean",
                    "pretraining": pretraining,
                    "protocol": protocol,
                    "dataset": dataset,
                    "auc": value,
                    "precision": None,
                    "recall": None,
                    "specificity": None,
                }
            )
        return records


def build_report(
    cell_aucs: Mapping[tuple[str, str, str, str], float],
    cell_metrics: Optional[Mapping[tuple[str, str, str, str], ThresholdMetrics]] = None,
    tasks: Sequence[str] = TASKS,
) -> EvalReport:
    """Assemble a report from per-cell AUCs keyed (task, pretraining, protocol, dataset).

    Every (pretraining, protocol, dataset) group must supply all requested
    tasks; otherwise the missing cells are reported explicitly.
    """
    groups: dict[tuple[str, str, str], dict[str, float]] = {}
    cells = []
    for (task, pretraining, protocol, dataset), value in cell_aucs.items():
        extra = cell_metrics.get((task, pretraining, protocol, dataset)) if cell_metrics else None
        cells.append(
            ReportCell(
                task=task,
                pretraining=pretraining,
                protocol=protocol,
                dataset=dataset,
                auc=float(value),
                precision=extra.precision if extra else None,
                recall=extra.recall if extra else None,
                specificity=extra.specificity if extra else None,
            )
        )
        groups.setdefault((pretraining, protocol, dataset), {})[task] = float(value)
    missing = [
        (task, *group)
        for group, have in sorted(groups.items())
        for task in tasks
        if task not in have
    ]
    if missing:
        raise MissingCellError(f"missing report cells: {missing}")
    mean_aucs = {
        group: geometric_mean([have[task] for task in tasks]) for group, have in groups.items()
    }
    order = {t: i for i, t in enumerate(tasks)}
    cells.sort(key=lambda c: (order.get(c.task, 99), c.pretraining, c.dataset, c.protocol))
    return EvalReport(cells=tuple(cells), mean_aucs=mean_aucs, tasks=tuple(tasks))


def evaluate_bundles(
    bundles: Mapping[tuple[str, str], ModelBundle],
    datasets: Mapping[str, Dataset],
    tasks: Sequence[str] = TASKS,
    threshold: float = 0.5,
) -> EvalReport:
    """Score trained bundles keyed (pretraining, protocol) on named datasets."""
    cell_aucs: dict[tuple[str, str, str, str], float] = {}
    cell_metrics: dict[tuple[str, str, str, str], ThresholdMetrics] = {}
    for (pretraining, protocol), bundle in bundles.items():
        for dataset_name, dataset in datasets.items():
            for task in tasks:
                scores, labels = score_task(bundle, dataset, task)
                key = (task, pretraining, protocol, dataset_name)
                cell_aucs[key] = auc(scores, labels)
                cell_metrics[key] = threshold_metrics(scores, labels, threshold)
    return build_report(cell_aucs, cell_metrics, tasks)


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.3f}"


def render_report_text(report: EvalReport) -> str:
    """Fixed-width text rendering: task blocks x pretraining rows, protocol columns."""
    datasets = sorted({c.dataset for c in report.cells})
    protocols = sorted({c.protocol for c in report.cells})
    pretrainings = sorted({c.pretraining for c in report.cells})
    columns = [(d, p) for d in datasets for p in protocols]
    by_key = {(c.task, c.pretraining, c.protocol, c.dataset): c for c in report.cells}

    header = f"{'task':<6} {'pretraining':<14}" + "".join(
        f" {d + '/' + p:>22}" for d, p in columns
    )
    lines = [header, "-" * len(header)]
    for task in report.tasks:
        for pre in pretrainings:
            row = f"{task:<6} {pre:<14}"
            for d, p in columns:
                cell = by_key.get((task, pre, p, d))
                if cell is None:
                    row += f" {'--':>22}"
                else:
                    row += f" {'auc=' + _fmt(cell.auc):>22}"
            lines.append(row)
    lines.append("-" * len(header))
    for pre in pretrainings:
        row = f"{'mean':<6} {pre:<14}"
        for d, p in columns:
            value = report.mean_aucs.get((pre, p, d))
            row += f" {'auc=' + _fmt(value):>22}"
        lines.append(row)
    return "\n".join(lines) + "\n"
