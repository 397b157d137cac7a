"""Hierarchical decision-tree inference over the three tasks, in two
execution modes, plus the latency/FLOP benchmark.

The tree roots at the view task: images scored below the routing threshold
(parenchymal) descend to the A-line/B-line head, the rest (pleural) to the
effusion head. ``serial_cnns`` mode runs one full CNN per visited node;
``shared_backbone`` mode runs the feature extractor once and evaluates both
visited heads on the cached features.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np
import torch

from . import nnet
from .data import Dataset
from .nnet import FlopCount, ModelBundle, count_flops

MODES = ("serial_cnns", "shared_backbone")


class InferenceError(ValueError):
    """Pipeline assembled from incompatible or missing models."""


@dataclass(frozen=True)
class TreeSpec:
    """Routing layout of the interpretation tree."""

    root_task: str = "view"
    negative_child: str = "ab"
    positive_child: str = "pe"
    threshold: float = 0.5

    def __post_init__(self) -> None:
        if not (0.0 < self.threshold < 1.0):
            raise InferenceError(f"routing threshold must be in (0, 1), got {self.threshold}")
        if self.negative_child == self.positive_child:
            raise InferenceError("leaf tasks must differ")


@dataclass(frozen=True)
class TreeOutcome:
    view_probability: float
    routed_task: str
    leaf_probability: float
    mode: str
    stage_seconds: tuple[float, float]


@dataclass(frozen=True)
class BenchmarkResult:
    mode: str
    n_predictions: int
    mean_seconds: float
    sd_seconds: float
    flops_per_prediction: int

    def to_record(self) -> dict:
        return {
            "mode": self.mode,
            "n": self.n_predictions,
            "mean_s": self.mean_seconds,
            "sd_s": self.sd_seconds,
            "flops_per_prediction": self.flops_per_prediction,
        }


class TreePipeline:
    """Executable decision tree in one of the two modes.

    ``stats["extractor_calls"]`` counts feature-extractor invocations, which
    lets tests verify the exactly-once contract of shared mode.
    """

    def __init__(self, mode: str, spec: TreeSpec, bundles: Mapping[str, ModelBundle]):
        if mode not in MODES:
            raise InferenceError(f"unknown mode {mode!r}; expected one of {MODES}")
        self.mode = mode
        self.spec = spec
        self.bundles = dict(bundles)
        self.stats: dict[str, int] = {"extractor_calls": 0}
        for task in (spec.root_task, spec.negative_child, spec.positive_child):
            bundle = self.bundles.get(task)
            if bundle is None:
                raise InferenceError(f"missing model for task {task!r}")
            if bundle.heads.get(task) is None:
                raise InferenceError(f"bundle for task {task!r} lacks a matching head")

    @classmethod
    def shared(cls, bundle: ModelBundle, spec: TreeSpec = TreeSpec()) -> "TreePipeline":
        """One frozen extractor feeding the three task heads."""
        tasks = (spec.root_task, spec.negative_child, spec.positive_child)
        return cls("shared_backbone", spec, {task: bundle for task in tasks})

    @classmethod
    def serial(cls, bundles: Mapping[str, ModelBundle], spec: TreeSpec = TreeSpec()) -> "TreePipeline":
        """Independent end-to-end CNNs, one per tree node."""
        return cls("serial_cnns", spec, bundles)

    def _features(self, bundle: ModelBundle, image: np.ndarray) -> torch.Tensor:
        self.stats["extractor_calls"] += 1
        return nnet.forward_features(bundle.extractor, image)

    def infer(self, image: np.ndarray) -> TreeOutcome:
        """Route one frame through the tree; exactly one leaf head runs."""
        spec = self.spec
        t0 = time.perf_counter()
        root_bundle = self.bundles[spec.root_task]
        root_features = self._features(root_bundle, image)
        view_logit = nnet.forward_head(root_bundle.heads[spec.root_task], root_features)
        view_probability = float(torch.sigmoid(view_logit)[0])
        t1 = time.perf_counter()
        routed = spec.negative_child if view_probability < spec.threshold else spec.positive_child
        leaf_bundle = self.bundles[routed]
        if self.mode == "shared_backbone":
            leaf_features = root_features
        else:
            leaf_features = self._features(leaf_bundle, image)
        leaf_logit = nnet.forward_head(leaf_bundle.heads[routed], leaf_features)
        leaf_probability = float(torch.sigmoid(leaf_logit)[0])
        t2 = time.perf_counter()
        return TreeOutcome(
            view_probability=view_probability,
            routed_task=routed,
            leaf_probability=leaf_probability,
            mode=self.mode,
            stage_seconds=(t1 - t0, t2 - t1),
        )

    def flops_per_prediction(self) -> FlopCount:
        """Analytic FLOPs of one tree traversal (leaf = costlier branch)."""
        spec = self.spec
        root_bundle = self.bundles[spec.root_task]
        root = count_flops(root_bundle.extractor) + count_flops(root_bundle.heads[spec.root_task])
        leaves = []
        for task in (spec.negative_child, spec.positive_child):
            bundle = self.bundles[task]
            leaf = count_flops(bundle.heads[task])
            if self.mode == "serial_cnns":
                leaf = count_flops(bundle.extractor) + leaf
            leaves.append(leaf)
        worst_leaf = max(leaves, key=lambda f: f.total)
        return root + worst_leaf


def infer_tree(image: np.ndarray, pipeline: TreePipeline) -> TreeOutcome:
    return pipeline.infer(image)


def infer_batch(dataset: Dataset, pipeline: TreePipeline) -> list[TreeOutcome]:
    """Tree outcomes for every record, in dataset order."""
    return [pipeline.infer(rec.pixels) for rec in dataset]


def scores_by_task(
    dataset: Dataset, outcomes: list[TreeOutcome], spec: TreeSpec = TreeSpec()
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Collect (scores, labels) per task from tree outcomes.

    The root task scores every labelled record; each leaf task scores the
    records routed to it that carry its label.
    """
    if len(dataset) != len(outcomes):
        raise InferenceError("outcomes must align with dataset records")
    collected: dict[str, tuple[list[float], list[int]]] = {
        spec.root_task: ([], []),
        spec.negative_child: ([], []),
        spec.positive_child: ([], []),
    }
    for rec, outcome in zip(dataset, outcomes):
        root_label = rec.label_for(spec.root_task)
        if root_label is not None:
            collected[spec.root_task][0].append(outcome.view_probability)
            collected[spec.root_task][1].append(root_label)
        leaf_label = rec.label_for(outcome.routed_task)
        if leaf_label is not None:
            collected[outcome.routed_task][0].append(outcome.leaf_probability)
            collected[outcome.routed_task][1].append(leaf_label)
    return {
        task: (np.asarray(scores, dtype=np.float64), np.asarray(labels, dtype=np.int64))
        for task, (scores, labels) in collected.items()
    }


def benchmark(
    pipeline: TreePipeline,
    image_source: Dataset | np.ndarray | Callable[[int], np.ndarray],
    n: int = 1000,
    warmup: int = 20,
) -> BenchmarkResult:
    """Serial single-threaded latency over n predictions, plus FLOP totals.

    ``warmup`` untimed predictions run first. The standard deviation is the
    population SD of per-prediction wall-clock times (0 for n=1).
    """
    if n < 1:
        raise InferenceError(f"benchmark needs n >= 1, got {n}")
    if warmup < 0:
        raise InferenceError(f"warmup must be >= 0, got {warmup}")

    if isinstance(image_source, Dataset):
        if len(image_source) == 0:
            raise InferenceError("image source dataset is empty")
        images = image_source.pixel_stack()
        source: Callable[[int], np.ndarray] = lambda i: images[i % len(images)]
    elif isinstance(image_source, np.ndarray):
        stack = image_source[None] if image_source.ndim == 2 else image_source
        source = lambda i: stack[i % len(stack)]
    else:
        source = image_source

    for i in range(warmup):
        pipeline.infer(source(i))
    timings = np.empty(n, dtype=np.float64)
    for i in range(n):
        image = source(i)
        t0 = time.perf_counter()
        pipeline.infer(image)
        timings[i] = time.perf_counter() - t0
    return BenchmarkResult(
        mode=pipeline.mode,
        n_predictions=n,
        mean_seconds=float(timings.mean()),
        sd_seconds=float(timings.std(ddof=0)),
        flops_per_prediction=pipeline.flops_per_prediction().total,
    )
