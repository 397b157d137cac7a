"""Supervised protocols on top of a feature extractor.

Three protocols:

* ``lc`` -- extractor frozen, linear head trained on its features.
* ``ft`` -- extractor and linear head trained jointly (separate step sizes).
* ``nc`` -- extractor frozen, 32-unit MLP head trained on its features.

All protocols minimize binary cross-entropy with Adam; both parameter groups
decay their step size by ``e^(-0.02)`` per epoch, and the weights from the
epoch with the lowest validation loss are retained (ties resolve to the
earliest epoch).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch

from .data import TASKS, DataError, Dataset, subsample_labels
from .nnet import Head, ModelBundle

logger = logging.getLogger(__name__)

PROTOCOLS = ("lc", "ft", "nc")
HEAD_KIND_FOR_PROTOCOL = {"lc": "linear", "ft": "linear", "nc": "mlp32"}


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during optimization."""


@dataclass(frozen=True)
class ProtocolConfig:
    protocol: str
    task: str
    extractor_lr: float = 1e-5
    head_lr: float = 1e-4
    lr_decay: float = 0.02
    epochs: int = 10
    batch_size: int = 128
    label_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise DataError(f"unknown protocol {self.protocol!r}; expected one of {PROTOCOLS}")
        if self.task not in TASKS:
            raise DataError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.extractor_lr <= 0.0 or self.head_lr <= 0.0:
            raise DataError("learning rates must be > 0")
        if not (0.0 < self.label_fraction <= 1.0):
            raise DataError(f"label_fraction must be in (0, 1], got {self.label_fraction}")
        if self.epochs < 0 or self.batch_size < 1:
            raise DataError("epochs must be >= 0 and batch_size >= 1")

    @property
    def freezes_extractor(self) -> bool:
        return self.protocol in ("lc", "nc")

    @property
    def head_kind(self) -> str:
        return HEAD_KIND_FOR_PROTOCOL[self.protocol]


@dataclass
class TrainRun:
    """Loss history and provenance of one supervised training run.

    ``selected_epoch`` is 1-indexed; 0 means no training happened and the
    initial weights were kept.
    """

    protocol: str
    task: str
    train_losses: list[float]
    val_losses: list[float]
    selected_epoch: int
    provenance: dict = field(default_factory=dict)

    @property
    def selected_val_loss(self) -> Optional[float]:
        if self.selected_epoch == 0:
            return None
        return self.val_losses[self.selected_epoch - 1]


def lr_at(initial: float, epoch: int, rate: float = 0.02) -> float:
    """Step size at a 0-indexed epoch under per-epoch exponential decay."""
    if initial <= 0.0:
        raise DataError(f"initial learning rate must be > 0, got {initial}")
    if epoch < 0:
        raise DataError(f"epoch must be >= 0, got {epoch}")
    return initial * math.exp(-rate * epoch)


def bce(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy on logits, in overflow-safe form."""
    logits = logits.reshape(-1)
    labels = labels.reshape(-1).to(logits.dtype)
    # max(l, 0) - l*y + log(1 + exp(-|l|))
    return (logits.clamp(min=0.0) - logits * labels + torch.log1p(torch.exp(-logits.abs()))).mean()


def select_best_epoch(val_losses: Sequence[float]) -> int:
    """1-indexed epoch of the minimal validation loss; ties -> earliest."""
    if not val_losses:
        return 0
    best_idx = 0
    for i in range(1, len(val_losses)):
        if val_losses[i] < val_losses[best_idx]:
            best_idx = i
    return best_idx + 1


def _labelled_arrays(dataset: Dataset, task: str) -> tuple[np.ndarray, np.ndarray]:
    subset = dataset.labelled(task)
    if len(subset) == 0:
        raise DataError(f"no labelled records for task {task!r} in dataset {dataset.name!r}")
    return subset.pixel_stack(), subset.labels(task).astype(np.float32)


def _batched_features(extractor, images: np.ndarray, chunk: int = 256) -> torch.Tensor:
    outputs = []
    extractor.eval()
    with torch.no_grad():
        for start in range(0, len(images), chunk):
            outputs.append(extractor(torch.from_numpy(images[start : start + chunk])))
    return torch.cat(outputs) if outputs else torch.zeros((0, extractor.feature_dim))


def _snapshot(modules: list[torch.nn.Module]) -> list[dict[str, torch.Tensor]]:
    return [{k: v.detach().clone() for k, v in m.state_dict().items()} for m in modules]


def _restore(modules: list[torch.nn.Module], states: list[dict[str, torch.Tensor]]) -> None:
    for module, state in zip(modules, states):
        module.load_state_dict(state)


def train_protocol(
    bundle: ModelBundle,
    train: Dataset,
    val: Dataset,
    config: ProtocolConfig,
) -> TrainRun:
    """Run one LC/FT/NC training and keep the best-validation weights.

    The bundle's head for ``config.task`` is trained in place; under FT the
    extractor is updated too, otherwise it is frozen (weights bit-identical
    before and after). ``label_fraction < 1`` subsamples whole videos from the
    training set before batching.
    """
    head = bundle.heads.get(config.task)
    if head is None:
        raise DataError(f"bundle has no head for task {config.task!r}")
    if head.kind != config.head_kind:
        raise DataError(
            f"protocol {config.protocol!r} requires a {config.head_kind!r} head, "
            f"bundle has {head.kind!r} for task {config.task!r}"
        )

    train_subset = train
    if config.label_fraction < 1.0:
        train_subset = subsample_labels(train, config.label_fraction, config.task, config.seed)
    train_images, train_labels = _labelled_arrays(train_subset, config.task)
    val_images, val_labels = _labelled_arrays(val, config.task)

    rng = np.random.default_rng(config.seed)
    extractor = bundle.extractor
    run = TrainRun(
        protocol=config.protocol,
        task=config.task,
        train_losses=[],
        val_losses=[],
        selected_epoch=0,
        provenance={
            "pretraining": bundle.metadata.get("pretraining", "none"),
            "label_fraction": config.label_fraction,
            "seed": config.seed,
            "n_train": int(len(train_labels)),
            "n_val": int(len(val_labels)),
        },
    )
    if config.epochs == 0:
        return run

    val_labels_t = torch.from_numpy(val_labels)
    train_labels_t = torch.from_numpy(train_labels)

    if config.freezes_extractor:
        extractor.requires_grad_(False)
        extractor.eval()
        train_feats = _batched_features(extractor, train_images)
        val_feats = _batched_features(extractor, val_images)
        forward_train: Callable[[np.ndarray], torch.Tensor] = lambda idx: head(train_feats[idx])

        def val_loss_fn() -> float:
            with torch.no_grad():
                return float(bce(head(val_feats), val_labels_t))

        optimizer = torch.optim.Adam(head.parameters(), lr=config.head_lr)
        groups = [(config.head_lr, optimizer.param_groups[0])]
        tracked = [head]
    else:
        extractor.requires_grad_(True)
        extractor.train()
        train_images_t = torch.from_numpy(train_images)
        val_images_t = torch.from_numpy(val_images)
        forward_train = lambda idx: head(extractor(train_images_t[idx]))

        def val_loss_fn() -> float:
            extractor.eval()
            with torch.no_grad():
                losses = []
                counts = []
                for start in range(0, len(val_images), 256):
                    chunk = val_images_t[start : start + 256]
                    losses.append(float(bce(head(extractor(chunk)), val_labels_t[start : start + 256])))
                    counts.append(len(chunk))
                extractor.train()
                return float(np.average(losses, weights=counts))

        optimizer = torch.optim.Adam(
            [
                {"params": extractor.parameters(), "lr": config.extractor_lr},
                {"params": head.parameters(), "lr": config.head_lr},
            ]
        )
        groups = [
            (config.extractor_lr, optimizer.param_groups[0]),
            (config.head_lr, optimizer.param_groups[1]),
        ]
        tracked = [head, extractor]

    best_state = _snapshot(tracked)
    best_epoch = 0
    for epoch in range(config.epochs):
        for initial, group in groups:
            group["lr"] = lr_at(initial, epoch, config.lr_decay)
        order = rng.permutation(len(train_labels))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            logits = forward_train(idx)
            loss = bce(logits, train_labels_t[idx])
            if not bool(torch.isfinite(loss)):
                raise TrainingDivergedError(
                    f"non-finite training loss at epoch {epoch + 1} ({config.protocol}/{config.task})"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.detach()) * len(idx))
        run.train_losses.append(float(np.sum(epoch_losses) / len(order)))
        val_loss = val_loss_fn()
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch + 1}")
        run.val_losses.append(val_loss)
        if select_best_epoch(run.val_losses) == epoch + 1:
            best_epoch = epoch + 1
            best_state = _snapshot(tracked)
        logger.debug(
            "%s/%s epoch %d: train=%.5f val=%.5f",
            config.protocol,
            config.task,
            epoch + 1,
            run.train_losses[-1],
            val_loss,
        )

    _restore(tracked, best_state)
    run.selected_epoch = best_epoch
    return run


@dataclass(frozen=True)
class SweepCell:
    """One (source, fraction, task, protocol) cell of the label-efficiency grid."""

    source: str
    fraction: float
    task: str
    protocol: str
    seed_aucs: tuple[tuple[int, float], ...]

    @property
    def mean_auc(self) -> float:
        return float(np.mean([auc for _, auc in self.seed_aucs]))


def run_label_efficiency_sweep(
    sources: Mapping[str, Callable[[int, str], ModelBundle]],
    train: Dataset,
    val: Dataset,
    test: Dataset,
    fractions: Sequence[float] = (0.01, 0.1, 0.5, 1.0),
    tasks: Sequence[str] = TASKS,
    seeds: Sequence[int] = (0, 1, 2),
    protocols: Sequence[str] = ("ft", "nc"),
    config_overrides: Optional[dict] = None,
) -> list[SweepCell]:
    """Cartesian sweep over initialization sources x fractions x tasks x protocols.

    ``sources`` maps a name (e.g. "pretrained", "scratch") to a factory
    ``(seed, protocol) -> ModelBundle`` producing a fresh bundle whose heads
    match the protocol's kind. Each cell trains once per seed and records the
    test AUC of the selected checkpoint.
    """
    from .evaluation import score_task, auc as auc_of  # local import to avoid a cycle

    overrides = config_overrides or {}
    cells = []
    for source_name, factory in sources.items():
        for fraction in fractions:
            for task in tasks:
                for protocol in protocols:
                    seed_aucs = []
                    for seed in seeds:
                        bundle = factory(seed, protocol)
                        config = ProtocolConfig(
                            protocol=protocol,
                            task=task,
                            label_fraction=fraction,
                            seed=seed,
                            **overrides,
                        )
                        train_protocol(bundle, train, val, config)
                        scores, labels = score_task(bundle, test, task)
                        seed_aucs.append((seed, auc_of(scores, labels)))
                    cells.append(
                        SweepCell(
                            source=source_name,
                            fraction=fraction,
                            task=task,
                            protocol=protocol,
                            seed_aucs=tuple(seed_aucs),
                        )
                    )
                    logger.info(
                        "sweep %s f=%g %s/%s: mean AUC %.4f",
                        source_name,
                        fraction,
                        task,
                        protocol,
                        cells[-1].mean_auc,
                    )
    return cells
