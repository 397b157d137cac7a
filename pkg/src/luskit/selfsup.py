"""Joint-embedding objectives (contrastive and non-contrastive) and the
self-supervised pretraining loop.

Three losses operate on paired embedding batches ``z_a, z_b`` of shape
``(N, E)`` where row i of each branch comes from two augmented views of the
same source image:

* ``nt_xent`` -- temperature-scaled cross-entropy over cosine similarities;
  each of the 2N views treats its partner as the positive against the other
  2N-2 in-batch views, averaged over both directions.
* ``barlow_twins`` -- squared deviation of the branch cross-correlation
  matrix from identity, with the off-diagonal sum weighted.
* ``vicreg`` -- weighted sum of an invariance (MSE), variance-hinge, and
  covariance penalty; the variance and covariance terms are averaged over
  the two branches.

Standard deviations are stabilized as ``sqrt(var + 1e-12)`` and normalization
denominators carry a ``1e-6`` floor.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .augment import AugmentationPolicy, make_pair
from .data import Dataset
from .nnet import ModelBundle, save_checkpoint
from .supervised import TrainingDivergedError, lr_at

logger = logging.getLogger(__name__)

METHODS = ("simclr", "barlow_twins", "vicreg")
_EPS = 1e-6


class SSLConfigError(ValueError):
    """Invalid pretraining configuration."""


@dataclass(frozen=True)
class SSLConfig:
    method: str
    temperature: float = 0.1
    offdiag_weight: float = 0.005
    vicreg_weights: tuple[float, float, float] = (25.0, 25.0, 1.0)
    epochs: int = 15
    batch_size: int = 64
    lr: float = 1e-3
    lr_decay: float = 0.02
    seed: int = 0

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise SSLConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.temperature <= 0.0:
            raise SSLConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.offdiag_weight < 0.0 or any(w < 0.0 for w in self.vicreg_weights):
            raise SSLConfigError("loss weights must be >= 0")
        if self.batch_size < 2:
            raise SSLConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 0:
            raise SSLConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr <= 0.0:
            raise SSLConfigError(f"lr must be > 0, got {self.lr}")


def _check_pair(z_a: torch.Tensor, z_b: torch.Tensor) -> int:
    if z_a.dim() != 2 or z_a.shape != z_b.shape:
        raise ValueError(f"expected matching (N, E) embeddings, got {tuple(z_a.shape)} and {tuple(z_b.shape)}")
    n = z_a.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 embedding pairs, got {n}")
    return n


def nt_xent(z_a: torch.Tensor, z_b: torch.Tensor, temperature: float = 0.1) -> torch.Tensor:
    """Normalized temperature-scaled cross-entropy over a 2N-view batch."""
    n = _check_pair(z_a, z_b)
    z = torch.cat([z_a, z_b], dim=0)
    norms = z.norm(dim=1, keepdim=True)
    if bool((norms.squeeze(1) < 1e-12).any()):
        raise ValueError("zero-norm embedding row; cosine similarity is undefined")
    z = z / norms
    sim = (z @ z.T) / temperature
    sim = sim.masked_fill(torch.eye(2 * n, dtype=torch.bool), float("-inf"))
    targets = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)])
    log_prob = sim - torch.logsumexp(sim, dim=1, keepdim=True)
    return -log_prob[torch.arange(2 * n), targets].mean()


def barlow_twins(z_a: torch.Tensor, z_b: torch.Tensor, offdiag_weight: float = 0.005) -> torch.Tensor:
    """Redundancy-reduction loss on the branch cross-correlation matrix."""
    n = _check_pair(z_a, z_b)

    def standardize(z: torch.Tensor, branch: str) -> torch.Tensor:
        mean = z.mean(dim=0)
        std = torch.sqrt(z.var(dim=0, unbiased=False) + 1e-12)
        dead = std < 1e-9
        if bool(dead.any()):
            dims = torch.nonzero(dead).flatten().tolist()
            raise ValueError(f"degenerate constant embedding dimension(s) {dims} in branch {branch}")
        return (z - mean) / (std + _EPS)

    a = standardize(z_a, "a")
    b = standardize(z_b, "b")
    c = (a.T @ b) / n
    diag = torch.diagonal(c)
    on_diag = ((1.0 - diag) ** 2).sum()
    off_diag = (c**2).sum() - (diag**2).sum()
    return on_diag + offdiag_weight * off_diag


def vicreg(
    z_a: torch.Tensor,
    z_b: torch.Tensor,
    weights: tuple[float, float, float] = (25.0, 25.0, 1.0),
) -> torch.Tensor:
    """Variance / invariance / covariance regularized loss.

    ``weights`` orders as (invariance, variance, covariance).
    """
    n = _check_pair(z_a, z_b)
    dim = z_a.shape[1]
    w_inv, w_var, w_cov = weights

    invariance = ((z_a - z_b) ** 2).mean()

    def variance_term(z: torch.Tensor) -> torch.Tensor:
        std = torch.sqrt(z.var(dim=0, unbiased=False) + 1e-12)
        return torch.clamp(1.0 - std, min=0.0).mean()

    def covariance_term(z: torch.Tensor) -> torch.Tensor:
        centered = z - z.mean(dim=0)
        cov = (centered.T @ centered) / (n - 1)
        return (cov**2).sum() / dim - (torch.diagonal(cov) ** 2).sum() / dim

    variance = 0.5 * (variance_term(z_a) + variance_term(z_b))
    covariance = 0.5 * (covariance_term(z_a) + covariance_term(z_b))
    return w_inv * invariance + w_var * variance + w_cov * covariance


def ssl_loss(method: str, z_a: torch.Tensor, z_b: torch.Tensor, config: SSLConfig) -> torch.Tensor:
    if method == "simclr":
        return nt_xent(z_a, z_b, config.temperature)
    if method == "barlow_twins":
        return barlow_twins(z_a, z_b, config.offdiag_weight)
    if method == "vicreg":
        return vicreg(z_a, z_b, config.vicreg_weights)
    raise SSLConfigError(f"unknown method {method!r}")


@dataclass
class PretrainHistory:
    """Per-epoch loss trajectory plus emitted checkpoint paths."""

    method: str
    epoch_losses: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    checkpoint_paths: list[Path] = field(default_factory=list)

    def records(self) -> list[dict]:
        return [
            {"epoch": i + 1, "mean_loss": loss, "seconds": secs}
            for i, (loss, secs) in enumerate(zip(self.epoch_losses, self.epoch_seconds))
        ]


def pretrain(
    dataset: Dataset,
    bundle: ModelBundle,
    config: SSLConfig,
    policy: Optional[AugmentationPolicy] = None,
    checkpoint_dir: Optional[str | Path] = None,
) -> PretrainHistory:
    """Train extractor+projector on augmented positive pairs.

    Iterates shuffled batches each epoch, builds two views per image, and
    minimizes the configured objective with Adam whose step size decays by
    ``e^(-lr_decay)`` per epoch. The bundle is updated in place; one
    checkpoint per epoch is written when ``checkpoint_dir`` is given. Batches
    with fewer than two images are skipped.
    """
    if len(dataset) == 0:
        raise ValueError("cannot pretrain on an empty dataset")
    if bundle.projector is None:
        raise ValueError("pretraining requires a bundle with a projector")
    if policy is None:
        policy = AugmentationPolicy()

    images = dataset.pixel_stack()
    rng = np.random.default_rng(config.seed)
    params = list(bundle.extractor.parameters()) + list(bundle.projector.parameters())
    optimizer = torch.optim.Adam(params, lr=config.lr)
    history = PretrainHistory(method=config.method)
    bundle.metadata.update(
        {"pretraining": config.method, "pretrain_seed": config.seed, "pretrain_epochs": 0}
    )
    bundle.extractor.train()
    bundle.projector.train()

    for epoch in range(config.epochs):
        epoch_start = time.perf_counter()
        for group in optimizer.param_groups:
            group["lr"] = lr_at(config.lr, epoch, config.lr_decay)
        order = rng.permutation(len(images))
        batch_losses = []
        for batch_idx, start in enumerate(range(0, len(order), config.batch_size)):
            batch = order[start : start + config.batch_size]
            if len(batch) < 2:
                continue
            views_a = np.empty((len(batch), *images.shape[1:]), dtype=np.float32)
            views_b = np.empty_like(views_a)
            for i, img_idx in enumerate(batch):
                views_a[i], views_b[i] = make_pair(policy, images[img_idx], rng)
            z_a = bundle.projector(bundle.extractor(torch.from_numpy(views_a)))
            z_b = bundle.projector(bundle.extractor(torch.from_numpy(views_b)))
            loss = ssl_loss(config.method, z_a, z_b, config)
            if not bool(torch.isfinite(loss)):
                raise TrainingDivergedError(
                    f"non-finite {config.method} loss at epoch {epoch + 1}, batch {batch_idx}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            batch_losses.append(float(loss.detach()))
        mean_loss = float(np.mean(batch_losses)) if batch_losses else float("nan")
        seconds = time.perf_counter() - epoch_start
        history.epoch_losses.append(mean_loss)
        history.epoch_seconds.append(seconds)
        bundle.metadata["pretrain_epochs"] = epoch + 1
        logger.info(
            "pretrain %s epoch %d/%d: mean_loss=%.6f (%.2fs)",
            config.method,
            epoch + 1,
            config.epochs,
            mean_loss,
            seconds,
        )
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir) / f"epoch_{epoch + 1:03d}.ckpt"
            history.checkpoint_paths.append(save_checkpoint(bundle, path))
    return history
