"""Model components: convolutional feature extractor, projector, task heads,
checkpoint I/O, and FLOP accounting.

The default extractor is four blocks of 3x3 stride-2 convolution (widths
16/32/64/128), each followed by group normalization and ReLU, then global
average pooling. Group normalization is used (rather than batch statistics)
so evaluation is batch-independent and frozen extractors stay bit-identical
through head-only training.

FLOP accounting rule (documented and stable): a convolution counts
``2 * k^2 * C_in * C_out * H_out * W_out``; a dense layer counts
``2 * in * out`` plus ``out`` for the bias; normalization, nonlinearities and
pooling count one op per element.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import zipfile
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import torch
from torch import nn

from .data import IMAGE_SIZE

HEAD_KINDS = ("linear", "mlp32")
MLP_HIDDEN = 32
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    """Invalid architecture, shape mismatch, or incompatible components."""


class CheckpointError(RuntimeError):
    """Corrupt, truncated, or incompatible checkpoint file."""


@dataclass(frozen=True)
class ArchitectureConfig:
    """Configuration of the extractor/projector stack.

    ``feature_dim`` equals the last channel width (global average pooling
    collapses the spatial grid).
    """

    channels: tuple[int, ...] = (16, 32, 64, 128)
    kernel_size: int = 3
    stride: int = 2
    norm_groups: int = 8
    projector_hidden: int = 128
    embedding_dim: int = 64
    input_size: int = IMAGE_SIZE

    def __post_init__(self) -> None:
        if not self.channels:
            raise ModelError("channels must be nonempty")
        for c in self.channels:
            if c <= 0 or c % self.norm_groups != 0:
                raise ModelError(
                    f"channel width {c} must be a positive multiple of norm_groups={self.norm_groups}"
                )
        if self.kernel_size < 1 or self.stride < 1:
            raise ModelError("kernel_size and stride must be >= 1")
        if self.projector_hidden < 1 or self.embedding_dim < 1:
            raise ModelError("projector dimensions must be >= 1")

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    def spatial_sizes(self) -> tuple[int, ...]:
        """Spatial side length after each block (stride-2, padding k//2)."""
        sizes = []
        size = self.input_size
        for _ in self.channels:
            size = (size + 2 * (self.kernel_size // 2) - self.kernel_size) // self.stride + 1
            sizes.append(size)
        return tuple(sizes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(d["channels"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        kwargs = dict(d)
        kwargs["channels"] = tuple(kwargs["channels"])
        return cls(**kwargs)


class FeatureExtractor(nn.Module):
    """Stacked conv blocks plus global average pooling -> feature vector."""

    def __init__(self, config: ArchitectureConfig):
        super().__init__()
        self.config = config
        blocks = []
        c_in = 1
        for c_out in config.channels:
            blocks.append(
                nn.Conv2d(
                    c_in,
                    c_out,
                    config.kernel_size,
                    stride=config.stride,
                    padding=config.kernel_size // 2,
                    bias=False,
                )
            )
            blocks.append(nn.GroupNorm(config.norm_groups, c_out))
            blocks.append(nn.ReLU())
            c_in = c_out
        self.blocks = nn.Sequential(*blocks)

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(1)
        if x.dim() != 4 or x.shape[1] != 1 or x.shape[2:] != (self.config.input_size,) * 2:
            raise ModelError(
                f"expected batch of {self.config.input_size}x{self.config.input_size} "
                f"grayscale images, got shape {tuple(x.shape)}"
            )
        return self.blocks(x).mean(dim=(2, 3))


class Projector(nn.Module):
    """Two-layer MLP mapping features to the embedding space."""

    def __init__(self, config: ArchitectureConfig):
        super().__init__()
        self.config = config
        self.net = nn.Sequential(
            nn.Linear(config.feature_dim, config.projector_hidden),
            nn.ReLU(),
            nn.Linear(config.projector_hidden, config.embedding_dim),
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.net(features)


class Head(nn.Module):
    """Task classifier on extractor features; outputs logits.

    ``linear`` maps D -> 1; ``mlp32`` maps D -> 32 (ReLU) -> 1.
    """

    def __init__(self, kind: str, feature_dim: int):
        super().__init__()
        if kind not in HEAD_KINDS:
            raise ModelError(f"unknown head kind {kind!r}; expected one of {HEAD_KINDS}")
        self.kind = kind
        self.feature_dim = feature_dim
        if kind == "linear":
            self.net = nn.Sequential(nn.Linear(feature_dim, 1))
        else:
            self.net = nn.Sequential(
                nn.Linear(feature_dim, MLP_HIDDEN), nn.ReLU(), nn.Linear(MLP_HIDDEN, 1)
            )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.dim() != 2 or features.shape[1] != self.feature_dim:
            raise ModelError(
                f"head expects (B, {self.feature_dim}) features, got {tuple(features.shape)}"
            )
        return self.net(features).squeeze(-1)


@dataclass
class ModelBundle:
    """Feature extractor plus optional projector and per-task heads."""

    extractor: FeatureExtractor
    projector: Optional[Projector]
    heads: dict[str, Head]
    arch: ArchitectureConfig
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for task, head in self.heads.items():
            if head.feature_dim != self.arch.feature_dim:
                raise ModelError(
                    f"head {task!r} expects {head.feature_dim} features but extractor "
                    f"produces {self.arch.feature_dim}"
                )


def _init_module(module: nn.Module, generator: torch.Generator) -> None:
    # Fan-in-scaled normal init: w ~ N(0, sqrt(2 / fan_in)); biases zero;
    # normalization affine starts at identity.
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            with torch.no_grad():
                m.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.Linear):
            fan_in = m.in_features
            with torch.no_grad():
                m.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=generator)
                m.bias.zero_()
        elif isinstance(m, nn.GroupNorm):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


def init_bundle(
    arch: ArchitectureConfig,
    seed: int,
    head_kinds: Optional[Mapping[str, str]] = None,
    with_projector: bool = True,
    metadata: Optional[dict] = None,
) -> ModelBundle:
    """Build a bundle with seed-deterministic weights.

    Heads default to one linear classifier per task (view/ab/pe). Modules are
    initialized in a fixed order (extractor, projector, heads sorted by task),
    so identical seeds give bit-identical weights.
    """
    if head_kinds is None:
        head_kinds = {"view": "linear", "ab": "linear", "pe": "linear"}
    generator = torch.Generator().manual_seed(seed)
    extractor = FeatureExtractor(arch)
    _init_module(extractor, generator)
    projector = None
    if with_projector:
        projector = Projector(arch)
        _init_module(projector, generator)
    heads = {}
    for task in sorted(head_kinds):
        head = Head(head_kinds[task], arch.feature_dim)
        _init_module(head, generator)
        heads[task] = head
    meta = {"init_seed": seed, "pretraining": "none"}
    if metadata:
        meta.update(metadata)
    return ModelBundle(extractor=extractor, projector=projector, heads=heads, arch=arch, metadata=meta)


def new_head(kind: str, arch: ArchitectureConfig, seed: int) -> Head:
    """A freshly initialized head (used when a protocol needs its own kind)."""
    generator = torch.Generator().manual_seed(seed)
    head = Head(kind, arch.feature_dim)
    _init_module(head, generator)
    return head


def as_batch_tensor(images: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Convert (B, 128, 128) or (128, 128) image arrays to a float32 tensor."""
    if isinstance(images, np.ndarray):
        tensor = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
    else:
        tensor = images.float()
    if tensor.dim() == 2:
        tensor = tensor.unsqueeze(0)
    return tensor


def forward_features(extractor: FeatureExtractor, batch: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Evaluation-mode feature pass; deterministic and gradient-free."""
    was_training = extractor.training
    extractor.eval()
    try:
        with torch.no_grad():
            return extractor(as_batch_tensor(batch))
    finally:
        extractor.train(was_training)


def forward_head(head: Head, features: torch.Tensor) -> torch.Tensor:
    """Logit pass through a task head (sigmoid is applied by consumers)."""
    with torch.no_grad():
        return head(features)


@dataclass(frozen=True)
class FlopCount:
    """Total floating point operations with a per-layer breakdown."""

    breakdown: tuple[tuple[str, int], ...]
    total: int

    def __post_init__(self) -> None:
        if self.total != sum(n for _, n in self.breakdown):
            raise ModelError("FlopCount total must equal the sum of its breakdown")

    @classmethod
    def from_breakdown(cls, breakdown: list[tuple[str, int]]) -> "FlopCount":
        return cls(tuple(breakdown), sum(n for _, n in breakdown))

    def __add__(self, other: "FlopCount") -> "FlopCount":
        return FlopCount(self.breakdown + other.breakdown, self.total + other.total)


def _dense_flops(name: str, n_in: int, n_out: int) -> list[tuple[str, int]]:
    return [(f"{name}.matmul", 2 * n_in * n_out), (f"{name}.bias", n_out)]


def count_flops(component: FeatureExtractor | Projector | Head) -> FlopCount:
    """Per-prediction FLOPs of a component under the documented counting rule."""
    if isinstance(component, FeatureExtractor):
        cfg = component.config
        breakdown: list[tuple[str, int]] = []
        c_in = 1
        sizes = cfg.spatial_sizes()
        for i, (c_out, size) in enumerate(zip(cfg.channels, sizes), start=1):
            elems = c_out * size * size
            breakdown.append(
                (f"block{i}.conv", 2 * cfg.kernel_size**2 * c_in * c_out * size * size)
            )
            breakdown.append((f"block{i}.norm", elems))
            breakdown.append((f"block{i}.relu", elems))
            c_in = c_out
        breakdown.append(("pool", cfg.channels[-1] * sizes[-1] * sizes[-1]))
        return FlopCount.from_breakdown(breakdown)
    if isinstance(component, Projector):
        cfg = component.config
        breakdown = _dense_flops("fc1", cfg.feature_dim, cfg.projector_hidden)
        breakdown.append(("relu", cfg.projector_hidden))
        breakdown += _dense_flops("fc2", cfg.projector_hidden, cfg.embedding_dim)
        return FlopCount.from_breakdown(breakdown)
    if isinstance(component, Head):
        if component.kind == "linear":
            return FlopCount.from_breakdown(_dense_flops("fc", component.feature_dim, 1))
        breakdown = _dense_flops("fc1", component.feature_dim, MLP_HIDDEN)
        breakdown.append(("relu", MLP_HIDDEN))
        breakdown += _dense_flops("fc2", MLP_HIDDEN, 1)
        return FlopCount.from_breakdown(breakdown)
    raise TypeError(f"cannot count FLOPs for {type(component).__name__}")


def _state_arrays(bundle: ModelBundle) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in bundle.extractor.state_dict().items():
        arrays[f"extractor.{name}"] = tensor.detach().cpu().numpy()
    if bundle.projector is not None:
        for name, tensor in bundle.projector.state_dict().items():
            arrays[f"projector.{name}"] = tensor.detach().cpu().numpy()
    for task in sorted(bundle.heads):
        for name, tensor in bundle.heads[task].state_dict().items():
            arrays[f"head.{task}.{name}"] = tensor.detach().cpu().numpy()
    return arrays


def _payload_digest(meta_bytes: bytes, arrays: dict[str, bytes]) -> str:
    digest = hashlib.sha256()
    digest.update(meta_bytes)
    for name in sorted(arrays):
        digest.update(name.encode("utf-8"))
        digest.update(arrays[name])
    return digest.hexdigest()


def save_checkpoint(bundle: ModelBundle, path: str | Path) -> Path:
    """Write a bundle as named weight arrays + metadata + integrity checksum.

    The file is a zip archive holding ``meta.json``, one ``weights/<name>.npy``
    entry per tensor, and ``checksum.json`` with a SHA-256 over metadata and
    weight bytes.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "arch": bundle.arch.to_dict(),
        "heads": {task: head.kind for task, head in bundle.heads.items()},
        "has_projector": bundle.projector is not None,
        "metadata": bundle.metadata,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    encoded: dict[str, bytes] = {}
    for name, array in _state_arrays(bundle).items():
        buf = io.BytesIO()
        np.save(buf, array, allow_pickle=False)
        encoded[name] = buf.getvalue()
    checksum = _payload_digest(meta_bytes, encoded)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("meta.json", meta_bytes)
        for name in sorted(encoded):
            zf.writestr(f"weights/{name}.npy", encoded[name])
        zf.writestr("checksum.json", json.dumps({"sha256": checksum}))
    return path


def load_checkpoint(path: str | Path, arch: Optional[ArchitectureConfig] = None) -> ModelBundle:
    """Load a checkpoint, verifying integrity and (optionally) architecture.

    If ``arch`` is given it must match the stored configuration exactly,
    otherwise a :class:`CheckpointError` is raised.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            meta_bytes = zf.read("meta.json")
            stored = json.loads(zf.read("checksum.json"))["sha256"]
            encoded: dict[str, bytes] = {}
            for info in zf.infolist():
                if info.filename.startswith("weights/") and info.filename.endswith(".npy"):
                    name = info.filename[len("weights/") : -len(".npy")]
                    encoded[name] = zf.read(info)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if _payload_digest(meta_bytes, encoded) != stored:
        raise CheckpointError(f"checksum mismatch in {path}: file is corrupt or truncated")
    meta = json.loads(meta_bytes)
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {meta.get('format_version')} in {path}"
        )
    stored_arch = ArchitectureConfig.from_dict(meta["arch"])
    if arch is not None and arch != stored_arch:
        raise CheckpointError(
            f"architecture mismatch: checkpoint has {stored_arch}, caller expects {arch}"
        )
    bundle = ModelBundle(
        extractor=FeatureExtractor(stored_arch),
        projector=Projector(stored_arch) if meta["has_projector"] else None,
        heads={task: Head(kind, stored_arch.feature_dim) for task, kind in meta["heads"].items()},
        arch=stored_arch,
        metadata=dict(meta["metadata"]),
    )
    states: dict[str, dict[str, torch.Tensor]] = {}
    for name, raw in encoded.items():
        array = np.load(io.BytesIO(raw), allow_pickle=False)
        prefix, _, param = name.partition(".")
        if prefix == "head":
            task, _, param = param.partition(".")
            prefix = f"head.{task}"
        states.setdefault(prefix, {})[param] = torch.from_numpy(array.copy())
    try:
        bundle.extractor.load_state_dict(states.get("extractor", {}))
        if bundle.projector is not None:
            bundle.projector.load_state_dict(states.get("projector", {}))
        for task, head in bundle.heads.items():
            head.load_state_dict(states.get(f"head.{task}", {}))
    except RuntimeError as exc:
        raise CheckpointError(f"weight shape mismatch in {path}: {exc}") from exc
    return bundle
