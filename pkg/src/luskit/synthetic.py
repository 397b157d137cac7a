"""Procedural generation of ultrasound-like frames with exact labels.

Parenchymal frames carry a bright horizontal pleural band plus either evenly
spaced fainter horizontal repeats (A-lines) or one or more bright vertical
bands descending from the pleural band (B-lines). Pleural-view frames carry a
bright curved diaphragm arc plus either a dark anechoic region above it
(effusion) or homogeneous speckle (no effusion).

Per-video nuisance parameters (gain, background level, depth attenuation,
band geometry) vary widely so that class identity is carried by structure
rather than raw intensity statistics; every frame is overlaid with
multiplicative speckle noise.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .data import IMAGE_SIZE, DataError, Dataset, ImageRecord

_ROWS = np.arange(IMAGE_SIZE, dtype=np.float32)[:, None]
_COLS = np.arange(IMAGE_SIZE, dtype=np.float32)[None, :]


@dataclass(frozen=True)
class SyntheticConfig:
    """Shape and difficulty knobs for the procedural dataset."""

    n_patients: int
    videos_per_patient: int = 2
    frames_per_video: int = 10
    pleural_prior: float = 0.5
    b_line_prior: float = 0.5
    effusion_prior: float = 0.5
    unlabelled_fraction: float = 0.0
    noise_level: float = 0.35
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("n_patients", "videos_per_patient", "frames_per_video"):
            if getattr(self, name) < 0:
                raise DataError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("pleural_prior", "b_line_prior", "effusion_prior", "unlabelled_fraction"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise DataError(f"{name} must be in [0, 1], got {value}")
        if self.noise_level < 0.0:
            raise DataError(f"noise_level must be >= 0, got {self.noise_level}")


@dataclass(frozen=True)
class VideoParams:
    """Rendering parameters shared (with small jitter) by a video's frames.

    The class flags are the label oracle: emitted labels must always agree
    with ``pleural``, ``b_lines`` and ``effusion``.
    """

    pleural: bool
    b_lines: Optional[bool]
    effusion: Optional[bool]
    gain: float
    base_level: float
    attenuation: float
    # parenchymal geometry
    band_row: float = 0.0
    band_width: float = 0.0
    band_amp: float = 0.0
    n_alines: int = 0
    aline_decay: float = 0.0
    bline_xs: tuple[float, ...] = ()
    bline_width: float = 0.0
    bline_amp: float = 0.0
    # pleural-view geometry
    arc_row: float = 0.0
    arc_x0: float = 0.0
    arc_curve: float = 0.0
    arc_width: float = 0.0
    arc_amp: float = 0.0
    effusion_depth: float = 0.0
    effusion_darkness: float = 0.0


def labels_from_params(params: VideoParams) -> tuple[int, Optional[int], Optional[int]]:
    """Map rendering parameters to (view_label, ab_label, pe_label)."""
    if params.pleural:
        return 1, None, int(params.effusion)
    return 0, int(params.b_lines), None


def _sample_video_params(rng: np.random.Generator, cfg: SyntheticConfig) -> VideoParams:
    pleural = bool(rng.random() < cfg.pleural_prior)
    gain = rng.uniform(0.45, 1.45)
    base_level = rng.uniform(0.18, 0.40)
    attenuation = rng.uniform(0.10, 0.45)
    if not pleural:
        b_lines = bool(rng.random() < cfg.b_line_prior)
        band_row = rng.uniform(20.0, 44.0)
        params = VideoParams(
            pleural=False,
            b_lines=b_lines,
            effusion=None,
            gain=gain,
            base_level=base_level,
            attenuation=attenuation,
            band_row=band_row,
            band_width=rng.uniform(2.0, 4.5),
            band_amp=rng.uniform(0.30, 0.60),
            n_alines=int(rng.integers(2, 4)),
            aline_decay=rng.uniform(0.35, 0.60),
            bline_xs=(),
            bline_width=rng.uniform(2.5, 5.0),
            bline_amp=rng.uniform(0.22, 0.45),
        )
        if b_lines:
            n_blines = int(rng.integers(1, 4))
            xs = tuple(float(rng.uniform(12.0, IMAGE_SIZE - 12.0)) for _ in range(n_blines))
            params = replace(params, bline_xs=xs, n_alines=0)
        return params
    effusion = bool(rng.random() < cfg.effusion_prior)
    return VideoParams(
        pleural=True,
        b_lines=None,
        effusion=effusion,
        gain=gain,
        base_level=base_level,
        attenuation=attenuation,
        arc_row=rng.uniform(66.0, 98.0),
        arc_x0=rng.uniform(36.0, 92.0),
        arc_curve=rng.uniform(0.003, 0.008),
        arc_width=rng.uniform(2.5, 5.0),
        arc_amp=rng.uniform(0.35, 0.65),
        effusion_depth=rng.uniform(16.0, 34.0),
        effusion_darkness=rng.uniform(0.08, 0.28),
    )


def _jitter(params: VideoParams, rng: np.random.Generator) -> VideoParams:
    """Small per-frame perturbation of the continuous parameters."""

    def wobble(value: float, scale: float) -> float:
        return value * (1.0 + scale * rng.standard_normal())

    updates = dict(
        gain=max(0.05, wobble(params.gain, 0.03)),
        base_level=max(0.02, wobble(params.base_level, 0.03)),
        band_row=params.band_row + rng.normal(0.0, 0.8),
        band_amp=max(0.0, wobble(params.band_amp, 0.05)),
        arc_row=params.arc_row + rng.normal(0.0, 0.8),
        arc_amp=max(0.0, wobble(params.arc_amp, 0.05)),
        bline_xs=tuple(x + rng.normal(0.0, 0.8) for x in params.bline_xs),
    )
    return replace(params, **updates)


def render_frame(params: VideoParams, rng: np.random.Generator, noise_level: float) -> np.ndarray:
    """Render one 128x128 frame from (jittered) video parameters."""
    depth_profile = 1.0 - params.attenuation * (_ROWS / IMAGE_SIZE)
    canvas = params.base_level * depth_profile * np.ones((IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)

    if not params.pleural:
        band = params.band_amp * np.exp(-((_ROWS - params.band_row) ** 2) / (2.0 * params.band_width**2))
        canvas = canvas + band
        if params.b_lines:
            below = 1.0 / (1.0 + np.exp(-(_ROWS - params.band_row) / 2.0))
            for x in params.bline_xs:
                line = params.bline_amp * np.exp(-((_COLS - x) ** 2) / (2.0 * params.bline_width**2))
                canvas = canvas + line * below
        else:
            for k in range(1, params.n_alines + 1):
                depth = params.band_row * (k + 1)
                repeat = (
                    params.band_amp
                    * params.aline_decay**k
                    * np.exp(-((_ROWS - depth) ** 2) / (2.0 * params.band_width**2))
                )
                canvas = canvas + repeat
    else:
        arc_center = params.arc_row + params.arc_curve * (_COLS - params.arc_x0) ** 2
        if params.effusion:
            top_edge = arc_center - params.effusion_depth
            inside = 1.0 / (1.0 + np.exp(-(_ROWS - top_edge) / 2.0))
            inside = inside * (1.0 / (1.0 + np.exp(-((arc_center - params.arc_width) - _ROWS) / 2.0)))
            canvas = canvas * (1.0 - (1.0 - params.effusion_darkness) * inside)
        arc = params.arc_amp * np.exp(-((_ROWS - arc_center) ** 2) / (2.0 * params.arc_width**2))
        canvas = canvas + arc

    canvas = canvas * params.gain
    speckle = 1.0 + noise_level * rng.standard_normal((IMAGE_SIZE, IMAGE_SIZE))
    return np.clip(canvas * speckle, 0.0, 1.0).astype(np.float32)


def synthesize(cfg: SyntheticConfig) -> tuple[Dataset, dict[str, VideoParams]]:
    """Generate a dataset plus the per-video parameters used to render it.

    The returned parameter map is the label oracle: for every video, the
    emitted record labels equal ``labels_from_params`` of its entry (or are
    all absent for unlabelled patients).
    """
    rng = np.random.default_rng(cfg.seed)
    n_unlabelled = int(round(cfg.unlabelled_fraction * cfg.n_patients))
    unlabelled = set(rng.permutation(cfg.n_patients)[:n_unlabelled].tolist())

    records: list[ImageRecord] = []
    param_map: dict[str, VideoParams] = {}
    for p in range(cfg.n_patients):
        patient_id = f"p{p:04d}"
        for v in range(cfg.videos_per_patient):
            video_id = f"{patient_id}v{v:02d}"
            params = _sample_video_params(rng, cfg)
            param_map[video_id] = params
            view_label, ab_label, pe_label = labels_from_params(params)
            if p in unlabelled:
                view_label, ab_label, pe_label = None, None, None
            for f in range(cfg.frames_per_video):
                frame = render_frame(_jitter(params, rng), rng, cfg.noise_level)
                records.append(
                    ImageRecord(
                        image_id=f"{video_id}f{f:03d}",
                        patient_id=patient_id,
                        video_id=video_id,
                        frame_index=f,
                        pixels=frame,
                        view_label=view_label,
                        ab_label=ab_label,
                        pe_label=pe_label,
                    )
                )
    return Dataset(records, name=f"synthetic-{cfg.seed}"), param_map


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Generate a procedurally labelled ultrasound-like dataset."""
    return synthesize(cfg)[0]
