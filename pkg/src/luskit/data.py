"""Dataset modelling: image records, manifest I/O, patient-wise splits,
and label-fraction subsampling.

All images are 128x128 grayscale arrays with values in [0, 1]. Three binary
tasks are supported: ``view`` (parenchymal=0 / pleural=1), ``ab`` (A-lines=0 /
B-lines=1, parenchymal views only) and ``pe`` (no effusion=0 / effusion=1,
pleural views only).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from PIL import Image

IMAGE_SIZE = 128
TASKS = ("view", "ab", "pe")

MANIFEST_COLUMNS = (
    "image_path",
    "patient_id",
    "video_id",
    "frame_index",
    "view_label",
    "ab_label",
    "pe_label",
)


class DataError(ValueError):
    """Invalid record, dataset, or operation argument."""


class ManifestError(DataError):
    """Manifest file missing or malformed."""


@dataclass(frozen=True)
class ImageRecord:
    """One grayscale frame with patient/video identity and optional labels.

    ``ab_label`` may only be present on parenchymal frames (view_label=0) and
    ``pe_label`` only on pleural frames (view_label=1).
    """

    image_id: str
    patient_id: str
    video_id: str
    frame_index: int
    pixels: np.ndarray = field(repr=False, compare=False)
    view_label: Optional[int] = None
    ab_label: Optional[int] = None
    pe_label: Optional[int] = None

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.shape != (IMAGE_SIZE, IMAGE_SIZE):
            raise DataError(
                f"record {self.image_id!r}: pixels must be "
                f"{IMAGE_SIZE}x{IMAGE_SIZE}, got {px.shape}"
            )
        if not np.isfinite(px).all() or px.min() < 0.0 or px.max() > 1.0:
            raise DataError(f"record {self.image_id!r}: pixel values outside [0, 1]")
        px = px.copy()
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)
        if self.frame_index < 0:
            raise DataError(f"record {self.image_id!r}: negative frame_index")
        for name in ("view_label", "ab_label", "pe_label"):
            value = getattr(self, name)
            if value is not None and value not in (0, 1):
                raise DataError(f"record {self.image_id!r}: {name} must be 0 or 1")
        if self.ab_label is not None and self.view_label != 0:
            raise DataError(
                f"record {self.image_id!r}: ab_label requires a parenchymal "
                f"view_label (0), got view_label={self.view_label}"
            )
        if self.pe_label is not None and self.view_label != 1:
            raise DataError(
                f"record {self.image_id!r}: pe_label requires a pleural "
                f"view_label (1), got view_label={self.view_label}"
            )

    def label_for(self, task: str) -> Optional[int]:
        if task not in TASKS:
            raise DataError(f"unknown task {task!r}; expected one of {TASKS}")
        return getattr(self, f"{task}_label")


class Dataset:
    """Immutable ordered collection of ImageRecords.

    Enforces uniqueness of (patient_id, video_id, frame_index) and that every
    video belongs to exactly one patient. Instances are safe to share across
    threads.
    """

    def __init__(self, records: Sequence[ImageRecord], name: str = "dataset"):
        records = tuple(records)
        seen: set[tuple[str, str, int]] = set()
        video_owner: dict[str, str] = {}
        for rec in records:
            key = (rec.patient_id, rec.video_id, rec.frame_index)
            if key in seen:
                raise DataError(f"duplicate record key {key}")
            seen.add(key)
            owner = video_owner.setdefault(rec.video_id, rec.patient_id)
            if owner != rec.patient_id:
                raise DataError(
                    f"video {rec.video_id!r} maps to multiple patients "
                    f"({owner!r}, {rec.patient_id!r})"
                )
        self._records = records
        self.name = name

    @property
    def records(self) -> tuple[ImageRecord, ...]:
        return self._records

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[ImageRecord]:
        return iter(self._records)

    def __getitem__(self, index: int) -> ImageRecord:
        return self._records[index]

    def patient_ids(self) -> tuple[str, ...]:
        return tuple(sorted({r.patient_id for r in self._records}))

    def video_ids(self) -> tuple[str, ...]:
        return tuple(sorted({r.video_id for r in self._records}))

    def filter(self, predicate: Callable[[ImageRecord], bool], name: Optional[str] = None) -> "Dataset":
        return Dataset(
            [r for r in self._records if predicate(r)],
            name=name if name is not None else self.name,
        )

    def labelled(self, task: str) -> "Dataset":
        """Subset of records carrying a label for ``task``."""
        return self.filter(lambda r: r.label_for(task) is not None, name=f"{self.name}-{task}")

    def labels(self, task: str) -> np.ndarray:
        values = [r.label_for(task) for r in self._records]
        if any(v is None for v in values):
            raise DataError(f"dataset {self.name!r} has unlabelled records for task {task!r}")
        return np.asarray(values, dtype=np.int64)

    def pixel_stack(self) -> np.ndarray:
        """All frames stacked into an (N, 128, 128) float32 array."""
        if not self._records:
            return np.zeros((0, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
        return np.stack([r.pixels for r in self._records])


@dataclass(frozen=True)
class SplitSpec:
    """Patient-wise train/val/test split ratios plus shuffle seed."""

    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15)
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.ratios) != 3:
            raise DataError("ratios must have exactly three entries")
        for r in self.ratios:
            if not (0.0 < r < 1.0):
                raise DataError(f"each ratio must be in (0, 1), got {r}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise DataError(f"ratios must sum to 1, got {sum(self.ratios)}")


def preprocess(raw_image: np.ndarray) -> np.ndarray:
    """Resize an arbitrary grayscale image to 128x128 and clip into [0, 1].

    Uses corner-aligned bilinear resampling so the operation is exactly the
    identity on inputs that are already 128x128 and in range.
    """
    arr = np.asarray(raw_image, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DataError(f"expected a nonempty HxW grayscale image, got shape {arr.shape}")
    resized = resize_bilinear(arr, IMAGE_SIZE, IMAGE_SIZE)
    return np.clip(resized, 0.0, 1.0)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a 2-D float32 array.

    Output pixel (i, j) samples the source at
    ``(i * (H-1) / (out_h-1), j * (W-1) / (out_w-1))``; single-row or
    single-column axes collapse onto index 0. The fixed evaluation order makes
    outputs bit-reproducible.
    """
    img = np.asarray(img, dtype=np.float32)
    h, w = img.shape

    def axis_grid(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out, dtype=np.float64)
        else:
            pos = np.arange(n_out, dtype=np.float64) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = (pos - lo).astype(np.float32)
        return lo, hi, frac

    r0, r1, fr = axis_grid(h, out_h)
    c0, c1, fc = axis_grid(w, out_w)
    top = img[r0][:, c0] * (1.0 - fc) + img[r0][:, c1] * fc
    bottom = img[r1][:, c0] * (1.0 - fc) + img[r1][:, c1] * fc
    out = top * (1.0 - fr[:, None]) + bottom * fr[:, None]
    return out.astype(np.float32)


def split_by_patient(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Partition a dataset into train/val/test with disjoint patient sets.

    Patient ids are sorted, shuffled with the spec seed, and cut at
    ``floor(n * r_train)`` and ``floor(n * (r_train + r_val))``; the remainder
    goes to test.
    """
    if len(dataset) == 0:
        raise DataError("cannot split an empty dataset")
    patients = dataset.patient_ids()
    if len(patients) < 3:
        raise DataError(f"need at least 3 patients to split, got {len(patients)}")
    rng = np.random.default_rng(spec.seed)
    shuffled = [patients[i] for i in rng.permutation(len(patients))]
    n = len(shuffled)
    cut_train = math.floor(n * spec.ratios[0])
    cut_val = math.floor(n * (spec.ratios[0] + spec.ratios[1]))
    assignment: dict[str, str] = {}
    for i, pid in enumerate(shuffled):
        assignment[pid] = "train" if i < cut_train else ("val" if i < cut_val else "test")
    parts: dict[str, list[ImageRecord]] = {"train": [], "val": [], "test": []}
    for rec in dataset:
        parts[assignment[rec.patient_id]].append(rec)
    return tuple(
        Dataset(parts[split], name=f"{dataset.name}-{split}") for split in ("train", "val", "test")
    )


def subsample_labels(train: Dataset, fraction: float, task: str, seed: int) -> Dataset:
    """Select whole videos until >= fraction of the task's labelled images.

    Videos are ordered by a seeded shuffle stratified by video-majority class
    (the two per-class lists are interleaved), so both classes appear in the
    selection whenever it spans at least two videos. Returns the labelled
    records of the selected videos, in original dataset order.
    """
    if not (0.0 < fraction <= 1.0):
        raise DataError(f"fraction must be in (0, 1], got {fraction}")
    labelled = [r for r in train if r.label_for(task) is not None]
    if not labelled:
        raise DataError(f"no labelled data for task {task!r} in dataset {train.name!r}")

    by_video: dict[str, list[ImageRecord]] = {}
    for rec in labelled:
        by_video.setdefault(rec.video_id, []).append(rec)
    class_lists: dict[int, list[str]] = {0: [], 1: []}
    for vid in sorted(by_video):
        majority = int(np.mean([r.label_for(task) for r in by_video[vid]]) >= 0.5)
        class_lists[majority].append(vid)

    rng = np.random.default_rng(seed)
    for videos in class_lists.values():
        rng.shuffle(videos)
    first = 0 if len(class_lists[0]) >= len(class_lists[1]) else 1
    order: list[str] = []
    a, b = class_lists[first], class_lists[1 - first]
    for i in range(max(len(a), len(b))):
        if i < len(a):
            order.append(a[i])
        if i < len(b):
            order.append(b[i])

    target = fraction * len(labelled)
    chosen: set[str] = set()
    count = 0
    for vid in order:
        chosen.add(vid)
        count += len(by_video[vid])
        if count >= target:
            break
    picked = [r for r in labelled if r.video_id in chosen]
    return Dataset(picked, name=f"{train.name}-sub{fraction:g}")


def _parse_label(cell: str, column: str, row_number: int) -> Optional[int]:
    cell = cell.strip()
    if cell == "":
        return None
    try:
        value = int(cell)
    except ValueError:
        raise ManifestError(f"row {row_number}: {column} must be an integer or empty, got {cell!r}")
    if value not in (0, 1):
        raise ManifestError(f"row {row_number}: {column} must be 0 or 1, got {value}")
    return value


def load_manifest(path: str | Path, name: Optional[str] = None) -> Dataset:
    """Load a dataset from a CSV manifest plus per-frame image files.

    The manifest columns are ``image_path,patient_id,video_id,frame_index,
    view_label,ab_label,pe_label`` with empty cells meaning "label absent".
    Image paths are resolved relative to the manifest's directory; images of
    any size are accepted and pass through :func:`preprocess`.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    records = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"manifest {path} is empty (missing header)")
        if tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
            raise ManifestError(
                f"manifest {path} has unexpected header {header!r}; "
                f"expected {','.join(MANIFEST_COLUMNS)}"
            )
        for row_number, row in enumerate(reader, start=2):
            if len(row) != len(MANIFEST_COLUMNS):
                raise ManifestError(
                    f"row {row_number}: expected {len(MANIFEST_COLUMNS)} cells, got {len(row)}"
                )
            image_path, patient_id, video_id, frame_cell = row[0], row[1], row[2], row[3]
            img_file = path.parent / image_path
            if not img_file.is_file():
                raise ManifestError(f"row {row_number}: image file not found: {img_file}")
            try:
                frame_index = int(frame_cell)
            except ValueError:
                raise ManifestError(f"row {row_number}: frame_index must be an integer, got {frame_cell!r}")
            with Image.open(img_file) as im:
                raw = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
            try:
                records.append(
                    ImageRecord(
                        image_id=Path(image_path).stem,
                        patient_id=patient_id,
                        video_id=video_id,
                        frame_index=frame_index,
                        pixels=preprocess(raw),
                        view_label=_parse_label(row[4], "view_label", row_number),
                        ab_label=_parse_label(row[5], "ab_label", row_number),
                        pe_label=_parse_label(row[6], "pe_label", row_number),
                    )
                )
            except DataError as exc:
                raise ManifestError(f"row {row_number}: {exc}") from exc
    return Dataset(records, name=name if name is not None else path.stem)


def export_dataset(dataset: Dataset, out_dir: str | Path, manifest_name: str = "manifest.csv") -> Path:
    """Write a dataset as a manifest plus one 8-bit grayscale PNG per frame.

    Pixel values are quantized to ``round(v * 255)``. Output bytes are
    deterministic for a given dataset, so re-export reproduces identical
    files. Returns the manifest path.
    """
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / manifest_name
    with manifest_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for rec in dataset:
            png_rel = f"images/{rec.image_id}.png"
            quantized = np.round(rec.pixels * 255.0).astype(np.uint8)
            Image.fromarray(quantized, mode="L").save(out_dir / png_rel)
            writer.writerow(
                [
                    png_rel,
                    rec.patient_id,
                    rec.video_id,
                    rec.frame_index,
                    "" if rec.view_label is None else rec.view_label,
                    "" if rec.ab_label is None else rec.ab_label,
                    "" if rec.pe_label is None else rec.pe_label,
                ]
            )
    return manifest_path
