"""Labelled points, patch datasets and their on-disk formats."""

from __future__ import annotations

import csv
import io
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .._io import atomic_write_bytes, atomic_write_text
from ..classes import N_CLASSES, LczClass
from ..errors import DatasetFormatError, NodataContaminationError, OutOfBoundsError
from ..raster import Patch, RasterGrid, extract_patch, map_point_to_pixel

log = logging.getLogger(__name__)

SPLITS = {"train": 0, "val": 1, "test": 2}
UNSET = 255

_MAGIC = b"LCZ1"
_HEADER = struct.Struct("<4sIIII")


@dataclass(frozen=True)
class LabeledPoint:
    x: float
    y: float
    label: LczClass
    source: str = ""


@dataclass
class SampleSet:
    """Stacked patches with parallel labels and optional split tags.

    ``patches`` is ``(n, n_channels, patch_size, patch_size)`` float32;
    ``labels`` holds class codes and ``split_tags`` the codes of ``SPLITS``
    (255 = unset).
    """

    patches: np.ndarray
    labels: np.ndarray
    split_tags: Optional[np.ndarray] = None

    def __post_init__(self):
        self.patches = np.ascontiguousarray(self.patches, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
        if self.patches.ndim != 4 or self.patches.shape[2] != self.patches.shape[3]:
            raise ValueError(f"patches must be (n, c, s, s), got {self.patches.shape}")
        if len(self.labels) != len(self.patches):
            raise ValueError("labels and patches differ in length")
        if len(self.labels) and self.labels.max() >= N_CLASSES:
            raise ValueError("label code outside 0-16")
        if self.split_tags is not None:
            self.split_tags = np.asarray(self.split_tags, dtype=np.uint8).reshape(-1)
            if len(self.split_tags) != len(self.labels):
                raise ValueError("split_tags and patches differ in length")

    @classmethod
    def empty(cls, n_channels: int, patch_size: int) -> "SampleSet":
        return cls(np.zeros((0, n_channels, patch_size, patch_size), np.float32), np.zeros(0, np.uint8))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_channels(self) -> int:
        return self.patches.shape[1]

    @property
    def patch_size(self) -> int:
        return self.patches.shape[2]

    def histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=N_CLASSES).astype(np.int64)

    def tags(self) -> np.ndarray:
        if self.split_tags is None:
            return np.full(len(self), UNSET, dtype=np.uint8)
        return self.split_tags

    def subset(self, index) -> "SampleSet":
        index = np.asarray(index)
        tags = None if self.split_tags is None else self.split_tags[index]
        return SampleSet(self.patches[index], self.labels[index], tags)

    def split(self, name: str) -> "SampleSet":
        """Samples tagged ``name`` (one of train/val/test)."""
        return self.subset(np.flatnonzero(self.tags() == SPLITS[name]))

    def patch(self, i: int) -> Patch:
        return Patch(self.patches[i], -1, -1, int(self.labels[i]))

    @staticmethod
    def concat(sets: Sequence["SampleSet"]) -> "SampleSet":
        if not sets:
            raise ValueError("nothing to concatenate")
        tags = None
        if any(s.split_tags is not None for s in sets):
            tags = np.concatenate([s.tags() for s in sets])
        return SampleSet(
            np.concatenate([s.patches for s in sets]),
            np.concatenate([s.labels for s in sets]),
            tags,
        )


@dataclass(frozen=True)
class SkippedPoint:
    index: int
    point: LabeledPoint
    reason: str


def build_dataset(
    grid: RasterGrid, points: Iterable[LabeledPoint], size: int = 32
) -> tuple[SampleSet, list[SkippedPoint]]:
    """Cut one patch per usable point; return the dataset and the skip report.

    Skip reasons are ``outside_extent``, ``out_of_bounds`` and ``nodata``.
    Duplicate points yield duplicate patches.
    """
    patches, labels, skipped = [], [], []
    for i, pt in enumerate(points):
        try:
            row, col = map_point_to_pixel(grid, pt.x, pt.y)
        except OutOfBoundsError:
            skipped.append(SkippedPoint(i, pt, "outside_extent"))
            continue
        try:
            patch = extract_patch(grid, row, col, size)
        except OutOfBoundsError:
            skipped.append(SkippedPoint(i, pt, "out_of_bounds"))
            continue
        except NodataContaminationError:
            skipped.append(SkippedPoint(i, pt, "nodata"))
            continue
        patches.append(patch.data)
        labels.append(int(pt.label))
    if skipped:
        log.info("skipped %d of %d points", len(skipped), len(skipped) + len(patches))
    if not patches:
        return SampleSet.empty(grid.n_bands, size), skipped
    return SampleSet(np.stack(patches), np.array(labels, np.uint8)), skipped


def read_points_csv(path) -> list[LabeledPoint]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames][:4] != ["x", "y", "lcz", "source"]:
            raise DatasetFormatError(f"{path}: header must be x,y,lcz,source")
        out = []
        for lineno, row in enumerate(reader, start=2):
            try:
                out.append(
                    LabeledPoint(float(row["x"]), float(row["y"]), LczClass.parse(row["lcz"]), row["source"] or "")
                )
            except (TypeError, ValueError) as exc:
                raise DatasetFormatError(f"{path}:{lineno}: {exc}") from exc
    return out


def format_points_csv(points: Iterable[LabeledPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "lcz", "source"])
    for p in points:
        w.writerow([repr(float(p.x)), repr(float(p.y)), LczClass(p.label).short, p.source])
    return buf.getvalue()


def write_points_csv(points: Iterable[LabeledPoint], path) -> None:
    atomic_write_text(path, format_points_csv(points))


def _record_dtype(n_channels: int, patch_size: int) -> np.dtype:
    return np.dtype(
        [("label", "u1"), ("split", "u1"), ("data", "<f4", (n_channels, patch_size, patch_size))]
    )


def dataset_to_bytes(ds: SampleSet) -> bytes:
    rec = np.zeros(len(ds), dtype=_record_dtype(ds.n_channels, ds.patch_size))
    rec["label"] = ds.labels
    rec["split"] = ds.tags()
    rec["data"] = ds.patches
    return _HEADER.pack(_MAGIC, 1, len(ds), ds.patch_size, ds.n_channels) + rec.tobytes()


def dataset_from_bytes(raw: bytes) -> SampleSet:
    if len(raw) < _HEADER.size:
        raise DatasetFormatError("truncated dataset header")
    magic, version, n, size, channels = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}")
    if version != 1:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    dt = _record_dtype(channels, size)
    body = raw[_HEADER.size:]
    if len(body) != n * dt.itemsize:
        raise DatasetFormatError(f"payload has {len(body)} bytes, expected {n * dt.itemsize}")
    rec = np.frombuffer(body, dtype=dt, count=n)
    labels = rec["label"].copy()
    if n and labels.max() >= N_CLASSES:
        raise DatasetFormatError("label code outside 0-16")
    tags = rec["split"].copy()
    if n and not np.isin(tags, (0, 1, 2, UNSET)).all():
        raise DatasetFormatError("invalid split tag")
    patches = rec["data"].astype(np.float32).reshape(n, channels, size, size)
    split_tags = None if (n == 0 or (tags == UNSET).all()) else tags
    return SampleSet(patches, labels, split_tags)


def save_dataset(ds: SampleSet, path) -> None:
    atomic_write_bytes(path, dataset_to_bytes(ds))


def load_dataset(path) -> SampleSet:
    return dataset_from_bytes(Path(path).read_bytes())
