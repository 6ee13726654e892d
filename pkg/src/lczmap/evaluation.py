"""Confusion-matrix metrics and 100 m class-map rendering."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._io import atomic_write_text, dump_json
from .classes import CLASS_NAMES, N_CLASSES
from .raster import DEFAULT_NODATA, PATCH_SIZE, RasterGrid, block_factor, save_raster
from .sampling.dataset import SPLITS

# conventional LCZ colours, indexed by class code
PALETTE = (
    "#8c0000", "#d10000", "#ff0000", "#bf4d00", "#ff6600", "#ff9955", "#faee05", "#bcbcbc",
    "#ffccaa", "#555555", "#006a00", "#00aa00", "#648525", "#b9db79", "#000000", "#fbf7ae",
    "#6a6aff",
)


class DegenerateMarginalsWarning(UserWarning):
    """Chance agreement is 1, so kappa is undefined and a fallback is returned."""


@dataclass
class ConfusionMatrix:
    """Rows are reference classes, columns predicted classes."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    def _require_nonempty(self):
        if self.total < 1:
            raise ValueError("metrics need a confusion matrix with at least one entry")


def confusion(preds: Sequence[int], refs: Sequence[int], n_classes: int = N_CLASSES) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    refs = np.asarray(refs, dtype=np.int64).reshape(-1)
    if preds.shape != refs.shape:
        raise ValueError(f"{len(preds)} predictions but {len(refs)} references")
    if preds.size == 0:
        raise ValueError("confusion of an empty sequence")
    for arr in (preds, refs):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise ValueError(f"class codes must lie in 0-{n_classes - 1}")
    counts = np.bincount(refs * n_classes + preds, minlength=n_classes * n_classes)
    return ConfusionMatrix(counts.reshape(n_classes, n_classes))


def overall_accuracy(cm: ConfusionMatrix) -> float:
    cm._require_nonempty()
    return float(np.trace(cm.counts) / cm.total)


def cohen_kappa(cm: ConfusionMatrix) -> float:
    cm._require_nonempty()
    # integer form of (p_o - p_e) / (1 - p_e), scaled by n^2, so it is exact up to the final division
    n = cm.total
    agree = int(np.trace(cm.counts))
    chance = sum(int(r) * int(c) for r, c in zip(cm.counts.sum(axis=1), cm.counts.sum(axis=0)))
    if chance == n * n:
        if agree == n:
            return 1.0
        warnings.warn("all mass on one class in both marginals; kappa set to 0", DegenerateMarginalsWarning)
        return 0.0
    return (n * agree - chance) / (n * n - chance)


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(num.shape, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


@dataclass
class F1Scores:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    predicted: np.ndarray
    macro: float


def f1_scores(cm: ConfusionMatrix) -> F1Scores:
    """Per-class precision, recall and F1 (0/0 counts as 0) plus the macro mean.

    The macro mean skips classes that appear in neither the references nor
    the predictions.
    """
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    support = c.sum(axis=1)
    predicted = c.sum(axis=0)
    precision = _safe_ratio(tp, predicted)
    recall = _safe_ratio(tp, support)
    f1 = _safe_ratio(2 * precision * recall, precision + recall)
    present = (support > 0) | (predicted > 0)
    macro = float(f1[present].mean()) if present.any() else 0.0
    return F1Scores(precision, recall, f1, support.astype(np.int64), predicted.astype(np.int64), macro)


@dataclass
class MetricsReport:
    overall_accuracy: float
    kappa: float
    macro_f1: float
    per_class: dict
    confusion: list
    n_samples: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix) -> "MetricsReport":
        scores = f1_scores(cm)
        per_class = {
            CLASS_NAMES[i]: {
                "precision": float(scores.precision[i]),
                "recall": float(scores.recall[i]),
                "f1": float(scores.f1[i]),
                "support": int(scores.support[i]),
            }
            for i in range(cm.n_classes)
        }
        return cls(
            overall_accuracy=overall_accuracy(cm),
            kappa=cohen_kappa(cm),
            macro_f1=scores.macro,
            per_class=per_class,
            confusion=cm.counts.tolist(),
            n_samples=cm.total,
        )

    @property
    def per_class_f1(self) -> list[float]:
        return [self.per_class[name]["f1"] for name in CLASS_NAMES]

    def to_dict(self) -> dict:
        d = {
            "overall_accuracy": self.overall_accuracy,
            "kappa": self.kappa,
            "macro_f1": self.macro_f1,
            "n_samples": self.n_samples,
            "per_class": self.per_class,
            "confusion": self.confusion,
        }
        d.update(self.extra)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        known = ("overall_accuracy", "kappa", "macro_f1", "per_class", "confusion", "n_samples")
        extra = {k: v for k, v in d.items() if k not in known}
        return cls(
            overall_accuracy=float(d["overall_accuracy"]),
            kappa=float(d["kappa"]),
            macro_f1=float(d.get("macro_f1", 0.0)),
            per_class={k: dict(v) for k, v in d["per_class"].items()},
            confusion=[list(map(int, row)) for row in d["confusion"]],
            n_samples=int(d.get("n_samples", 0)),
            extra=extra,
        )

    def to_json(self) -> str:
        return dump_json(self.to_dict())

    def save(self, path) -> None:
        atomic_write_text(path, self.to_json())

    @classmethod
    def load(cls, path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _test_part(ds):
    if ds.split_tags is not None and (ds.tags() == SPLITS["test"]).any():
        return ds.split("test")
    return ds


def report(model, test) -> MetricsReport:
    """Score ``model`` on the test split of ``test`` (all samples if untagged).

    ``model`` is anything with ``predict_patches``; the CNN models predict in
    eval mode.
    """
    part = _test_part(test)
    if len(part) == 0:
        raise ValueError("no test samples to evaluate")
    preds = np.asarray(model.predict_patches(part.patches))
    return MetricsReport.from_confusion(confusion(preds, part.labels))


def map_geometry(grid: RasterGrid, cell_size_m: float) -> tuple[int, int, int]:
    """``(factor, out_height, out_width)`` of the cell grid over ``grid``."""
    k = block_factor(grid.pixel_size_m, cell_size_m)
    return k, grid.height // k, grid.width // k


def cell_centers(n_cells: int, factor: int) -> np.ndarray:
    """Source-pixel index of each cell's centre pixel."""
    return np.arange(n_cells) * factor + factor // 2


def classify_map(
    model,
    grid: RasterGrid,
    cell_size_m: float = 100.0,
    patch_size: int = PATCH_SIZE,
    chunk_cells: int = 4096,
) -> RasterGrid:
    """Classify the patch centred on every output cell's centre pixel.

    Cells whose window leaves the grid or touches nodata get the nodata
    value; all others hold the predicted class code. Patches are classified
    in row-major chunks, so the result does not depend on ``chunk_cells``.
    """
    k, out_h, out_w = map_geometry(grid, cell_size_m)
    if out_h == 0 or out_w == 0:
        raise ValueError("grid is smaller than one output cell")
    half = patch_size // 2
    rows, cols = cell_centers(out_h, k), cell_centers(out_w, k)
    ok_r = (rows - half >= 0) & (rows + half <= grid.height)
    ok_c = (cols - half >= 0) & (cols + half <= grid.width)

    # windowed nodata count via a summed-area table
    bad = (~grid.valid_mask).any(axis=0).astype(np.int64)
    sat = np.zeros((grid.height + 1, grid.width + 1), dtype=np.int64)
    sat[1:, 1:] = bad.cumsum(0).cumsum(1)

    out = np.full((out_h, out_w), grid.nodata, dtype=np.float32)
    pending_idx, pending_patches, pending_n = [], [], 0

    def flush():
        nonlocal pending_idx, pending_patches, pending_n
        if not pending_n:
            return
        preds = np.asarray(model.predict_patches(np.concatenate(pending_patches)))
        idx = np.concatenate(pending_idx)
        out.reshape(-1)[idx] = preds.astype(np.float32)
        pending_idx, pending_patches, pending_n = [], [], 0

    cs = cols[ok_c]
    for i in np.flatnonzero(ok_r):
        r0, r1 = rows[i] - half, rows[i] + half
        c0, c1 = cs - half, cs + half
        n_bad = sat[r1, c1] - sat[r0, c1] - sat[r1, c0] + sat[r0, c0]
        good = n_bad == 0
        if not good.any():
            continue
        strip = grid.data[:, r0:r1, :]
        windows = sliding_window_view(strip, patch_size, axis=2)[:, :, cs[good] - half]
        pending_patches.append(np.ascontiguousarray(windows.transpose(2, 0, 1, 3)))
        pending_idx.append(i * out_w + np.flatnonzero(ok_c)[good])
        pending_n += int(good.sum())
        if pending_n >= chunk_cells:
            flush()
    flush()
    return RasterGrid(
        out[None],
        pixel_size_m=float(cell_size_m),
        origin_x=grid.origin_x,
        origin_y=grid.origin_y,
        nodata=grid.nodata,
    )


def palette_sidecar() -> dict:
    return {
        "classes": [
            {"code": i, "name": CLASS_NAMES[i], "color": PALETTE[i]} for i in range(N_CLASSES)
        ],
        "nodata": "transparent",
    }


def save_map(grid: RasterGrid, header_path) -> Path:
    """Write the class map as RAWG plus ``<stem>.palette.json``; returns the sidecar path."""
    header_path = Path(header_path)
    save_raster(grid, header_path)
    sidecar = header_path.with_name(header_path.stem + ".palette.json")
    atomic_write_text(sidecar, dump_json(palette_sidecar()))
    return sidecar


def map_accuracy(class_map: RasterGrid, truth: RasterGrid) -> tuple[float, int]:
    """Agreement of valid map cells with the truth raster sampled at cell centres."""
    k = block_factor(truth.pixel_size_m, class_map.pixel_size_m)
    rows, cols = cell_centers(class_map.height, k), cell_centers(class_map.width, k)
    ref = truth.data[0][np.ix_(rows, cols)]
    pred = class_map.data[0]
    valid = pred != class_map.nodata
    n = int(valid.sum())
    if n == 0:
        return 0.0, 0
    return float((pred[valid] == ref[valid]).mean()), n


__all__ = [
    "DEFAULT_NODATA", "PALETTE", "ConfusionMatrix", "DegenerateMarginalsWarning", "F1Scores",
    "MetricsReport", "classify_map", "cohen_kappa", "confusion", "f1_scores", "map_accuracy",
    "map_geometry", "overall_accuracy", "palette_sidecar", "report", "save_map",
]
