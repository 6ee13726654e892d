"""Dihedral oversampling of minority classes and stratified splitting."""

from __future__ import annotations

import logging
import math
import warnings
from functools import lru_cache

import numpy as np

from ..classes import N_CLASSES
from .dataset import SPLITS, SampleSet

log = logging.getLogger(__name__)

DIHEDRAL_NAMES = (
    "identity", "rot90", "rot180", "rot270",
    "flip_lr", "flip_ud", "transpose", "antitranspose",
)


def dihedral(a: np.ndarray, index: int) -> np.ndarray:
    """Apply symmetry ``index`` (see ``DIHEDRAL_NAMES``) to the last two axes.

    Rotations are counter-clockwise. The result is a contiguous copy.
    """
    ax = (-2, -1)
    if index == 0:
        out = a
    elif index in (1, 2, 3):
        out = np.rot90(a, index, axes=ax)
    elif index == 4:
        out = a[..., ::-1]
    elif index == 5:
        out = a[..., ::-1, :]
    elif index == 6:
        out = np.swapaxes(a, -1, -2)
    elif index == 7:
        out = np.swapaxes(a, -1, -2)[..., ::-1, ::-1]
    else:
        raise ValueError(f"dihedral index must be 0-7, got {index}")
    return np.ascontiguousarray(out)


@lru_cache(maxsize=None)
def composition_table() -> np.ndarray:
    """``table[a, b]`` is the index of "apply b, then a"."""
    probe = np.arange(9).reshape(3, 3)
    images = [dihedral(probe, i) for i in range(8)]
    table = np.empty((8, 8), dtype=np.int64)
    for a in range(8):
        for b in range(8):
            img = dihedral(images[b], a)
            table[a, b] = next(i for i, ref in enumerate(images) if np.array_equal(ref, img))
    table.setflags(write=False)
    return table


def inverse(index: int) -> int:
    return int(np.flatnonzero(composition_table()[:, index] == 0)[0])


def augment_rebalance(ds: SampleSet, target_per_class: int, seed: int = 0) -> SampleSet:
    """Oversample every present class below ``target_per_class`` with dihedral copies.

    Sources are drawn uniformly from the class's original members and the
    transform uniformly from the seven non-identity symmetries. Originals
    keep their order and are never modified; copies are appended class by
    class in code order and inherit the source's split tag.
    """
    if target_per_class < 1:
        raise ValueError("target_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    hist = ds.histogram()
    new_patches, new_labels, new_tags = [], [], []
    tags = ds.tags()
    absent = [code for code in range(N_CLASSES) if hist[code] == 0]
    if absent and len(ds):
        log.warning("class codes %s have no samples and stay absent", absent)
    for code in range(N_CLASSES):
        count = int(hist[code])
        if count == 0 or count >= target_per_class:
            continue
        members = np.flatnonzero(ds.labels == code)
        need = target_per_class - count
        src = members[rng.integers(0, count, size=need)]
        ops = rng.integers(1, 8, size=need)
        for i, op in zip(src, ops):
            new_patches.append(dihedral(ds.patches[i], int(op)))
            new_labels.append(code)
            new_tags.append(tags[i])
    if not new_patches:
        return SampleSet(ds.patches.copy(), ds.labels.copy(), None if ds.split_tags is None else ds.split_tags.copy())
    patches = np.concatenate([ds.patches, np.stack(new_patches)])
    labels = np.concatenate([ds.labels, np.array(new_labels, np.uint8)])
    split_tags = None
    if ds.split_tags is not None:
        split_tags = np.concatenate([ds.split_tags, np.array(new_tags, np.uint8)])
    return SampleSet(patches, labels, split_tags)


def _largest_remainder(n: int, ratios) -> list[int]:
    exact = [n * r for r in ratios]
    counts = [math.floor(e) for e in exact]
    left = n - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:left]:
        counts[i] += 1
    return counts


def stratified_split(ds: SampleSet, ratios=(0.7, 0.15, 0.15), seed: int = 0) -> SampleSet:
    """Tag samples train/val/test per class, each class cut in the given ratios.

    Per class (in code order) the member indices are shuffled with a shared
    seeded generator and cut contiguously; counts follow the largest-remainder
    rule so every split is within one sample of its exact share. A class with
    fewer samples than non-empty splits goes entirely to train.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    tags = np.full(len(ds), SPLITS["train"], dtype=np.uint8)
    n_splits = sum(r > 0 for r in ratios)
    for code in range(N_CLASSES):
        members = np.flatnonzero(ds.labels == code)
        if len(members) == 0:
            continue
        perm = members[rng.permutation(len(members))]
        if len(members) < n_splits:
            warnings.warn(f"class code {code} has {len(members)} samples; all assigned to train")
            continue
        n_train, n_val, _ = _largest_remainder(len(members), ratios)
        tags[perm[n_train:n_train + n_val]] = SPLITS["val"]
        tags[perm[n_train + n_val:]] = SPLITS["test"]
    return SampleSet(ds.patches, ds.labels, tags)
