"""Seeded synthetic scenes and patch datasets for desk-scale verification.

Three scenarios:

* ``means``: each class has its own per-band mean levels (separable from
  patch statistics alone), and its red/NIR levels reproduce the class's
  NDVI guide value.
* ``texture``: every class shares the same band means and variances; the
  class lives only in a zero-mean +/-1 spatial pattern (stripes, checkers,
  diagonals with periods of 2-16 px), so patch mean/std features carry no
  class signal.
* ``shifted``: a source domain for transfer experiments: texture scenes
  with a different class-to-pattern assignment and a fixed per-band affine
  distortion of the values.

Guide layers (height, building fraction, impervious, water and the three
flag layers) follow each class's rule-table profile, so the labelling rules
recover the class on noise-free ``means`` sites.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from ._io import atomic_write_text, dump_json
from .classes import N_CLASSES, LczClass
from .errors import ConfigError
from .forest import splitmix64
from .raster import RasterGrid, compute_ndvi, pixel_center, save_raster
from .sampling.dataset import LabeledPoint, SampleSet, build_dataset, write_points_csv

N_BANDS = 10
RED_BAND, NIR_BAND = 2, 3
SCENARIOS = ("means", "texture", "shifted")

# (height m, building fraction, impervious fraction, water fraction, ndvi, flags)
SITE_PROFILES = {
    LczClass.LCZ1: (40.0, 0.55, 0.35, 0.0, 0.10, ()),
    LczClass.LCZ2: (15.0, 0.55, 0.35, 0.0, 0.12, ()),
    LczClass.LCZ3: (5.0, 0.55, 0.35, 0.0, 0.15, ()),
    LczClass.LCZ4: (40.0, 0.30, 0.30, 0.0, 0.25, ()),
    LczClass.LCZ5: (15.0, 0.30, 0.30, 0.0, 0.25, ()),
    LczClass.LCZ6: (6.0, 0.30, 0.30, 0.0, 0.35, ()),
    LczClass.LCZ7: (3.0, 0.60, 0.20, 0.0, 0.10, ("lightweight",)),
    LczClass.LCZ8: (6.0, 0.30, 0.60, 0.0, 0.10, ()),
    LczClass.LCZ9: (6.0, 0.15, 0.20, 0.0, 0.40, ()),
    LczClass.LCZ10: (8.0, 0.30, 0.60, 0.0, 0.05, ("industrial",)),
    LczClass.LCZA: (0.0, 0.0, 0.05, 0.0, 0.75, ()),
    LczClass.LCZB: (0.0, 0.05, 0.40, 0.0, 0.70, ()),
    LczClass.LCZC: (0.0, 0.0, 0.05, 0.0, 0.45, ("shrub",)),
    LczClass.LCZD: (0.0, 0.0, 0.05, 0.0, 0.45, ()),
    LczClass.LCZE: (0.0, 0.05, 0.80, 0.0, 0.05, ()),
    LczClass.LCZF: (0.0, 0.0, 0.10, 0.0, 0.10, ()),
    LczClass.LCZG: (0.0, 0.0, 0.0, 0.90, -0.30, ()),
}

TEXTURES = (
    ("rows", 2), ("cols", 2), ("checker", 2),
    ("rows", 4), ("cols", 4), ("checker", 4), ("diag", 4), ("anti", 4),
    ("rows", 8), ("cols", 8), ("checker", 8), ("diag", 8), ("anti", 8),
    ("rows", 16), ("cols", 16), ("checker", 16), ("diag", 16),
)
# source-domain classes draw their pattern from this offset in TEXTURES
SHIFTED_TEXTURE_OFFSET = 7

# fixed palettes, independent of the scene seed so classes look alike across scenes
_palette_rng = np.random.default_rng(20201205)
MEANS_PALETTE = _palette_rng.uniform(0.1, 0.9, size=(N_CLASSES, N_BANDS)).astype(np.float32)
_rn_sum = _palette_rng.uniform(0.4, 0.8, size=N_CLASSES)
for _code, _prof in SITE_PROFILES.items():
    _ndvi = _prof[4]
    MEANS_PALETTE[_code, RED_BAND] = _rn_sum[_code] * (1 - _ndvi) / 2
    MEANS_PALETTE[_code, NIR_BAND] = _rn_sum[_code] * (1 + _ndvi) / 2
TEXTURE_BASE = np.linspace(0.3, 0.6, N_BANDS).astype(np.float32)
TEXTURE_AMPLITUDE = np.full(N_BANDS, 0.15, dtype=np.float32)
SHIFT_GAIN = _palette_rng.uniform(0.6, 1.4, N_BANDS).astype(np.float32)
SHIFT_OFFSET = _palette_rng.uniform(-0.2, 0.2, N_BANDS).astype(np.float32)
del _palette_rng, _rn_sum, _code, _prof, _ndvi


@dataclass(frozen=True)
class ScenarioSpec:
    scenario: str = "means"
    classes: tuple = tuple(range(N_CLASSES))
    width: int = 256
    height: int = 256
    blob_min: int = 48
    blob_max: int = 96
    noise_sigma: float = 0.05
    seed: int = 0
    pixel_size_m: float = 10.0
    patch_size: int = 32
    # spacing of the labelled-point lattice inside each blob; 0 = blob centres only
    point_stride: int = 16

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(int(LczClass(c)) for c in self.classes))
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if not self.classes:
            raise ConfigError("at least one class is required")
        if self.blob_min < self.patch_size or self.blob_max < self.blob_min:
            raise ConfigError("need patch_size <= blob_min <= blob_max")
        if min(self.width, self.height) < self.blob_min:
            raise ConfigError("scene smaller than the minimum blob size")
        if self.noise_sigma < 0 or self.point_stride < 0:
            raise ConfigError("noise_sigma and point_stride must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = list(self.classes)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScenarioSpec":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        d = dict(d)
        if "classes" in d:
            d["classes"] = tuple(LczClass.parse(c) if isinstance(c, str) else c for c in d["classes"])
        return cls(**d)


@dataclass
class Scene:
    basemap: RasterGrid
    layers: dict
    truth: RasterGrid
    points: list
    blobs: list = field(repr=False)
    spec: ScenarioSpec = None

    def ndvi(self) -> RasterGrid:
        return compute_ndvi(self.basemap, NIR_BAND, RED_BAND)

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_raster(self.basemap, directory / "basemap.json")
        save_raster(self.truth, directory / "truth.json")
        for name, grid in self.layers.items():
            save_raster(grid, directory / f"{name}.json")
        write_points_csv(self.points, directory / "points.csv")
        atomic_write_text(directory / "scenario.json", dump_json(self.spec.to_dict()))


def texture_pattern(kind: str, period: int, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """+/-1 pattern; zero mean over any window whose sides are multiples of ``period``."""
    half = period // 2
    if kind == "rows":
        q = rows // half + 0 * cols
    elif kind == "cols":
        q = cols // half + 0 * rows
    elif kind == "checker":
        q = rows // half + cols // half
    elif kind == "diag":
        q = (rows + cols) // half
    elif kind == "anti":
        q = (rows - cols) // half
    else:
        raise ValueError(kind)
    return (2 * (q % 2) - 1).astype(np.float32)


def texture_for(code: int, scenario: str) -> tuple[str, int]:
    offset = SHIFTED_TEXTURE_OFFSET if scenario == "shifted" else 0
    return TEXTURES[(code + offset) % len(TEXTURES)]


def _cuts(total: int, lo: int, hi: int, rng) -> list[tuple[int, int]]:
    out, start = [], 0
    while start < total:
        size = int(rng.integers(lo, hi + 1))
        if total - start - size < lo:
            size = total - start
        out.append((start, start + size))
        start += size
    return out


def _lattice(lo: int, hi: int, half: int, stride: int) -> list[int]:
    center = (lo + hi) // 2
    if stride == 0:
        return [center]
    first = center - ((center - (lo + half)) // stride) * stride
    return list(range(first, hi - half + 1, stride))


def generate_scene(spec: ScenarioSpec) -> Scene:
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    row_cuts = _cuts(h, spec.blob_min, spec.blob_max, rng)
    col_cuts = _cuts(w, spec.blob_min, spec.blob_max, rng)
    n_blobs = len(row_cuts) * len(col_cuts)
    classes = np.array(spec.classes)
    n_rounds = -(-n_blobs // len(classes))
    assignment = np.concatenate([rng.permutation(classes) for _ in range(n_rounds)])[:n_blobs]

    bands = np.empty((N_BANDS, h, w), dtype=np.float32)
    truth = np.empty((h, w), dtype=np.float32)
    layer_names = ("height", "building_fraction", "impervious", "water", "lightweight", "industrial", "shrub")
    aux = {name: np.empty((h, w), dtype=np.float32) for name in layer_names}
    blobs, points = [], []
    half = spec.patch_size // 2
    b = 0
    for r0, r1 in row_cuts:
        for c0, c1 in col_cuts:
            code = int(assignment[b])
            b += 1
            blobs.append((r0, r1, c0, c1, code))
            truth[r0:r1, c0:c1] = code
            height_m, bfrac, imperv, water, _, flags = SITE_PROFILES[LczClass(code)]
            for name, value in zip(layer_names[:4], (height_m, bfrac, imperv, water)):
                aux[name][r0:r1, c0:c1] = value
            for name in layer_names[4:]:
                aux[name][r0:r1, c0:c1] = 1.0 if name in flags else 0.0
            if spec.scenario == "means":
                bands[:, r0:r1, c0:c1] = MEANS_PALETTE[code][:, None, None]
            else:
                kind, period = texture_for(code, spec.scenario)
                phase_r, phase_c = (int(v) for v in rng.integers(0, period, 2))
                rr = np.arange(r1 - r0)[:, None] + phase_r
                cc = np.arange(c1 - c0)[None, :] + phase_c
                pat = texture_pattern(kind, period, rr, cc)
                bands[:, r0:r1, c0:c1] = TEXTURE_BASE[:, None, None] + TEXTURE_AMPLITUDE[:, None, None] * pat
            for r in _lattice(r0, r1, half, spec.point_stride):
                for c in _lattice(c0, c1, half, spec.point_stride):
                    points.append((r, c, code))
    if spec.noise_sigma > 0:
        noise_rng = np.random.default_rng([spec.seed, 1])
        for band in bands:
            band += noise_rng.standard_normal((h, w), dtype=np.float32) * np.float32(spec.noise_sigma)
    if spec.scenario == "shifted":
        bands = bands * SHIFT_GAIN[:, None, None] + SHIFT_OFFSET[:, None, None]

    geo = dict(pixel_size_m=spec.pixel_size_m, origin_x=0.0, origin_y=h * spec.pixel_size_m)
    basemap = RasterGrid(bands, **geo)
    labeled = []
    for r, c, code in points:
        x, y = pixel_center(basemap, r, c)
        labeled.append(LabeledPoint(x, y, LczClass(code), f"synth:{spec.scenario}:{spec.seed}"))
    return Scene(
        basemap=basemap,
        layers={name: RasterGrid(arr, **geo) for name, arr in aux.items()},
        truth=RasterGrid(truth, **geo),
        points=labeled,
        blobs=blobs,
        spec=spec,
    )


def scene_seed(seed: int, index: int) -> int:
    return int(splitmix64((int(seed) + index) & ((1 << 64) - 1)) >> 1)


def generate_dataset(spec: ScenarioSpec, n_per_class: int, max_scenes: int = 1000) -> SampleSet:
    """Exactly ``n_per_class`` patches for every class in ``spec.classes``.

    Scenes are generated with seeds derived from ``spec.seed``; patches are
    taken in scene and point order until each class is full.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    want = {c: n_per_class for c in spec.classes}
    chunks = []
    for i in range(max_scenes):
        scene = generate_scene(replace(spec, seed=scene_seed(spec.seed, i)))
        ds, _ = build_dataset(scene.basemap, scene.points, spec.patch_size)
        keep = []
        for j, code in enumerate(ds.labels):
            if want.get(int(code), 0) > 0:
                want[int(code)] -= 1
                keep.append(j)
        if keep:
            chunks.append(ds.subset(np.array(keep)))
        if not any(want.values()):
            break
    else:
        raise RuntimeError(f"could not fill {n_per_class} samples per class within {max_scenes} scenes")
    return SampleSet.concat(chunks)


def load_spec(path) -> ScenarioSpec:
    return ScenarioSpec.from_dict(json.loads(Path(path).read_text()))
