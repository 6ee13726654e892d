"""Rule-assisted labelling of candidate sites from stacked guide layers."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from ..classes import LczClass
from ..errors import ConfigError, GeometryMismatchError, NodataContaminationError, OutOfBoundsError
from ..raster import RasterGrid, window_bounds

FLAGS = ("lightweight", "industrial", "shrub")


@dataclass(frozen=True)
class RuleConfig:
    """Thresholds of the built/natural decision workflow.

    Defaults are placeholders chosen from the class descriptions; every field
    can be overridden from a JSON file with the same keys.
    """

    water_min: float = 0.5
    built_min_fraction: float = 0.1
    highrise_min_m: float = 25.0
    midrise_min_m: float = 10.0
    compact_min_fraction: float = 0.4
    open_min_fraction: float = 0.2
    dense_veg_ndvi: float = 0.6
    low_plants_ndvi: float = 0.3
    paved_impervious_min: float = 0.5
    dense_tree_fraction: float = 0.7

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v):
                raise ConfigError(f"rule threshold {f.name} must be a finite number, got {v!r}")
        if not self.midrise_min_m < self.highrise_min_m:
            raise ConfigError("midrise_min_m must be below highrise_min_m")
        if not self.low_plants_ndvi < self.dense_veg_ndvi:
            raise ConfigError("low_plants_ndvi must be below dense_veg_ndvi")
        if not self.open_min_fraction < self.compact_min_fraction:
            raise ConfigError("open_min_fraction must be below compact_min_fraction")

    @classmethod
    def from_dict(cls, d: Mapping) -> "RuleConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown rule config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "RuleConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SiteSummary:
    """Window-averaged guide-layer values around a candidate point.

    ``tree_fraction`` is the share of the window under building-free
    vegetation; when not measured it is taken as the pervious, non-water,
    non-building remainder.
    """

    mean_building_height_m: float
    building_fraction: float
    mean_ndvi: float
    impervious_fraction: float
    water_fraction: float
    tree_fraction: Optional[float] = None
    flags: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "flags", frozenset(self.flags))
        values = {
            "mean_building_height_m": self.mean_building_height_m,
            "building_fraction": self.building_fraction,
            "mean_ndvi": self.mean_ndvi,
            "impervious_fraction": self.impervious_fraction,
            "water_fraction": self.water_fraction,
        }
        if self.tree_fraction is not None:
            values["tree_fraction"] = self.tree_fraction
        for name, v in values.items():
            if not math.isfinite(v):
                raise ValueError(f"{name} is not finite: {v}")
            if name.endswith("fraction") and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.mean_building_height_m < 0:
            raise ValueError("mean_building_height_m must be >= 0")
        unknown = self.flags - set(FLAGS)
        if unknown:
            raise ValueError(f"unknown site flags {sorted(unknown)}")

    @property
    def vegetated_fraction(self) -> float:
        if self.tree_fraction is not None:
            return self.tree_fraction
        rest = 1.0 - self.building_fraction - self.impervious_fraction - self.water_fraction
        return min(1.0, max(0.0, rest))


def rule_assist_label(site: SiteSummary, rules: RuleConfig = RuleConfig()) -> tuple[LczClass, str]:
    """First-match evaluation of the labelling workflow.

    Returns the proposed class and the identifier of the rule that fired.
    """
    if site.water_fraction >= rules.water_min:
        return LczClass.LCZG, "water"

    if site.building_fraction >= rules.built_min_fraction:
        if "industrial" in site.flags:
            return LczClass.LCZ10, "built.industrial"
        if "lightweight" in site.flags:
            return LczClass.LCZ7, "built.lightweight"
        compact = site.building_fraction >= rules.compact_min_fraction
        h = site.mean_building_height_m
        if h >= rules.highrise_min_m:
            return (LczClass.LCZ1, "built.highrise.compact") if compact else (LczClass.LCZ4, "built.highrise.open")
        if h >= rules.midrise_min_m:
            return (LczClass.LCZ2, "built.midrise.compact") if compact else (LczClass.LCZ5, "built.midrise.open")
        if compact:
            return LczClass.LCZ3, "built.lowrise.compact"
        if site.building_fraction >= rules.open_min_fraction:
            if site.impervious_fraction >= rules.paved_impervious_min:
                return LczClass.LCZ8, "built.lowrise.open.paved"
            return LczClass.LCZ6, "built.lowrise.open.pervious"
        return LczClass.LCZ9, "built.sparse"

    if site.mean_ndvi >= rules.dense_veg_ndvi:
        if site.vegetated_fraction >= rules.dense_tree_fraction:
            return LczClass.LCZA, "natural.trees.dense"
        return LczClass.LCZB, "natural.trees.scattered"
    if site.mean_ndvi >= rules.low_plants_ndvi:
        if "shrub" in site.flags:
            return LczClass.LCZC, "natural.low.shrub"
        return LczClass.LCZD, "natural.low.plants"
    if site.impervious_fraction >= rules.paved_impervious_min:
        return LczClass.LCZE, "natural.bare.paved"
    return LczClass.LCZF, "natural.bare.soil"


def _window_mean(layer: RasterGrid, bounds, name: str) -> float:
    r0, r1, c0, c1 = bounds
    win = layer.data[0, r0:r1, c0:c1]
    valid = win != np.float32(layer.nodata)
    if not valid.any():
        raise NodataContaminationError(f"{name} layer is nodata over the whole window")
    return float(win[valid].astype(np.float64).mean())


def summarize_site(
    basemap: RasterGrid,
    ndvi: RasterGrid,
    height: RasterGrid,
    building_fraction: RasterGrid,
    impervious: RasterGrid,
    water: RasterGrid,
    center: tuple[int, int],
    size: int = 32,
    *,
    tree: Optional[RasterGrid] = None,
    flag_layers: Optional[Mapping[str, RasterGrid]] = None,
) -> SiteSummary:
    """Average the stacked guide layers over the patch window at ``center``.

    Flag layers hold 0/1 indicators; a flag is raised when its window mean is
    at least 0.5.
    """
    layers = {
        "ndvi": ndvi, "height": height, "building_fraction": building_fraction,
        "impervious": impervious, "water": water,
    }
    if tree is not None:
        layers["tree"] = tree
    for name, lyr in {**layers, **(flag_layers or {})}.items():
        if not lyr.same_geometry(basemap):
            raise GeometryMismatchError(f"{name} layer is not co-registered with the basemap")
    bounds = window_bounds(center[0], center[1], size)
    r0, r1, c0, c1 = bounds
    if r0 < 0 or c0 < 0 or r1 > basemap.height or c1 > basemap.width:
        raise OutOfBoundsError(f"site window at {center} exceeds the raster")

    def frac(name):
        return min(1.0, max(0.0, _window_mean(layers[name], bounds, name)))

    flags = set()
    for name, lyr in (flag_layers or {}).items():
        if _window_mean(lyr, bounds, name) >= 0.5:
            flags.add(name)
    return SiteSummary(
        mean_building_height_m=max(0.0, _window_mean(height, bounds, "height")),
        building_fraction=frac("building_fraction"),
        mean_ndvi=_window_mean(ndvi, bounds, "ndvi"),
        impervious_fraction=frac("impervious"),
        water_fraction=frac("water"),
        tree_fraction=frac("tree") if tree is not None else None,
        flags=frozenset(flags),
    )
