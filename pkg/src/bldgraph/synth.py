"""Synthetic disaster scenarios with known ground truth.

A city of rotated rectangular footprints is laid out on a jittered grid.
Damage intensity decays with distance from an epicentre and scales with a
latent per-building susceptibility; meta attributes can be made to correlate
with that susceptibility. Pre/post rasters encode damage as a brightness drop
plus speckle inside each damaged footprint.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .geometry import Point, Polygon
from .ingest import (FUNCTION_VALUES, BuildingRecord, RasterImage, load_footprints, load_raster,
                     save_footprints, save_raster)

LATENT_KEY = "_susceptibility"
BRIGHTNESS_DROP = 0.15
SPECKLE_SD = 0.05
RASTER_MARGIN = 16  # pixels around the city extent


@dataclass(frozen=True)
class CityConfig:
    n_buildings: int = 300
    extent: float = 600.0
    origin: tuple[float, float] = (0.0, 0.0)
    footprint_range: tuple[float, float] = (8.0, 20.0)
    max_rotation_deg: float = 30.0
    epicenter: Optional[tuple[float, float]] = None  # default: centre of the extent
    radius: float = 150.0
    thresholds: tuple[float, ...] = (0.3, 0.7)
    noise_sd: float = 0.05
    meta_correlation: float = 0.0
    meta_missing: float = 0.2
    appearance_sd: float = 0.0  # per-building post brightness nuisance, independent of damage
    resolution: float = 1.0  # metres per pixel
    seed: int = 0

    def __post_init__(self):
        th = tuple(float(t) for t in self.thresholds)
        object.__setattr__(self, "thresholds", th)
        if any(b <= a for a, b in zip(th, th[1:])) or any(not 0 < t < 1 for t in th) or not th:
            raise ValueError(f"thresholds must be ascending values in (0, 1), got {th}")
        if not self.radius > 0:
            raise ValueError("decay radius must be positive")
        if not self.extent > 0 or not self.resolution > 0:
            raise ValueError("extent and resolution must be positive")
        if self.n_buildings < 0:
            raise ValueError("building count must be non-negative")
        lo, hi = self.footprint_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad footprint range {self.footprint_range}")
        if not -1 <= self.meta_correlation <= 1:
            raise ValueError("meta_correlation must lie in [-1, 1]")
        if not 0 <= self.meta_missing < 1:
            raise ValueError("meta_missing must lie in [0, 1)")

    @property
    def num_classes(self) -> int:
        return len(self.thresholds) + 1

    @property
    def center(self) -> Point:
        if self.epicenter is not None:
            return Point(*map(float, self.epicenter))
        return Point(self.origin[0] + self.extent / 2, self.origin[1] + self.extent / 2)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("layout", "meta", "damage", "render")
    kids = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(k) for n, k in zip(names, kids)}


def _rect(cx: float, cy: float, w: float, h: float, theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    local = np.array([[-w / 2, -h / 2], [w / 2, -h / 2], [w / 2, h / 2], [-w / 2, h / 2]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + (cx, cy)


def generate_city(cfg: CityConfig) -> list[BuildingRecord]:
    """Footprints plus raw meta attributes; labels are left unset."""
    n = cfg.n_buildings
    if n == 0:
        return []
    rng = _streams(cfg.seed)
    g = math.ceil(math.sqrt(n))
    cell = cfg.extent / g
    lo, hi = cfg.footprint_range
    theta_max = math.radians(cfg.max_rotation_deg)
    # worst-case half bounding box of a rotated footprint
    reach = hi * (math.cos(min(theta_max, math.pi / 4)) + math.sin(min(theta_max, math.pi / 4))) / 2
    if 2 * reach >= cell:
        raise ValueError(f"{n} footprints of up to {hi} m cannot fit a {cfg.extent} m extent")

    lay = rng["layout"]
    cells = np.sort(lay.permutation(g * g)[:n])
    records = []
    for k, c in enumerate(cells):
        gi, gj = divmod(int(c), g)
        w, h = lay.uniform(lo, hi, size=2)
        theta = lay.uniform(-theta_max, theta_max)
        ring = _rect(0.0, 0.0, w, h, theta)
        hx, hy = np.abs(ring).max(axis=0)
        x0 = cfg.origin[0] + gj * cell
        y0 = cfg.origin[1] + gi * cell
        cx = lay.uniform(x0 + hx, x0 + cell - hx)
        cy = lay.uniform(y0 + hy, y0 + cell - hy)
        poly = Polygon.from_coords(ring + (cx, cy))
        records.append(BuildingRecord(id=f"b{k:05d}", polygon=poly))

    s = rng["layout"].uniform(0.5, 1.5, size=n)
    _sample_meta(records, s, cfg, rng["meta"])
    return records


def _sample_meta(records, s, cfg: CityConfig, rng: np.random.Generator) -> None:
    n = len(records)
    rho = cfg.meta_correlation
    z = (s - 1.0) * math.sqrt(12.0)  # standardised susceptibility

    def linked():
        return rho * z + math.sqrt(1 - rho * rho) * rng.standard_normal(n)

    year = np.clip(np.round(1960 - 35 * linked()), 1219, 2021)
    era = np.digitize(year, [1920, 1943, 1975, 1990]) + 1
    floors = np.clip(np.round(4 + 2.0 * linked()), 1, 26)
    apartments = np.clip(np.round(floors * rng.uniform(0.5, 2.5, n)), 1, 60)
    height = floors * 3.1 + rng.normal(0, 1.0, n)
    dsm = height + 25 + rng.normal(0, 3.0, n)
    heritage_score = linked()
    function = rng.integers(0, len(FUNCTION_VALUES) + 1, n)  # last index means "Other"

    for i, r in enumerate(records):
        meta = {
            "apartments": float(apartments[i]),
            "mean_dsm": round(float(dsm[i]), 2),
            "mean_height": round(float(max(height[i], 1.0)), 2),
            "area": round(r.polygon.area(), 2),
            "perimeter": round(r.polygon.perimeter(), 2),
            "built_year": float(year[i]),
            "floors": float(floors[i]),
            "era": float(era[i]),
            "heritage": "yes" if heritage_score[i] > 1.0 else ("no" if heritage_score[i] > -1.5 else "Other"),
            "function": FUNCTION_VALUES[function[i]] if function[i] < len(FUNCTION_VALUES) else "Other",
        }
        drop = rng.random(len(meta)) < cfg.meta_missing
        for key, gone in zip(list(meta), drop):
            if gone:
                meta[key] = None
        meta[LATENT_KEY] = float(s[i])
        r.meta_raw = meta


def damage_intensity(distance, susceptibility, cfg: CityConfig, noise=0.0):
    return susceptibility * np.exp(-np.asarray(distance) ** 2 / (2 * cfg.radius ** 2)) + noise


def label_from_intensity(intensity, thresholds: Sequence[float]):
    k = len(thresholds)
    lab = np.sum(np.asarray(intensity)[..., None] > np.asarray(thresholds), axis=-1)
    return np.clip(lab, 0, k)


def assign_damage(records: Sequence[BuildingRecord], cfg: CityConfig) -> list[BuildingRecord]:
    rng = _streams(cfg.seed)["damage"]
    ep = cfg.center
    out = []
    for r in records:
        xy = r.polygon.as_array()
        cx, cy = (xy.min(0) + xy.max(0)) / 2
        d = math.hypot(cx - ep.x, cy - ep.y)
        s = r.meta_raw.get(LATENT_KEY, 1.0)
        eps = rng.normal(0.0, cfg.noise_sd) if cfg.noise_sd > 0 else 0.0
        y = int(label_from_intensity(damage_intensity(d, s, cfg, eps), cfg.thresholds))
        out.append(dataclasses.replace(r, label=y, meta_raw=dict(r.meta_raw)))
    return out


def raster_geotransform(cfg: CityConfig) -> tuple[float, ...]:
    res = cfg.resolution
    m = RASTER_MARGIN * res
    return (cfg.origin[0] - m, res, 0.0, cfg.origin[1] + cfg.extent + m, 0.0, -res)


def polygon_mask(ring: np.ndarray, shape: tuple[int, int], transform) -> tuple[slice, slice, np.ndarray]:
    """Pixel-centre inclusion mask of a convex polygon, restricted to its bounding window."""
    a, b, _, d, _, f = transform
    cols = (ring[:, 0] - a) / b
    rows = (ring[:, 1] - d) / f
    r0, r1 = max(int(np.floor(rows.min())), 0), min(int(np.ceil(rows.max())) + 1, shape[0])
    c0, c1 = max(int(np.floor(cols.min())), 0), min(int(np.ceil(cols.max())) + 1, shape[1])
    rr, cc = np.mgrid[r0:r1, c0:c1]
    px = np.stack([cc + 0.5, rr + 0.5], axis=-1).astype(np.float64)
    v = np.stack([cols, rows], axis=1)
    area2 = np.sum(v[:, 0] * np.roll(v[:, 1], -1) - v[:, 1] * np.roll(v[:, 0], -1))
    sign = 1.0 if area2 > 0 else -1.0
    inside = np.ones(rr.shape, dtype=bool)
    for p, q in zip(v, np.roll(v, -1, axis=0)):
        cross = (q[0] - p[0]) * (px[..., 1] - p[1]) - (q[1] - p[1]) * (px[..., 0] - p[0])
        inside &= sign * cross >= 0
    return slice(r0, r1), slice(c0, c1), inside


def render_rasters(records: Sequence[BuildingRecord], cfg: CityConfig) -> tuple[RasterImage, RasterImage]:
    rng = _streams(cfg.seed)["render"]
    gt = raster_geotransform(cfg)
    side = int(round(cfg.extent / cfg.resolution)) + 2 * RASTER_MARGIN
    if side < 8:
        raise ValueError("raster too small for the configured extent and resolution")

    rr, cc = np.mgrid[0:side, 0:side] / side
    wave = 0.04 * np.sin(2 * np.pi * (3 * rr + 2 * cc)) + 0.03 * np.cos(2 * np.pi * 5 * cc * rr)
    base = np.array([0.36, 0.42, 0.30])
    pre = base + wave[..., None] + rng.normal(0, 0.02, (side, side, 1))

    post_edits = []
    for r in records:
        rs, cs, inside = polygon_mask(r.polygon.as_array(), (side, side), gt)
        if not inside.any():
            continue
        roof = rng.uniform(0.5, 0.85) + rng.uniform(-0.05, 0.05, 3)
        inner = ndimage.binary_erosion(inside, border_value=0)
        outline = inside & ~inner
        win = pre[rs, cs]
        win[inside] = roof
        win[outline] = roof * 0.6
        y = r.label or 0
        nuisance = rng.normal(0.0, cfg.appearance_sd) if cfg.appearance_sd > 0 else 0.0
        speckle = rng.normal(0.0, SPECKLE_SD * y, inside.shape) if y > 0 else 0.0
        post_edits.append((rs, cs, inside, y, nuisance, speckle))

    pre = np.clip(pre, 0, 1)
    post = pre.copy()
    for rs, cs, inside, y, nuisance, speckle in post_edits:
        if y == 0 and nuisance == 0.0:
            continue
        win = post[rs, cs]
        delta = -BRIGHTNESS_DROP * y + nuisance + speckle
        win[inside] = np.clip(win[inside] + np.broadcast_to(delta, inside.shape)[inside][:, None], 0, 1)

    def quant(a):
        return RasterImage(np.round(a * 255).astype(np.uint8), gt)

    return quant(pre), quant(post)


@dataclass
class Scenario:
    records: list[BuildingRecord]
    pre: RasterImage
    post: RasterImage
    config: CityConfig = field(default_factory=CityConfig)

    @property
    def geotransform(self):
        return self.pre.geotransform

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records])


def make_scenario(cfg: CityConfig) -> Scenario:
    records = assign_damage(generate_city(cfg), cfg)
    pre, post = render_rasters(records, cfg)
    return Scenario(records, pre, post, cfg)


def write_scenario(sc: Scenario, out_dir: str | Path) -> dict[str, Path]:
    """Write footprints.geojson, pre/post PNG + sidecars and manifest.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"footprints": out / "footprints.geojson", "pre": out / "pre.png",
             "post": out / "post.png", "manifest": out / "manifest.json"}
    save_footprints(sc.records, paths["footprints"])
    save_raster(sc.pre, paths["pre"])
    save_raster(sc.post, paths["post"])
    manifest = {"config": sc.config.to_json(),
                "labels": {r.id: r.label for r in sc.records}}
    paths["manifest"].write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return paths


def read_scenario(out_dir: str | Path) -> Scenario:
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    cfg_doc = manifest["config"]
    cfg = CityConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg_doc.items()})
    return Scenario(load_footprints(out / "footprints.geojson"),
                    load_raster(out / "pre.png"), load_raster(out / "post.png"), cfg)
