"""Footprint and raster ingestion, crop extraction and node feature assembly."""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np
from PIL import Image

from .geometry import Envelope, Point, Polygon

log = logging.getLogger(__name__)

CROP_SIZE = 128
CHANNELS = 3
META_DIM = 20

NUMERIC_FIELDS = (
    "apartments",
    "mean_dsm",
    "mean_height",
    "area",
    "perimeter",
    "built_year",
    "floors",
    "era",
)
HERITAGE_VALUES = ("yes", "no")
FUNCTION_VALUES = (
    "residential",
    "commercial",
    "mixed_use",
    "religious",
    "educational",
    "governmental",
    "industrial",
    "healthcare",
    "cultural",
    "hospitality",
)
# numeric values never encode to exactly zero; zero is reserved for "missing"
NUMERIC_FLOOR = 0.01


class IngestError(ValueError):
    pass


@dataclass
class BuildingRecord:
    id: str
    polygon: Polygon
    label: Optional[int] = None
    chip_id: Optional[str] = None
    meta_raw: dict[str, Any] = field(default_factory=dict)


@dataclass
class RasterImage:
    """8-bit RGB image with an affine pixel->world geotransform ``(a, b, c, d, e, f)``.

    ``x = a + b*col + c*row`` and ``y = d + e*col + f*row``, where (col, row)
    are pixel-corner coordinates.
    """

    data: np.ndarray  # (height, width, 3) uint8
    geotransform: tuple[float, float, float, float, float, float]

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or self.data.shape[2] != CHANNELS:
            raise IngestError(f"raster must be HxWx3, got {self.data.shape}")
        if self.data.dtype != np.uint8:
            raise IngestError(f"raster must be uint8, got {self.data.dtype}")
        if self.height < 1 or self.width < 1:
            raise IngestError("empty raster")
        self.geotransform = tuple(float(v) for v in self.geotransform)
        if len(self.geotransform) != 6:
            raise IngestError("geotransform needs 6 coefficients")
        _check_invertible(self.geotransform)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def _check_invertible(t) -> float:
    det = t[1] * t[5] - t[2] * t[4]
    if det == 0:
        raise IngestError(f"singular geotransform {tuple(t)}")
    return det


def pixel_to_world(transform, col: float, row: float) -> Point:
    a, b, c, d, e, f = transform
    return Point(a + b * col + c * row, d + e * col + f * row)


def world_to_pixel(transform, p: Point) -> tuple[float, float]:
    """Invert the geotransform: world point -> fractional (col, row)."""
    a, b, c, d, e, f = transform
    det = _check_invertible(transform)
    dx, dy = p.x - a, p.y - d
    col = (f * dx - c * dy) / det
    row = (-e * dx + b * dy) / det
    return col, row


# -- files -------------------------------------------------------------------

def load_raster(png_path: str | Path, sidecar_path: str | Path | None = None) -> RasterImage:
    """Read an RGB PNG and its JSON geotransform sidecar (default: same stem, ``.json``)."""
    png_path = Path(png_path)
    sidecar_path = Path(sidecar_path) if sidecar_path else png_path.with_suffix(".json")
    if not png_path.exists():
        raise IngestError(f"raster not found: {png_path}")
    if not sidecar_path.exists():
        raise IngestError(f"geotransform sidecar not found: {sidecar_path}")
    with Image.open(png_path) as im:
        data = np.asarray(im.convert("RGB"), dtype=np.uint8)
    try:
        side = json.loads(sidecar_path.read_text())
        gt = side["geotransform"] if isinstance(side, dict) else side
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise IngestError(f"bad sidecar {sidecar_path}: {exc}") from exc
    return RasterImage(data, tuple(gt))


def save_raster(raster: RasterImage, png_path: str | Path) -> None:
    png_path = Path(png_path)
    Image.fromarray(raster.data, mode="RGB").save(png_path)
    png_path.with_suffix(".json").write_text(
        json.dumps({"geotransform": list(raster.geotransform)}, indent=2))


def load_footprints(path: str | Path, *, label_key: str = "label", meta_key: str = "meta",
                    chip_key: str = "chip_id", id_key: str = "id") -> list[BuildingRecord]:
    """Parse a GeoJSON FeatureCollection of Polygon features.

    The building id comes from ``properties[id_key]`` or, failing that, the
    feature-level ``id``. Only the exterior ring is used.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise IngestError(f"footprint file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise IngestError(f"malformed JSON in {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
        raise IngestError(f"{path} is not a GeoJSON FeatureCollection")

    records, seen = [], set()
    for k, feat in enumerate(doc.get("features", [])):
        geom = feat.get("geometry") or {}
        kind = geom.get("type")
        if kind != "Polygon":
            raise IngestError(f"feature {k}: unsupported geometry kind {kind!r} (Polygon only)")
        props = feat.get("properties") or {}
        fid = props.get(id_key, feat.get("id"))
        if fid is None:
            raise IngestError(f"feature {k}: missing id")
        fid = str(fid)
        if fid in seen:
            raise IngestError(f"duplicate building id {fid!r}")
        seen.add(fid)
        try:
            polygon = Polygon.from_coords(geom["coordinates"][0])
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise IngestError(f"feature {fid}: bad polygon: {exc}") from exc
        label = props.get(label_key)
        records.append(BuildingRecord(
            id=fid,
            polygon=polygon,
            label=None if label is None else int(label),
            chip_id=None if props.get(chip_key) is None else str(props[chip_key]),
            meta_raw=dict(props.get(meta_key) or {}),
        ))
    return records


def save_footprints(records: Sequence[BuildingRecord], path: str | Path) -> None:
    feats = []
    for r in records:
        ring = [[p.x, p.y] for p in r.polygon.ring]
        ring.append(ring[0])
        props = {"id": r.id, "label": r.label, "meta": r.meta_raw}
        if r.chip_id is not None:
            props["chip_id"] = r.chip_id
        feats.append({"type": "Feature", "id": r.id,
                      "geometry": {"type": "Polygon", "coordinates": [ring]},
                      "properties": props})
    Path(path).write_text(json.dumps({"type": "FeatureCollection", "features": feats}))


# -- crops -------------------------------------------------------------------

def bilinear_sample(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample ``img`` (H, W, C) at fractional pixel-centre positions.

    ``rows``/``cols`` are broadcastable index-space coordinates where integer
    values hit pixel centres. Neighbours outside the image count as zero.
    """
    h, w = img.shape[:2]
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = (rows - r0)[..., None]
    fc = (cols - c0)[..., None]
    out = 0.0
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr, cc = r0 + dr, c0 + dc
            ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            vals = img[np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)]
            out = out + np.where(ok[..., None], vals, 0.0) * (wr * wc)
    return out


def envelope_window(raster: RasterImage, env: Envelope) -> tuple[float, float, float, float]:
    """Pixel-space bounding window (col0, row0, col1, row1) of an envelope."""
    corners = [world_to_pixel(raster.geotransform, Point(x, y))
               for x in (env.min.x, env.max.x) for y in (env.min.y, env.max.y)]
    cols = [c for c, _ in corners]
    rows = [r for _, r in corners]
    return min(cols), min(rows), max(cols), max(rows)


def extract_crop(raster: RasterImage, env: Envelope, size: int = CROP_SIZE) -> np.ndarray:
    """Resample the envelope window to ``size`` x ``size`` x 3 floats in [0, 1].

    Output pixel centres are spread uniformly over the window and sampled
    bilinearly; area outside the raster reads as zero.
    """
    c0, r0, c1, r1 = envelope_window(raster, env)
    if c1 <= 0 or r1 <= 0 or c0 >= raster.width or r0 >= raster.height or c1 <= c0 or r1 <= r0:
        raise IngestError(f"envelope {env} falls outside the raster")
    k = np.arange(size, dtype=np.float64) + 0.5
    rows = r0 + k * (r1 - r0) / size - 0.5
    cols = c0 + k * (c1 - c0) / size - 0.5
    img = raster.data.astype(np.float64) / 255.0
    crop = bilinear_sample(img, rows[:, None], cols[None, :])
    return np.clip(crop, 0.0, 1.0).astype(np.float32)


# -- meta features -----------------------------------------------------------

@dataclass
class MetaSchema:
    """20-slot meta layout: 8 min-max numeric fields, heritage one-hot (2), function one-hot (10)."""

    minimum: dict[str, float]
    maximum: dict[str, float]
    heritage: tuple[str, ...] = HERITAGE_VALUES
    functions: tuple[str, ...] = FUNCTION_VALUES
    clamp_warnings: Counter = field(default_factory=Counter, compare=False)

    def __post_init__(self):
        self.heritage = tuple(self.heritage)
        self.functions = tuple(self.functions)
        if len(NUMERIC_FIELDS) + len(self.heritage) + len(self.functions) != META_DIM:
            raise IngestError("meta layout must total 20 slots")
        for name in NUMERIC_FIELDS:
            lo, hi = self.minimum.get(name), self.maximum.get(name)
            if lo is None or hi is None or not lo < hi:
                raise IngestError(f"schema field {name!r} needs min < max, got {lo}, {hi}")

    @classmethod
    def calibrate(cls, records: Sequence[BuildingRecord], **kw) -> "MetaSchema":
        """Min/max per numeric field over the non-missing values of ``records``."""
        lo, hi = {}, {}
        for name in NUMERIC_FIELDS:
            vals = [v for v in (_numeric(r.meta_raw.get(name)) for r in records) if v is not None]
            a, b = (min(vals), max(vals)) if vals else (0.0, 1.0)
            if not a < b:
                b = a + 1.0
            lo[name], hi[name] = float(a), float(b)
        return cls(lo, hi, **kw)

    def to_json(self) -> dict:
        return {"minimum": self.minimum, "maximum": self.maximum,
                "heritage": list(self.heritage), "functions": list(self.functions)}

    @classmethod
    def from_json(cls, doc: Mapping) -> "MetaSchema":
        return cls(dict(doc["minimum"]), dict(doc["maximum"]),
                   tuple(doc.get("heritage", HERITAGE_VALUES)),
                   tuple(doc.get("functions", FUNCTION_VALUES)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "MetaSchema":
        return cls.from_json(json.loads(Path(path).read_text()))


def _numeric(v) -> Optional[float]:
    if v is None or isinstance(v, bool):
        return None
    try:
        f = float(v)
    except (TypeError, ValueError):
        return None
    return f if np.isfinite(f) else None


def encode_meta(record: BuildingRecord, schema: MetaSchema) -> np.ndarray:
    out = np.zeros(META_DIM, dtype=np.float32)
    for k, name in enumerate(NUMERIC_FIELDS):
        v = _numeric(record.meta_raw.get(name))
        if v is None:
            continue
        lo, hi = schema.minimum[name], schema.maximum[name]
        if v < lo or v > hi:
            schema.clamp_warnings[name] += 1
            v = min(max(v, lo), hi)
        out[k] = NUMERIC_FLOOR + (1.0 - NUMERIC_FLOOR) * (v - lo) / (hi - lo)
    off = len(NUMERIC_FIELDS)
    her = record.meta_raw.get("heritage")
    if isinstance(her, str) and her.lower() in schema.heritage:
        out[off + schema.heritage.index(her.lower())] = 1.0
    off += len(schema.heritage)
    fn = record.meta_raw.get("function")
    if isinstance(fn, str) and fn.lower() in schema.functions:
        out[off + schema.functions.index(fn.lower())] = 1.0
    return out


def node_feature_vector(pre: np.ndarray, post: np.ndarray, meta: Optional[np.ndarray] = None) -> np.ndarray:
    """Flatten (pre, post[, meta]) into one float32 vector."""
    if pre.shape != post.shape or pre.ndim != 3 or pre.shape[2] != CHANNELS:
        raise IngestError(f"crop shapes {pre.shape} / {post.shape} are not matching HxWx3")
    parts = [pre.reshape(-1), post.reshape(-1)]
    if meta is not None:
        meta = np.asarray(meta, dtype=np.float32).reshape(-1)
        if meta.size != META_DIM:
            raise IngestError(f"meta vector must have {META_DIM} entries, got {meta.size}")
        parts.append(meta)
    return np.concatenate(parts).astype(np.float32)


def feature_matrix(pres: Sequence[np.ndarray], posts: Sequence[np.ndarray],
                   metas: Optional[Sequence[Optional[np.ndarray]]] = None) -> np.ndarray:
    """Stack node vectors for one region; meta must be present for all nodes or none."""
    if metas is not None:
        present = [m is not None for m in metas]
        if any(present) and not all(present):
            raise IngestError("meta features must be present for every building in a region or for none")
        if not any(present):
            metas = None
    rows = [node_feature_vector(a, b, None if metas is None else metas[i])
            for i, (a, b) in enumerate(zip(pres, posts))]
    return np.stack(rows) if rows else np.zeros((0, 0), dtype=np.float32)


def split_feature_vector(v: np.ndarray, crop_size: int = CROP_SIZE):
    """Inverse of :func:`node_feature_vector`: (pre, post, meta-or-None)."""
    m = crop_size * crop_size * CHANNELS
    pre = v[..., :m].reshape(v.shape[:-1] + (crop_size, crop_size, CHANNELS))
    post = v[..., m:2 * m].reshape(v.shape[:-1] + (crop_size, crop_size, CHANNELS))
    meta = v[..., 2 * m:] if v.shape[-1] > 2 * m else None
    return pre, post, meta
