"""Procedural street scenes and a synthetic city with planted gentrification.

Scenes are flat-colour rectangles: sky, a row of buildings standing on a
road band, and a speckled verge.  A *structural* edit is directional, the
way reinvestment is: a new modern building is added, an old one is
refaced in modern style (window grid), or one is demolished leaving a
construction hoarding.  *Nuisance* edits jitter global brightness, park
small vehicles on the road and, at a rate set per tract, refit a ground-floor
storefront.  Every artefact is a pure function of the configuration and seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from .geodata import GeoCoordinate, TractPolygon, tracts_to_geojson
from .images import write_png
from .ingest import (
    Label, NeighborhoodContainer, PairLabel, Source, StreetViewImage, TimedPair,
    pair_record, write_jsonl, write_labels_csv,
)

BUILDING_COLORS = np.array([
    [150, 60, 50], [180, 120, 80], [210, 190, 150], [120, 120, 130], [90, 70, 60],
    [60, 90, 140], [200, 200, 200], [160, 40, 40], [100, 130, 90], [230, 210, 120],
], dtype=np.int16)
VEHICLE_COLORS = np.array([
    [220, 30, 30], [30, 30, 220], [240, 240, 240], [20, 20, 20], [230, 200, 30],
], dtype=np.int16)
MODERN_COLORS = np.array([
    [90, 170, 190], [235, 235, 225], [70, 90, 110], [150, 200, 210],
], dtype=np.int16)
HOARDING = np.array([235, 150, 30], dtype=np.int16)
SKY = np.array([150, 190, 230], dtype=np.int16)
ROAD = np.array([70, 70, 75], dtype=np.int16)
VERGE = np.array([110, 120, 90], dtype=np.int16)
LEAF = np.array([40, 110, 40], dtype=np.int16)


class SynthError(ValueError):
    pass


@dataclass
class SynthConfig:
    seed: int = 0
    n_tracts: int = 60
    K: int = 100
    rho_gentrifying: float = 0.15
    rho_non: float = 0.02
    image_side: int = 64
    nuisance_level: float = 1.0
    churn_max: float = 1.0
    n_step1: int = 2000
    tract_size_deg: float = 0.01
    origin_lat: float = 37.75
    origin_lon: float = -122.30

    def __post_init__(self):
        if not 0.0 <= self.rho_non < self.rho_gentrifying <= 1.0:
            raise SynthError("need 0 <= rho_non < rho_gentrifying <= 1")
        if not 0.0 <= self.nuisance_level <= 1.0:
            raise SynthError("nuisance_level must lie in [0, 1]")
        if not 0.0 <= self.churn_max <= 1.0:
            raise SynthError("churn_max must lie in [0, 1]")
        if self.image_side < 16:
            raise SynthError("image_side must be at least 16 px")


@dataclass(frozen=True)
class CaptureStyle:
    """Neighborhood-wide capture conditions shared by every pair of a tract.

    ``light`` in [-1, 1] is the tract's lighting drift between capture
    campaigns; ``modern_share`` is the prior fraction of modern facades;
    ``churn`` is the share of unchanged scenes that still get a minor
    storefront renovation, a change that is not a gentrification signal.
    """
    light: float = 0.0
    modern_share: float = 0.2
    churn: float = 0.0


def draw_style(rng: np.random.Generator, churn_max: float = 0.0) -> CaptureStyle:
    light, share = float(rng.uniform(-1, 1)), float(rng.uniform(0.0, 0.4))
    return CaptureStyle(light, share, float(rng.uniform(0.0, churn_max)) if churn_max > 0 else 0.0)


def _stream(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


@dataclass
class Scene:
    earlier: np.ndarray
    later: np.ndarray
    edit: dict | None = None


def _layout(side):
    ground = int(round(0.69 * side))
    road_end = int(round(0.875 * side))
    return ground, road_end


def _paint_modern(img, bbox, color):
    y0, y1, x0, x1 = bbox
    img[y0:y1, x0:x1] = color
    lighter = np.minimum(color + 45, 255)
    img[y0 + 1:y1:3, x0 + 1:x1 - 1] = lighter


def _paint_hoarding(img, bbox, side):
    y0, y1, x0, x1 = bbox
    img[y0:y1, x0:x1] = img[0, 0]
    h = max(3, int(round(6 * side / 64.0)))
    img[y1 - h:y1, x0:x1] = HOARDING
    img[y1 - h:y1, x0:x1:3] = HOARDING // 2


def _base_scene(rng, side, modern_share=0.2):
    s = side / 64.0
    ground, road_end = _layout(side)
    img = np.empty((side, side, 3), dtype=np.int16)
    img[:ground] = SKY + rng.integers(-15, 16, 3)
    img[ground:road_end] = ROAD
    img[road_end:] = VERGE
    speck = rng.random((side - road_end, side)) < 0.25
    img[road_end:][speck] = LEAF
    buildings = []
    n = int(rng.integers(2, 6))
    x = int(rng.integers(0, int(4 * s) + 1))
    for _ in range(n):
        w = int(rng.integers(int(8 * s), int(16 * s) + 1))
        if x + w > side:
            break
        h = int(rng.integers(int(10 * s), int(30 * s) + 1))
        modern = bool(rng.random() < modern_share)
        palette = MODERN_COLORS if modern else BUILDING_COLORS
        color = palette[rng.integers(len(palette))]
        buildings.append({"bbox": [ground - h, ground, x, x + w], "color": color.tolist(),
                          "modern": modern})
        x += w + int(rng.integers(int(2 * s), int(8 * s) + 1))
    for b in buildings:
        if b["modern"]:
            _paint_modern(img, b["bbox"], np.array(b["color"]))
        else:
            y0, y1, x0, x1 = b["bbox"]
            img[y0:y1, x0:x1] = b["color"]
    return img, buildings


def _free_slot(buildings, side, rng):
    s = side / 64.0
    ground, _ = _layout(side)
    occupied = sorted((b["bbox"][2], b["bbox"][3]) for b in buildings)
    gaps, cursor = [], 0
    for x0, x1 in occupied:
        if x0 - cursor >= int(8 * s) + 2:
            gaps.append((cursor + 1, x0 - 1))
        cursor = max(cursor, x1)
    if side - cursor >= int(8 * s) + 1:
        gaps.append((cursor + 1, side))
    if not gaps:
        return None
    g0, g1 = gaps[int(rng.integers(len(gaps)))]
    w = int(rng.integers(int(8 * s), min(int(16 * s), g1 - g0) + 1))
    x0 = int(rng.integers(g0, g1 - w + 1))
    h = int(rng.integers(int(16 * s), int(32 * s) + 1))
    return [ground - h, ground, x0, x0 + w]


def _structural_edit(img, buildings, rng, side):
    kinds = ["add", "remove", "recolor"]
    kind = kinds[int(rng.integers(3))]
    if kind == "add":
        bbox = _free_slot(buildings, side, rng)
        if bbox is None:
            kind = "recolor"
    if kind == "remove" and len(buildings) < 2:
        kind = "recolor"
    if kind == "add":
        _paint_modern(img, bbox, MODERN_COLORS[rng.integers(len(MODERN_COLORS))])
        return {"kind": "add", "bbox": bbox}
    old = [b for b in buildings if not b["modern"]] or buildings
    b = old[int(rng.integers(len(old)))]
    if kind == "remove":
        _paint_hoarding(img, b["bbox"], side)
        return {"kind": "remove", "bbox": b["bbox"]}
    prev = np.array(b["color"])
    fresh = [c for c in MODERN_COLORS if np.abs(c - prev).sum() >= 60]
    _paint_modern(img, b["bbox"], fresh[int(rng.integers(len(fresh)))])
    return {"kind": "recolor", "bbox": b["bbox"]}


STOREFRONT_FRAC = 0.25


def _storefront(img, buildings, rng, side):
    """Refit the ground floor of one building with a modern shopfront."""
    b = buildings[int(rng.integers(len(buildings)))]
    y0, y1, x0, x1 = b["bbox"]
    top = y1 - max(2, int((y1 - y0) * STOREFRONT_FRAC))
    _paint_modern(img, (top, y1, x0, x1), MODERN_COLORS[rng.integers(len(MODERN_COLORS))])
    return {"kind": "storefront", "bbox": (top, y1, x0, x1)}


def _vehicles(img, rng, side, count):
    s = side / 64.0
    ground, road_end = _layout(side)
    for _ in range(count):
        h = max(2, int(round(4 * s)))
        lo = max(3, int(5 * s))
        w = int(rng.integers(lo, max(lo, int(8 * s)) + 1))
        y0 = int(rng.integers(ground + 1, max(ground + 2, road_end - h)))
        x0 = int(rng.integers(0, side - w))
        img[y0:y0 + h, x0:x0 + w] = VEHICLE_COLORS[rng.integers(len(VEHICLE_COLORS))]


def render_scene_pair(seed, change: bool, config: SynthConfig, style: CaptureStyle | None = None) -> Scene:
    """Earlier/later uint8 images of one scene.  ``edit`` logs the structural change.

    Without a ``style`` the scene draws its own capture conditions.
    """
    rng = _stream(*np.atleast_1d(seed).tolist())
    side = config.image_side
    style = style or draw_style(rng)
    base, buildings = _base_scene(rng, side, style.modern_share)
    earlier = base.copy()
    later = base.copy()
    edit = _structural_edit(later, buildings, rng, side) if change else None
    level = config.nuisance_level
    if level > 0:
        if not change and style.churn > 0 and rng.random() < style.churn * level:
            edit = _storefront(later, buildings, rng, side)
        _vehicles(earlier, rng, side, int(rng.integers(0, 3)))
        _vehicles(later, rng, side, int(rng.integers(1, 4)))
        drift = 0.7 * style.light + 0.3 * float(rng.uniform(-1, 1))
        factor = 1.0 + 0.15 * level * drift
        later = np.rint(later * factor)
    return Scene(np.clip(earlier, 0, 255).astype(np.uint8), np.clip(later, 0, 255).astype(np.uint8), edit)


def _random_date(rng, start: date, end: date) -> date:
    return start + timedelta(days=int(rng.integers(0, (end - start).days + 1)))


def gen_scene_pair(seed, change: bool, config: SynthConfig, images: dict | None = None,
                   scene_id: str | None = None, location: GeoCoordinate | None = None,
                   window=((date(2007, 1, 1), date(2010, 12, 31)), (date(2018, 1, 1), date(2022, 12, 31))),
                   style: CaptureStyle | None = None) -> tuple[TimedPair, PairLabel]:
    """Render a scene pair and wrap it as a labelled ``TimedPair``.

    Pixels go into ``images`` keyed by each image's ``pixels_ref``.
    """
    scene = render_scene_pair(seed, change, config, style)
    meta = _stream(*(np.atleast_1d(seed).tolist()), 7)
    scene_id = scene_id or f"scene{int(np.atleast_1d(seed)[-1]):06d}"
    location = location or GeoCoordinate(config.origin_lat, config.origin_lon)
    heading = float(meta.integers(0, 360))
    (e0, e1), (l0, l1) = window
    e = StreetViewImage(f"{scene_id}e", location, heading, _random_date(meta, e0, e1), f"images/{scene_id}e.png")
    l = StreetViewImage(f"{scene_id}l", location, heading, _random_date(meta, l0, l1), f"images/{scene_id}l.png")
    if images is not None:
        images[e.pixels_ref] = scene.earlier
        images[l.pixels_ref] = scene.later
    return TimedPair(e, l), PairLabel(int(change), Source.SYNTHETIC)


@dataclass
class SynthCity:
    config: SynthConfig
    tracts: list[TractPolygon]
    labels: dict[str, Label]
    containers: list[NeighborhoodContainer]
    step1_pairs: list[tuple[TimedPair, PairLabel]]
    planted: list[dict]
    images: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    styles: dict[str, CaptureStyle] = field(default_factory=dict)

    def loader(self, ref: str) -> np.ndarray:
        return self.images[ref]

    def archive(self) -> list[StreetViewImage]:
        out = []
        for c in self.containers:
            for p in c.pairs:
                out += [p.earlier, p.later]
        return out


def _grid_tracts(config: SynthConfig) -> list[TractPolygon]:
    cols = math.ceil(math.sqrt(config.n_tracts))
    step = config.tract_size_deg
    tracts = []
    for i in range(config.n_tracts):
        r, c = divmod(i, cols)
        lat0 = config.origin_lat + r * step
        lon0 = config.origin_lon + c * step
        ring = (GeoCoordinate(lat0, lon0), GeoCoordinate(lat0, lon0 + step),
                GeoCoordinate(lat0 + step, lon0 + step), GeoCoordinate(lat0 + step, lon0),
                GeoCoordinate(lat0, lon0))
        tracts.append(TractPolygon(f"T{i:04d}", ring))
    return tracts


STEP1_STREAM, BAG_STREAM, LAYOUT_STREAM = 1, 2, 3


def gen_city(config: SynthConfig) -> SynthCity:
    """Grid of tracts with alternating labels and planted positive pairs.

    Gentrifying bags hold ``round(rho_gentrifying * K)`` change pairs, the
    others ``round(rho_non * K)``.  A separate, balanced Step-1 pair set is
    drawn from its own seed stream so it never overlaps bag pairs.
    """
    if config.n_tracts < 4:
        raise SynthError("need at least 4 tracts (2 per class)")
    for rho in (config.rho_gentrifying, config.rho_non):
        if rho > 0 and rho * config.K < 1:
            raise SynthError(f"rho={rho} plants fewer than one pair in a bag of K={config.K}")
    tracts = _grid_tracts(config)
    labels = {t.tract_id: (Label.GENTRIFYING if i % 2 == 0 else Label.NON_GENTRIFYING)
              for i, t in enumerate(tracts)}
    images: dict[str, np.ndarray] = {}
    containers, planted, styles = [], [], {}
    margin = 0.05 * config.tract_size_deg
    for ti, tract in enumerate(tracts):
        lab = labels[tract.tract_id]
        rho = config.rho_gentrifying if lab is Label.GENTRIFYING else config.rho_non
        n_pos = int(round(rho * config.K))
        lay = _stream(config.seed, LAYOUT_STREAM, ti)
        style = draw_style(lay, config.churn_max)
        styles[tract.tract_id] = style
        positives = set(lay.choice(config.K, size=n_pos, replace=False).tolist())
        lat0, lon0 = tract.ring[0].lat, tract.ring[0].lon
        pairs = []
        for k in range(config.K):
            loc = GeoCoordinate(lat0 + float(lay.uniform(margin, config.tract_size_deg - margin)),
                                lon0 + float(lay.uniform(margin, config.tract_size_deg - margin)))
            change = k in positives
            pair, _ = gen_scene_pair([config.seed, BAG_STREAM, ti, k], change, config, images,
                                     scene_id=f"{tract.tract_id}_{k:03d}", location=loc, style=style)
            pairs.append(pair)
            if change:
                planted.append({"tract_id": tract.tract_id, "pair_id": pair.pair_id})
        containers.append(NeighborhoodContainer(tract, pairs, lab))
    step1 = []
    lat_hi = max(t.ring[2].lat for t in tracts)
    lon_hi = max(t.ring[2].lon for t in tracts)
    sw = (date(2007, 1, 1), date(2012, 12, 31)), (date(2014, 1, 1), date(2022, 12, 31))
    for i in range(config.n_step1):
        lay = _stream(config.seed, STEP1_STREAM, i, 1)
        loc = GeoCoordinate(float(lay.uniform(config.origin_lat, lat_hi)),
                            float(lay.uniform(config.origin_lon, lon_hi)))
        step1.append(gen_scene_pair([config.seed, STEP1_STREAM, i], i % 2 == 0, config, images,
                                    scene_id=f"S1_{i:05d}", location=loc, window=sw))
    return SynthCity(config, tracts, labels, containers, step1, planted, images, styles)


def write_city(city: SynthCity, out_dir: str | Path) -> Path:
    """Export images (PNG) and manifests in the same formats ``ingest`` produces."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for ref in sorted(city.images):
        write_png(out / ref, city.images[ref])
    write_jsonl(out / "pairs.jsonl", (pair_record(p, l) for p, l in city.step1_pairs))
    write_jsonl(out / "containers.jsonl", (c.to_dict() for c in city.containers))
    write_jsonl(out / "planted.jsonl", city.planted)
    write_jsonl(out / "archive.jsonl", (im.to_dict() for im in city.archive()))
    (out / "tracts.geojson").write_text(json.dumps(tracts_to_geojson(city.tracts), sort_keys=True) + "\n")
    write_labels_csv(out / "labels.csv", city.labels)
    (out / "synth_config.json").write_text(json.dumps(asdict(city.config), indent=2, sort_keys=True) + "\n")
    return out
