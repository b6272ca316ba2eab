"""Weak supervision and bag construction from administrative records.

Permits and business-directory snapshots become dated ``ChangeEvent``s; each
event is matched against a street-view archive to produce one positive and
one negative ``TimedPair``.  Archive views are also grouped into per-tract
``NeighborhoodContainer`` bags for the multiple-instance stage.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import zlib
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geodata import (
    GeoCoordinate, TractPolygon, assign_tract, haversine_distance,
)

log = logging.getLogger(__name__)

ARCHIVE_START = date(2007, 1, 1)
ARCHIVE_END = date(2022, 12, 31)
BAG_EARLIER_LATEST = date(2010, 12, 31)
BAG_LATER_EARLIEST = date(2018, 1, 1)
SAME_VIEW_M = 5.0
SAME_HEADING_DEG = 5.0
KEPT_CATEGORIES = frozenset({"new", "alteration", "addition"})


class IngestError(ValueError):
    """Malformed or missing input data."""


class Label(str, Enum):
    GENTRIFYING = "gentrifying"
    NON_GENTRIFYING = "non_gentrifying"
    NON_GENTRIFIABLE = "non_gentrifiable"


class Source(str, Enum):
    PERMIT = "permit"
    BUSINESS = "business"
    SYNTHETIC = "synthetic"


def heading_gap(a: float, b: float) -> float:
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


@dataclass(frozen=True)
class StreetViewImage:
    image_id: str
    location: GeoCoordinate
    heading: float
    capture_date: date
    pixels_ref: str

    def __post_init__(self):
        if not 0.0 <= self.heading < 360.0:
            raise IngestError(f"{self.image_id}: heading {self.heading} outside [0, 360)")
        if not ARCHIVE_START <= self.capture_date <= ARCHIVE_END:
            raise IngestError(f"{self.image_id}: capture date {self.capture_date} outside archive window")

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "lat": self.location.lat,
            "lon": self.location.lon,
            "heading": self.heading,
            "capture_date": self.capture_date.isoformat(),
            "pixels_ref": self.pixels_ref,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "StreetViewImage":
        return cls(
            image_id=str(d["image_id"]),
            location=GeoCoordinate(float(d["lat"]), float(d["lon"])),
            heading=float(d["heading"]),
            capture_date=date.fromisoformat(d["capture_date"]),
            pixels_ref=str(d["pixels_ref"]),
        )


@dataclass(frozen=True)
class TimedPair:
    earlier: StreetViewImage
    later: StreetViewImage

    def __post_init__(self):
        e, l = self.earlier, self.later
        if not e.capture_date < l.capture_date:
            raise IngestError(f"pair {e.image_id}/{l.image_id}: earlier image is not earlier")
        if haversine_distance(e.location, l.location) > SAME_VIEW_M:
            raise IngestError(f"pair {e.image_id}/{l.image_id}: images more than {SAME_VIEW_M} m apart")
        if heading_gap(e.heading, l.heading) > SAME_HEADING_DEG:
            raise IngestError(f"pair {e.image_id}/{l.image_id}: headings differ by more than {SAME_HEADING_DEG} deg")

    @property
    def pair_id(self) -> str:
        return f"{self.earlier.image_id}|{self.later.image_id}"

    @property
    def location(self) -> GeoCoordinate:
        return self.earlier.location

    def in_bag_window(self) -> bool:
        return (self.earlier.capture_date <= BAG_EARLIER_LATEST
                and self.later.capture_date >= BAG_LATER_EARLIEST)

    def to_dict(self) -> dict:
        return {"pair_id": self.pair_id, "earlier": self.earlier.to_dict(), "later": self.later.to_dict()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "TimedPair":
        return cls(StreetViewImage.from_dict(d["earlier"]), StreetViewImage.from_dict(d["later"]))


@dataclass(frozen=True)
class PairLabel:
    y: int
    source: Source

    def __post_init__(self):
        if self.y not in (0, 1):
            raise IngestError(f"pair label must be 0 or 1, got {self.y}")
        object.__setattr__(self, "source", Source(self.source))


@dataclass(frozen=True)
class PermitRecord:
    issued_date: date
    category: str
    location: GeoCoordinate
    job_value_nominal: float
    year: int

    def __post_init__(self):
        if not self.job_value_nominal >= 0:
            raise IngestError(f"negative job value {self.job_value_nominal}")


@dataclass(frozen=True)
class BusinessRecord:
    business_id: str
    naics: str
    location: GeoCoordinate
    year: int

    def __post_init__(self):
        if not 2007 <= self.year <= 2020:
            raise IngestError(f"business record year {self.year} outside 2007-2020")


@dataclass(frozen=True, order=True)
class ChangeEvent:
    event_date: date
    location: GeoCoordinate
    source: Source

    def to_dict(self) -> dict:
        return {"lat": self.location.lat, "lon": self.location.lon,
                "event_date": self.event_date.isoformat(), "source": Source(self.source).value}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ChangeEvent":
        return cls(date.fromisoformat(d["event_date"]),
                   GeoCoordinate(float(d["lat"]), float(d["lon"])), Source(d["source"]))


@dataclass
class NeighborhoodContainer:
    tract: TractPolygon
    pairs: list[TimedPair]
    label: Label
    undersized: bool = False

    def __post_init__(self):
        self.label = Label(self.label)

    @property
    def tract_id(self) -> str:
        return self.tract.tract_id

    @property
    def pair_ids(self) -> list[str]:
        return [p.pair_id for p in self.pairs]

    @property
    def y(self) -> int:
        if self.label is Label.NON_GENTRIFIABLE:
            raise IngestError(f"tract {self.tract_id} is non-gentrifiable and has no binary label")
        return int(self.label is Label.GENTRIFYING)

    def to_dict(self) -> dict:
        return {
            "tract_id": self.tract_id,
            "label": self.label.value,
            "undersized": self.undersized,
            "ring": [c.to_json() for c in self.tract.ring],
            "pairs": [p.to_dict() for p in self.pairs],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NeighborhoodContainer":
        ring = tuple(GeoCoordinate(lat=c[1], lon=c[0]) for c in d["ring"])
        return cls(TractPolygon(d["tract_id"], ring), [TimedPair.from_dict(p) for p in d["pairs"]],
                   Label(d["label"]), bool(d.get("undersized", False)))


def gentrifiable(containers: Iterable[NeighborhoodContainer]) -> list[NeighborhoodContainer]:
    return [c for c in containers if c.label is not Label.NON_GENTRIFIABLE]


# --- permits -----------------------------------------------------------------

def load_cpi(path: str | Path | None = None) -> dict[int, float]:
    """Annual CPI table.  Defaults to the bundled CPI-U annual averages."""
    if path is None:
        text = resources.files("gentrimil").joinpath("data/cpi_u.csv").read_text()
    else:
        text = Path(path).read_text()
    return {int(r["year"]): float(r["cpi"]) for r in csv.DictReader(text.splitlines())}


def adjust_for_inflation(value: float, year: int, cpi: Mapping[int, float],
                         base_year: int = 2020) -> float:
    for y in (year, base_year):
        if y not in cpi:
            raise IngestError(f"CPI table has no entry for {y}")
    return value * cpi[base_year] / cpi[year]


PERMIT_COLUMNS = {"issued_date": "issued_date", "category": "category", "lat": "lat",
                  "lon": "lon", "job_value": "job_value", "year": "year"}
BUSINESS_COLUMNS = {"business_id": "business_id", "naics": "naics", "lat": "lat",
                    "lon": "lon", "year": "year"}


@dataclass
class ParsedTable:
    records: list
    skipped: list[tuple[int, str]] = field(default_factory=list)


def read_permits_csv(path: str | Path, columns: Mapping[str, str] | None = None) -> ParsedTable:
    """Parse a permit CSV.  Bad rows are skipped and listed as (line, reason).

    ``columns`` maps the canonical names in ``PERMIT_COLUMNS`` to the file's
    headers.  A missing ``year`` column falls back to the issued date's year.
    """
    cols = {**PERMIT_COLUMNS, **(columns or {})}
    out = ParsedTable([])
    with open(path, newline="") as fh:
        for line, row in enumerate(csv.DictReader(fh), start=2):
            try:
                issued = date.fromisoformat(row[cols["issued_date"]].strip())
                year_raw = row.get(cols["year"])
                rec = PermitRecord(
                    issued_date=issued,
                    category=row[cols["category"]].strip(),
                    location=GeoCoordinate(float(row[cols["lat"]]), float(row[cols["lon"]])),
                    job_value_nominal=float(str(row[cols["job_value"]]).replace("$", "").replace(",", "")),
                    year=int(year_raw) if year_raw not in (None, "") else issued.year,
                )
            except (KeyError, ValueError, TypeError) as exc:
                out.skipped.append((line, str(exc)))
                continue
            out.records.append(rec)
    if out.skipped:
        log.warning("skipped %d unparseable permit rows in %s", len(out.skipped), path)
    return out


def filter_permits(records: Sequence[PermitRecord], cpi: Mapping[int, float],
                   min_value: float = 60_000.0,
                   kept_categories: Iterable[str] = KEPT_CATEGORIES,
                   base_year: int = 2020) -> list[ChangeEvent]:
    """Significant-construction events from permits.

    Kept-category job values are inflation adjusted and summed per
    (location rounded to 5 decimals, year).  Groups reaching ``min_value``
    yield one event dated by their earliest issue date.
    """
    kept = {c.strip().lower() for c in kept_categories}
    totals: dict[tuple, float] = defaultdict(float)
    first: dict[tuple, date] = {}
    where: dict[tuple, GeoCoordinate] = {}
    for r in records:
        if r.category.strip().lower() not in kept:
            continue
        key = (r.location.rounded(5), r.year)
        totals[key] += adjust_for_inflation(r.job_value_nominal, r.year, cpi, base_year)
        if key not in first or r.issued_date < first[key]:
            first[key] = r.issued_date
        where.setdefault(key, GeoCoordinate(*r.location.rounded(5)))
    events = [ChangeEvent(first[k], where[k], Source.PERMIT)
              for k, total in totals.items() if total >= min_value]
    return sorted(events)


# --- business directories ----------------------------------------------------

def load_naics_mapping(path: str | Path | None = None) -> dict[str, str]:
    if path is None:
        text = resources.files("gentrimil").joinpath("data/naics_default.json").read_text()
    else:
        text = Path(path).read_text()
    raw = json.loads(text)
    mapping = {k: v for k, v in raw.items() if not k.startswith("_")}
    for k, v in mapping.items():
        if not k.isdigit() or v not in ("essential", "discretionary", "other"):
            raise IngestError(f"bad NAICS mapping entry {k!r}: {v!r}")
    return mapping


def classify_naics(code: str, mapping: Mapping[str, str]) -> str:
    """Retail class of the longest mapped prefix of ``code``; ``"other"`` if none."""
    code = str(code).strip()
    if not code.isdigit() or not 2 <= len(code) <= 6:
        raise IngestError(f"malformed NAICS code {code!r}")
    for n in range(len(code), 0, -1):
        if code[:n] in mapping:
            return mapping[code[:n]]
    return "other"


def read_businesses_csv(path: str | Path, columns: Mapping[str, str] | None = None) -> ParsedTable:
    cols = {**BUSINESS_COLUMNS, **(columns or {})}
    out = ParsedTable([])
    with open(path, newline="") as fh:
        for line, row in enumerate(csv.DictReader(fh), start=2):
            try:
                naics = row[cols["naics"]].strip()
                if not naics.isdigit():
                    raise ValueError(f"malformed NAICS code {naics!r}")
                rec = BusinessRecord(
                    business_id=row[cols["business_id"]].strip(),
                    naics=naics,
                    location=GeoCoordinate(float(row[cols["lat"]]), float(row[cols["lon"]])),
                    year=int(row[cols["year"]]),
                )
            except (KeyError, ValueError, TypeError) as exc:
                out.skipped.append((line, str(exc)))
                continue
            out.records.append(rec)
    if out.skipped:
        log.warning("skipped %d unparseable business rows in %s", len(out.skipped), path)
    return out


def detect_business_conversions(records: Sequence[BusinessRecord],
                                mapping: Mapping[str, str]) -> list[ChangeEvent]:
    """Essential-to-discretionary premises conversions, one event per location.

    The event year is the first year a discretionary business appears after
    some earlier essential one at the same rounded location; it is dated
    July 1 of that year.
    """
    essential: dict[tuple, set[int]] = defaultdict(set)
    discretionary: dict[tuple, set[int]] = defaultdict(set)
    for r in records:
        klass = classify_naics(r.naics, mapping)
        key = r.location.rounded(5)
        if klass == "essential":
            essential[key].add(r.year)
        elif klass == "discretionary":
            discretionary[key].add(r.year)
    events = []
    for key, ess_years in essential.items():
        first_ess = min(ess_years)
        later = [y for y in discretionary.get(key, ()) if y > first_ess]
        if later:
            events.append(ChangeEvent(date(min(later), 7, 1), GeoCoordinate(*key), Source.BUSINESS))
    return sorted(events)


# --- archive matching --------------------------------------------------------

class ArchiveIndex:
    """Grid bucket index over archive images for radius queries."""

    def __init__(self, images: Iterable[StreetViewImage], cell_deg: float = 0.0005):
        self.cell = cell_deg
        self.buckets: dict[tuple[int, int], list[StreetViewImage]] = defaultdict(list)
        for im in images:
            self.buckets[self._key(im.location)].append(im)

    def _key(self, c: GeoCoordinate) -> tuple[int, int]:
        return (math.floor(c.lat / self.cell), math.floor(c.lon / self.cell))

    def near(self, c: GeoCoordinate, radius_m: float) -> list[StreetViewImage]:
        dlat = radius_m / 111_000.0
        dlon = dlat / max(math.cos(math.radians(c.lat)), 1e-6)
        ri = math.ceil(dlat / self.cell)
        rj = math.ceil(dlon / self.cell)
        ci, cj = self._key(c)
        hits = []
        for i in range(ci - ri, ci + ri + 1):
            for j in range(cj - rj, cj + rj + 1):
                for im in self.buckets.get((i, j), ()):
                    if haversine_distance(c, im.location) <= radius_m:
                        hits.append(im)
        return hits


def group_views(images: Sequence[StreetViewImage]) -> list[list[StreetViewImage]]:
    """Greedy clustering of images that show the same scene.

    An image joins the first existing group whose anchor is within 5 m and
    5 degrees of heading; otherwise it anchors a new group.  Images are
    visited in (date, image_id) order so grouping is order independent.
    """
    ordered = sorted(images, key=lambda im: (im.capture_date, im.image_id))
    anchors = ArchiveIndex([], cell_deg=0.0002)
    groups: dict[str, list[StreetViewImage]] = {}
    for im in ordered:
        home = None
        for a in sorted(anchors.near(im.location, SAME_VIEW_M), key=lambda a: a.image_id):
            if heading_gap(a.heading, im.heading) <= SAME_HEADING_DEG:
                home = a.image_id
                break
        if home is None:
            anchors.buckets[anchors._key(im.location)].append(im)
            groups[im.image_id] = [im]
        else:
            groups[home].append(im)
    return [groups[k] for k in sorted(groups)]


def build_weak_labeled_pairs(events: Sequence[ChangeEvent], archive: Sequence[StreetViewImage],
                             radius_m: float = 15.0):
    """One positive and one negative pair per usable event.

    Returns ``(pairs, skipped)`` where ``pairs`` is a list of
    ``(TimedPair, PairLabel)`` and ``skipped`` lists ``(event_index, reason)``
    with reason one of ``no_nearby_views``, ``insufficient_pre_images``,
    ``no_post_image``.
    """
    index = ArchiveIndex(archive)
    pairs: list[tuple[TimedPair, PairLabel]] = []
    skipped: list[tuple[int, str]] = []
    for i, ev in enumerate(events):
        nearby = index.near(ev.location, radius_m)
        if not nearby:
            skipped.append((i, "no_nearby_views"))
            continue
        views = group_views(nearby)
        views.sort(key=lambda g: (haversine_distance(ev.location, g[0].location), g[0].image_id))
        chosen = None
        saw_enough_pre = False
        for g in views:
            pre = sorted((im for im in g if im.capture_date < ev.event_date),
                         key=lambda im: (im.capture_date, im.image_id))
            post = sorted((im for im in g if im.capture_date > ev.event_date),
                          key=lambda im: (im.capture_date, im.image_id))
            if len(pre) >= 2:
                saw_enough_pre = True
                if post:
                    chosen = (pre, post)
                    break
        if chosen is None:
            skipped.append((i, "no_post_image" if saw_enough_pre else "insufficient_pre_images"))
            continue
        pre, post = chosen
        source = Source(ev.source)
        pairs.append((TimedPair(pre[-1], post[0]), PairLabel(1, source)))
        pairs.append((TimedPair(pre[-2], pre[-1]), PairLabel(0, source)))
    return pairs, skipped


def candidate_bag_pairs(archive: Sequence[StreetViewImage]) -> list[TimedPair]:
    """One bag-window pair per view: earliest image up to 2010 with latest from 2018 on."""
    out = []
    for g in group_views(archive):
        pre = [im for im in g if im.capture_date <= BAG_EARLIER_LATEST]
        post = [im for im in g if im.capture_date >= BAG_LATER_EARLIEST]
        if pre and post:
            e = min(pre, key=lambda im: (im.capture_date, im.image_id))
            l = max(post, key=lambda im: (im.capture_date, im.image_id))
            out.append(TimedPair(e, l))
    return out


def _tract_stream(seed: int, tract_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(tract_id.encode())])


def build_neighborhood_containers(archive: Sequence[StreetViewImage],
                                  tracts: Sequence[TractPolygon],
                                  labels: Mapping[str, str | Label],
                                  k_min: int = 100, k_max: int = 200, seed: int = 0):
    """Spatially join candidate pairs to tracts and sample each bag.

    Returns ``(containers, excluded)``; ``excluded`` holds tract ids with no
    candidate pairs.  Bags with fewer than ``k_min`` candidates keep all of
    them and are flagged ``undersized``.
    """
    missing = [t.tract_id for t in tracts if t.tract_id not in labels]
    if missing:
        raise IngestError(f"tracts without a label: {missing}")
    members: dict[str, list[TimedPair]] = defaultdict(list)
    for pair in candidate_bag_pairs(archive):
        tid = assign_tract(pair.location, tracts)
        if tid is not None:
            members[tid].append(pair)
    containers, excluded = [], []
    for tract in sorted(tracts, key=lambda t: t.tract_id):
        cands = sorted(members.get(tract.tract_id, []), key=lambda p: p.pair_id)
        if not cands:
            excluded.append(tract.tract_id)
            continue
        if len(cands) > k_max:
            idx = np.sort(_tract_stream(seed, tract.tract_id).choice(len(cands), k_max, replace=False))
            cands = [cands[i] for i in idx]
        undersized = len(cands) < k_min
        if undersized:
            log.warning("tract %s has only %d candidate pairs (< %d)", tract.tract_id, len(cands), k_min)
        containers.append(NeighborhoodContainer(tract, cands, Label(labels[tract.tract_id]), undersized))
    if excluded:
        log.warning("excluded %d tracts with no candidate pairs", len(excluded))
    return containers, excluded


# --- JSON Lines / CSV I/O ----------------------------------------------------

def write_jsonl(path: str | Path, rows: Iterable[Mapping]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def pair_record(pair: TimedPair, label: PairLabel) -> dict:
    return {**pair.to_dict(), "y": label.y, "source": Source(label.source).value}


def pair_from_record(d: Mapping) -> tuple[TimedPair, PairLabel]:
    return TimedPair.from_dict(d), PairLabel(int(d["y"]), Source(d["source"]))


def read_labels_csv(path: str | Path) -> dict[str, Label]:
    with open(path, newline="") as fh:
        return {row["tract_id"]: Label(row["label"].strip()) for row in csv.DictReader(fh)}


def write_labels_csv(path: str | Path, labels: Mapping[str, str | Label]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tract_id", "label"])
        for tid in sorted(labels):
            w.writerow([tid, Label(labels[tid]).value])


def read_archive(path: str | Path) -> list[StreetViewImage]:
    return [StreetViewImage.from_dict(d) for d in read_jsonl(path)]
