"""Street-view archive client with rate limiting, retries and an on-disk cache.

The endpoint contract (two GETs, API key passed as the ``key`` query
parameter):

``GET {base_url}/metadata?lat=..&lon=..&start=YYYY-MM-DD&end=YYYY-MM-DD&key=..``
    JSON ``{"status": "OK", "captures": [{"image_id", "date", "heading",
    "lat", "lon"}, ...]}``.  ``status == "OVER_QUERY_LIMIT"`` (or HTTP 403)
    signals quota exhaustion.

``GET {base_url}/image?image_id=..&key=..``
    raw JPEG/PNG bytes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import time
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Callable, Sequence

import httpx

from .geodata import GeoCoordinate
from .ingest import StreetViewImage

log = logging.getLogger(__name__)

RETRY_STATUS = {429, 500, 502, 503, 504}


class QuotaExhausted(RuntimeError):
    pass


@dataclass
class ClientConfig:
    base_url: str
    api_key_env: str = "STREETVIEW_API_KEY"
    rate_limit: float = 10.0          # requests per second
    cache_dir: str | Path = ".svcache"
    max_attempts: int = 3
    backoff_s: float = 0.5
    timeout_s: float = 20.0


@dataclass
class FetchResult:
    images: list[StreetViewImage]
    failures: list[dict] = field(default_factory=list)
    cursor: int | None = None          # next coordinate index when stopped early
    network_calls: int = 0

    @property
    def complete(self) -> bool:
        return self.cursor is None


class DiskCache:
    """Content-addressed byte store; writes are atomic via rename."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / key

    def get(self, key: str) -> bytes | None:
        p = self._path(key)
        return p.read_bytes() if p.exists() else None

    def put(self, key: str, payload: bytes) -> Path:
        p = self._path(key)
        p.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=p.parent, prefix=".tmp-")
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, p)
        return p

    def path(self, key: str) -> Path:
        return self._path(key)


def request_key(path: str, params: dict) -> str:
    clean = {k: v for k, v in params.items() if k != "key"}
    blob = json.dumps([path, clean], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


class StreetViewClient:
    def __init__(self, config: ClientConfig, transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep,
                 clock: Callable[[], float] = time.monotonic):
        self.config = config
        self.cache = DiskCache(config.cache_dir)
        self._http = httpx.Client(base_url=config.base_url, transport=transport,
                                  timeout=config.timeout_s)
        self._sleep = sleep
        self._clock = clock
        self._last = None
        self.calls = 0

    def close(self):
        self._http.close()

    def _key(self) -> str:
        key = os.environ.get(self.config.api_key_env)
        if not key:
            raise RuntimeError(f"API key environment variable {self.config.api_key_env} is not set")
        return key

    def _throttle(self):
        if self.config.rate_limit <= 0:
            return
        gap = 1.0 / self.config.rate_limit
        now = self._clock()
        if self._last is not None and now - self._last < gap:
            self._sleep(gap - (now - self._last))
        self._last = self._clock()

    def get(self, path: str, params: dict) -> bytes:
        """Cached GET.  Retries transient failures with exponential backoff."""
        ck = request_key(path, params)
        hit = self.cache.get(ck)
        if hit is not None:
            return hit
        params = {**params, "key": self._key()}
        err: Exception | None = None
        for attempt in range(self.config.max_attempts):
            if attempt:
                self._sleep(self.config.backoff_s * 2 ** (attempt - 1))
            self._throttle()
            self.calls += 1
            try:
                r = self._http.get(path, params=params)
            except httpx.TransportError as exc:
                err = exc
                continue
            if r.status_code == 403:
                raise QuotaExhausted(f"HTTP 403 on {path}")
            if r.status_code in RETRY_STATUS:
                err = httpx.HTTPStatusError(f"HTTP {r.status_code}", request=r.request, response=r)
                continue
            r.raise_for_status()
            if path.endswith("metadata"):
                body = r.json()
                if body.get("status") == "OVER_QUERY_LIMIT":
                    raise QuotaExhausted("metadata endpoint reported OVER_QUERY_LIMIT")
            self.cache.put(ck, r.content)
            return r.content
        raise RuntimeError(f"GET {path} failed after {self.config.max_attempts} attempts: {err}")


def _suffix(payload: bytes) -> str:
    if payload.startswith(b"\x89PNG"):
        return ".png"
    if payload.startswith(b"\xff\xd8"):
        return ".jpg"
    return ".bin"


def fetch_street_views(coords: Sequence[GeoCoordinate], years: tuple[date, date],
                       client_config: ClientConfig, manifest_path: str | Path | None = None,
                       start_index: int = 0, transport: httpx.BaseTransport | None = None,
                       sleep: Callable[[float], None] = time.sleep) -> FetchResult:
    """Download every capture for each coordinate within ``years``.

    Per-coordinate failures are recorded and the batch continues.  On quota
    exhaustion the run stops and ``cursor`` holds the index to resume from
    (pass it back as ``start_index``).  Image payloads are stored by content
    hash under ``cache_dir/images``.
    """
    client = StreetViewClient(client_config, transport=transport, sleep=sleep)
    store = DiskCache(Path(client_config.cache_dir) / "images")
    result = FetchResult([])
    start, end = years
    try:
        for i in range(start_index, len(coords)):
            c = coords[i]
            try:
                meta = json.loads(client.get("/metadata", {
                    "lat": f"{c.lat:.6f}", "lon": f"{c.lon:.6f}",
                    "start": start.isoformat(), "end": end.isoformat()}))
                for cap in meta.get("captures", []):
                    payload = client.get("/image", {"image_id": cap["image_id"]})
                    digest = hashlib.sha256(payload).hexdigest() + _suffix(payload)
                    if store.get(digest) is None:
                        store.put(digest, payload)
                    result.images.append(StreetViewImage(
                        image_id=str(cap["image_id"]),
                        location=GeoCoordinate(float(cap.get("lat", c.lat)), float(cap.get("lon", c.lon))),
                        heading=float(cap.get("heading", 0.0)) % 360.0,
                        capture_date=date.fromisoformat(cap["date"]),
                        pixels_ref=str(store.path(digest)),
                    ))
            except QuotaExhausted:
                result.cursor = i
                log.warning("quota exhausted at coordinate %d; resume from there", i)
                break
            except Exception as exc:  # fault isolation: record and move on
                result.failures.append({"index": i, "lat": c.lat, "lon": c.lon, "error": str(exc)})
    finally:
        result.network_calls = client.calls
        client.close()
    if manifest_path is not None:
        with open(manifest_path, "w") as fh:
            for im in result.images:
                fh.write(json.dumps({"type": "image", **im.to_dict()}, sort_keys=True) + "\n")
            for f in result.failures:
                fh.write(json.dumps({"type": "failure", **f}, sort_keys=True) + "\n")
            if result.cursor is not None:
                fh.write(json.dumps({"type": "cursor", "next_index": result.cursor}) + "\n")
    return result
