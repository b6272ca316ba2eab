import json
from datetime import date

import httpx
import pytest

from gentrimil.fetch import ClientConfig, StreetViewClient, fetch_street_views, request_key
from gentrimil.geodata import GeoCoordinate
from gentrimil.ingest import read_jsonl

PNG = b"\x89PNG\r\n\x1a\n" + b"fake"
YEARS = (date(2007, 1, 1), date(2022, 12, 31))


class Server:
    """Fixture endpoint: two captures per coordinate, with programmable faults."""

    def __init__(self, fail_lat=None, quota_after=None, flaky=0):
        self.fail_lat = fail_lat
        self.quota_after = quota_after
        self.flaky = flaky
        self.meta_calls = 0
        self.requests = []

    def __call__(self, request: httpx.Request) -> httpx.Response:
        q = request.url.params
        self.requests.append(request)
        assert q["key"] == "secret"
        if request.url.path == "/metadata":
            self.meta_calls += 1
            if self.flaky:
                self.flaky -= 1
                return httpx.Response(503)
            if self.quota_after is not None and self.meta_calls > self.quota_after:
                return httpx.Response(200, json={"status": "OVER_QUERY_LIMIT", "captures": []})
            if self.fail_lat is not None and q["lat"] == f"{self.fail_lat:.6f}":
                return httpx.Response(500)
            lat, lon = float(q["lat"]), float(q["lon"])
            tag = f"{lat:.6f}_{lon:.6f}"
            return httpx.Response(200, json={"status": "OK", "captures": [
                {"image_id": f"{tag}_a", "date": "2009-05-01", "heading": 90, "lat": lat, "lon": lon},
                {"image_id": f"{tag}_b", "date": "2019-05-01", "heading": 90, "lat": lat, "lon": lon},
            ]})
        if request.url.path == "/image":
            return httpx.Response(200, content=PNG + q["image_id"].encode())
        return httpx.Response(404)


@pytest.fixture
def coords():
    return [GeoCoordinate(37.70 + 0.001 * i, -122.40) for i in range(5)]


@pytest.fixture(autouse=True)
def api_key(monkeypatch):
    monkeypatch.setenv("STREETVIEW_API_KEY", "secret")


def config(tmp_path, **kw):
    return ClientConfig(base_url="http://fixture", cache_dir=tmp_path / "cache", rate_limit=0, **kw)


def test_two_dates_five_coords_gives_ten_images(tmp_path, coords):
    server = Server()
    res = fetch_street_views(coords, YEARS, config(tmp_path), tmp_path / "m.jsonl",
                             transport=httpx.MockTransport(server), sleep=lambda s: None)
    assert len(res.images) == 10 and res.failures == [] and res.complete
    rows = read_jsonl(tmp_path / "m.jsonl")
    assert [r["type"] for r in rows] == ["image"] * 10
    for im in res.images:
        assert open(im.pixels_ref, "rb").read().startswith(PNG)


def test_cache_hit_makes_no_network_calls(tmp_path, coords):
    transport = httpx.MockTransport(Server())
    first = fetch_street_views(coords, YEARS, config(tmp_path), transport=transport, sleep=lambda s: None)
    assert first.network_calls == 15
    again = fetch_street_views(coords, YEARS, config(tmp_path), transport=transport, sleep=lambda s: None)
    assert again.network_calls == 0
    assert [i.to_dict() for i in again.images] == [i.to_dict() for i in first.images]


def test_server_error_on_one_coordinate_is_isolated(tmp_path, coords):
    sleeps = []
    res = fetch_street_views(coords, YEARS, config(tmp_path), tmp_path / "m.jsonl",
                             transport=httpx.MockTransport(Server(fail_lat=coords[2].lat)),
                             sleep=sleeps.append)
    assert len(res.images) == 8
    assert [f["index"] for f in res.failures] == [2]
    assert sleeps == [0.5, 1.0]  # three attempts, exponential backoff between them
    rows = read_jsonl(tmp_path / "m.jsonl")
    assert sum(r["type"] == "failure" for r in rows) == 1


def test_transient_error_is_retried(tmp_path, coords):
    res = fetch_street_views(coords[:1], YEARS, config(tmp_path),
                             transport=httpx.MockTransport(Server(flaky=2)), sleep=lambda s: None)
    assert len(res.images) == 2 and res.failures == []


def test_quota_stop_and_resume(tmp_path, coords):
    cfg = config(tmp_path)
    res = fetch_street_views(coords, YEARS, cfg, tmp_path / "m.jsonl",
                             transport=httpx.MockTransport(Server(quota_after=3)), sleep=lambda s: None)
    assert res.cursor == 3 and len(res.images) == 6 and not res.complete
    assert read_jsonl(tmp_path / "m.jsonl")[-1] == {"type": "cursor", "next_index": 3}
    rest = fetch_street_views(coords, YEARS, cfg, start_index=res.cursor,
                              transport=httpx.MockTransport(Server()), sleep=lambda s: None)
    assert len(res.images) + len(rest.images) == 10 and rest.complete


def test_http_403_is_quota(tmp_path, coords):
    transport = httpx.MockTransport(lambda r: httpx.Response(403))
    res = fetch_street_views(coords, YEARS, config(tmp_path), transport=transport, sleep=lambda s: None)
    assert res.cursor == 0 and res.images == []


def test_missing_key_is_recorded(tmp_path, coords, monkeypatch):
    monkeypatch.delenv("STREETVIEW_API_KEY")
    res = fetch_street_views(coords[:1], YEARS, config(tmp_path),
                             transport=httpx.MockTransport(Server()), sleep=lambda s: None)
    assert "STREETVIEW_API_KEY" in res.failures[0]["error"]


def test_rate_limit_spaces_requests(tmp_path):
    now = [0.0]
    slept = []

    def sleep(s):
        slept.append(s)
        now[0] += s

    client = StreetViewClient(ClientConfig("http://fixture", cache_dir=tmp_path, rate_limit=4),
                              transport=httpx.MockTransport(Server()), sleep=sleep, clock=lambda: now[0])
    for i in range(3):
        client.get("/image", {"image_id": str(i)})
    assert slept == [0.25, 0.25]


def test_request_key_ignores_api_key():
    assert request_key("/m", {"a": 1, "key": "x"}) == request_key("/m", {"a": 1, "key": "y"})
    assert request_key("/m", {"a": 1}) != request_key("/m", {"a": 2})
