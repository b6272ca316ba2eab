import json
from collections import Counter

import numpy as np
import pytest

from gentrimil.images import FileLoader
from gentrimil.ingest import Label, NeighborhoodContainer, read_jsonl
from gentrimil.synthcity import (
    CaptureStyle, SynthConfig, SynthError, gen_city, gen_scene_pair, render_scene_pair, write_city,
)


@pytest.fixture(scope="module")
def city():
    return gen_city(SynthConfig())


def test_scene_is_byte_deterministic():
    cfg = SynthConfig()
    a = render_scene_pair(42, True, cfg)
    b = render_scene_pair(42, True, cfg)
    assert a.earlier.tobytes() == b.earlier.tobytes() and a.later.tobytes() == b.later.tobytes()
    assert render_scene_pair(43, True, cfg).later.tobytes() != a.later.tobytes()


def test_no_change_no_nuisance_is_identical():
    cfg = SynthConfig(nuisance_level=0.0)
    busy = CaptureStyle(light=1.0, modern_share=0.3, churn=1.0)
    for seed in range(20):
        s = render_scene_pair(seed, False, cfg, busy)
        assert s.earlier.tobytes() == s.later.tobytes()


def test_change_is_confined_to_one_building_box():
    cfg = SynthConfig(nuisance_level=0.0)
    kinds = Counter()
    for seed in range(60):
        s = render_scene_pair(seed, True, cfg)
        diff = np.any(s.earlier != s.later, axis=-1)
        y0, y1, x0, x1 = s.edit["bbox"]
        box = np.zeros_like(diff)
        box[y0:y1, x0:x1] = True
        assert diff.any() and not (diff & ~box).any()
        kinds[s.edit["kind"]] += 1
    assert set(kinds) == {"add", "remove", "recolor"}


def test_nuisance_only_touches_road_or_global_brightness():
    cfg = SynthConfig()
    s = render_scene_pair(5, False, cfg, CaptureStyle(light=0.0, modern_share=0.2, churn=0.0))
    assert s.edit is None
    assert s.earlier.shape == s.later.shape == (64, 64, 3) and s.later.dtype == np.uint8


def test_scene_pair_record():
    images = {}
    pair, label = gen_scene_pair([0, 9], True, SynthConfig(), images, scene_id="x")
    assert label.y == 1 and pair.pair_id == "xe|xl"
    assert set(images) == {"images/xe.png", "images/xl.png"}
    assert pair.in_bag_window()


def test_planted_counts(city):
    per_tract = Counter(p["tract_id"] for p in city.planted)
    for c in city.containers:
        assert len(c.pairs) == 100
        assert per_tract[c.tract_id] == (15 if c.label is Label.GENTRIFYING else 2)
    assert len(city.planted) == 30 * 15 + 30 * 2
    labels = [city.labels[t.tract_id] for t in city.tracts]
    assert labels[:4] == [Label.GENTRIFYING, Label.NON_GENTRIFYING] * 2


def test_step1_set_balanced_and_disjoint(city):
    ys = [lab.y for _, lab in city.step1_pairs]
    assert len(ys) == 2000 and sum(ys) == 1000
    bag_images = {im.image_id for c in city.containers for p in c.pairs for im in (p.earlier, p.later)}
    s1_images = {im.image_id for p, _ in city.step1_pairs for im in (p.earlier, p.later)}
    assert not bag_images & s1_images


def test_bag_locations_inside_their_tract(city):
    from gentrimil.geodata import point_in_tract
    for c in city.containers[:10]:
        assert all(point_in_tract(p.location, c.tract) for p in c.pairs)


def test_config_validation():
    with pytest.raises(SynthError):
        SynthConfig(rho_gentrifying=0.02, rho_non=0.15)
    with pytest.raises(SynthError):
        SynthConfig(nuisance_level=1.5)
    with pytest.raises(SynthError):
        gen_city(SynthConfig(K=10, rho_non=0.02))
    with pytest.raises(SynthError):
        gen_city(SynthConfig(n_tracts=3))


def test_city_is_a_pure_function_of_config():
    cfg = SynthConfig(n_tracts=4, K=10, rho_gentrifying=0.3, rho_non=0.1, n_step1=10, seed=3)
    a, b = gen_city(cfg), gen_city(cfg)
    assert [c.to_dict() for c in a.containers] == [c.to_dict() for c in b.containers]
    assert all(a.images[k].tobytes() == b.images[k].tobytes() for k in a.images)
    c = gen_city(SynthConfig(n_tracts=4, K=10, rho_gentrifying=0.3, rho_non=0.1, n_step1=10, seed=4))
    assert a.planted != c.planted or any(a.images[k].tobytes() != c.images[k].tobytes() for k in a.images)


def test_write_city_round_trips(tmp_path):
    cfg = SynthConfig(n_tracts=4, K=10, rho_gentrifying=0.3, rho_non=0.1, n_step1=10)
    city = gen_city(cfg)
    out = write_city(city, tmp_path)
    rows = read_jsonl(out / "containers.jsonl")
    back = [NeighborhoodContainer.from_dict(r) for r in rows]
    assert [c.pair_ids for c in back] == [c.pair_ids for c in city.containers]
    loader = FileLoader(out, side=64)
    ref = back[0].pairs[0].later.pixels_ref
    np.testing.assert_array_equal(loader(ref), city.images[ref])
    assert len(read_jsonl(out / "planted.jsonl")) == len(city.planted)
    assert len(read_jsonl(out / "pairs.jsonl")) == 10
    assert json.loads((out / "synth_config.json").read_text())["K"] == 10
