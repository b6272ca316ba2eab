import hashlib
import math
import subprocess
import sys
from datetime import date

import numpy as np
import pytest

from gentrimil.encoder import (
    EmbeddingCache, EncoderParams, Step1Config, bce_loss, change_score, classify_pair, embed_dataset,
    encode_batch, encode_image, init_encoder, pair_embedding, pair_loss_and_grads, predict_pairs,
    train_change_detector, write_training_log,
)
from gentrimil.geodata import GeoCoordinate
from gentrimil.ingest import NeighborhoodContainer, PairLabel, Source, StreetViewImage, TimedPair
from gentrimil.nn import ConvBackbone, IdentityBackbone, max_relative_error, numeric_gradients

from conftest import square


def tiny_encoder(seed=0):
    return init_encoder(d=4, depth=2, base_channels=2, image_side=16, seed=seed)


def make_pair(i, y=0, year_e=2009, year_l=2019):
    loc = GeoCoordinate(37.7 + 1e-4 * i, -122.4)
    e = StreetViewImage(f"p{i:04d}e", loc, 0.0, date(year_e, 1, 1), f"p{i:04d}e")
    l = StreetViewImage(f"p{i:04d}l", loc, 0.0, date(year_l, 1, 1), f"p{i:04d}l")
    return TimedPair(e, l), PairLabel(y, Source.SYNTHETIC)


# --- pair representation and score -------------------------------------------

def test_pair_embedding_examples():
    np.testing.assert_array_equal(pair_embedding([1.0, 2.0], [4.0, 6.0]), [3, 4, 4, 6, 1, 2])
    h = np.arange(5.0)
    assert np.all(pair_embedding(h, h)[:5] == 0.0)
    with pytest.raises(ValueError):
        pair_embedding(np.zeros(3), np.zeros(4))


def test_full_size_pair_dimension():
    assert init_encoder(d=512).M == 1536


def test_change_score_examples(rng):
    assert change_score(np.ones(6), np.zeros(6)) == 0.5
    h = np.zeros(6)
    h[0] = 1.0
    a = np.zeros(6)
    a[0] = math.log(3)
    assert change_score(h, a) == pytest.approx(0.75, abs=1e-15)
    for _ in range(100):
        h, a = rng.normal(size=8), rng.normal(size=8)
        z = 0.0
        for i in range(8):
            z += a[i] * h[i]
        assert abs(change_score(h, a) - 1.0 / (1.0 + math.exp(-z))) < 1e-12


def test_bce_examples():
    assert bce_loss(1 - 1e-7, 1) == pytest.approx(0.0, abs=1e-6)
    assert bce_loss(0.5, 1) == pytest.approx(math.log(2))
    assert bce_loss(0.9, 0) == pytest.approx(math.log(10))
    assert np.isfinite(bce_loss(0.0, 1)) and np.isfinite(bce_loss(1.0, 0))


def test_threshold_inclusive():
    assert classify_pair(0.5) == 1
    assert classify_pair(0.49) == 0
    np.testing.assert_array_equal(classify_pair(np.array([0.2, 0.5, 0.9])), [0, 1, 1])


# --- backbone -------------------------------------------------------------

def test_weight_sharing_same_image_same_vector(rng):
    params = tiny_encoder()
    im = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    out = encode_batch(np.stack([im, im]), params)
    np.testing.assert_array_equal(out[0], out[1])


def test_zero_image_zero_head_gives_zero_vector():
    bb = ConvBackbone(d=8, depth=2, base_channels=2, image_side=16, zero_head=True)
    params = EncoderParams(bb, np.zeros(24))
    assert np.all(encode_image(np.zeros((16, 16, 3), dtype=np.uint8), params) == 0.0)


def test_image_shape_mismatch():
    with pytest.raises(ValueError):
        encode_image(np.zeros((32, 32, 3), dtype=np.uint8), tiny_encoder())


def test_embedding_is_byte_identical_across_processes():
    code = ("import numpy as np, hashlib;"
            "from gentrimil.encoder import init_encoder, encode_image;"
            "im = np.random.default_rng(1).integers(0, 256, (64, 64, 3), dtype=np.uint8);"
            "print(hashlib.sha256(encode_image(im, init_encoder(seed=5)).tobytes()).hexdigest())")
    runs = [subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
            for _ in range(2)]
    assert runs[0] == runs[1] and len(runs[0].strip()) == 64


def test_pair_gradients_match_finite_differences(rng):
    params = tiny_encoder(seed=2)
    params.alpha[:] = rng.normal(size=params.M)
    xe = rng.random((3, 16, 16, 3))
    xl = rng.random((3, 16, 16, 3))
    y = np.array([1.0, 0.0, 1.0])
    _, grads, _ = pair_loss_and_grads(params, xe, xl, y)
    flat = {"alpha": params.alpha, **{f"backbone.{k}": v for k, v in params.backbone.params.items()}}
    numeric = numeric_gradients(lambda: pair_loss_and_grads(params, xe, xl, y)[0], flat)
    assert max_relative_error(grads, numeric) < 1e-5


def test_save_load_round_trip(tmp_path):
    params = tiny_encoder(seed=4)
    h1 = params.save(tmp_path / "enc.bin")
    back = EncoderParams.load(tmp_path / "enc.bin")
    assert back.content_hash() == params.content_hash() == h1
    assert back.M == 12 and back.L == 2


# --- training ---------------------------------------------------------------

def separable_dataset(n=140, d=8, seed=0):
    """Later-minus-earlier moves along +u for changes and -u otherwise."""
    rng = np.random.default_rng(seed)
    u = rng.normal(size=d)
    u /= np.linalg.norm(u)
    vectors, data = {}, []
    for i in range(n):
        y = i % 2
        pair, lab = make_pair(i, y)
        e = rng.normal(size=d)
        vectors[pair.earlier.pixels_ref] = e
        vectors[pair.later.pixels_ref] = e + (1 if y else -1) * (1.0 + rng.random()) * u + 0.05 * rng.normal(size=d)
        data.append((pair, lab))
    return data, vectors.__getitem__


def test_identity_backbone_separable_reaches_full_train_accuracy():
    data, loader = separable_dataset()
    params = EncoderParams(IdentityBackbone(8), np.zeros(24))
    res = train_change_detector(data, Step1Config(epochs=200, lr=1e-2, batch=16), loader, params=params)
    by_id = {p.pair_id: (p, lab.y) for p, lab in data}
    train = [by_id[i] for i in res.train_ids]
    p = predict_pairs(res.params, [t[0] for t in train], loader)
    assert np.mean(classify_pair(p) == np.array([t[1] for t in train])) == 1.0
    assert res.test_accuracy >= 0.9
    assert len(res.train_ids) == 98 and len(res.test_ids) == 42


def test_single_class_refused():
    data, loader = separable_dataset(10)
    ones = [(p, PairLabel(1, Source.SYNTHETIC)) for p, _ in data]
    with pytest.raises(ValueError, match="single-class"):
        train_change_detector(ones, Step1Config(epochs=1), loader, params=EncoderParams(IdentityBackbone(8), np.zeros(24)))


def test_training_is_deterministic_and_logged(tmp_path):
    data, loader = separable_dataset(40)
    runs = []
    for _ in range(2):
        params = EncoderParams(IdentityBackbone(8), np.zeros(24))
        res = train_change_detector(data, Step1Config(epochs=5, lr=1e-2), loader, params=params)
        runs.append(res)
    assert runs[0].params.content_hash() == runs[1].params.content_hash()
    write_training_log(tmp_path / "log.csv", runs[0].log)
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_acc" and len(lines) == 6


# --- embedding cache ------------------------------------------------------

def bag_fixture(k, rng):
    pairs, images = [], {}
    for i in range(k):
        pair, _ = make_pair(i)
        images[pair.earlier.pixels_ref] = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
        images[pair.later.pixels_ref] = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
        pairs.append(pair)
    return NeighborhoodContainer(square("T1", 37.69, -122.41, 0.1), pairs, "gentrifying"), images


def test_cache_shape_hit_and_invalidation(tmp_path, rng):
    box, images = bag_fixture(100, rng)
    calls = []

    def loader(ref):
        calls.append(ref)
        return images[ref]

    params = tiny_encoder()
    path = tmp_path / "emb.bin"
    cache = embed_dataset([box], params, loader, path)
    assert cache.recomputed and cache.bag(box).shape == (100, params.M)
    n = len(calls)
    hit = embed_dataset([box], params, loader, path)
    assert not hit.recomputed and len(calls) == n
    np.testing.assert_array_equal(hit.matrix, cache.matrix)
    retrained = tiny_encoder(seed=9)
    assert retrained.content_hash() != params.content_hash()
    stale = embed_dataset([box], retrained, loader, path)
    assert stale.recomputed and len(calls) > n
    assert EmbeddingCache.load(path).params_hash == retrained.content_hash()
